#include "msformer/metrics.hpp"

#include <cstdio>
#include <stdexcept>

namespace msformer::metrics {
namespace {

void require_binary(const data::Mask& m, const char* which) {
  for (std::uint8_t v : m.values()) {
    if (v > 1) throw std::invalid_argument(std::string("accumulate_confusion: ") + which + " has non-binary value " +
                                           std::to_string(v));
  }
}

// num / den, or 0 with the flag raised when den is 0.
double ratio(double num, double den, bool& degenerate) {
  if (den == 0) {
    degenerate = true;
    return 0.0;
  }
  return num / den;
}

std::string format(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

data::Mask binarize(const Tensor<float>& g, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw std::invalid_argument("binarize: threshold must lie in (0, 1), got " + std::to_string(threshold));
  }
  data::Mask out(g.shape());
  const float* src = g.data();
  for (std::size_t i = 0; i < g.size(); ++i) out[i] = static_cast<double>(src[i]) >= threshold ? 1 : 0;
  return out;
}

ConfusionCounts accumulate_confusion(const data::Mask& pred, const data::Mask& gt) {
  if (pred.shape() != gt.shape()) {
    throw std::invalid_argument("accumulate_confusion: prediction " + shape_str(pred.shape()) +
                                " does not match ground truth " + shape_str(gt.shape()));
  }
  require_binary(pred, "prediction");
  require_binary(gt, "ground truth");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const int p = pred[i], y = gt[i];
    c.tp += p & y;
    c.fp += p & (1 - y);
    c.fn += (1 - p) & y;
    c.tn += (1 - p) & (1 - y);
  }
  return c;
}

MetricsReport compute_metrics(const ConfusionCounts& c) {
  if (c.total() == 0) throw std::invalid_argument("compute_metrics: no pixels were evaluated");
  const double tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp);
  const double fn = static_cast<double>(c.fn), tn = static_cast<double>(c.tn);
  const double n = static_cast<double>(c.total());

  MetricsReport r;
  r.counts = c;
  r.precision = ratio(tp, tp + fp, r.degenerate.precision);
  r.recall = ratio(tp, tp + fn, r.degenerate.recall);
  // 2PR / (P + R) written over counts
  r.f1 = ratio(2 * tp, 2 * tp + fp + fn, r.degenerate.f1);
  r.iou = ratio(tp, tp + fp + fn, r.degenerate.iou);
  r.overall_accuracy = (tp + tn) / n;
  const double pe = ((tp + fp) * (tp + fn) + (fn + tn) * (fp + tn)) / (n * n);
  r.kappa = ratio(r.overall_accuracy - pe, 1.0 - pe, r.degenerate.kappa);
  return r;
}

nlohmann::json to_json(const MetricsReport& r) {
  return {
      {"kappa", r.kappa},
      {"iou", r.iou},
      {"f1", r.f1},
      {"recall", r.recall},
      {"precision", r.precision},
      {"overall_accuracy", r.overall_accuracy},
      {"counts", {{"tp", r.counts.tp}, {"fp", r.counts.fp}, {"fn", r.counts.fn}, {"tn", r.counts.tn}}},
      {"degenerate",
       {{"precision", r.degenerate.precision},
        {"recall", r.degenerate.recall},
        {"f1", r.degenerate.f1},
        {"iou", r.degenerate.iou},
        {"kappa", r.degenerate.kappa}}},
      {"patch_h", r.patch_h},
      {"patch_w", r.patch_w},
      {"checkpoint_id", r.checkpoint_id},
      {"threshold", r.threshold},
  };
}

std::string csv_header() {
  return "kappa,iou,f1,recall,precision,overall_accuracy,tp,fp,fn,tn,degenerate,patch_h,patch_w,checkpoint_id,"
         "threshold";
}

std::string csv_row(const MetricsReport& r) {
  std::string out = format(r.kappa) + "," + format(r.iou) + "," + format(r.f1) + "," + format(r.recall) + "," +
                    format(r.precision) + "," + format(r.overall_accuracy) + "," + std::to_string(r.counts.tp) + "," +
                    std::to_string(r.counts.fp) + "," + std::to_string(r.counts.fn) + "," +
                    std::to_string(r.counts.tn) + "," + (r.degenerate.any() ? "1" : "0") + "," +
                    std::to_string(r.patch_h) + "," + std::to_string(r.patch_w) + ",";
  // ids are paths; quote when a comma would split the field
  if (r.checkpoint_id.find_first_of(",\"") != std::string::npos) {
    std::string quoted = "\"";
    for (char ch : r.checkpoint_id) {
      if (ch == '"') quoted += '"';
      quoted += ch;
    }
    out += quoted + "\"";
  } else {
    out += r.checkpoint_id;
  }
  return out + "," + format(r.threshold);
}

}  // namespace msformer::metrics
