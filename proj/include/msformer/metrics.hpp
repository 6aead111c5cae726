#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "msformer/data.hpp"

namespace msformer::metrics {

/// 1 where g >= threshold. Threshold must lie in (0, 1).
data::Mask binarize(const Tensor<float>& g, double threshold = 0.5);

struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  std::uint64_t tn = 0;

  std::uint64_t total() const { return tp + fp + fn + tn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
  friend ConfusionCounts operator+(ConfusionCounts a, const ConfusionCounts& b) { return a += b; }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

/// Per-pixel tally. Both inputs must be {0,1} with equal shapes.
ConfusionCounts accumulate_confusion(const data::Mask& pred, const data::Mask& gt);

/// Set for every metric whose defining ratio was 0/0; such metrics read 0.
struct DegenerateFlags {
  bool precision = false;
  bool recall = false;
  bool f1 = false;
  bool iou = false;
  bool kappa = false;

  bool any() const { return precision || recall || f1 || iou || kappa; }
  friend bool operator==(const DegenerateFlags&, const DegenerateFlags&) = default;
};

struct MetricsReport {
  double kappa = 0;
  double iou = 0;
  double f1 = 0;
  double recall = 0;
  double precision = 0;
  double overall_accuracy = 0;
  ConfusionCounts counts;
  DegenerateFlags degenerate;
  // snapshot of what produced the numbers
  int patch_h = 0;
  int patch_w = 0;
  std::string checkpoint_id;
  double threshold = 0.5;

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

MetricsReport compute_metrics(const ConfusionCounts& c);

nlohmann::json to_json(const MetricsReport& r);
std::string csv_header();
std::string csv_row(const MetricsReport& r);

}  // namespace msformer::metrics
