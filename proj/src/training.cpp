#include "msformer/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>
#include <unordered_map>

#include "msformer/encoder.hpp"
#include "msformer/image_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace msformer::training {
namespace {

constexpr char kMagic[8] = {'M', 'S', 'F', 'C', 'K', 'P', 'T', '\0'};

template <typename U>
void put(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename U>
U get(std::istream& is, const fs::path& path) {
  U v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) {
    throw std::runtime_error("checkpoint " + path.string() + " is truncated");
  }
  return v;
}

std::string get_string(std::istream& is, std::size_t n, const fs::path& path) {
  std::string s(n, '\0');
  if (n && !is.read(s.data(), static_cast<std::streamsize>(n))) {
    throw std::runtime_error("checkpoint " + path.string() + " is truncated");
  }
  return s;
}

json::json_pointer key_pointer(const std::string& dotted) {
  std::string p;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = dotted.find('.', start);
    p += "/" + dotted.substr(start, dot - start);
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  return json::json_pointer(p);
}

}  // namespace

double poly_lr(int cur_iteration, const TrainConfig& cfg) {
  if (cur_iteration < 0 || cur_iteration > cfg.max_iteration) {
    throw std::invalid_argument("poly_lr: iteration " + std::to_string(cur_iteration) + " outside [0, " +
                                std::to_string(cfg.max_iteration) + "]");
  }
  const double progress = static_cast<double>(cur_iteration) / cfg.max_iteration;
  return std::pow(1.0 - progress, cfg.power) * cfg.lr0;
}

Adam::Adam(nn::ParameterStore<float>& store, const TrainConfig& cfg)
    : store_(store), beta1_(cfg.beta1), beta2_(cfg.beta2), weight_decay_(cfg.weight_decay), eps_(cfg.adam_eps) {}

void Adam::step(double lr) {
  for (const auto& entry : store_.entries()) {
    if (!entry.trainable || !entry.var.has_grad()) continue;
    Var<float> param = entry.var;
    Tensor<float>& p = param.mutable_value();
    const Tensor<float>& g = param.grad();
    auto [it, fresh] = slots_.try_emplace(entry.name);
    Slot& s = it->second;
    if (fresh) {
      s.m = Tensor<float>(p.shape());
      s.v = Tensor<float>(p.shape());
    }
    ++s.step;
    const float b1 = static_cast<float>(beta1_), b2 = static_cast<float>(beta2_);
    const float wd = static_cast<float>(weight_decay_);
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(s.step));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(s.step));
    const float step_size = static_cast<float>(lr / bc1);
    const float inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
    const float eps = static_cast<float>(eps_);
    float* pv = p.data();
    float* m = s.m.data();
    float* v = s.v.data();
    const float* gv = g.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const float grad = gv[i] + wd * pv[i];
      m[i] = b1 * m[i] + (1.0f - b1) * grad;
      v[i] = b2 * v[i] + (1.0f - b2) * grad * grad;
      pv[i] -= step_size * m[i] / (std::sqrt(v[i]) * inv_sqrt_bc2 + eps);
    }
  }
}

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  json meta;
  meta["config"] = to_json(ckpt.config);
  meta["iteration"] = ckpt.iteration;
  meta["optimizer_steps"] = ckpt.optimizer_steps;
  const std::string header = meta.dump();

  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write checkpoint " + tmp.string());
    os.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(os, Checkpoint::kVersion);
    put<std::uint64_t>(os, header.size());
    os.write(header.data(), static_cast<std::streamsize>(header.size()));
    put<std::uint64_t>(os, ckpt.tensors.size());
    for (const auto& [name, t] : ckpt.tensors) {
      put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
      for (int d : t.shape()) put<std::int32_t>(os, d);
      os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
    }
    if (!os) throw std::runtime_error("failed while writing checkpoint " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[sizeof kMagic];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw std::runtime_error(path.string() + " is not a checkpoint file");
  }
  const auto version = get<std::uint32_t>(is, path);
  if (version != Checkpoint::kVersion) {
    throw std::runtime_error("checkpoint " + path.string() + " has format version " + std::to_string(version) +
                             ", this build reads version " + std::to_string(Checkpoint::kVersion));
  }
  const auto header_len = get<std::uint64_t>(is, path);
  const json meta = json::parse(get_string(is, header_len, path));

  Checkpoint ckpt;
  ckpt.config = config_from_json(meta.at("config"));
  ckpt.iteration = meta.at("iteration").get<int>();
  ckpt.optimizer_steps = meta.at("optimizer_steps").get<std::map<std::string, std::int64_t>>();
  const auto count = get<std::uint64_t>(is, path);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = get_string(is, get<std::uint32_t>(is, path), path);
    const auto rank = get<std::uint32_t>(is, path);
    if (rank > 8) throw std::runtime_error("checkpoint " + path.string() + ": tensor '" + name + "' has bad rank");
    Shape shape(rank);
    for (auto& d : shape) {
      d = get<std::int32_t>(is, path);
      if (d < 0) throw std::runtime_error("checkpoint " + path.string() + ": tensor '" + name + "' has bad shape");
    }
    Tensor<float> t(shape);
    if (t.size() && !is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)))) {
      throw std::runtime_error("checkpoint " + path.string() + " is truncated");
    }
    ckpt.tensors.emplace_back(std::move(name), std::move(t));
  }
  if (is.peek() != std::char_traits<char>::eof()) {
    throw std::runtime_error("checkpoint " + path.string() + " has trailing bytes");
  }
  return ckpt;
}

void check_compatible(const TrainConfig& expected, const TrainConfig& found) {
  const json a = to_json(expected), b = to_json(found);
  for (const auto& key : shape_keys()) {
    const auto ptr = key_pointer(key);
    if (a.at(ptr) != b.at(ptr)) {
      throw std::invalid_argument("incompatible checkpoint: '" + key + "' is " + b.at(ptr).dump() +
                                  " in the checkpoint but " + a.at(ptr).dump() + " in the configuration");
    }
  }
}

Checkpoint capture(const MSFormerModel<float>& model, const Adam* adam, int iteration) {
  Checkpoint ckpt;
  ckpt.config = model.config();
  ckpt.iteration = iteration;
  for (const auto& e : model.store().entries()) ckpt.tensors.emplace_back("model/" + e.name, e.var.value());
  if (adam) {
    for (const auto& [name, slot] : adam->slots()) {
      ckpt.tensors.emplace_back("adam.m/" + name, slot.m);
      ckpt.tensors.emplace_back("adam.v/" + name, slot.v);
      ckpt.optimizer_steps[name] = slot.step;
    }
  }
  return ckpt;
}

void restore(MSFormerModel<float>& model, Adam* adam, const Checkpoint& ckpt) {
  check_compatible(model.config(), ckpt.config);
  std::unordered_map<std::string, const Tensor<float>*> by_name;
  for (const auto& [name, t] : ckpt.tensors) by_name[name] = &t;

  std::size_t used = 0;
  for (const auto& e : model.store().entries()) {
    auto it = by_name.find("model/" + e.name);
    if (it == by_name.end()) throw std::invalid_argument("checkpoint lacks tensor '" + e.name + "'");
    if (it->second->shape() != e.var.shape()) {
      throw std::invalid_argument("checkpoint tensor '" + e.name + "' has shape " + shape_str(it->second->shape()) +
                                  ", model expects " + shape_str(e.var.shape()));
    }
    Var<float> v = e.var;
    v.mutable_value() = *it->second;
    ++used;
  }
  std::size_t optimizer_tensors = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.rfind("adam.", 0) == 0) ++optimizer_tensors;
  }
  if (used + optimizer_tensors != ckpt.tensors.size()) {
    throw std::invalid_argument("checkpoint holds tensors this model does not have");
  }
  if (!adam) return;
  adam->slots().clear();
  for (const auto& [name, step] : ckpt.optimizer_steps) {
    auto m = by_name.find("adam.m/" + name);
    auto v = by_name.find("adam.v/" + name);
    if (m == by_name.end() || v == by_name.end()) {
      throw std::invalid_argument("checkpoint optimizer state for '" + name + "' is incomplete");
    }
    if (!model.store().contains(name)) {
      throw std::invalid_argument("checkpoint optimizer state names unknown parameter '" + name + "'");
    }
    adam->slots()[name] = Adam::Slot{*m->second, *v->second, step};
  }
}

std::size_t load_backbone_weights(MSFormerModel<float>& model, const Checkpoint& ckpt) {
  const std::string prefix = "model/backbone.";
  std::unordered_map<std::string, const Tensor<float>*> by_name;
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.rfind(prefix, 0) == 0) by_name[name.substr(6)] = &t;
  }
  std::size_t copied = 0;
  for (const auto& e : model.store().entries()) {
    if (e.name.rfind("backbone.", 0) != 0) continue;
    auto it = by_name.find(e.name);
    if (it == by_name.end()) throw std::invalid_argument("backbone weights lack tensor '" + e.name + "'");
    if (it->second->shape() != e.var.shape()) {
      throw std::invalid_argument("backbone tensor '" + e.name + "' has shape " + shape_str(it->second->shape()) +
                                  ", model expects " + shape_str(e.var.shape()));
    }
    Var<float> v = e.var;
    v.mutable_value() = *it->second;
    ++copied;
  }
  return copied;
}

std::vector<data::PatchLabelGrid> load_patch_labels(const fs::path& root, const std::string& split,
                                                    const std::vector<data::BiTemporalSample>& samples,
                                                    data::PatchSize patch) {
  const fs::path dir = data::patch_label_dir(root, split, patch);
  const bool from_disk = fs::is_directory(dir);
  std::vector<data::PatchLabelGrid> out;
  std::vector<std::string> problems;
  for (const auto& s : samples) {
    try {
      if (from_disk) {
        const fs::path file = dir / (s.id + ".png");
        if (!fs::exists(file)) {
          problems.push_back(file.string() + ": missing patch label");
          continue;
        }
        data::Mask mask = data::normalize_mask(io::read_png_gray(file), file.string());
        data::PatchLabelGrid labels = data::generate_patch_labels(mask, patch);
        if (!(labels.expanded == mask)) {
          problems.push_back(file.string() + ": not constant on " + std::to_string(patch.h) + "x" +
                             std::to_string(patch.w) + " patches");
          continue;
        }
        out.push_back(std::move(labels));
      } else if (s.pixel_mask) {
        out.push_back(data::generate_patch_labels(*s.pixel_mask, patch));
      } else {
        problems.push_back(s.id + ": no pixel mask and no " + dir.filename().string() + " directory");
      }
    } catch (const std::exception& e) {
      problems.push_back(s.id + ": " + e.what());
    }
  }
  if (!problems.empty()) throw data::DatasetError(problems);
  return out;
}

BatchPlan plan_batch(std::uint64_t seed, int iteration, int dataset_size, int batch_size) {
  if (dataset_size < 1) throw std::invalid_argument("plan_batch: empty dataset");
  auto stream = [seed](std::uint32_t a, std::uint32_t tag) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), a, tag};
    return std::mt19937_64(seq);
  };
  // Samples are drawn epoch by epoch from a fresh permutation per epoch.
  BatchPlan plan;
  std::vector<int> order(dataset_size);
  std::int64_t cached_epoch = -1;
  const std::int64_t start = static_cast<std::int64_t>(iteration) * batch_size;
  for (std::int64_t pos = start; pos < start + batch_size; ++pos) {
    const std::int64_t epoch = pos / dataset_size;
    if (epoch != cached_epoch) {
      std::iota(order.begin(), order.end(), 0);
      auto rng = stream(static_cast<std::uint32_t>(epoch), 0xe90cu);
      std::shuffle(order.begin(), order.end(), rng);
      cached_epoch = epoch;
    }
    plan.indices.push_back(order[static_cast<std::size_t>(pos % dataset_size)]);
  }
  auto rng = stream(static_cast<std::uint32_t>(iteration), 0x5eedu);
  for (int i = 0; i < batch_size; ++i) plan.flags.push_back(data::sample_augment_flags(rng));
  return plan;
}

Trainer::Trainer(const TrainConfig& cfg, std::vector<data::BiTemporalSample> samples,
                 std::vector<data::PatchLabelGrid> labels)
    : cfg_(cfg), samples_(std::move(samples)), labels_(std::move(labels)), model_(cfg_), adam_(model_.store(), cfg_) {
  ops::enable_flush_to_zero();
  if (samples_.empty()) throw std::invalid_argument("training set is empty");
  if (samples_.size() != labels_.size()) throw std::invalid_argument("every training sample needs patch labels");
  const data::PatchSize patch{cfg_.patch_h, cfg_.patch_w};
  for (const auto& l : labels_) {
    if (!(l.patch == patch)) {
      throw std::invalid_argument("patch labels were built for " + std::to_string(l.patch.h) + "x" +
                                  std::to_string(l.patch.w) + ", config asks for " + std::to_string(patch.h) + "x" +
                                  std::to_string(patch.w));
    }
  }
}

void Trainer::resume(const Checkpoint& ckpt) {
  if (ckpt.iteration > cfg_.max_iteration) {
    throw std::invalid_argument("checkpoint iteration " + std::to_string(ckpt.iteration) + " exceeds max_iteration " +
                                std::to_string(cfg_.max_iteration));
  }
  restore(model_, &adam_, ckpt);
  iteration_ = ckpt.iteration;
}

LogEntry Trainer::step() {
  if (iteration_ >= cfg_.max_iteration) throw std::logic_error("training already reached max_iteration");
  const BatchPlan plan = plan_batch(cfg_.seed, iteration_, static_cast<int>(samples_.size()), cfg_.batch_size);
  const int batch = cfg_.batch_size;

  std::vector<data::BiTemporalSample> views;
  std::vector<data::PatchLabelGrid> view_labels;
  views.reserve(batch);
  view_labels.reserve(batch);
  for (int b = 0; b < batch; ++b) {
    auto [s, l] = data::augment(samples_[plan.indices[b]], labels_[plan.indices[b]], plan.flags[b]);
    views.push_back(std::move(s));
    view_labels.push_back(std::move(l));
  }
  std::vector<const Tensor<float>*> t1, t2;
  for (const auto& v : views) {
    t1.push_back(&v.image_t1);
    t2.push_back(&v.image_t2);
  }
  const int h = views[0].height(), w = views[0].width();
  const int gh = view_labels[0].grid_h(), gw = view_labels[0].grid_w();
  supervision::LossTargets<float> targets;
  targets.patch = {cfg_.patch_h, cfg_.patch_w};
  targets.y_local = Tensor<float>({batch, 1, gh, gw});
  targets.y_expanded = Tensor<float>({batch, 1, h, w});
  for (int b = 0; b < batch; ++b) {
    std::copy(view_labels[b].grid.data(), view_labels[b].grid.data() + gh * gw,
              targets.y_local.data() + static_cast<std::size_t>(b) * gh * gw);
    std::copy(view_labels[b].expanded.data(), view_labels[b].expanded.data() + h * w,
              targets.y_expanded.data() + static_cast<std::size_t>(b) * h * w);
  }

  supervision::LossBundle<float> losses;
  try {
    ModelOutput<float> out = model_.forward(stack_images<float>(t1), stack_images<float>(t2), true);
    losses = supervision::total_loss(out.change, out.aux, targets, cfg_);
  } catch (const std::runtime_error& e) {
    throw std::runtime_error("iteration " + std::to_string(iteration_) + ": " + e.what());
  }
  LogEntry entry;
  entry.total = losses.total.value().item();
  entry.pcl = losses.l_pcl.value().item();
  entry.upcl = losses.l_upcl.value().item();
  entry.direct = losses.l_direct.value().item();
  for (const auto& l : losses.l_sp) entry.sp.push_back(l.value().item());
  if (!std::isfinite(entry.total)) {
    throw std::runtime_error("non-finite loss at iteration " + std::to_string(iteration_) + ": " + losses.describe());
  }
  entry.lr = poly_lr(iteration_, cfg_);
  model_.store().clear_grads();
  losses.total.backward();
  adam_.step(entry.lr);
  entry.iteration = ++iteration_;
  return entry;
}

std::vector<Tensor<float>> predict_maps(const MSFormerModel<float>& model,
                                        const std::vector<data::BiTemporalSample>& samples, int batch_size) {
  ops::enable_flush_to_zero();
  NoGradGuard no_grad;
  std::vector<Tensor<float>> maps;
  maps.reserve(samples.size());
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    const std::size_t end = std::min(samples.size(), start + batch_size);
    std::vector<const Tensor<float>*> t1, t2;
    for (std::size_t i = start; i < end; ++i) {
      t1.push_back(&samples[i].image_t1);
      t2.push_back(&samples[i].image_t2);
    }
    ModelOutput<float> out = model.forward(stack_images<float>(t1), stack_images<float>(t2), false);
    const Tensor<float>& g = out.change.probabilities.value();
    const int h = g.dim(2), w = g.dim(3);
    for (std::size_t i = 0; i < end - start; ++i) {
      Tensor<float> map({h, w});
      std::copy(g.data() + i * h * w, g.data() + (i + 1) * h * w, map.data());
      maps.push_back(std::move(map));
    }
  }
  return maps;
}

metrics::MetricsReport evaluate(const MSFormerModel<float>& model, const std::vector<data::BiTemporalSample>& samples,
                                const EvalOptions& options) {
  for (const auto& s : samples) {
    if (!s.pixel_mask) throw std::invalid_argument("evaluate: sample '" + s.id + "' has no pixel mask");
  }
  metrics::ConfusionCounts counts;
  if (options.ground_truth_as_prediction) {
    for (const auto& s : samples) counts += metrics::accumulate_confusion(*s.pixel_mask, *s.pixel_mask);
  } else {
    const auto maps = predict_maps(model, samples, options.batch_size);
    for (std::size_t i = 0; i < samples.size(); ++i) {
      counts += metrics::accumulate_confusion(metrics::binarize(maps[i], options.threshold), *samples[i].pixel_mask);
    }
  }
  metrics::MetricsReport report = metrics::compute_metrics(counts);
  report.patch_h = model.config().patch_h;
  report.patch_w = model.config().patch_w;
  report.threshold = options.threshold;
  return report;
}

RunResult run_training(const TrainConfig& cfg, const RunOptions& options) {
  validate(cfg);
  auto samples = data::load_dataset(options.dataset_root, options.split);
  std::vector<std::string> problems;
  for (const auto& s : samples) {
    try {
      encoder::check_input_size(s.height(), s.width());
      data::check_divisible(s.height(), s.width(), {cfg.patch_h, cfg.patch_w});
    } catch (const std::exception& e) {
      problems.push_back(s.id + ": " + e.what());
    }
  }
  if (!problems.empty()) throw data::DatasetError(problems);
  auto labels = load_patch_labels(options.dataset_root, options.split, samples, {cfg.patch_h, cfg.patch_w});

  std::vector<data::BiTemporalSample> val;
  if (options.on_validation && fs::is_directory(options.dataset_root / "val")) {
    val = data::load_dataset(options.dataset_root, "val");
  }

  Trainer trainer(cfg, std::move(samples), std::move(labels));
  if (options.backbone_weights && !options.resume_from) {
    load_backbone_weights(trainer.model(), load_checkpoint(*options.backbone_weights));
  }
  if (options.resume_from) trainer.resume(load_checkpoint(*options.resume_from));

  std::ofstream log_csv;
  if (!options.out_dir.empty()) {
    fs::create_directories(options.out_dir);
    const fs::path log_path = options.out_dir / "train_log.csv";
    const bool fresh = !options.resume_from || !fs::exists(log_path);
    log_csv.open(log_path, fresh ? std::ios::trunc : std::ios::app);
    if (fresh) {
      log_csv << "iteration,lr,total,pcl,upcl,direct";
      for (int s = 0; s < cfg.num_blocks; ++s) log_csv << ",sp" << s;
      log_csv << "\n";
    }
  }

  RunResult result;
  while (trainer.iteration() < cfg.max_iteration) {
    LogEntry e = trainer.step();
    const int it = e.iteration;
    if (log_csv.is_open()) {
      log_csv << it << "," << e.lr << "," << e.total << "," << e.pcl << "," << e.upcl << "," << e.direct;
      for (double v : e.sp) log_csv << "," << v;
      log_csv << "\n";
    }
    if (options.on_log && (it % cfg.log_every == 0 || it == cfg.max_iteration)) options.on_log(e);
    result.log.push_back(std::move(e));

    const bool last = it == cfg.max_iteration;
    if (it % cfg.checkpoint_every == 0 || last) {
      if (!options.out_dir.empty()) {
        log_csv.flush();
        char name[32];
        std::snprintf(name, sizeof name, "checkpoint_%07d.bin", it);
        save_checkpoint(options.out_dir / name, trainer.checkpoint());
        if (last) save_checkpoint(options.out_dir / "final.bin", trainer.checkpoint());
      }
      if (!val.empty()) options.on_validation(it, evaluate(trainer.model(), val, {cfg.threshold}));
    }
  }
  result.final_checkpoint = trainer.checkpoint();
  return result;
}

}  // namespace msformer::training
