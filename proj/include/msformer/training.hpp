#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "msformer/config.hpp"
#include "msformer/data.hpp"
#include "msformer/metrics.hpp"
#include "msformer/model.hpp"

namespace msformer::training {

/// (1 - cur / max)^power * lr0 for 0 <= cur <= max.
double poly_lr(int cur_iteration, const TrainConfig& cfg);

/// Adam with L2 weight decay folded into the gradient. Parameters that
/// received no gradient in a step are left untouched, state included.
class Adam {
 public:
  struct Slot {
    Tensor<float> m;
    Tensor<float> v;
    std::int64_t step = 0;
  };

  Adam(nn::ParameterStore<float>& store, const TrainConfig& cfg);
  void step(double lr);

  std::map<std::string, Slot>& slots() { return slots_; }
  const std::map<std::string, Slot>& slots() const { return slots_; }

 private:
  nn::ParameterStore<float>& store_;
  double beta1_, beta2_, weight_decay_, eps_;
  std::map<std::string, Slot> slots_;
};

/// Everything needed to resume training or rebuild a model.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  TrainConfig config;
  int iteration = 0;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;  // model entries then optimizer moments
  std::map<std::string, std::int64_t> optimizer_steps;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
/// Rejects a wrong magic, an unknown version and truncated files.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Throws std::invalid_argument naming the first shape-defining key that differs.
void check_compatible(const TrainConfig& expected, const TrainConfig& found);

Checkpoint capture(const MSFormerModel<float>& model, const Adam* adam, int iteration);
/// Copies tensors into an existing model (and optimizer). Names and shapes must match.
void restore(MSFormerModel<float>& model, Adam* adam, const Checkpoint& ckpt);

/// Copies every backbone tensor of `ckpt` into `model`; returns how many were copied.
std::size_t load_backbone_weights(MSFormerModel<float>& model, const Checkpoint& ckpt);

/// Reads plabel_<h>x<w> when present and otherwise derives labels from pixel masks.
std::vector<data::PatchLabelGrid> load_patch_labels(const std::filesystem::path& root, const std::string& split,
                                                    const std::vector<data::BiTemporalSample>& samples,
                                                    data::PatchSize patch);

struct LogEntry {
  int iteration = 0;  // number of completed steps
  double lr = 0;
  double total = 0;
  double pcl = 0;
  double upcl = 0;
  double direct = 0;
  std::vector<double> sp;
};

/// Batch content for one iteration: sample indices and augmentation draws.
struct BatchPlan {
  std::vector<int> indices;
  std::vector<data::AugmentFlags> flags;
};

/// Depends only on (seed, iteration), so resumed runs see the same batches.
BatchPlan plan_batch(std::uint64_t seed, int iteration, int dataset_size, int batch_size);

class Trainer {
 public:
  Trainer(const TrainConfig& cfg, std::vector<data::BiTemporalSample> samples,
          std::vector<data::PatchLabelGrid> labels);

  /// One optimizer step. Throws on a non-finite loss, naming the iteration
  /// and each loss component.
  LogEntry step();
  int iteration() const { return iteration_; }

  Checkpoint checkpoint() const { return capture(model_, &adam_, iteration_); }
  void resume(const Checkpoint& ckpt);

  MSFormerModel<float>& model() { return model_; }
  const TrainConfig& config() const { return cfg_; }

 private:
  TrainConfig cfg_;
  std::vector<data::BiTemporalSample> samples_;
  std::vector<data::PatchLabelGrid> labels_;
  MSFormerModel<float> model_;
  Adam adam_;
  int iteration_ = 0;
};

struct EvalOptions {
  double threshold = 0.5;
  int batch_size = 8;
  bool ground_truth_as_prediction = false;  // debug short-circuit
};

/// Change probabilities (H x W each) in eval mode.
std::vector<Tensor<float>> predict_maps(const MSFormerModel<float>& model,
                                        const std::vector<data::BiTemporalSample>& samples, int batch_size = 8);

/// Dataset-level confusion accumulation and metrics.
metrics::MetricsReport evaluate(const MSFormerModel<float>& model, const std::vector<data::BiTemporalSample>& samples,
                                const EvalOptions& options);

struct RunOptions {
  std::filesystem::path dataset_root;
  std::string split = "train";
  std::filesystem::path out_dir;  // checkpoints and logs; empty keeps everything in memory
  std::optional<std::filesystem::path> resume_from;
  std::optional<std::filesystem::path> backbone_weights;  // checkpoint to initialize the backbone from
  std::function<void(const LogEntry&)> on_log;
  std::function<void(int, const metrics::MetricsReport&)> on_validation;
};

struct RunResult {
  Checkpoint final_checkpoint;
  std::vector<LogEntry> log;
};

/// Full schedule: logging every log_every steps, checkpoints every
/// checkpoint_every steps and at the end, validation metrics when a "val"
/// split exists (logged only).
RunResult run_training(const TrainConfig& cfg, const RunOptions& options);

}  // namespace msformer::training
