#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace msformer {

struct AblationFlags {
  bool no_bab = false;      // bypass the attention stack
  bool no_p2m = false;      // memory self-attention instead of pixel-to-memory
  bool no_mp = false;       // drop max-pooled rows from the augmented memory
  bool no_ap = false;       // drop pyramid-pooled rows from the augmented memory
  bool no_pcl = false;      // zero the patch classification loss
  bool no_upcl = false;     // zero the unchanged-patch consistency loss
  bool direct_sup = false;  // BCE between the change map and expanded patch labels

  friend bool operator==(const AblationFlags&, const AblationFlags&) = default;
};

struct LossWeights {
  double sp = 1.0;
  double pcl = 1.0;
  double upcl = 1.0;
  double direct = 1.0;

  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

struct TrainConfig {
  // annotation
  int patch_h = 32;
  int patch_w = 32;
  // architecture
  int memory_length = 128;  // N_m
  int num_blocks = 3;       // S
  int channels = 128;       // C
  int backbone_width = 64;  // level widths are 1x, 2x, 4x, 8x this
  int heads = 1;
  int ffn_expansion = 4;
  bool pre_norm = true;
  std::vector<int> pooling_ratios{12, 16, 20, 24};
  double memory_init_std = 0.02;
  std::vector<double> input_mean{0.0, 0.0, 0.0};
  std::vector<double> input_std{1.0, 1.0, 1.0};
  // optimization; "momentum" 0.9 in the reference setup is the same quantity as beta1
  double lr0 = 0.0005;
  double power = 0.9;
  int max_iteration = 40000;
  int batch_size = 32;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double weight_decay = 0.0001;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  // losses
  AblationFlags ablation;
  LossWeights loss_weights;
  std::string upcl_reduction = "mean";  // or "sum"
  // evaluation and bookkeeping
  double threshold = 0.5;
  int checkpoint_every = 1000;
  int log_every = 50;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Throws std::invalid_argument naming the first offending key.
void validate(const TrainConfig& cfg);

nlohmann::json to_json(const TrainConfig& cfg);
/// Missing keys keep their defaults; unknown keys are rejected.
TrainConfig config_from_json(const nlohmann::json& j);

TrainConfig load_config(const std::filesystem::path& path);
void save_config(const std::filesystem::path& path, const TrainConfig& cfg);

/// Applies "key=value" overrides using the JSON key names (e.g. "N_m=64",
/// "ablation.no_bab=true", "pooling_ratios=[12,16]").
void apply_override(TrainConfig& cfg, const std::string& assignment);

/// One ablation row: a named, reachable flag/config combination.
struct AblationVariant {
  std::string id;     // "#02" ... "#10"
  std::string label;  // e.g. "w/o BAB"
  TrainConfig (*apply)(TrainConfig);
};

/// The nine ablation rows #02..#10 applied on top of a base configuration.
const std::vector<AblationVariant>& ablation_variants();

/// Keys whose change alters parameter shapes; checkpoints must agree on them.
std::vector<std::string> shape_keys();

}  // namespace msformer
