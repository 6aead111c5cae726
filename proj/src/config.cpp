#include "msformer/config.hpp"

#include <fstream>
#include <stdexcept>

namespace msformer {

using nlohmann::json;

namespace {

void require(bool ok, const std::string& key, const std::string& what) {
  if (!ok) throw std::invalid_argument("config key '" + key + "': " + what);
}

// Every key in `given` must exist in `schema`; nested objects are checked recursively.
void check_known_keys(const json& given, const json& schema, const std::string& prefix) {
  if (!given.is_object()) throw std::invalid_argument("config" + (prefix.empty() ? "" : " key '" + prefix + "'") + " must be an object");
  for (auto it = given.begin(); it != given.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!schema.contains(it.key())) throw std::invalid_argument("unknown config key '" + key + "'");
    if (schema.at(it.key()).is_object()) check_known_keys(it.value(), schema.at(it.key()), key);
  }
}

template <typename V>
void read(const json& j, const char* key, V& out) {
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config key '") + key + "': " + e.what());
  }
}

}  // namespace

void validate(const TrainConfig& c) {
  require(c.patch_h > 0 && c.patch_w > 0, "patch_h/patch_w", "must be positive");
  require(c.memory_length >= 1, "N_m", "must be >= 1");
  require(c.num_blocks >= 1, "S", "must be >= 1");
  require(c.channels >= 1, "C", "must be >= 1");
  require(c.backbone_width >= 1, "backbone_width", "must be >= 1");
  require(c.heads >= 1 && c.channels % c.heads == 0, "heads", "must divide C");
  require(c.ffn_expansion >= 1, "ffn_expansion", "must be >= 1");
  for (int r : c.pooling_ratios) require(r > 0, "pooling_ratios", "ratios must be positive");
  require(c.input_mean.size() == 3 && c.input_std.size() == 3, "input_mean/input_std", "need three channels");
  for (double s : c.input_std) require(s > 0, "input_std", "must be positive");
  require(c.lr0 > 0, "lr0", "must be positive");
  require(c.power > 0, "power", "must be positive");
  require(c.max_iteration >= 1, "max_iteration", "must be >= 1");
  require(c.batch_size >= 1, "batch_size", "must be >= 1");
  require(c.beta1 >= 0 && c.beta1 < 1 && c.beta2 >= 0 && c.beta2 < 1, "beta1/beta2", "must lie in [0, 1)");
  require(c.weight_decay >= 0, "weight_decay", "must be >= 0");
  require(c.upcl_reduction == "mean" || c.upcl_reduction == "sum", "upcl_reduction", "must be 'mean' or 'sum'");
  require(c.threshold > 0 && c.threshold < 1, "threshold", "must lie in (0, 1)");
  require(c.checkpoint_every >= 1, "checkpoint_every", "must be >= 1");
  require(c.log_every >= 1, "log_every", "must be >= 1");
}

json to_json(const TrainConfig& c) {
  json j;
  j["patch_h"] = c.patch_h;
  j["patch_w"] = c.patch_w;
  j["N_m"] = c.memory_length;
  j["S"] = c.num_blocks;
  j["C"] = c.channels;
  j["backbone_width"] = c.backbone_width;
  j["heads"] = c.heads;
  j["ffn_expansion"] = c.ffn_expansion;
  j["pre_norm"] = c.pre_norm;
  j["pooling_ratios"] = c.pooling_ratios;
  j["memory_init_std"] = c.memory_init_std;
  j["input_mean"] = c.input_mean;
  j["input_std"] = c.input_std;
  j["lr0"] = c.lr0;
  j["power"] = c.power;
  j["max_iteration"] = c.max_iteration;
  j["batch_size"] = c.batch_size;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["weight_decay"] = c.weight_decay;
  j["adam_eps"] = c.adam_eps;
  j["seed"] = c.seed;
  j["ablation"] = {{"no_bab", c.ablation.no_bab},   {"no_p2m", c.ablation.no_p2m}, {"no_mp", c.ablation.no_mp},
                   {"no_ap", c.ablation.no_ap},     {"no_pcl", c.ablation.no_pcl}, {"no_upcl", c.ablation.no_upcl},
                   {"direct_sup", c.ablation.direct_sup}};
  j["loss_weights"] = {{"sp", c.loss_weights.sp},
                       {"pcl", c.loss_weights.pcl},
                       {"upcl", c.loss_weights.upcl},
                       {"direct", c.loss_weights.direct}};
  j["upcl_reduction"] = c.upcl_reduction;
  j["threshold"] = c.threshold;
  j["checkpoint_every"] = c.checkpoint_every;
  j["log_every"] = c.log_every;
  return j;
}

TrainConfig config_from_json(const json& given) {
  json merged = to_json(TrainConfig{});
  check_known_keys(given, merged, "");
  merged.merge_patch(given);

  TrainConfig c;
  read(merged, "patch_h", c.patch_h);
  read(merged, "patch_w", c.patch_w);
  read(merged, "N_m", c.memory_length);
  read(merged, "S", c.num_blocks);
  read(merged, "C", c.channels);
  read(merged, "backbone_width", c.backbone_width);
  read(merged, "heads", c.heads);
  read(merged, "ffn_expansion", c.ffn_expansion);
  read(merged, "pre_norm", c.pre_norm);
  read(merged, "pooling_ratios", c.pooling_ratios);
  read(merged, "memory_init_std", c.memory_init_std);
  read(merged, "input_mean", c.input_mean);
  read(merged, "input_std", c.input_std);
  read(merged, "lr0", c.lr0);
  read(merged, "power", c.power);
  read(merged, "max_iteration", c.max_iteration);
  read(merged, "batch_size", c.batch_size);
  read(merged, "beta1", c.beta1);
  read(merged, "beta2", c.beta2);
  read(merged, "weight_decay", c.weight_decay);
  read(merged, "adam_eps", c.adam_eps);
  read(merged, "seed", c.seed);
  const json& a = merged.at("ablation");
  read(a, "no_bab", c.ablation.no_bab);
  read(a, "no_p2m", c.ablation.no_p2m);
  read(a, "no_mp", c.ablation.no_mp);
  read(a, "no_ap", c.ablation.no_ap);
  read(a, "no_pcl", c.ablation.no_pcl);
  read(a, "no_upcl", c.ablation.no_upcl);
  read(a, "direct_sup", c.ablation.direct_sup);
  const json& w = merged.at("loss_weights");
  read(w, "sp", c.loss_weights.sp);
  read(w, "pcl", c.loss_weights.pcl);
  read(w, "upcl", c.loss_weights.upcl);
  read(w, "direct", c.loss_weights.direct);
  read(merged, "upcl_reduction", c.upcl_reduction);
  read(merged, "threshold", c.threshold);
  read(merged, "checkpoint_every", c.checkpoint_every);
  read(merged, "log_every", c.log_every);
  validate(c);
  return c;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config '" + path.string() + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::invalid_argument("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

void save_config(const std::filesystem::path& path, const TrainConfig& cfg) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write config '" + path.string() + "'");
  out << to_json(cfg).dump(2) << "\n";
}

void apply_override(TrainConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw std::invalid_argument("override '" + assignment + "' is not of the form key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  json patch = json::object();
  json* cursor = &patch;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (dot == std::string::npos) {
      (*cursor)[part] = value;
      break;
    }
    cursor = &(*cursor)[part];
    start = dot + 1;
  }
  json merged = to_json(cfg);
  check_known_keys(patch, merged, "");
  merged.merge_patch(patch);
  cfg = config_from_json(merged);
}

const std::vector<AblationVariant>& ablation_variants() {
  static const std::vector<AblationVariant> variants = {
      {"#02", "w/o BAB", [](TrainConfig c) { c.ablation.no_bab = true; return c; }},
      {"#03", "N_m=64", [](TrainConfig c) { c.memory_length = 64; return c; }},
      {"#04", "N_m=192", [](TrainConfig c) { c.memory_length = 192; return c; }},
      {"#05", "BAB w/o P2M", [](TrainConfig c) { c.ablation.no_p2m = true; return c; }},
      {"#06", "BAB w/o MP", [](TrainConfig c) { c.ablation.no_mp = true; return c; }},
      {"#07", "BAB w/o AP", [](TrainConfig c) { c.ablation.no_ap = true; return c; }},
      {"#08", "PSS w/o L1", [](TrainConfig c) { c.ablation.no_upcl = true; return c; }},
      {"#09", "PSS w/o BCE", [](TrainConfig c) { c.ablation.no_pcl = true; return c; }},
      {"#10", "Directly sup", [](TrainConfig c) { c.ablation.direct_sup = true; return c; }},
  };
  return variants;
}

std::vector<std::string> shape_keys() {
  return {"C",       "N_m",           "S",   "backbone_width", "heads",          "ffn_expansion",
          "pre_norm", "pooling_ratios", "ablation.no_bab", "ablation.no_p2m", "ablation.no_mp", "ablation.no_ap"};
}

}  // namespace msformer
