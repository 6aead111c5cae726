#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "msformer/config.hpp"
#include "msformer/data.hpp"
#include "msformer/image_io.hpp"
#include "msformer/metrics.hpp"
#include "msformer/synth.hpp"
#include "msformer/training.hpp"

namespace fs = std::filesystem;
using namespace msformer;

namespace {

// "32" or "32x16" (rows x cols)
data::PatchSize parse_patch(const std::string& text) {
  const auto x = text.find('x');
  try {
    if (x == std::string::npos) {
      const int n = std::stoi(text);
      return {n, n};
    }
    return {std::stoi(text.substr(0, x)), std::stoi(text.substr(x + 1))};
  } catch (const std::exception&) {
    throw CLI::ValidationError("patch size", "expected N or HxW, got '" + text + "'");
  }
}

TrainConfig build_config(const std::string& config_path, const std::vector<std::string>& overrides) {
  TrainConfig cfg = config_path.empty() ? TrainConfig{} : load_config(config_path);
  for (const auto& o : overrides) apply_override(cfg, o);
  validate(cfg);
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

void print_log(const training::LogEntry& e) {
  std::printf("iter %d lr %.6g total %.5f pcl %.5f upcl %.5f", e.iteration, e.lr, e.total, e.pcl, e.upcl);
  if (e.direct != 0) std::printf(" direct %.5f", e.direct);
  for (std::size_t s = 0; s < e.sp.size(); ++s) std::printf(" sp%zu %.5f", s, e.sp[s]);
  std::printf("\n");
  std::fflush(stdout);
}

void print_report(const metrics::MetricsReport& r) {
  std::printf("kappa %.4f iou %.4f f1 %.4f recall %.4f precision %.4f oa %.4f\n", r.kappa, r.iou, r.f1, r.recall,
              r.precision, r.overall_accuracy);
}

std::unique_ptr<MSFormerModel<float>> model_from_checkpoint(const fs::path& path, const std::string& config_path,
                                                            const std::vector<std::string>& overrides,
                                                            training::Checkpoint& ckpt) {
  ckpt = training::load_checkpoint(path);
  TrainConfig cfg = ckpt.config;
  if (!config_path.empty() || !overrides.empty()) {
    TrainConfig requested = build_config(config_path, overrides);
    training::check_compatible(requested, ckpt.config);
    // keeps evaluation-time settings such as the patch size from the request
    cfg = requested;
  }
  auto model = std::make_unique<MSFormerModel<float>>(cfg);
  training::restore(*model, nullptr, ckpt);
  return model;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weakly supervised change detection with patch-level labels and a memory-bank transformer"};
  app.require_subcommand(1);

  // prepare-labels
  auto* prep = app.add_subcommand("prepare-labels", "Export block-constant patch labels from pixel masks");
  std::string prep_root;
  std::vector<std::string> prep_splits{"train", "test"};
  std::vector<std::string> prep_sizes;
  prep->add_option("--data", prep_root, "Dataset root")->required();
  prep->add_option("--split", prep_splits, "Splits to process")->capture_default_str();
  prep->add_option("--patch", prep_sizes, "Patch sizes, N or HxW")->required();

  // synth
  synth::SynthOptions synth_opts;
  auto* syn = app.add_subcommand("synth", "Generate a synthetic bi-temporal dataset\n\n" +
                                              synth::describe(synth_opts.style));
  std::string synth_out;
  syn->add_option("--out", synth_out, "Output dataset root")->required();
  syn->add_option("--n", synth_opts.n_samples, "Number of pairs")->capture_default_str();
  syn->add_option("--size", synth_opts.image_size, "Image side, a multiple of 64")->capture_default_str();
  syn->add_option("--seed", synth_opts.seed, "Random seed")->capture_default_str();
  syn->add_option("--train-fraction", synth_opts.train_fraction, "Share of pairs in the train split")
      ->capture_default_str();
  syn->add_flag("--overwrite", synth_opts.overwrite, "Replace existing train/test directories");

  // shared config options
  auto add_config_options = [](CLI::App* cmd, std::string& config, std::vector<std::string>& overrides) {
    cmd->add_option("--config", config, "JSON configuration file");
    cmd->add_option("--set", overrides, "Override a config key, e.g. --set N_m=64 --set ablation.no_bab=true");
  };

  // train
  auto* train = app.add_subcommand("train", "Train on the train split with patch-level labels");
  std::string train_root, train_config, train_out, train_resume, train_split = "train";
  std::vector<std::string> train_overrides;
  train->add_option("--data", train_root, "Dataset root")->required();
  train->add_option("--split", train_split, "Training split")->capture_default_str();
  train->add_option("--out", train_out, "Directory for checkpoints and the training log")->required();
  train->add_option("--resume", train_resume, "Checkpoint to resume from");
  std::string train_backbone;
  train->add_option("--backbone-weights", train_backbone, "Checkpoint whose backbone initializes this run");
  add_config_options(train, train_config, train_overrides);

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "Compute dataset-level metrics for a checkpoint");
  std::string eval_ckpt, eval_root, eval_split = "test", eval_json, eval_csv, eval_config;
  std::vector<std::string> eval_overrides;
  double eval_threshold = -1;
  bool eval_gt = false;
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  eval->add_option("--data", eval_root, "Dataset root")->required();
  eval->add_option("--split", eval_split, "Split to score")->capture_default_str();
  eval->add_option("--threshold", eval_threshold, "Binarization threshold (default: from config)");
  eval->add_option("--json", eval_json, "Write the report as JSON");
  eval->add_option("--csv", eval_csv, "Append the report as a CSV row");
  eval->add_flag("--gt-as-prediction", eval_gt, "Debug: score the ground truth against itself");
  add_config_options(eval, eval_config, eval_overrides);

  // predict
  auto* pred = app.add_subcommand("predict", "Write binary change maps as 0/255 PNG files");
  std::string pred_ckpt, pred_root, pred_split = "test", pred_out;
  double pred_threshold = -1;
  pred->add_option("--checkpoint", pred_ckpt, "Checkpoint file")->required();
  pred->add_option("--data", pred_root, "Dataset root")->required();
  pred->add_option("--split", pred_split, "Split to predict")->capture_default_str();
  pred->add_option("--out", pred_out, "Output directory")->required();
  pred->add_option("--threshold", pred_threshold, "Binarization threshold (default: from config)");

  // sweep
  auto* sweep = app.add_subcommand("sweep", "Train and score every patch size x ablation combination");
  std::string sweep_root, sweep_config, sweep_out;
  std::vector<std::string> sweep_overrides, sweep_patches{"32"}, sweep_variants;
  std::vector<std::uint64_t> sweep_seeds;
  sweep->add_option("--data", sweep_root, "Dataset root with train and test splits")->required();
  sweep->add_option("--out", sweep_out, "Output directory")->required();
  sweep->add_option("--patch", sweep_patches, "Patch sizes, N or HxW")->capture_default_str();
  sweep->add_option("--variant", sweep_variants, "Rows to run: 01 (full model) or 02..10 (default: all)");
  sweep->add_option("--seed", sweep_seeds, "Seeds (default: the config seed)");
  add_config_options(sweep, sweep_config, sweep_overrides);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*prep) {
      std::vector<std::string> problems;
      for (const auto& split : prep_splits) {
        const auto samples = data::load_dataset(prep_root, split);
        for (const auto& text : prep_sizes) {
          const data::PatchSize patch = parse_patch(text);
          try {
            const auto n = data::export_patch_labels(prep_root, split, samples, patch);
            std::printf("%s: wrote %zu labels to %s\n", split.c_str(), n,
                        data::patch_label_dir(prep_root, split, patch).string().c_str());
          } catch (const data::DatasetError& e) {
            for (const auto& p : e.problems()) problems.push_back(split + "/" + p);
          }
        }
      }
      if (!problems.empty()) throw data::DatasetError(problems);
    } else if (*syn) {
      const int n_train = synth::synth_dataset(synth_out, synth_opts);
      std::printf("wrote %d train and %d test pairs to %s\n", n_train, synth_opts.n_samples - n_train,
                  synth_out.c_str());
    } else if (*train) {
      const TrainConfig cfg = build_config(train_config, train_overrides);
      fs::create_directories(train_out);
      save_config(fs::path(train_out) / "config.json", cfg);
      training::RunOptions opts;
      opts.dataset_root = train_root;
      opts.split = train_split;
      opts.out_dir = train_out;
      if (!train_resume.empty()) opts.resume_from = train_resume;
      if (!train_backbone.empty()) opts.backbone_weights = train_backbone;
      opts.on_log = print_log;
      opts.on_validation = [](int it, const metrics::MetricsReport& r) {
        std::printf("val @%d ", it);
        print_report(r);
      };
      training::run_training(cfg, opts);
      std::printf("final checkpoint: %s\n", (fs::path(train_out) / "final.bin").string().c_str());
    } else if (*eval) {
      training::Checkpoint ckpt;
      auto model = model_from_checkpoint(eval_ckpt, eval_config, eval_overrides, ckpt);
      const auto samples = data::load_dataset(eval_root, eval_split);
      training::EvalOptions opts;
      opts.threshold = eval_threshold > 0 ? eval_threshold : model->config().threshold;
      opts.ground_truth_as_prediction = eval_gt;
      metrics::MetricsReport report = training::evaluate(*model, samples, opts);
      report.checkpoint_id = eval_ckpt + "@" + std::to_string(ckpt.iteration);
      print_report(report);
      if (!eval_json.empty()) write_text(eval_json, metrics::to_json(report).dump(2) + "\n");
      if (!eval_csv.empty()) {
        const bool fresh = !fs::exists(eval_csv);
        std::ofstream os(eval_csv, std::ios::app);
        if (fresh) os << metrics::csv_header() << "\n";
        os << metrics::csv_row(report) << "\n";
      }
    } else if (*pred) {
      training::Checkpoint ckpt;
      auto model = model_from_checkpoint(pred_ckpt, "", {}, ckpt);
      const auto samples = data::load_dataset(pred_root, pred_split);
      const double threshold = pred_threshold > 0 ? pred_threshold : model->config().threshold;
      const auto maps = training::predict_maps(*model, samples);
      fs::create_directories(pred_out);
      for (std::size_t i = 0; i < samples.size(); ++i) {
        data::Mask out = metrics::binarize(maps[i], threshold);
        for (auto& v : out.values()) v = v ? 255 : 0;
        io::write_png_gray(fs::path(pred_out) / (samples[i].id + ".png"), out);
      }
      std::printf("wrote %zu change maps to %s\n", samples.size(), pred_out.c_str());
    } else if (*sweep) {
      const TrainConfig base = build_config(sweep_config, sweep_overrides);
      if (sweep_seeds.empty()) sweep_seeds.push_back(base.seed);
      struct Row {
        std::string id, label;
        TrainConfig (*apply)(TrainConfig);
      };
      std::vector<Row> rows;
      auto wanted = [&](const std::string& id) {
        if (sweep_variants.empty()) return true;
        for (const auto& v : sweep_variants) {
          if (v == id || "#" + v == id) return true;
        }
        return false;
      };
      if (wanted("#01")) rows.push_back({"#01", "full model", [](TrainConfig c) { return c; }});
      for (const auto& v : ablation_variants()) {
        if (wanted(v.id)) rows.push_back({v.id, v.label, v.apply});
      }
      if (rows.empty()) throw std::invalid_argument("no sweep rows match the requested variants");

      fs::create_directories(sweep_out);
      const fs::path table = fs::path(sweep_out) / "sweep.csv";
      std::ofstream csv(table);
      csv << "id,variant,patch_h,patch_w,seed,kappa,iou,f1,recall,precision,overall_accuracy\n";
      const auto test = data::load_dataset(sweep_root, "test");
      for (const auto& patch_text : sweep_patches) {
        const data::PatchSize patch = parse_patch(patch_text);
        for (const auto& row : rows) {
          for (std::uint64_t seed : sweep_seeds) {
            TrainConfig cfg = row.apply(base);
            cfg.patch_h = patch.h;
            cfg.patch_w = patch.w;
            cfg.seed = seed;
            validate(cfg);
            char name[64];
            std::snprintf(name, sizeof name, "%s_p%dx%d_s%llu", row.id.substr(1).c_str(), patch.h, patch.w,
                          static_cast<unsigned long long>(seed));
            const fs::path run_dir = fs::path(sweep_out) / name;
            std::printf("== %s %s patch %dx%d seed %llu\n", row.id.c_str(), row.label.c_str(), patch.h, patch.w,
                        static_cast<unsigned long long>(seed));
            training::RunOptions opts;
            opts.dataset_root = sweep_root;
            opts.out_dir = run_dir;
            opts.on_log = print_log;
            save_config(run_dir / "config.json", cfg);
            const auto result = training::run_training(cfg, opts);
            MSFormerModel<float> model(cfg);
            training::restore(model, nullptr, result.final_checkpoint);
            metrics::MetricsReport r = training::evaluate(model, test, {cfg.threshold});
            r.checkpoint_id = (run_dir / "final.bin").string();
            print_report(r);
            write_text(run_dir / "metrics.json", metrics::to_json(r).dump(2) + "\n");
            char line[256];
            std::snprintf(line, sizeof line, "%s,\"%s\",%d,%d,%llu,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f\n", row.id.c_str(),
                          row.label.c_str(), patch.h, patch.w, static_cast<unsigned long long>(seed), r.kappa, r.iou,
                          r.f1, r.recall, r.precision, r.overall_accuracy);
            csv << line << std::flush;
          }
        }
      }
      std::printf("sweep table: %s\n", table.string().c_str());
    }
  } catch (const data::DatasetError& e) {
    std::fprintf(stderr, "error: %zu dataset problem(s)\n", e.problems().size());
    for (const auto& p : e.problems()) std::fprintf(stderr, "  %s\n", p.c_str());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
