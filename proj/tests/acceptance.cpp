// Acceptance checks. Prints one PASS/FAIL line per criterion and exits non-zero
// when any criterion fails. `--only 1,5` runs a subset.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "msformer/memory_transformer.hpp"
#include "msformer/metrics.hpp"
#include "msformer/supervision.hpp"
#include "msformer/synth.hpp"
#include "msformer/training.hpp"

using namespace msformer;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

/// Collects the first few failures of one criterion.
struct Check {
  int failures = 0;
  std::vector<std::string> notes;

  void expect(bool ok, const std::string& what) {
    if (ok) return;
    if (++failures <= 5) notes.push_back(what);
  }
  void near(double got, double want, double atol, double rtol, const std::string& what) {
    const bool ok = std::abs(got - want) <= atol + rtol * std::abs(want);
    if (!ok) expect(false, what + ": got " + fmt("%.9g", got) + " want " + fmt("%.9g", want));
  }
  std::string summary() const {
    std::string s = std::to_string(failures) + " mismatch(es)";
    for (const auto& n : notes) s += "; " + n;
    return s;
  }
};

template <typename T>
Tensor<T> uniform(Shape shape, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  Tensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.values()) v = static_cast<T>(d(rng));
  return t;
}

data::Mask random_mask(int h, int w, double p, std::mt19937_64& rng) {
  data::Mask m({h, w});
  std::bernoulli_distribution coin(p);
  for (auto& v : m.values()) v = coin(rng) ? 1 : 0;
  return m;
}

int random_divisor(int n, std::mt19937_64& rng) {
  std::vector<int> d;
  for (int k = 1; k <= n; ++k)
    if (n % k == 0) d.push_back(k);
  return d[std::uniform_int_distribution<std::size_t>(0, d.size() - 1)(rng)];
}

// ---------------------------------------------------------------------------
// [1] brute-force oracles

std::string oracle_suite(bool& pass) {
  const auto t0 = Clock::now();
  constexpr int kInstances = 100;
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> side(1, 32);
  std::map<std::string, Check> checks;

  for (int n = 0; n < kInstances; ++n) {
    const int h = side(rng), w = side(rng);
    const data::PatchSize patch{random_divisor(h, rng), random_divisor(w, rng)};
    const data::Mask mask = random_mask(h, w, 0.1 + 0.8 * (n % 5) / 4.0, rng);
    const auto labels = data::generate_patch_labels(mask, patch);
    auto& c = checks["generate_patch_labels"];
    const int gh = h / patch.h, gw = w / patch.w;
    c.expect(labels.grid.shape() == Shape{gh, gw}, "grid shape");
    for (int i = 0; i < gh && c.failures == 0; ++i)
      for (int j = 0; j < gw; ++j) {
        int any = 0;
        for (int y = i * patch.h; y < (i + 1) * patch.h; ++y)
          for (int x = j * patch.w; x < (j + 1) * patch.w; ++x) any |= mask.at({y, x});
        c.expect(labels.grid.at({i, j}) == any, "cell value");
        for (int y = i * patch.h; y < (i + 1) * patch.h; ++y)
          for (int x = j * patch.w; x < (j + 1) * patch.w; ++x) c.expect(labels.expanded.at({y, x}) == any, "expanded");
      }

    const Tensor<float> map = uniform<float>({h, w}, rng, 0, 1);
    const auto local = data::downsample_local(map, patch);
    auto& d = checks["downsample_local"];
    for (int i = 0; i < gh; ++i)
      for (int j = 0; j < gw; ++j) {
        float mx = -1;
        for (int y = i * patch.h; y < (i + 1) * patch.h; ++y)
          for (int x = j * patch.w; x < (j + 1) * patch.w; ++x) mx = std::max(mx, map.at({y, x}));
        d.expect(local.values.at({i, j}) == mx, "cell max");
      }
  }

  for (int n = 0; n < kInstances; ++n) {
    const int gh = side(rng), gw = side(rng), ch = 1 + n % 6, batch = 1 + n % 2;
    TokenMap<float> p{Var<float>(uniform<float>({batch, gh * gw, ch}, rng)), gh, gw};
    const PatchGrid grid{gh / random_divisor(gh, rng), gw / random_divisor(gw, rng)};
    const auto pooled = transformer::pool_representative(p, grid).value();
    auto& c = checks["pool_representative"];
    const int ph = gh / grid.h, pw = gw / grid.w;
    for (int b = 0; b < batch; ++b)
      for (int i = 0; i < grid.h; ++i)
        for (int j = 0; j < grid.w; ++j)
          for (int k = 0; k < ch; ++k) {
            float mx = -std::numeric_limits<float>::infinity();
            for (int y = i * ph; y < (i + 1) * ph; ++y)
              for (int x = j * pw; x < (j + 1) * pw; ++x) mx = std::max(mx, p.tokens.value().at({b, y * gw + x, k}));
            c.expect(pooled.at({b, i * grid.w + j, k}) == mx, "patch max");
          }

    const std::vector<int> ratios{1 + n % 7, 2 + n % 11, 3 + n % 13};
    const auto levels = transformer::pool_pyramid(p, ratios);
    auto& a = checks["pool_pyramid"];
    for (std::size_t r = 0; r < ratios.size(); ++r) {
      const auto [oh, ow] = transformer::pyramid_grid(gh, gw, ratios[r]);
      const auto& got = levels[r].value();
      a.expect(got.shape() == Shape{batch, oh * ow, ch}, "level shape");
      if (a.failures) break;
      for (int b = 0; b < batch; ++b)
        for (int i = 0; i < oh; ++i)
          for (int j = 0; j < ow; ++j)
            for (int k = 0; k < ch; ++k) {
              double s = 0;
              int cnt = 0;
              for (int y = i * gh / oh; y < ((i + 1) * gh + oh - 1) / oh; ++y)
                for (int x = j * gw / ow; x < ((j + 1) * gw + ow - 1) / ow; ++x) {
                  s += p.tokens.value().at({b, y * gw + x, k});
                  ++cnt;
                }
              a.near(got.at({b, i * ow + j, k}), s / cnt, 0, 1e-6, "bin average");
            }
    }

    MultiLevelFeatures<float> f1, f2;
    for (int l = 0; l < 4; ++l) {
      const Shape s{batch, 1 + (n + l) % 5, std::max(1, gh >> l), std::max(1, gw >> l)};
      f1.levels[l] = Var<float>(uniform<float>(s, rng));
      f2.levels[l] = Var<float>(uniform<float>(s, rng));
    }
    const auto diff = encoder::temporal_difference(f1, f2);
    auto& t = checks["temporal_difference"];
    for (int l = 0; l < 4; ++l) {
      const auto& x1 = f1.levels[l].value();
      const auto& x2 = f2.levels[l].value();
      const auto& got = diff.levels[l].value();
      t.expect(got.shape() == x1.shape(), "level shape");
      for (std::size_t i = 0; i < x1.size() && !t.failures; ++i) t.expect(got[i] == x1[i] - x2[i], "difference");
    }
  }

  for (int n = 0; n < kInstances; ++n) {
    const int h = side(rng), w = side(rng);
    const auto pred = random_mask(h, w, 0.3, rng), gt = random_mask(h, w, 0.3, rng);
    metrics::ConfusionCounts want;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (pred[i] && gt[i]) ++want.tp;
      else if (pred[i]) ++want.fp;
      else if (gt[i]) ++want.fn;
      else ++want.tn;
    }
    checks["accumulate_confusion"].expect(metrics::accumulate_confusion(pred, gt) == want, "counts");

    std::uniform_int_distribution<std::uint64_t> cnt(1, 2000);
    const metrics::ConfusionCounts c{cnt(rng), cnt(rng), cnt(rng), cnt(rng)};
    const auto r = metrics::compute_metrics(c);
    const double tp = c.tp, fp = c.fp, fn = c.fn, tn = c.tn, total = tp + fp + fn + tn;
    const double pre = tp / (tp + fp), rec = tp / (tp + fn), oa = (tp + tn) / total;
    const double pe = ((tp + fp) * (tp + fn) + (fn + tn) * (fp + tn)) / (total * total);
    auto& m = checks["compute_metrics"];
    m.near(r.precision, pre, 0, 1e-6, "precision");
    m.near(r.recall, rec, 0, 1e-6, "recall");
    m.near(r.f1, 2 * pre * rec / (pre + rec), 0, 1e-6, "f1");
    m.near(r.iou, tp / (tp + fp + fn), 0, 1e-6, "iou");
    m.near(r.overall_accuracy, oa, 0, 1e-6, "oa");
    m.near(r.kappa, (oa - pe) / (1 - pe), 1e-12, 1e-6, "kappa");
  }

  const double elapsed = seconds_since(t0);
  std::string detail;
  pass = elapsed < 60;
  for (const auto& [name, c] : checks) {
    pass = pass && c.failures == 0;
    if (c.failures) detail += " " + name + ": " + c.summary() + ";";
  }
  return std::to_string(checks.size()) + " functions x " + std::to_string(kInstances) + " instances, " +
         fmt("%.1f s", elapsed) + (detail.empty() ? "" : ";" + detail);
}

// ---------------------------------------------------------------------------
// [2] loss oracles

template <typename T>
void loss_cases(Check& c, const std::string& tag) {
  using supervision::loss_pcl;
  using supervision::loss_sp;
  using supervision::loss_upcl;
  auto var = [](Shape s, std::vector<T> v) { return Var<T>(Tensor<T>(std::move(s), v)); };
  const Tensor<T> y10({1, 1, 1, 2}, std::vector<T>{1, 0});
  const double hand = -(std::log(0.9) + std::log(0.8)) / 2;
  c.near(loss_pcl(var({1, 1, 1, 2}, {T(0.9), T(0.2)}), y10).value().item(), hand, 1e-6, 0, tag + " pcl [0.9,0.2]");
  c.near(loss_sp(var({1, 1, 1, 2}, {T(0.9), T(0.2)}), y10).value().item(), hand, 1e-6, 0, tag + " sp [0.9,0.2]");
  const Tensor<T> half({2, 1, 4, 4}, T(0.5));
  std::mt19937_64 rng(5);
  Tensor<T> y = uniform<T>({2, 1, 4, 4}, rng, 0, 1);
  for (auto& v : y.values()) v = v < T(0.5) ? T(0) : T(1);
  c.near(loss_pcl(Var<T>(half), y).value().item(), std::log(2.0), 1e-6, 0, tag + " pcl uniform");
  c.near(loss_sp(Var<T>(half), y).value().item(), std::log(2.0), 1e-6, 0, tag + " sp uniform");
  c.expect(loss_pcl(Var<T>(y), y).value().item() <= 1e-5, tag + " pcl perfect");

  const T upcl = loss_upcl(var({1, 1, 2, 2}, {T(0.5), 0, 0, T(0.25)}), Tensor<T>({1, 1, 2, 2}), {1, 1}).value().item();
  c.expect(upcl == T(0.1875), tag + " upcl hand case " + fmt("%.9g", upcl));
  c.expect(loss_upcl(Var<T>(y), y, {1, 1}).value().item() == T(0), tag + " upcl G=Y");
  const Tensor<T> ones({2, 1, 4, 4}, T(1));
  c.expect(loss_upcl(Var<T>(uniform<T>({2, 1, 4, 4}, rng, 0, 1)), ones, {2, 2}).value().item() == T(0),
           tag + " upcl Y=1");
}

std::string loss_suite(bool& pass) {
  Check c;
  loss_cases<float>(c, "float");
  loss_cases<double>(c, "double");

  // decomposition identity on random bundles
  std::mt19937_64 rng(6);
  double worst = 0;
  for (int n = 0; n < 100; ++n) {
    const int blocks = 1 + n % 4;
    const data::PatchSize patch{4, 4};
    supervision::LossTargets<double> t{patch, Tensor<double>({2, 1, 4, 4}), Tensor<double>({2, 1, 16, 16})};
    for (auto& v : t.y_local.values()) v = std::bernoulli_distribution(0.5)(rng);
    for (int b = 0; b < 2; ++b)
      for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) t.y_expanded.at({b, 0, y, x}) = t.y_local.at({b, 0, y / 4, x / 4});
    supervision::ChangeMap<double> g{Var<double>(uniform<double>({2, 1, 16, 16}, rng, 0, 1))};
    std::vector<Var<double>> q;
    for (int s = 0; s < blocks; ++s) q.emplace_back(uniform<double>({2, 1, 4, 4}, rng, 0, 1));
    const auto bundle = supervision::total_loss(g, q, t, TrainConfig{});
    double sum = bundle.l_pcl.value().item() + bundle.l_upcl.value().item();
    for (const auto& l : bundle.l_sp) sum += l.value().item();
    worst = std::max(worst, std::abs(bundle.total.value().item() - sum));
    c.near(bundle.total.value().item(), sum, 1e-7, 0, "decomposition");
    c.expect(bundle.l_pcl.value().item() >= 0 && bundle.l_upcl.value().item() >= 0, "non-negative");
  }
  pass = c.failures == 0;
  return "hand cases in float and double, 100 decompositions (max deviation " + fmt("%.2e", worst) + ")" +
         (pass ? "" : "; " + c.summary());
}

// ---------------------------------------------------------------------------
// [3] attention invariants

template <typename T>
void zero_linear(nn::Linear<T>& l) {
  l.weight().mutable_value().fill(T(0));
  if (l.bias().defined()) l.bias().mutable_value().fill(T(0));
}

template <typename T>
double simplex_error(const Tensor<T>& w) {
  const int nk = w.dim(-1);
  double worst = 0;
  for (std::size_t r = 0; r < w.size() / nk; ++r) {
    double s = 0;
    for (int j = 0; j < nk; ++j) {
      if (w[r * nk + j] < 0) return std::numeric_limits<double>::infinity();
      s += w[r * nk + j];
    }
    worst = std::max(worst, std::abs(s - 1));
  }
  return worst;
}

template <typename T>
void attention_cases(Check& c, const std::string& tag, double& worst_simplex, double& worst_identity) {
  std::mt19937_64 rng(7);
  for (int n = 0; n < 20; ++n) {
    const int heads = 1 << (n % 3), ch = 8 * (1 + n % 2), nm = 1 + n % 9, grid = 4 * (1 + n % 3);
    transformer::BlockOptions opts{{heads, n % 4 != 3}, {2, 3}, n % 5 == 4, n % 3 != 1, n % 4 != 1};
    nn::ParameterStore<T> store;
    nn::Rng init(n);
    transformer::BidirectionalAttentionBlock<T> block(store, "bab0", ch, 4, opts, init);
    TokenMap<T> p{Var<T>(uniform<T>({2, grid * grid, ch}, rng, -2, 2)), grid, grid};
    MemoryState<T> m{Var<T>(uniform<T>({2, nm, ch}, rng, -2, 2))};
    transformer::BlockTrace<T> trace;
    block.forward(p, m, {grid / 2, grid / 2}, 0, &trace);
    const double e = std::max(simplex_error(trace.p2m_weights), simplex_error(trace.m2p_weights));
    worst_simplex = std::max(worst_simplex, e);
    c.expect(e <= 1e-6, tag + " simplex rows, case " + std::to_string(n));

    for (auto* l : {&block.p2m().o, &block.m2p().o, &block.ffn_memory().project, &block.ffn_tokens().project})
      zero_linear(*l);
    const auto out = block.forward(p, m, {grid / 2, grid / 2});
    double d = 0;
    for (std::size_t i = 0; i < p.tokens.value().size(); ++i)
      d = std::max(d, std::abs(double(out.tokens.tokens.value()[i] - p.tokens.value()[i])));
    for (std::size_t i = 0; i < m.prototypes.value().size(); ++i)
      d = std::max(d, std::abs(double(out.memory.prototypes.value()[i] - m.prototypes.value()[i])));
    worst_identity = std::max(worst_identity, d);
    c.expect(d <= 1e-6, tag + " residual identity, case " + std::to_string(n));
  }
}

std::string attention_suite(bool& pass) {
  const auto t0 = Clock::now();
  Check c;
  double simplex = 0, identity = 0, closed = 0;
  attention_cases<float>(c, "float", simplex, identity);
  attention_cases<double>(c, "double", simplex, identity);

  // N_m = 1: every token attends to the single row with weight 1
  std::mt19937_64 rng(8);
  for (int n = 0; n < 20; ++n) {
    const int ch = 4 + 4 * (n % 4);
    nn::ParameterStore<double> store;
    nn::Rng init(100 + n);
    transformer::BidirectionalAttentionBlock<double> block(store, "bab0", ch, 4, {}, init);
    auto& a = block.m2p();
    a.v.bias().mutable_value() = uniform<double>({ch}, rng);
    a.o.bias().mutable_value() = uniform<double>({ch}, rng);
    TokenMap<double> p{Var<double>(uniform<double>({2, 16, ch}, rng)), 4, 4};
    const Tensor<double> mem = uniform<double>({2, 1, ch}, rng);
    const bool pre_norm = n % 2;
    const auto out = transformer::m2p_attention(p, MemoryState<double>{Var<double>(mem)}, a, {1 + n % 2, pre_norm})
                         .tokens.value();
    // expected: P + W_o (W_v LN(m) + b_v) + b_o, identical for every token
    for (int b = 0; b < 2; ++b) {
      std::vector<double> src(ch), value(ch), delta(ch);
      if (pre_norm) {
        double mean = 0, var = 0;
        for (int k = 0; k < ch; ++k) mean += mem.at({b, 0, k});
        mean /= ch;
        for (int k = 0; k < ch; ++k) var += (mem.at({b, 0, k}) - mean) * (mem.at({b, 0, k}) - mean);
        var /= ch;
        for (int k = 0; k < ch; ++k) src[k] = (mem.at({b, 0, k}) - mean) / std::sqrt(var + 1e-5);
      } else {
        for (int k = 0; k < ch; ++k) src[k] = mem.at({b, 0, k});
      }
      for (int j = 0; j < ch; ++j) {
        value[j] = a.v.bias().value()[j];
        for (int i = 0; i < ch; ++i) value[j] += src[i] * a.v.weight().value().at({i, j});
      }
      for (int j = 0; j < ch; ++j) {
        delta[j] = a.o.bias().value()[j];
        for (int i = 0; i < ch; ++i) delta[j] += value[i] * a.o.weight().value().at({i, j});
      }
      for (int t = 0; t < 16; ++t)
        for (int j = 0; j < ch; ++j) {
          const double want = p.tokens.value().at({b, t, j}) + delta[j];
          closed = std::max(closed, std::abs(out.at({b, t, j}) - want));
          c.near(out.at({b, t, j}), want, 1e-6, 0, "N_m=1 closed form");
        }
    }
  }
  const double elapsed = seconds_since(t0);
  pass = c.failures == 0 && elapsed < 60;
  return "max simplex error " + fmt("%.2e", simplex) + ", identity error " + fmt("%.2e", identity) +
         ", closed-form error " + fmt("%.2e", closed) + ", " + fmt("%.1f s", elapsed) +
         (c.failures ? "; " + c.summary() : "");
}

// ---------------------------------------------------------------------------
// [4] finite-difference gradient check

std::string gradient_check(bool& pass) {
  const auto t0 = Clock::now();
  TrainConfig cfg;
  cfg.channels = 16;
  cfg.memory_length = 8;
  cfg.num_blocks = 1;
  cfg.patch_h = cfg.patch_w = 16;
  MSFormerModel<double> model(cfg);
  std::mt19937_64 rng(9);
  const Tensor<double> x1 = uniform<double>({1, 3, 64, 64}, rng, 0, 1);
  const Tensor<double> x2 = uniform<double>({1, 3, 64, 64}, rng, 0, 1);
  supervision::LossTargets<double> targets{{16, 16}, Tensor<double>({1, 1, 4, 4}), Tensor<double>({1, 1, 64, 64})};
  for (int i = 0; i < 16; ++i) targets.y_local[i] = (i * 7) % 3 == 0;
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) targets.y_expanded.at({0, 0, y, x}) = targets.y_local.at({0, 0, y / 16, x / 16});

  auto loss = [&] {
    auto out = model.forward(x1, x2, false);
    return supervision::total_loss(out.change, out.aux, targets, cfg).total;
  };
  model.store().clear_grads();
  loss().backward();

  Check c;
  double worst = 0;
  std::size_t probed = 0;
  for (const char* name : {"memory", "bab0.p2m.q.weight"}) {
    Var<double> p = model.store().find(name);
    const Tensor<double> analytic = p.grad();
    Tensor<double>& v = p.mutable_value();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double saved = v[i], h = 1e-6;
      v[i] = saved + h;
      const double up = loss().value().item();
      v[i] = saved - h;
      const double down = loss().value().item();
      v[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double err = std::abs(numeric - analytic[i]);
      worst = std::max(worst, err / (1e-4 + 1e-2 * std::abs(numeric)));
      c.near(analytic[i], numeric, 1e-4, 1e-2, std::string(name) + "[" + std::to_string(i) + "]");
      ++probed;
    }
  }
  const double elapsed = seconds_since(t0);
  pass = c.failures == 0 && elapsed < 300;
  return std::to_string(probed) + " entries of memory and bab0.p2m.q.weight, worst error/tolerance " +
         fmt("%.3f", worst) + ", " + fmt("%.1f s", elapsed) + (c.failures ? "; " + c.summary() : "");
}

// ---------------------------------------------------------------------------
// training criteria

TrainConfig e2e_config(int patch, std::uint64_t seed) {
  TrainConfig cfg;
  cfg.patch_h = cfg.patch_w = patch;
  cfg.channels = 64;
  cfg.memory_length = 32;
  cfg.num_blocks = 2;
  cfg.max_iteration = 2000;
  cfg.batch_size = 8;
  cfg.seed = seed;
  cfg.checkpoint_every = cfg.max_iteration;
  cfg.log_every = 500;
  return cfg;
}

struct TrainedRun {
  metrics::MetricsReport report;
  double seconds = 0;
};

class Bench {
 public:
  explicit Bench(fs::path root) : root_(std::move(root)) {}

  const fs::path& dataset() {
    if (!ready_) {
      synth::SynthOptions o;
      o.n_samples = 200;
      o.image_size = 64;
      o.seed = 0;
      o.overwrite = true;
      synth::synth_dataset(root_, o);
      test_ = data::load_dataset(root_, "test");
      ready_ = true;
    }
    return root_;
  }

  const TrainedRun& run(const TrainConfig& cfg, const std::string& label) {
    const std::string key = to_json(cfg).dump();
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;
    const auto t0 = Clock::now();
    training::RunOptions opts;
    opts.dataset_root = dataset();
    opts.on_log = [&](const training::LogEntry& e) {
      std::fprintf(stderr, "  [%s] iter %d loss %.4f\n", label.c_str(), e.iteration, e.total);
    };
    const auto result = training::run_training(cfg, opts);
    MSFormerModel<float> model(cfg);
    training::restore(model, nullptr, result.final_checkpoint);
    TrainedRun r{training::evaluate(model, test_, {}), seconds_since(t0)};
    std::fprintf(stderr, "  [%s] F1 %.4f kappa %.4f (%.0f s)\n", label.c_str(), r.report.f1, r.report.kappa, r.seconds);
    return cache_.emplace(key, r).first->second;
  }

  const std::vector<data::BiTemporalSample>& test_split() {
    dataset();
    return test_;
  }

 private:
  fs::path root_;
  bool ready_ = false;
  std::vector<data::BiTemporalSample> test_;
  std::map<std::string, TrainedRun> cache_;
};

// [5]
std::string end_to_end(Bench& bench, bool& pass) {
  const auto& r = bench.run(e2e_config(8, 0), "patch 8 seed 0");
  pass = r.report.f1 >= 0.80 && r.report.kappa >= 0.75 && r.seconds <= 30 * 60;
  return "F1 " + fmt("%.4f", r.report.f1) + " (>= 0.80), kappa " + fmt("%.4f", r.report.kappa) + " (>= 0.75), " +
         fmt("%.1f min", r.seconds / 60) + " (<= 30)";
}

// [6]
std::string patch_monotonicity(Bench& bench, bool& pass) {
  std::map<int, double> mean_f1;
  std::string per_seed;
  for (int patch : {8, 16, 32}) {
    double sum = 0;
    for (std::uint64_t seed : {0, 1, 2}) {
      const auto& r = bench.run(e2e_config(patch, seed), "patch " + std::to_string(patch) + " seed " +
                                                              std::to_string(seed));
      sum += r.report.f1;
    }
    mean_f1[patch] = sum / 3;
  }
  pass = mean_f1[8] >= mean_f1[16] - 0.03 && mean_f1[16] >= mean_f1[32] - 0.03;
  return "mean F1 over seeds 0-2: patch 8 " + fmt("%.4f", mean_f1[8]) + ", patch 16 " + fmt("%.4f", mean_f1[16]) +
         ", patch 32 " + fmt("%.4f", mean_f1[32]) + " (tolerance 0.03 per step)";
}

// [7]
std::string ablation_matrix(Bench& bench, bool& pass) {
  const fs::path root = bench.dataset();
  const auto train = data::load_dataset(root, "train");
  Check c;
  std::string ids;
  std::set<std::string> distinct;
  for (const auto& row : ablation_variants()) {
    TrainConfig cfg = row.apply(e2e_config(8, 0));
    distinct.insert(to_json(cfg).dump());
    try {
      std::vector<data::BiTemporalSample> samples(train.begin(), train.begin() + cfg.batch_size);
      auto labels = training::load_patch_labels(root, "train", samples, {cfg.patch_h, cfg.patch_w});
      training::Trainer t(cfg, samples, labels);
      const auto e = t.step();
      std::size_t reached = 0;
      for (const auto& p : t.model().store().parameters()) reached += p.has_grad();
      c.expect(std::isfinite(e.total) && reached > 0, row.id + " non-finite loss or no gradients");
      ids += (ids.empty() ? "" : " ") + row.id;
    } catch (const std::exception& ex) {
      c.expect(false, row.id + ": " + ex.what());
    }
  }
  c.expect(distinct.size() == 9, "rows are not distinct");

  const AblationVariant* direct = nullptr;
  for (const auto& row : ablation_variants())
    if (row.apply(TrainConfig{}).ablation.direct_sup) direct = &row;
  c.expect(direct != nullptr, "no direct supervision row");
  double f1_direct = 1, f1_pss = 0;
  if (direct) {
    f1_pss = bench.run(e2e_config(8, 0), "patch 8 seed 0").report.f1;
    f1_direct = bench.run(direct->apply(e2e_config(8, 0)), "direct supervision").report.f1;
    c.expect(f1_direct < f1_pss, "direct supervision is not worse than PSS");
  }
  pass = c.failures == 0;
  return "forward+backward ok for " + ids + "; F1 direct supervision " + fmt("%.4f", f1_direct) +
         " < PSS " + fmt("%.4f", f1_pss) + (c.failures ? "; " + c.summary() : "");
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    if (std::string(argv[i]) == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string tok; std::getline(ss, tok, ',');) only.insert(std::stoi(tok));
    }
  }
  Bench bench(fs::temp_directory_path() / "msformer_acceptance_data");

  struct Criterion {
    int id;
    std::string name;
    std::function<std::string(bool&)> run;
  };
  const std::vector<Criterion> criteria{
      {1, "oracle equivalence suite", oracle_suite},
      {2, "loss oracle suite", loss_suite},
      {3, "attention invariant suite", attention_suite},
      {4, "finite-difference gradient check", gradient_check},
      {5, "synthetic end-to-end", [&](bool& p) { return end_to_end(bench, p); }},
      {6, "patch-size monotonicity", [&](bool& p) { return patch_monotonicity(bench, p); }},
      {7, "ablation matrix", [&](bool& p) { return ablation_matrix(bench, p); }},
  };

  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    bool pass = false;
    std::string detail;
    try {
      detail = c.run(pass);
    } catch (const std::exception& e) {
      pass = false;
      detail = std::string("exception: ") + e.what();
    }
    failed += !pass;
    std::printf("%s [%d] %s: %s\n", pass ? "PASS" : "FAIL", c.id, c.name.c_str(), detail.c_str());
    std::fflush(stdout);
  }
  return failed ? 1 : 0;
}
