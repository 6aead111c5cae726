#include <cmath>
#include <limits>
#include <random>

#include <gtest/gtest.h>

#include "msformer/memory_transformer.hpp"
#include "test_util.hpp"

using namespace msformer;
using namespace msformer::transformer;
using msformer::testing::gradient_matches;
using msformer::testing::probe;
using msformer::testing::random_tensor;

namespace {

template <typename T>
TokenMap<T> random_tokens(int batch, int gh, int gw, int c, std::mt19937_64& rng) {
  return {Var<T>(random_tensor<T>({batch, gh * gw, c}, rng)), gh, gw};
}

template <typename T>
void zero(nn::Linear<T>& l) {
  l.weight().mutable_value().fill(T(0));
  if (l.bias().defined()) l.bias().mutable_value().fill(T(0));
}

template <typename T>
void identity(nn::Linear<T>& l) {
  Tensor<T>& w = l.weight().mutable_value();
  w.fill(T(0));
  for (int i = 0; i < w.dim(0); ++i) w.at({i, i}) = T(1);
  if (l.bias().defined()) l.bias().mutable_value().fill(T(0));
}

struct BlockFixture {
  nn::ParameterStore<double> store;
  nn::Rng rng{3};
  BidirectionalAttentionBlock<double> block;

  explicit BlockFixture(int c, BlockOptions options = {})
      : block(store, "bab0", c, 4, std::move(options), rng) {}
};

void expect_simplex(const Tensor<double>& w) {
  const int nk = w.dim(-1);
  for (std::size_t r = 0; r < w.size() / nk; ++r) {
    double s = 0;
    for (int j = 0; j < nk; ++j) {
      ASSERT_GE(w[r * nk + j], 0.0);
      s += w[r * nk + j];
    }
    ASSERT_NEAR(s, 1.0, 1e-6);
  }
}

}  // namespace

TEST(Memory, InitIsSeededAndValidated) {
  auto a = init_memory<float>(128, 128, 5), b = init_memory<float>(128, 128, 5), c = init_memory<float>(128, 128, 6);
  EXPECT_EQ(a.prototypes.shape(), (Shape{128, 128}));
  EXPECT_TRUE(a.prototypes.value() == b.prototypes.value());
  EXPECT_FALSE(a.prototypes.value() == c.prototypes.value());
  EXPECT_TRUE(a.prototypes.requires_grad());
  double mean = 0, sq = 0;
  for (float v : a.prototypes.value().values()) mean += v, sq += double(v) * v;
  mean /= a.prototypes.value().size();
  EXPECT_NEAR(mean, 0.0, 1e-3);
  EXPECT_NEAR(std::sqrt(sq / a.prototypes.value().size()), 0.02, 1e-3);
  EXPECT_THROW(init_memory<float>(0, 16, 0), std::invalid_argument);
}

TEST(Pooling, RepresentativeExamples) {
  TokenMap<double> constant{Var<double>(Tensor<double>({1, 16, 3}, 0.25)), 4, 4};
  auto pooled_constant = pool_representative(constant, {2, 2});
  for (double v : pooled_constant.value().values()) EXPECT_EQ(v, 0.25);

  Tensor<double> single({1, 16, 1});
  single.at({0, 0 * 4 + 3, 0}) = 9.0;
  auto pooled = pool_representative(TokenMap<double>{Var<double>(single), 4, 4}, {2, 2}).value();
  EXPECT_EQ(pooled.to_vector(), (std::vector<double>{0, 9, 0, 0}));
  EXPECT_THROW(pool_representative(constant, {3, 3}), std::invalid_argument);
}

TEST(Pooling, RepresentativeMatchesBruteForce) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const int gh = 4 << (trial % 3), gw = 4 << ((trial / 3) % 3), c = 1 + trial % 5;
    const PatchGrid grid{gh >> (1 + trial % 2), gw >> (1 + (trial / 2) % 2)};
    auto p = random_tokens<float>(2, gh, gw, c, rng);
    auto got = pool_representative(p, grid).value();
    const int ph = gh / grid.h, pw = gw / grid.w;
    for (int b = 0; b < 2; ++b)
      for (int i = 0; i < grid.h; ++i)
        for (int j = 0; j < grid.w; ++j)
          for (int k = 0; k < c; ++k) {
            float m = -std::numeric_limits<float>::infinity();
            for (int r = i * ph; r < (i + 1) * ph; ++r)
              for (int q = j * pw; q < (j + 1) * pw; ++q) m = std::max(m, p.tokens.value().at({b, r * gw + q, k}));
            ASSERT_EQ(got.at({b, i * grid.w + j, k}), m);
          }
  }
}

TEST(Pooling, PyramidGridsAndValues) {
  EXPECT_EQ(pyramid_grid(64, 64, 16), (std::pair<int, int>{4, 4}));
  EXPECT_EQ(pyramid_grid(64, 64, 12), (std::pair<int, int>{6, 6}));
  EXPECT_EQ(pyramid_grid(16, 16, 24), (std::pair<int, int>{1, 1}));
  EXPECT_THROW(pyramid_grid(16, 16, 0), std::invalid_argument);

  TokenMap<double> constant{Var<double>(Tensor<double>({1, 64 * 64, 2}, -1.5)), 64, 64};
  auto levels = pool_pyramid(constant, {12, 16, 20, 24});
  ASSERT_EQ(levels.size(), 4u);
  EXPECT_EQ(levels[0].dim(1), 36);
  EXPECT_EQ(levels[1].dim(1), 16);
  EXPECT_EQ(levels[2].dim(1), 16);
  EXPECT_EQ(levels[3].dim(1), 9);
  for (const auto& l : levels)
    for (double v : l.value().values()) EXPECT_DOUBLE_EQ(v, -1.5);
}

TEST(Pooling, PyramidMatchesBinAverages) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const int gh = 8 + trial % 25, gw = 8 + (trial * 7) % 25, ratio = 3 + trial % 10;
    auto p = random_tokens<double>(1, gh, gw, 2, rng);
    auto level = pool_pyramid(p, {ratio})[0].value();
    const auto [oh, ow] = pyramid_grid(gh, gw, ratio);
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j)
        for (int k = 0; k < 2; ++k) {
          double s = 0;
          int n = 0;
          for (int r = i * gh / oh; r < ((i + 1) * gh + oh - 1) / oh; ++r)
            for (int q = j * gw / ow; q < ((j + 1) * gw + ow - 1) / ow; ++q) s += p.tokens.value().at({0, r * gw + q, k}), ++n;
          ASSERT_NEAR(level.at({0, i * ow + j, k}), s / n, 1e-12 * std::max(1.0, std::abs(s / n)));
        }
  }
}

TEST(AugmentMemory, RowLayout) {
  const int c = 8, n_m = 5;
  BlockFixture f(c, BlockOptions{{1, true}, {2, 4}, false, true, true});
  std::mt19937_64 rng(4);
  auto p = random_tokens<double>(2, 8, 8, c, rng);
  MemoryState<double> m{Var<double>(random_tensor<double>({2, n_m, c}, rng))};
  auto aug = f.block.augment_memory(m, pool_representative(p, {4, 4}), pool_pyramid(p, {2, 4}));
  EXPECT_EQ(aug.prototypes.dim(1), n_m + 16 + 16 + 4);
  EXPECT_EQ(aug.memory_rows, n_m);
  EXPECT_EQ(aug.max_rows, 16);
  EXPECT_EQ(aug.pyramid_rows, (std::vector<int>{16, 4}));
  const auto& a = aug.prototypes.value();
  for (int b = 0; b < 2; ++b)
    for (int r = 0; r < n_m; ++r)
      for (int k = 0; k < c; ++k) ASSERT_EQ(a.at({b, r, k}), m.prototypes.value().at({b, r, k}));

  zero(f.block.conv_max());
  for (auto& l : f.block.conv_pyramid()) zero(l);
  auto zeros = f.block.augment_memory(m, Var<double>(Tensor<double>({2, 16, c})),
                                      {Var<double>(Tensor<double>({2, 16, c})), Var<double>(Tensor<double>({2, 4, c}))});
  for (int b = 0; b < 2; ++b)
    for (int r = n_m; r < zeros.prototypes.dim(1); ++r)
      for (int k = 0; k < c; ++k) ASSERT_EQ(zeros.prototypes.value().at({b, r, k}), 0.0);

  EXPECT_THROW(f.block.augment_memory(m, Var<double>(Tensor<double>({2, 16, c + 1})), {}), std::invalid_argument);
}

TEST(Attention, RowsAreSimplexBothDirections) {
  const int c = 8;
  BlockFixture f(c, BlockOptions{{2, true}, {2, 3}, false, true, true});
  std::mt19937_64 rng(5);
  auto p = random_tokens<double>(2, 8, 8, c, rng);
  MemoryState<double> m{Var<double>(random_tensor<double>({2, 6, c}, rng, -3, 3))};
  BlockTrace<double> trace;
  f.block.forward(p, m, {4, 4}, 0, &trace);
  EXPECT_EQ(trace.p2m_weights.shape(), (Shape{2, 2, 6, trace.augmented.prototypes.dim(1)}));
  EXPECT_EQ(trace.m2p_weights.shape(), (Shape{2, 2, 64, 6}));
  expect_simplex(trace.p2m_weights);
  expect_simplex(trace.m2p_weights);
}

TEST(Attention, ZeroOutputProjectionIsIdentity) {
  const int c = 8;
  BlockFixture f(c);
  std::mt19937_64 rng(6);
  Var<double> query(random_tensor<double>({2, 5, c}, rng)), context(random_tensor<double>({2, 7, c}, rng));
  zero(f.block.p2m().o);
  EXPECT_TRUE(cross_attention(query, context, f.block.p2m(), {}).value() == query.value());
  auto p = random_tokens<double>(2, 4, 4, c, rng);
  MemoryState<double> m{context};
  zero(f.block.m2p().o);
  EXPECT_TRUE(m2p_attention(p, m, f.block.m2p(), {}).tokens.value() == p.tokens.value());
}

TEST(Attention, SingleQuerySingleKeyClosedForm) {
  const int c = 6;
  BlockFixture f(c);
  auto& params = f.block.p2m();
  for (auto* l : {&params.q, &params.k, &params.v, &params.o}) identity(*l);
  std::mt19937_64 rng(7);
  MemoryState<double> m{Var<double>(random_tensor<double>({1, 1, c}, rng))};
  AugmentedMemory<double> hat{Var<double>(random_tensor<double>({1, 1, c}, rng)), 1, 0, {}};
  Tensor<double> w;
  auto out = p2m_attention(m, hat, params, {1, false}, &w).prototypes.value();
  EXPECT_EQ(w.item(), 1.0);
  for (int k = 0; k < c; ++k) EXPECT_NEAR(out[k], m.prototypes.value()[k] + hat.prototypes.value()[k], 1e-12);
}

TEST(Attention, SingleMemoryRowClosedForm) {
  const int c = 6;
  BlockFixture f(c);
  auto& params = f.block.m2p();
  std::mt19937_64 rng(8);
  for (auto* l : {&params.v, &params.o}) l->bias().mutable_value() = random_tensor<double>({c}, rng);
  auto p = random_tokens<double>(2, 3, 3, c, rng);
  Tensor<double> mt = random_tensor<double>({2, 1, c}, rng);
  Tensor<double> w;
  auto out = m2p_attention(p, MemoryState<double>{Var<double>(mt)}, params, {1, false}, &w).tokens.value();
  for (double v : w.values()) EXPECT_EQ(v, 1.0);
  const auto& wv = params.v.weight().value();
  const auto& bv = params.v.bias().value();
  const auto& wo = params.o.weight().value();
  const auto& bo = params.o.bias().value();
  for (int b = 0; b < 2; ++b) {
    std::vector<double> value(c), delta(c);
    for (int j = 0; j < c; ++j) {
      value[j] = bv[j];
      for (int i = 0; i < c; ++i) value[j] += mt.at({b, 0, i}) * wv.at({i, j});
    }
    for (int j = 0; j < c; ++j) {
      delta[j] = bo[j];
      for (int i = 0; i < c; ++i) delta[j] += value[i] * wo.at({i, j});
    }
    for (int n = 0; n < 9; ++n)
      for (int j = 0; j < c; ++j) EXPECT_NEAR(out.at({b, n, j}), p.tokens.value().at({b, n, j}) + delta[j], 1e-12);
  }
}

TEST(FeedForward, IdentityEquivarianceAndGradient) {
  const int c = 8;
  BlockFixture f(c);
  std::mt19937_64 rng(9);
  auto& ffn = f.block.ffn_tokens();
  ffn.expand.bias().mutable_value() = random_tensor<double>({4 * c}, rng);
  Var<double> x(random_tensor<double>({1, 8, c}, rng), true);

  auto y = feed_forward(x, ffn, true).value();
  // permuting tokens permutes the outputs
  std::vector<int> perm{3, 0, 7, 1, 6, 2, 5, 4};
  Tensor<double> xp({1, 8, c});
  for (int n = 0; n < 8; ++n)
    for (int k = 0; k < c; ++k) xp.at({0, n, k}) = x.value().at({0, perm[n], k});
  auto yp = feed_forward(Var<double>(xp), ffn, true).value();
  for (int n = 0; n < 8; ++n)
    for (int k = 0; k < c; ++k) EXPECT_EQ(yp.at({0, n, k}), y.at({0, perm[n], k}));

  EXPECT_TRUE(gradient_matches([&] { return probe(feed_forward(x, ffn, true)); }, x, 1e-2, 1e-8));
  EXPECT_TRUE(gradient_matches([&] { return probe(feed_forward(x, ffn, true)); }, ffn.expand.weight(), 1e-2, 1e-8));

  zero(ffn.project);
  EXPECT_TRUE(feed_forward(x, ffn, true).value() == x.value());
}

TEST(Block, ShapesRangeAndPassThrough) {
  const int c = 8;
  BlockFixture f(c, BlockOptions{{1, true}, {3, 5}, false, true, true});
  std::mt19937_64 rng(10);
  auto p = random_tokens<double>(2, 8, 8, c, rng);
  MemoryState<double> m{Var<double>(random_tensor<double>({2, 4, c}, rng))};
  auto out = f.block.forward(p, m, {2, 4});
  EXPECT_EQ(out.tokens.tokens.shape(), p.tokens.shape());
  EXPECT_EQ(out.tokens.grid_h, 8);
  EXPECT_EQ(out.memory.prototypes.shape(), m.prototypes.shape());
  EXPECT_EQ(out.aux.shape(), (Shape{2, 1, 2, 4}));
  for (double v : out.aux.value().values()) EXPECT_TRUE(v > 0 && v < 1);

  for (auto* l : {&f.block.p2m().o, &f.block.m2p().o, &f.block.ffn_memory().project, &f.block.ffn_tokens().project})
    zero(*l);
  auto still = f.block.forward(p, m, {2, 4});
  EXPECT_TRUE(still.tokens.tokens.value() == p.tokens.value());
  EXPECT_TRUE(still.memory.prototypes.value() == m.prototypes.value());
}

TEST(Block, NonFiniteFailsWithBlockIndex) {
  const int c = 4;
  BlockFixture f(c);
  std::mt19937_64 rng(11);
  auto p = random_tokens<double>(1, 4, 4, c, rng);
  Tensor<double> bad = random_tensor<double>({1, 3, c}, rng);
  bad[2] = std::numeric_limits<double>::quiet_NaN();
  try {
    f.block.forward(p, MemoryState<double>{Var<double>(bad)}, {2, 2}, 7);
    FAIL() << "expected failure";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("block 7"), std::string::npos) << e.what();
  }
}

TEST(Block, AblationSwitchesChangeMemoryRows) {
  const int c = 8;
  std::mt19937_64 rng(12);
  auto p = random_tokens<double>(1, 8, 8, c, rng);
  MemoryState<double> m{Var<double>(random_tensor<double>({1, 5, c}, rng))};
  auto rows = [&](BlockOptions o) {
    BlockFixture f(c, o);
    BlockTrace<double> t;
    f.block.forward(p, m, {4, 4}, 0, &t);
    return t.p2m_weights.dim(-1);
  };
  EXPECT_EQ(rows({{1, true}, {4}, false, true, true}), 5 + 16 + 4);
  EXPECT_EQ(rows({{1, true}, {4}, false, false, true}), 5 + 4);
  EXPECT_EQ(rows({{1, true}, {4}, false, true, false}), 5 + 16);
  EXPECT_EQ(rows({{1, true}, {4}, true, true, true}), 5);
}

TEST(Transformer, StackComposition) {
  TrainConfig cfg;
  cfg.channels = 8;
  cfg.memory_length = 4;
  cfg.num_blocks = 3;
  cfg.pooling_ratios = {2, 4};
  nn::ParameterStore<double> store;
  nn::Rng rng(13);
  MemoryTransformer<double> t(store, cfg, rng);
  EXPECT_EQ(t.memory_bank().shape(), (Shape{4, 8}));
  std::mt19937_64 data_rng(14);
  auto p = random_tokens<double>(2, 8, 8, 8, data_rng);
  auto out = t.forward(p, {2, 2});
  EXPECT_EQ(out.aux.size(), 3u);

  // one block of the stack equals a direct block call
  auto m0 = t.initial_memory(2);
  auto direct = t.blocks()[0].forward(p, m0, {2, 2});
  cfg.num_blocks = 1;
  nn::ParameterStore<double> store1;
  nn::Rng rng1(13);
  MemoryTransformer<double> t1(store1, cfg, rng1);
  auto single = t1.forward(p, t1.initial_memory(2), {2, 2});
  EXPECT_TRUE(single.tokens.tokens.value() == direct.tokens.tokens.value());
  EXPECT_TRUE(single.aux[0].value() == direct.aux.value());

  for (auto& b : t.blocks())
    for (auto* l : {&b.p2m().o, &b.m2p().o, &b.ffn_memory().project, &b.ffn_tokens().project}) zero(*l);
  auto id = t.forward(p, m0, {2, 2});
  EXPECT_TRUE(id.tokens.tokens.value() == p.tokens.value());
  EXPECT_TRUE(id.memory.prototypes.value() == m0.prototypes.value());
}

TEST(Transformer, MemoryLengthsBuildFromConfigOnly) {
  for (int n_m : {64, 128, 192}) {
    TrainConfig cfg;
    cfg.channels = 8;
    cfg.memory_length = n_m;
    cfg.num_blocks = 1;
    nn::ParameterStore<float> store;
    nn::Rng rng(15);
    MemoryTransformer<float> t(store, cfg, rng);
    std::mt19937_64 data_rng(16);
    auto out = t.forward(random_tokens<float>(1, 16, 16, 8, data_rng), {4, 4});
    EXPECT_EQ(out.memory.prototypes.shape(), (Shape{1, n_m, 8}));
    ops::sum(out.tokens.tokens).backward();
    EXPECT_TRUE(t.memory_bank().has_grad());
  }
}

TEST(Transformer, GradientWithRespectToMemory) {
  TrainConfig cfg;
  cfg.channels = 8;
  cfg.memory_length = 4;
  cfg.num_blocks = 2;
  cfg.pooling_ratios = {2, 3};
  nn::ParameterStore<double> store;
  nn::Rng rng(17);
  MemoryTransformer<double> t(store, cfg, rng);
  std::mt19937_64 data_rng(18);
  auto p = random_tokens<double>(1, 6, 6, 8, data_rng);
  auto f = [&] {
    auto out = t.forward(p, {3, 3});
    return ops::add(probe(out.tokens.tokens), probe(out.aux[1]));
  };
  EXPECT_TRUE(gradient_matches(f, t.memory_bank(), 1e-4, 1e-9));
  EXPECT_TRUE(gradient_matches(f, t.blocks()[0].p2m().k.weight(), 1e-4, 1e-9));
}
