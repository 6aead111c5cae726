#include "msformer/memory_transformer.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace msformer::transformer {
namespace {

template <typename T>
void require_finite(const Var<T>& v, int block, const char* stage) {
  for (T x : v.value().values()) {
    if (!std::isfinite(x)) {
      throw std::runtime_error("non-finite value after " + std::string(stage) + " in attention block " +
                               std::to_string(block));
    }
  }
}

template <typename T>
AttentionParams<T> make_attention(nn::ParameterStore<T>& store, const std::string& prefix, int c, nn::Rng& rng) {
  AttentionParams<T> a;
  a.q = nn::Linear<T>(store, prefix + ".q", c, c, true, rng);
  a.k = nn::Linear<T>(store, prefix + ".k", c, c, true, rng);
  a.v = nn::Linear<T>(store, prefix + ".v", c, c, true, rng);
  a.o = nn::Linear<T>(store, prefix + ".o", c, c, true, rng);
  a.norm_query = nn::LayerNorm<T>(store, prefix + ".norm_query", c);
  a.norm_context = nn::LayerNorm<T>(store, prefix + ".norm_context", c);
  return a;
}

template <typename T>
FeedForwardParams<T> make_ffn(nn::ParameterStore<T>& store, const std::string& prefix, int c, int expansion,
                              nn::Rng& rng) {
  FeedForwardParams<T> f;
  f.norm = nn::LayerNorm<T>(store, prefix + ".norm", c);
  f.expand = nn::Linear<T>(store, prefix + ".fc1", c, c * expansion, true, rng);
  f.project = nn::Linear<T>(store, prefix + ".fc2", c * expansion, c, true, rng);
  return f;
}

}  // namespace

template <typename T>
MemoryState<T> init_memory(int memory_length, int channels, std::uint64_t seed, double stddev) {
  if (memory_length < 1) throw std::invalid_argument("memory length must be >= 1, got " + std::to_string(memory_length));
  if (channels < 1) throw std::invalid_argument("memory channels must be >= 1");
  nn::Rng rng(seed);
  return {Var<T>(nn::normal_tensor<T>({memory_length, channels}, stddev, rng), true)};
}

template <typename T>
Var<T> pool_representative(const TokenMap<T>& p, PatchGrid grid) {
  if (grid.h < 1 || grid.w < 1 || p.grid_h % grid.h != 0 || p.grid_w % grid.w != 0) {
    throw std::invalid_argument("pool_representative: token grid " + std::to_string(p.grid_h) + "x" +
                                std::to_string(p.grid_w) + " cannot be split into " + std::to_string(grid.h) + "x" +
                                std::to_string(grid.w) + " patches");
  }
  return ops::adaptive_max_pool_tokens(p.tokens, p.grid_h, p.grid_w, grid.h, grid.w);
}

std::pair<int, int> pyramid_grid(int grid_h, int grid_w, int ratio) {
  if (ratio <= 0) throw std::invalid_argument("pooling ratio must be positive, got " + std::to_string(ratio));
  return {(grid_h + ratio - 1) / ratio, (grid_w + ratio - 1) / ratio};
}

template <typename T>
std::vector<Var<T>> pool_pyramid(const TokenMap<T>& p, const std::vector<int>& ratios) {
  std::vector<Var<T>> out;
  out.reserve(ratios.size());
  for (int r : ratios) {
    const auto [oh, ow] = pyramid_grid(p.grid_h, p.grid_w, r);
    out.push_back(ops::adaptive_avg_pool_tokens(p.tokens, p.grid_h, p.grid_w, oh, ow));
  }
  return out;
}

template <typename T>
Var<T> cross_attention(const Var<T>& query, const Var<T>& context, const AttentionParams<T>& params,
                       AttentionOptions options, Tensor<T>* weights) {
  const Var<T> qn = options.pre_norm ? params.norm_query(query) : query;
  const Var<T> cn = options.pre_norm ? params.norm_context(context) : context;
  Var<T> mixed = ops::attention(params.q(qn), params.k(cn), params.v(cn), options.heads, weights);
  return ops::add(query, params.o(mixed));
}

template <typename T>
MemoryState<T> p2m_attention(const MemoryState<T>& m, const AugmentedMemory<T>& m_hat, const AttentionParams<T>& params,
                             AttentionOptions options, Tensor<T>* weights) {
  return {cross_attention(m.prototypes, m_hat.prototypes, params, options, weights)};
}

template <typename T>
TokenMap<T> m2p_attention(const TokenMap<T>& p, const MemoryState<T>& m_next, const AttentionParams<T>& params,
                          AttentionOptions options, Tensor<T>* weights) {
  return {cross_attention(p.tokens, m_next.prototypes, params, options, weights), p.grid_h, p.grid_w};
}

template <typename T>
Var<T> feed_forward(const Var<T>& x, const FeedForwardParams<T>& params, bool pre_norm) {
  const Var<T> xn = pre_norm ? params.norm(x) : x;
  return ops::add(x, params.project(ops::gelu(params.expand(xn))));
}

template <typename T>
BidirectionalAttentionBlock<T>::BidirectionalAttentionBlock(nn::ParameterStore<T>& store, const std::string& prefix,
                                                            int channels, int ffn_expansion, BlockOptions options,
                                                            nn::Rng& rng)
    : options_(std::move(options)) {
  conv_max_ = nn::Linear<T>(store, prefix + ".conv_max", channels, channels, true, rng);
  for (std::size_t j = 0; j < options_.pooling_ratios.size(); ++j) {
    conv_pyramid_.emplace_back(store, prefix + ".conv_pyramid" + std::to_string(j), channels, channels, true, rng);
  }
  p2m_ = make_attention(store, prefix + ".p2m", channels, rng);
  ffn_memory_ = make_ffn(store, prefix + ".ffn_memory", channels, ffn_expansion, rng);
  m2p_ = make_attention(store, prefix + ".m2p", channels, rng);
  ffn_tokens_ = make_ffn(store, prefix + ".ffn_tokens", channels, ffn_expansion, rng);
  aux_head_ = nn::Linear<T>(store, prefix + ".aux_head", channels, 1, true, rng);
}

template <typename T>
AugmentedMemory<T> BidirectionalAttentionBlock<T>::augment_memory(const MemoryState<T>& m, const Var<T>& pooled_max,
                                                                  const std::vector<Var<T>>& pooled_pyramid) const {
  const Var<T>& mem = m.prototypes;
  auto check = [&](const Var<T>& v, const char* what) {
    if (v.value().rank() != 3 || v.dim(0) != mem.dim(0) || v.dim(2) != mem.dim(2)) {
      throw std::invalid_argument(std::string("augment_memory: ") + what + " " + shape_str(v.shape()) +
                                  " does not match memory " + shape_str(mem.shape()));
    }
  };
  if (mem.value().rank() != 3) throw std::invalid_argument("augment_memory: memory must be [B, N_m, C]");
  AugmentedMemory<T> out;
  out.memory_rows = mem.dim(1);
  std::vector<Var<T>> rows{mem};
  if (options_.use_max_rows) {
    check(pooled_max, "max-pooled tokens");
    rows.push_back(conv_max_(pooled_max));
    out.max_rows = pooled_max.dim(1);
  }
  if (options_.use_pyramid_rows) {
    if (pooled_pyramid.size() != conv_pyramid_.size()) {
      throw std::invalid_argument("augment_memory: expected " + std::to_string(conv_pyramid_.size()) +
                                  " pyramid levels, got " + std::to_string(pooled_pyramid.size()));
    }
    for (std::size_t j = 0; j < pooled_pyramid.size(); ++j) {
      check(pooled_pyramid[j], "pyramid tokens");
      rows.push_back(conv_pyramid_[j](pooled_pyramid[j]));
      out.pyramid_rows.push_back(pooled_pyramid[j].dim(1));
    }
  }
  out.prototypes = rows.size() == 1 ? mem : ops::concat(rows, 1);
  return out;
}

template <typename T>
BlockOutput<T> BidirectionalAttentionBlock<T>::forward(const TokenMap<T>& p, const MemoryState<T>& m, PatchGrid grid,
                                                       int block_index, BlockTrace<T>* trace) const {
  const int batch = p.tokens.dim(0);
  const Var<T> pooled_max = pool_representative(p, grid);
  Var<T> aux = ops::reshape(ops::sigmoid(aux_head_(pooled_max)), {batch, 1, grid.h, grid.w});

  Tensor<T>* p2m_weights = trace ? &trace->p2m_weights : nullptr;
  Tensor<T>* m2p_weights = trace ? &trace->m2p_weights : nullptr;
  MemoryState<T> memory;
  if (options_.memory_self_attention) {
    memory = {cross_attention(m.prototypes, m.prototypes, p2m_, options_.attention, p2m_weights)};
  } else {
    std::vector<Var<T>> pooled_pyramid;
    if (options_.use_pyramid_rows) pooled_pyramid = pool_pyramid(p, options_.pooling_ratios);
    AugmentedMemory<T> augmented = augment_memory(m, pooled_max, pooled_pyramid);
    memory = p2m_attention(m, augmented, p2m_, options_.attention, p2m_weights);
    if (trace) trace->augmented = std::move(augmented);
  }
  require_finite(memory.prototypes, block_index, "P2M attention");
  memory.prototypes = feed_forward(memory.prototypes, ffn_memory_, options_.attention.pre_norm);

  TokenMap<T> tokens = m2p_attention(p, memory, m2p_, options_.attention, m2p_weights);
  require_finite(tokens.tokens, block_index, "M2P attention");
  tokens.tokens = feed_forward(tokens.tokens, ffn_tokens_, options_.attention.pre_norm);
  require_finite(tokens.tokens, block_index, "feed-forward");
  return {std::move(tokens), std::move(memory), std::move(aux)};
}

template <typename T>
MemoryTransformer<T>::MemoryTransformer(nn::ParameterStore<T>& store, const TrainConfig& cfg, nn::Rng& rng) {
  if (cfg.num_blocks < 1) throw std::invalid_argument("number of attention blocks must be >= 1");
  memory_ = store.add_parameter(
      "memory", init_memory<T>(cfg.memory_length, cfg.channels, rng(), cfg.memory_init_std).prototypes.value());
  BlockOptions options;
  options.attention = {cfg.heads, cfg.pre_norm};
  options.pooling_ratios = cfg.pooling_ratios;
  options.memory_self_attention = cfg.ablation.no_p2m;
  options.use_max_rows = !cfg.ablation.no_mp;
  options.use_pyramid_rows = !cfg.ablation.no_ap;
  for (int s = 0; s < cfg.num_blocks; ++s) {
    blocks_.emplace_back(store, "bab" + std::to_string(s), cfg.channels, cfg.ffn_expansion, options, rng);
  }
}

template <typename T>
MemoryState<T> MemoryTransformer<T>::initial_memory(int batch) const {
  return {ops::broadcast_batch(memory_, batch)};
}

template <typename T>
TransformerOutput<T> MemoryTransformer<T>::forward(const TokenMap<T>& p0, const MemoryState<T>& m0, PatchGrid grid,
                                                   std::vector<BlockTrace<T>>* traces) const {
  TransformerOutput<T> out{p0, m0, {}};
  if (traces) traces->assign(blocks_.size(), BlockTrace<T>{});
  for (std::size_t s = 0; s < blocks_.size(); ++s) {
    BlockOutput<T> b = blocks_[s].forward(out.tokens, out.memory, grid, static_cast<int>(s),
                                          traces ? &(*traces)[s] : nullptr);
    out.tokens = std::move(b.tokens);
    out.memory = std::move(b.memory);
    out.aux.push_back(std::move(b.aux));
  }
  return out;
}

template <typename T>
TransformerOutput<T> MemoryTransformer<T>::forward(const TokenMap<T>& p0, PatchGrid grid) const {
  return forward(p0, initial_memory(p0.tokens.dim(0)), grid);
}

#define MSFORMER_INSTANTIATE_TRANSFORMER(T)                                                                        \
  template MemoryState<T> init_memory<T>(int, int, std::uint64_t, double);                                          \
  template Var<T> pool_representative(const TokenMap<T>&, PatchGrid);                                               \
  template std::vector<Var<T>> pool_pyramid(const TokenMap<T>&, const std::vector<int>&);                           \
  template Var<T> cross_attention(const Var<T>&, const Var<T>&, const AttentionParams<T>&, AttentionOptions,        \
                                  Tensor<T>*);                                                                      \
  template MemoryState<T> p2m_attention(const MemoryState<T>&, const AugmentedMemory<T>&, const AttentionParams<T>&, \
                                        AttentionOptions, Tensor<T>*);                                              \
  template TokenMap<T> m2p_attention(const TokenMap<T>&, const MemoryState<T>&, const AttentionParams<T>&,          \
                                     AttentionOptions, Tensor<T>*);                                                 \
  template Var<T> feed_forward(const Var<T>&, const FeedForwardParams<T>&, bool);                                   \
  template class BidirectionalAttentionBlock<T>;                                                                    \
  template class MemoryTransformer<T>;

MSFORMER_INSTANTIATE_TRANSFORMER(float)
MSFORMER_INSTANTIATE_TRANSFORMER(double)

}  // namespace msformer::transformer
