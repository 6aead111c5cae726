#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "msformer/config.hpp"
#include "msformer/encoder.hpp"

namespace msformer {

/// Memory prototypes. The learnable bank is [N_m, C]; inside a forward pass
/// the per-sample copy is [B, N_m, C].
template <typename T>
struct MemoryState {
  Var<T> prototypes;
};

/// Rows [M; conv(P^m); conv(P^a_1); ...; conv(P^a_n)] along axis 1.
template <typename T>
struct AugmentedMemory {
  Var<T> prototypes;
  int memory_rows = 0;
  int max_rows = 0;
  std::vector<int> pyramid_rows;
};

/// Number of annotation patches along each axis (H / h, W / w).
struct PatchGrid {
  int h = 0;
  int w = 0;
};

namespace transformer {

/// Zero-mean normal draw with the given standard deviation, fixed by `seed`.
template <typename T>
MemoryState<T> init_memory(int memory_length, int channels, std::uint64_t seed, double stddev = 0.02);

/// Per-patch channel-wise max of the token map: [B, grid.h * grid.w, C].
template <typename T>
Var<T> pool_representative(const TokenMap<T>& p, PatchGrid grid);

/// Output grid of one pyramid level: ceil(grid / ratio) on each axis.
std::pair<int, int> pyramid_grid(int grid_h, int grid_w, int ratio);

/// Adaptive average pooling per ratio, each flattened row-major.
template <typename T>
std::vector<Var<T>> pool_pyramid(const TokenMap<T>& p, const std::vector<int>& ratios);

template <typename T>
struct AttentionParams {
  nn::Linear<T> q, k, v, o;
  nn::LayerNorm<T> norm_query, norm_context;
};

template <typename T>
struct FeedForwardParams {
  nn::LayerNorm<T> norm;
  nn::Linear<T> expand, project;
};

struct AttentionOptions {
  int heads = 1;
  bool pre_norm = true;
};

/// query + W_o(softmax(q k^T / sqrt(d)) v) with q from `query` and k, v from
/// `context`. Both streams are layer-normalized first when pre_norm is set.
template <typename T>
Var<T> cross_attention(const Var<T>& query, const Var<T>& context, const AttentionParams<T>& params,
                       AttentionOptions options, Tensor<T>* weights = nullptr);

/// Pixel-to-memory: memory rows query the augmented memory.
template <typename T>
MemoryState<T> p2m_attention(const MemoryState<T>& m, const AugmentedMemory<T>& m_hat, const AttentionParams<T>& params,
                             AttentionOptions options, Tensor<T>* weights = nullptr);

/// Memory-to-pixel: tokens query the updated memory.
template <typename T>
TokenMap<T> m2p_attention(const TokenMap<T>& p, const MemoryState<T>& m_next, const AttentionParams<T>& params,
                          AttentionOptions options, Tensor<T>* weights = nullptr);

/// x + W2 gelu(W1 norm(x)), applied per token.
template <typename T>
Var<T> feed_forward(const Var<T>& x, const FeedForwardParams<T>& params, bool pre_norm);

struct BlockOptions {
  AttentionOptions attention;
  std::vector<int> pooling_ratios{12, 16, 20, 24};
  bool memory_self_attention = false;  // replaces P2M cross-attention
  bool use_max_rows = true;
  bool use_pyramid_rows = true;
};

template <typename T>
struct BlockOutput {
  TokenMap<T> tokens;
  MemoryState<T> memory;
  Var<T> aux;  // Q_s, [B, 1, grid.h, grid.w]
};

/// Intermediate values recorded for inspection.
template <typename T>
struct BlockTrace {
  AugmentedMemory<T> augmented;
  Tensor<T> p2m_weights;
  Tensor<T> m2p_weights;
};

/// pool -> augment -> P2M -> FFN -> M2P -> FFN, plus the auxiliary map Q_s.
template <typename T>
class BidirectionalAttentionBlock {
 public:
  BidirectionalAttentionBlock(nn::ParameterStore<T>& store, const std::string& prefix, int channels, int ffn_expansion,
                              BlockOptions options, nn::Rng& rng);

  AugmentedMemory<T> augment_memory(const MemoryState<T>& m, const Var<T>& pooled_max,
                                    const std::vector<Var<T>>& pooled_pyramid) const;

  BlockOutput<T> forward(const TokenMap<T>& p, const MemoryState<T>& m, PatchGrid grid, int block_index = 0,
                         BlockTrace<T>* trace = nullptr) const;

  AttentionParams<T>& p2m() { return p2m_; }
  AttentionParams<T>& m2p() { return m2p_; }
  FeedForwardParams<T>& ffn_memory() { return ffn_memory_; }
  FeedForwardParams<T>& ffn_tokens() { return ffn_tokens_; }
  nn::Linear<T>& conv_max() { return conv_max_; }
  std::vector<nn::Linear<T>>& conv_pyramid() { return conv_pyramid_; }
  nn::Linear<T>& aux_head() { return aux_head_; }
  const BlockOptions& options() const { return options_; }

 private:
  BlockOptions options_;
  nn::Linear<T> conv_max_;
  std::vector<nn::Linear<T>> conv_pyramid_;
  AttentionParams<T> p2m_, m2p_;
  FeedForwardParams<T> ffn_memory_, ffn_tokens_;
  nn::Linear<T> aux_head_;
};

template <typename T>
struct TransformerOutput {
  TokenMap<T> tokens;
  MemoryState<T> memory;
  std::vector<Var<T>> aux;
};

/// The learnable memory bank and a stack of S blocks.
template <typename T>
class MemoryTransformer {
 public:
  MemoryTransformer(nn::ParameterStore<T>& store, const TrainConfig& cfg, nn::Rng& rng);

  const Var<T>& memory_bank() const { return memory_; }
  Var<T>& memory_bank() { return memory_; }
  MemoryState<T> initial_memory(int batch) const;

  /// Threads (P, M) through every block in order.
  TransformerOutput<T> forward(const TokenMap<T>& p0, const MemoryState<T>& m0, PatchGrid grid,
                               std::vector<BlockTrace<T>>* traces = nullptr) const;
  TransformerOutput<T> forward(const TokenMap<T>& p0, PatchGrid grid) const;

  std::vector<BidirectionalAttentionBlock<T>>& blocks() { return blocks_; }
  const std::vector<BidirectionalAttentionBlock<T>>& blocks() const { return blocks_; }

 private:
  Var<T> memory_;
  std::vector<BidirectionalAttentionBlock<T>> blocks_;
};

}  // namespace transformer
}  // namespace msformer
