#pragma once

#include <optional>
#include <vector>

#include "msformer/autograd.hpp"

// Differentiable tensor ops. Image-like tensors are NCHW; token tensors are
// [B, N, C] with tokens in row-major grid order. Explicitly instantiated for
// float and double.
namespace msformer::ops {

template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T factor);
template <typename T> Var<T> relu(const Var<T>& a);
template <typename T> Var<T> gelu(const Var<T>& a);
template <typename T> Var<T> sigmoid(const Var<T>& a);

template <typename T> Var<T> reshape(const Var<T>& a, Shape shape);
template <typename T> Var<T> concat(const std::vector<Var<T>>& parts, int axis);
template <typename T> Var<T> slice(const Var<T>& a, int axis, int start, int length);
/// [N, C] -> [B, N, C]; the backward pass sums over B.
template <typename T> Var<T> broadcast_batch(const Var<T>& a, int batch);

/// [B, C, H, W] -> [B, H*W, C]
template <typename T> Var<T> to_tokens(const Var<T>& a);
/// [B, H*W, C] -> [B, C, H, W]
template <typename T> Var<T> from_tokens(const Var<T>& a, int height, int width);

/// 2-D cross-correlation. weight: [Cout, Cin, k, k]; bias (optional): [Cout].
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>* bias, int stride, int padding);

/// Batch normalization over (B, H, W) per channel. In training mode the batch
/// statistics are used and the running buffers are updated in place.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, bool training, T momentum = T(0.1), T eps = T(1e-5));

template <typename T> Var<T> max_pool2d(const Var<T>& x, int kernel, int stride, int padding);

/// Bilinear resize with half-pixel centers (align_corners = false).
template <typename T> Var<T> upsample_bilinear(const Var<T>& x, int out_h, int out_w);

/// Adaptive pooling on a token grid [B, gh*gw, C] -> [B, oh*ow, C]. Bin i on
/// an axis of length n covers [floor(i*n/o), ceil((i+1)*n/o)).
template <typename T> Var<T> adaptive_max_pool_tokens(const Var<T>& x, int grid_h, int grid_w, int out_h, int out_w);
template <typename T> Var<T> adaptive_avg_pool_tokens(const Var<T>& x, int grid_h, int grid_w, int out_h, int out_w);

/// y = x W + b over the last axis. weight: [in, out]; bias (optional): [out].
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>* bias);

/// Normalization over the last axis with affine parameters.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5));

/// Scaled dot-product attention softmax(Q K^T / sqrt(d)) V split into `heads`
/// groups of channels. q: [B, Nq, C]; k, v: [B, Nk, C]. When `weights_out`
/// is given it receives the attention rows, shape [B, heads, Nq, Nk].
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads, Tensor<T>* weights_out = nullptr);

template <typename T> Var<T> sum(const Var<T>& a);
template <typename T> Var<T> mean(const Var<T>& a);
/// Sum_i weights[i] * parts[i] over one-element values.
template <typename T> Var<T> weighted_sum(const std::vector<Var<T>>& parts, const std::vector<T>& weights);

/// Mean binary cross-entropy -[y log p + (1-y) log(1-p)] with p clamped to
/// [eps, 1-eps]. The target is constant.
template <typename T> Var<T> bce(const Var<T>& pred, const Tensor<T>& target, T eps = T(1e-6));

/// |(1 - Y) * (G - Y)| reduced by mean (or sum) over all elements.
template <typename T> Var<T> masked_l1(const Var<T>& pred, const Tensor<T>& target, bool reduce_mean = true);

/// Flushes subnormal floats to zero on the calling thread. Optimizer moments
/// that decay into the subnormal range otherwise slow training severalfold.
void enable_flush_to_zero();

}  // namespace msformer::ops
