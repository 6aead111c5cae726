#include "msformer/ops.hpp"

#include <Eigen/Dense>

#if defined(__SSE__)
#include <pmmintrin.h>
#include <xmmintrin.h>
#endif

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace msformer::ops {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> arr(Tensor<T>& t) {
  return {t.data(), static_cast<Eigen::Index>(t.size())};
}
template <typename T>
Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> arr(const Tensor<T>& t) {
  return {t.data(), static_cast<Eigen::Index>(t.size())};
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  require(a.shape() == b.shape(),
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// Grad buffer of input i, or nullptr when that input does not need a gradient.
template <typename T>
Tensor<T>* grad_of(Node<T>& n, std::size_t i) {
  Node<T>& in = *n.inputs[i];
  return in.requires_grad ? &in.grad_buffer() : nullptr;
}

template <typename T>
const Tensor<T>& value_of(const Node<T>& n, std::size_t i) {
  return n.inputs[i]->value;
}

inline int floor_div(int a, int b) { return a / b; }
inline int ceil_div(int a, int b) { return (a + b - 1) / b; }

}  // namespace

// ---------------------------------------------------------------- elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out = a.value();
  arr(out) += arr(b.value());
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& n) {
    for (std::size_t i = 0; i < 2; ++i) {
      if (auto* g = grad_of(n, i)) arr(*g) += arr(n.grad);
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "sub");
  Tensor<T> out = a.value();
  arr(out) -= arr(b.value());
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& n) {
    if (auto* g = grad_of(n, 0)) arr(*g) += arr(n.grad);
    if (auto* g = grad_of(n, 1)) arr(*g) -= arr(n.grad);
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out = a.value();
  arr(out) *= arr(b.value());
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& n) {
    if (auto* g = grad_of(n, 0)) arr(*g) += arr(n.grad) * arr(value_of(n, 1));
    if (auto* g = grad_of(n, 1)) arr(*g) += arr(n.grad) * arr(value_of(n, 0));
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out = a.value();
  arr(out) *= factor;
  return make_result<T>(std::move(out), {a}, [factor](Node<T>& n) {
    if (auto* g = grad_of(n, 0)) arr(*g) += factor * arr(n.grad);
  });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out = a.value();
  arr(out) = arr(out).max(T(0));
  return make_result<T>(std::move(out), {a}, [](Node<T>& n) {
    if (auto* g = grad_of(n, 0)) arr(*g) += (arr(n.value) > T(0)).select(arr(n.grad), T(0));
  });
}

template <typename T>
Var<T> gelu(const Var<T>& a) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  Tensor<T> out(a.shape());
  const T* x = a.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(0.5) * x[i] * (T(1) + std::erf(x[i] * inv_sqrt2));
  return make_result<T>(std::move(out), {a}, [](Node<T>& n) {
    auto* g = grad_of(n, 0);
    if (!g) return;
    constexpr T inv_sqrt_2pi = T(0.39894228040143267794);
    const Tensor<T>& x = value_of(n, 0);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const T cdf = T(0.5) * (T(1) + std::erf(x[i] * inv_sqrt2));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x[i] * x[i]);
      (*g)[i] += n.grad[i] * (cdf + x[i] * pdf);
    }
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out(a.shape());
  const T* x = a.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-x[i]));
  return make_result<T>(std::move(out), {a}, [](Node<T>& n) {
    if (auto* g = grad_of(n, 0)) arr(*g) += arr(n.grad) * arr(n.value) * (T(1) - arr(n.value));
  });
}

// ---------------------------------------------------------------- layout

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return make_result<T>(std::move(out), {a}, [](Node<T>& n) {
    if (auto* g = grad_of(n, 0)) arr(*g) += arr(n.grad);
  });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, int axis) {
  require(!parts.empty(), "concat: no inputs");
  const Shape& first = parts.front().shape();
  const int rank = static_cast<int>(first.size());
  if (axis < 0) axis += rank;
  require(axis >= 0 && axis < rank, "concat: axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    require(static_cast<int>(s.size()) == rank, "concat: rank mismatch");
    for (int d = 0; d < rank; ++d) {
      if (d != axis) require(s[d] == first[d], "concat: shape mismatch " + shape_str(s) + " vs " + shape_str(first));
    }
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= first[d];
  for (int d = axis + 1; d < rank; ++d) inner *= first[d];
  const std::size_t out_row = static_cast<std::size_t>(out_shape[axis]) * inner;

  Tensor<T> out(out_shape);
  std::vector<std::size_t> lengths;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t len = static_cast<std::size_t>(p.shape()[axis]) * inner;
    const T* src = p.value().data();
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(src + o * len, len, out.data() + o * out_row + offset);
    lengths.push_back(len);
    offset += len;
  }
  return make_result<T>(std::move(out), parts, [lengths, outer, out_row](Node<T>& n) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < lengths.size(); ++i) {
      if (auto* g = grad_of(n, i)) {
        for (std::size_t o = 0; o < outer; ++o) {
          const T* src = n.grad.data() + o * out_row + off;
          T* dst = g->data() + o * lengths[i];
          for (std::size_t j = 0; j < lengths[i]; ++j) dst[j] += src[j];
        }
      }
      off += lengths[i];
    }
  });
}

template <typename T>
Var<T> slice(const Var<T>& a, int axis, int start, int length) {
  const Shape& in_shape = a.shape();
  const int rank = static_cast<int>(in_shape.size());
  if (axis < 0) axis += rank;
  require(axis >= 0 && axis < rank, "slice: axis out of range");
  require(start >= 0 && length >= 0 && start + length <= in_shape[axis], "slice: range out of bounds");
  std::size_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= in_shape[d];
  for (int d = axis + 1; d < rank; ++d) inner *= in_shape[d];
  Shape out_shape = in_shape;
  out_shape[axis] = length;
  const std::size_t in_row = static_cast<std::size_t>(in_shape[axis]) * inner;
  const std::size_t len = static_cast<std::size_t>(length) * inner;
  const std::size_t off = static_cast<std::size_t>(start) * inner;
  Tensor<T> out(out_shape);
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(a.value().data() + o * in_row + off, len, out.data() + o * len);
  return make_result<T>(std::move(out), {a}, [outer, in_row, len, off](Node<T>& n) {
    auto* g = grad_of(n, 0);
    if (!g) return;
    for (std::size_t o = 0; o < outer; ++o) {
      const T* src = n.grad.data() + o * len;
      T* dst = g->data() + o * in_row + off;
      for (std::size_t j = 0; j < len; ++j) dst[j] += src[j];
    }
  });
}

template <typename T>
Var<T> broadcast_batch(const Var<T>& a, int batch) {
  require(a.value().rank() == 2, "broadcast_batch: expected [N, C], got " + shape_str(a.shape()));
  require(batch >= 1, "broadcast_batch: batch must be positive");
  const std::size_t n_el = a.value().size();
  Tensor<T> out({batch, a.dim(0), a.dim(1)});
  for (int b = 0; b < batch; ++b) std::copy_n(a.value().data(), n_el, out.data() + b * n_el);
  return make_result<T>(std::move(out), {a}, [batch, n_el](Node<T>& n) {
    auto* g = grad_of(n, 0);
    if (!g) return;
    for (int b = 0; b < batch; ++b) {
      const T* src = n.grad.data() + b * n_el;
      for (std::size_t j = 0; j < n_el; ++j) (*g)[j] += src[j];
    }
  });
}

namespace {
// Per batch item: dst[cols x rows] = src[rows x cols]^T
template <typename T>
void batched_transpose(const T* src, T* dst, int batch, int rows, int cols, bool accumulate) {
  const std::size_t block = static_cast<std::size_t>(rows) * cols;
  for (int b = 0; b < batch; ++b) {
    ConstMatMap<T> s(src + b * block, rows, cols);
    MatMap<T> d(dst + b * block, cols, rows);
    if (accumulate) {
      d += s.transpose();
    } else {
      d = s.transpose();
    }
  }
}
}  // namespace

template <typename T>
Var<T> to_tokens(const Var<T>& a) {
  require(a.value().rank() == 4, "to_tokens: expected NCHW, got " + shape_str(a.shape()));
  const int b = a.dim(0), c = a.dim(1), hw = a.dim(2) * a.dim(3);
  Tensor<T> out({b, hw, c});
  batched_transpose(a.value().data(), out.data(), b, c, hw, false);
  return make_result<T>(std::move(out), {a}, [b, c, hw](Node<T>& n) {
    if (auto* g = grad_of(n, 0)) batched_transpose(n.grad.data(), g->data(), b, hw, c, true);
  });
}

template <typename T>
Var<T> from_tokens(const Var<T>& a, int height, int width) {
  require(a.value().rank() == 3 && a.dim(1) == height * width,
          "from_tokens: " + shape_str(a.shape()) + " is not a " + std::to_string(height) + "x" +
              std::to_string(width) + " token grid");
  const int b = a.dim(0), c = a.dim(2), hw = height * width;
  Tensor<T> out({b, c, height, width});
  batched_transpose(a.value().data(), out.data(), b, hw, c, false);
  return make_result<T>(std::move(out), {a}, [b, c, hw](Node<T>& n) {
    if (auto* g = grad_of(n, 0)) batched_transpose(n.grad.data(), g->data(), b, c, hw, true);
  });
}

// ---------------------------------------------------------------- convolution

namespace {
struct ConvGeometry {
  int batch, cin, h, w, cout, k, stride, pad, ho, wo;
  std::size_t rows() const { return static_cast<std::size_t>(cin) * k * k; }
  std::size_t cols() const { return static_cast<std::size_t>(batch) * ho * wo; }
};

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const std::size_t ncols = g.cols();
  for (int ci = 0; ci < g.cin; ++ci) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        T* dst = col + ((static_cast<std::size_t>(ci) * g.k + ky) * g.k + kx) * ncols;
        for (int b = 0; b < g.batch; ++b) {
          const T* src = x + (static_cast<std::size_t>(b) * g.cin + ci) * g.h * g.w;
          for (int oy = 0; oy < g.ho; ++oy) {
            T* d = dst + (static_cast<std::size_t>(b) * g.ho + oy) * g.wo;
            const int iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.h) {
              std::fill_n(d, g.wo, T(0));
              continue;
            }
            const T* row = src + static_cast<std::size_t>(iy) * g.w;
            for (int ox = 0; ox < g.wo; ++ox) {
              const int ix = ox * g.stride - g.pad + kx;
              d[ox] = (ix >= 0 && ix < g.w) ? row[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* dx) {
  const std::size_t ncols = g.cols();
  for (int ci = 0; ci < g.cin; ++ci) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const T* src_row = col + ((static_cast<std::size_t>(ci) * g.k + ky) * g.k + kx) * ncols;
        for (int b = 0; b < g.batch; ++b) {
          T* img = dx + (static_cast<std::size_t>(b) * g.cin + ci) * g.h * g.w;
          for (int oy = 0; oy < g.ho; ++oy) {
            const int iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.h) continue;
            const T* s = src_row + (static_cast<std::size_t>(b) * g.ho + oy) * g.wo;
            T* row = img + static_cast<std::size_t>(iy) * g.w;
            for (int ox = 0; ox < g.wo; ++ox) {
              const int ix = ox * g.stride - g.pad + kx;
              if (ix >= 0 && ix < g.w) row[ix] += s[ox];
            }
          }
        }
      }
    }
  }
}
}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>* bias, int stride, int padding) {
  require(x.value().rank() == 4, "conv2d: expected NCHW input, got " + shape_str(x.shape()));
  require(weight.value().rank() == 4 && weight.dim(2) == weight.dim(3), "conv2d: weight must be [Cout, Cin, k, k]");
  require(weight.dim(1) == x.dim(1), "conv2d: input has " + std::to_string(x.dim(1)) + " channels, weight expects " +
                                         std::to_string(weight.dim(1)));
  require(stride >= 1 && padding >= 0, "conv2d: invalid stride/padding");
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), stride, padding, 0, 0};
  g.ho = (g.h + 2 * g.pad - g.k) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.k) / g.stride + 1;
  require(g.ho > 0 && g.wo > 0, "conv2d: kernel larger than padded input");
  if (bias) require(bias->value().size() == static_cast<std::size_t>(g.cout), "conv2d: bias size mismatch");

  const auto rows = static_cast<Eigen::Index>(g.rows());
  const auto cols = static_cast<Eigen::Index>(g.cols());
  typename Tensor<T>::Storage col(g.rows() * g.cols());
  im2col(x.value().data(), g, col.data());

  ConstMatMap<T> w(weight.value().data(), g.cout, rows);
  RowMat<T> out_mat = w * ConstMatMap<T>(col.data(), rows, cols);
  const int plane = g.ho * g.wo;
  Tensor<T> out({g.batch, g.cout, g.ho, g.wo});
  for (int b = 0; b < g.batch; ++b) {
    MatMap<T>(out.data() + static_cast<std::size_t>(b) * g.cout * plane, g.cout, plane) =
        out_mat.middleCols(static_cast<Eigen::Index>(b) * plane, plane);
  }
  if (bias) {
    const T* bv = bias->value().data();
    for (int b = 0; b < g.batch; ++b) {
      for (int c = 0; c < g.cout; ++c) {
        T* p = out.data() + (static_cast<std::size_t>(b) * g.cout + c) * plane;
        for (int i = 0; i < plane; ++i) p[i] += bv[c];
      }
    }
  }

  std::vector<Var<T>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return make_result<T>(std::move(out), inputs, [g, col = std::move(col), has_bias = bias != nullptr](Node<T>& n) {
    const int plane = g.ho * g.wo;
    const auto rows = static_cast<Eigen::Index>(g.rows());
    const auto cols = static_cast<Eigen::Index>(g.cols());
    RowMat<T> dout(g.cout, cols);
    for (int b = 0; b < g.batch; ++b) {
      dout.middleCols(static_cast<Eigen::Index>(b) * plane, plane) =
          ConstMatMap<T>(n.grad.data() + static_cast<std::size_t>(b) * g.cout * plane, g.cout, plane);
    }
    if (auto* gw = grad_of(n, 1)) {
      MatMap<T>(gw->data(), g.cout, rows).noalias() += dout * ConstMatMap<T>(col.data(), rows, cols).transpose();
    }
    if (has_bias) {
      if (auto* gb = grad_of(n, 2)) {
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(gb->data(), g.cout) += dout.rowwise().sum();
      }
    }
    if (auto* gx = grad_of(n, 0)) {
      RowMat<T> dcol = ConstMatMap<T>(value_of(n, 1).data(), g.cout, rows).transpose() * dout;
      col2im(dcol.data(), g, gx->data());
    }
  });
}

template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, bool training, T momentum, T eps) {
  require(x.value().rank() == 4, "batch_norm: expected NCHW input, got " + shape_str(x.shape()));
  const int batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
  require(gamma.value().size() == static_cast<std::size_t>(channels) &&
              beta.value().size() == static_cast<std::size_t>(channels) &&
              running_mean.size() == static_cast<std::size_t>(channels) &&
              running_var.size() == static_cast<std::size_t>(channels),
          "batch_norm: parameter size mismatch");
  const std::size_t count = static_cast<std::size_t>(batch) * plane;
  require(!training || count > 1, "batch_norm: training needs more than one value per channel");

  std::vector<T> mean(channels), invstd(channels);
  const T* xv = x.value().data();
  for (int c = 0; c < channels; ++c) {
    if (training) {
      double s = 0, ss = 0;
      for (int b = 0; b < batch; ++b) {
        const T* p = xv + (static_cast<std::size_t>(b) * channels + c) * plane;
        for (int i = 0; i < plane; ++i) s += p[i];
      }
      const double m = s / static_cast<double>(count);
      for (int b = 0; b < batch; ++b) {
        const T* p = xv + (static_cast<std::size_t>(b) * channels + c) * plane;
        for (int i = 0; i < plane; ++i) ss += (p[i] - m) * (p[i] - m);
      }
      const double var = ss / static_cast<double>(count);
      mean[c] = static_cast<T>(m);
      invstd[c] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * static_cast<T>(m);
      running_var[c] = (T(1) - momentum) * running_var[c] +
                       momentum * static_cast<T>(var * static_cast<double>(count) / static_cast<double>(count - 1));
    } else {
      mean[c] = running_mean[c];
      invstd[c] = T(1) / std::sqrt(running_var[c] + eps);
    }
  }

  Tensor<T> out(x.shape());
  const T* gv = gamma.value().data();
  const T* bv = beta.value().data();
  for (int b = 0; b < batch; ++b) {
    for (int c = 0; c < channels; ++c) {
      const std::size_t off = (static_cast<std::size_t>(b) * channels + c) * plane;
      const T a = gv[c] * invstd[c];
      const T shift = bv[c] - mean[c] * a;
      for (int i = 0; i < plane; ++i) out[off + i] = xv[off + i] * a + shift;
    }
  }

  return make_result<T>(std::move(out), {x, gamma, beta},
                        [mean = std::move(mean), invstd = std::move(invstd), batch, channels, plane, count,
                         training](Node<T>& n) {
                          const T* xv = value_of(n, 0).data();
                          const T* gv = value_of(n, 1).data();
                          const T* dy = n.grad.data();
                          auto* gx = grad_of(n, 0);
                          auto* gg = grad_of(n, 1);
                          auto* gbeta = grad_of(n, 2);
                          for (int c = 0; c < channels; ++c) {
                            double sum_dy = 0, sum_dy_xhat = 0;
                            for (int b = 0; b < batch; ++b) {
                              const std::size_t off = (static_cast<std::size_t>(b) * channels + c) * plane;
                              for (int i = 0; i < plane; ++i) {
                                const T xhat = (xv[off + i] - mean[c]) * invstd[c];
                                sum_dy += dy[off + i];
                                sum_dy_xhat += dy[off + i] * xhat;
                              }
                            }
                            if (gg) (*gg)[c] += static_cast<T>(sum_dy_xhat);
                            if (gbeta) (*gbeta)[c] += static_cast<T>(sum_dy);
                            if (!gx) continue;
                            const T a = gv[c] * invstd[c];
                            const T mdy = static_cast<T>(sum_dy / static_cast<double>(count));
                            const T mdyx = static_cast<T>(sum_dy_xhat / static_cast<double>(count));
                            for (int b = 0; b < batch; ++b) {
                              const std::size_t off = (static_cast<std::size_t>(b) * channels + c) * plane;
                              for (int i = 0; i < plane; ++i) {
                                if (training) {
                                  const T xhat = (xv[off + i] - mean[c]) * invstd[c];
                                  (*gx)[off + i] += a * (dy[off + i] - mdy - xhat * mdyx);
                                } else {
                                  (*gx)[off + i] += a * dy[off + i];
                                }
                              }
                            }
                          }
                        });
}

template <typename T>
Var<T> max_pool2d(const Var<T>& x, int kernel, int stride, int padding) {
  require(x.value().rank() == 4, "max_pool2d: expected NCHW input");
  const int batch = x.dim(0), channels = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = (h + 2 * padding - kernel) / stride + 1;
  const int wo = (w + 2 * padding - kernel) / stride + 1;
  require(ho > 0 && wo > 0, "max_pool2d: kernel larger than padded input");
  Tensor<T> out({batch, channels, ho, wo});
  std::vector<int> argmax(out.size());
  const T* xv = x.value().data();
  std::size_t o = 0;
  for (int bc = 0; bc < batch * channels; ++bc) {
    const T* plane = xv + static_cast<std::size_t>(bc) * h * w;
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox, ++o) {
        T best = -std::numeric_limits<T>::infinity();
        int best_idx = -1;
        for (int ky = 0; ky < kernel; ++ky) {
          const int iy = oy * stride - padding + ky;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < kernel; ++kx) {
            const int ix = ox * stride - padding + kx;
            if (ix < 0 || ix >= w) continue;
            const T v = plane[iy * w + ix];
            if (best_idx < 0 || v > best) {
              best = v;
              best_idx = iy * w + ix;
            }
          }
        }
        out[o] = best;
        argmax[o] = best_idx;
      }
    }
  }
  return make_result<T>(std::move(out), {x}, [argmax = std::move(argmax), h, w, ho, wo](Node<T>& n) {
    auto* g = grad_of(n, 0);
    if (!g) return;
    const std::size_t per_in = static_cast<std::size_t>(h) * w, per_out = static_cast<std::size_t>(ho) * wo;
    for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[(i / per_out) * per_in + argmax[i]] += n.grad[i];
  });
}

namespace {
struct LerpAxis {
  std::vector<int> lo, hi;
  std::vector<double> w_lo, w_hi;
};

LerpAxis lerp_axis(int in, int out) {
  LerpAxis a;
  a.lo.resize(out);
  a.hi.resize(out);
  a.w_lo.resize(out);
  a.w_hi.resize(out);
  const double ratio = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(src);
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = i0 < in - 1 ? i0 + 1 : i0;
    const double l1 = src - i0;
    a.lo[o] = i0;
    a.hi[o] = i1;
    a.w_lo[o] = 1.0 - l1;
    a.w_hi[o] = l1;
  }
  return a;
}
}  // namespace

template <typename T>
Var<T> upsample_bilinear(const Var<T>& x, int out_h, int out_w) {
  require(x.value().rank() == 4, "upsample_bilinear: expected NCHW input");
  require(out_h > 0 && out_w > 0, "upsample_bilinear: output size must be positive");
  const int planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const LerpAxis ay = lerp_axis(h, out_h), ax = lerp_axis(w, out_w);
  Tensor<T> out({x.dim(0), x.dim(1), out_h, out_w});
  const T* xv = x.value().data();
  for (int p = 0; p < planes; ++p) {
    const T* src = xv + static_cast<std::size_t>(p) * h * w;
    T* dst = out.data() + static_cast<std::size_t>(p) * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const T* r0 = src + ay.lo[oy] * w;
      const T* r1 = src + ay.hi[oy] * w;
      const T wy0 = static_cast<T>(ay.w_lo[oy]), wy1 = static_cast<T>(ay.w_hi[oy]);
      for (int ox = 0; ox < out_w; ++ox) {
        const T wx0 = static_cast<T>(ax.w_lo[ox]), wx1 = static_cast<T>(ax.w_hi[ox]);
        dst[oy * out_w + ox] = wy0 * (wx0 * r0[ax.lo[ox]] + wx1 * r0[ax.hi[ox]]) +
                               wy1 * (wx0 * r1[ax.lo[ox]] + wx1 * r1[ax.hi[ox]]);
      }
    }
  }
  return make_result<T>(std::move(out), {x}, [ay, ax, planes, h, w, out_h, out_w](Node<T>& n) {
    auto* g = grad_of(n, 0);
    if (!g) return;
    for (int p = 0; p < planes; ++p) {
      const T* src = n.grad.data() + static_cast<std::size_t>(p) * out_h * out_w;
      T* dst = g->data() + static_cast<std::size_t>(p) * h * w;
      for (int oy = 0; oy < out_h; ++oy) {
        T* r0 = dst + ay.lo[oy] * w;
        T* r1 = dst + ay.hi[oy] * w;
        const T wy0 = static_cast<T>(ay.w_lo[oy]), wy1 = static_cast<T>(ay.w_hi[oy]);
        for (int ox = 0; ox < out_w; ++ox) {
          const T d = src[oy * out_w + ox];
          const T wx0 = static_cast<T>(ax.w_lo[ox]), wx1 = static_cast<T>(ax.w_hi[ox]);
          r0[ax.lo[ox]] += d * wy0 * wx0;
          r0[ax.hi[ox]] += d * wy0 * wx1;
          r1[ax.lo[ox]] += d * wy1 * wx0;
          r1[ax.hi[ox]] += d * wy1 * wx1;
        }
      }
    }
  });
}

// ---------------------------------------------------------------- token pooling

namespace {
template <typename T>
void check_token_grid(const Var<T>& x, int grid_h, int grid_w, int out_h, int out_w, const char* op) {
  require(x.value().rank() == 3, std::string(op) + ": expected [B, N, C], got " + shape_str(x.shape()));
  require(x.dim(1) == grid_h * grid_w, std::string(op) + ": token count " + std::to_string(x.dim(1)) +
                                           " does not match grid " + std::to_string(grid_h) + "x" +
                                           std::to_string(grid_w));
  require(out_h >= 1 && out_w >= 1 && out_h <= grid_h && out_w <= grid_w,
          std::string(op) + ": output grid must be within 1..input grid");
}
}  // namespace

template <typename T>
Var<T> adaptive_max_pool_tokens(const Var<T>& x, int grid_h, int grid_w, int out_h, int out_w) {
  check_token_grid(x, grid_h, grid_w, out_h, out_w, "adaptive_max_pool_tokens");
  const int batch = x.dim(0), channels = x.dim(2), n_in = grid_h * grid_w, n_out = out_h * out_w;
  Tensor<T> out({batch, n_out, channels});
  std::vector<int> argmax(out.size());
  const T* xv = x.value().data();
  for (int b = 0; b < batch; ++b) {
    for (int oy = 0; oy < out_h; ++oy) {
      const int y0 = floor_div(oy * grid_h, out_h), y1 = ceil_div((oy + 1) * grid_h, out_h);
      for (int ox = 0; ox < out_w; ++ox) {
        const int x0 = floor_div(ox * grid_w, out_w), x1 = ceil_div((ox + 1) * grid_w, out_w);
        const std::size_t o = (static_cast<std::size_t>(b) * n_out + oy * out_w + ox) * channels;
        for (int c = 0; c < channels; ++c) {
          out[o + c] = -std::numeric_limits<T>::infinity();
          argmax[o + c] = -1;
        }
        for (int y = y0; y < y1; ++y) {
          for (int xx = x0; xx < x1; ++xx) {
            const int token = y * grid_w + xx;
            const T* row = xv + (static_cast<std::size_t>(b) * n_in + token) * channels;
            for (int c = 0; c < channels; ++c) {
              if (argmax[o + c] < 0 || row[c] > out[o + c]) {
                out[o + c] = row[c];
                argmax[o + c] = token;
              }
            }
          }
        }
      }
    }
  }
  return make_result<T>(std::move(out), {x}, [argmax = std::move(argmax), batch, channels, n_in, n_out](Node<T>& n) {
    auto* g = grad_of(n, 0);
    if (!g) return;
    for (int b = 0; b < batch; ++b) {
      for (int i = 0; i < n_out; ++i) {
        const std::size_t o = (static_cast<std::size_t>(b) * n_out + i) * channels;
        for (int c = 0; c < channels; ++c) {
          (*g)[(static_cast<std::size_t>(b) * n_in + argmax[o + c]) * channels + c] += n.grad[o + c];
        }
      }
    }
  });
}

template <typename T>
Var<T> adaptive_avg_pool_tokens(const Var<T>& x, int grid_h, int grid_w, int out_h, int out_w) {
  check_token_grid(x, grid_h, grid_w, out_h, out_w, "adaptive_avg_pool_tokens");
  const int batch = x.dim(0), channels = x.dim(2), n_in = grid_h * grid_w, n_out = out_h * out_w;
  Tensor<T> out({batch, n_out, channels});
  const T* xv = x.value().data();
  std::vector<double> acc(channels);  // double accumulation keeps small bin means accurate
  auto for_each_bin = [=](auto&& fn) {
    for (int oy = 0; oy < out_h; ++oy) {
      const int y0 = floor_div(oy * grid_h, out_h), y1 = ceil_div((oy + 1) * grid_h, out_h);
      for (int ox = 0; ox < out_w; ++ox) {
        const int x0 = floor_div(ox * grid_w, out_w), x1 = ceil_div((ox + 1) * grid_w, out_w);
        fn(oy * out_w + ox, y0, y1, x0, x1);
      }
    }
  };
  for (int b = 0; b < batch; ++b) {
    for_each_bin([&](int cell, int y0, int y1, int x0, int x1) {
      T* dst = out.data() + (static_cast<std::size_t>(b) * n_out + cell) * channels;
      std::fill(acc.begin(), acc.end(), 0.0);
      for (int y = y0; y < y1; ++y) {
        for (int xx = x0; xx < x1; ++xx) {
          const T* row = xv + (static_cast<std::size_t>(b) * n_in + y * grid_w + xx) * channels;
          for (int c = 0; c < channels; ++c) acc[c] += row[c];
        }
      }
      const double count = static_cast<double>((y1 - y0) * (x1 - x0));
      for (int c = 0; c < channels; ++c) dst[c] = static_cast<T>(acc[c] / count);
    });
  }
  return make_result<T>(std::move(out), {x}, [for_each_bin, batch, channels, n_in, n_out, grid_w](Node<T>& n) {
    auto* g = grad_of(n, 0);
    if (!g) return;
    for (int b = 0; b < batch; ++b) {
      for_each_bin([&](int cell, int y0, int y1, int x0, int x1) {
        const T* src = n.grad.data() + (static_cast<std::size_t>(b) * n_out + cell) * channels;
        const T inv = T(1) / static_cast<T>((y1 - y0) * (x1 - x0));
        for (int y = y0; y < y1; ++y) {
          for (int xx = x0; xx < x1; ++xx) {
            T* dst = g->data() + (static_cast<std::size_t>(b) * n_in + y * grid_w + xx) * channels;
            for (int c = 0; c < channels; ++c) dst[c] += src[c] * inv;
          }
        }
      });
    }
  });
}

// ---------------------------------------------------------------- dense

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>* bias) {
  require(weight.value().rank() == 2, "linear: weight must be [in, out]");
  const int in = weight.dim(0), out_dim = weight.dim(1);
  require(x.value().rank() >= 1 && x.dim(-1) == in,
          "linear: input " + shape_str(x.shape()) + " does not end in " + std::to_string(in));
  if (bias) require(bias->value().size() == static_cast<std::size_t>(out_dim), "linear: bias size mismatch");
  const auto rows = static_cast<Eigen::Index>(x.value().size() / in);
  Shape out_shape = x.shape();
  out_shape.back() = out_dim;
  Tensor<T> out(out_shape);
  MatMap<T> y(out.data(), rows, out_dim);
  y.noalias() = ConstMatMap<T>(x.value().data(), rows, in) * ConstMatMap<T>(weight.value().data(), in, out_dim);
  if (bias) {
    y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias->value().data(), out_dim);
  }
  std::vector<Var<T>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return make_result<T>(std::move(out), inputs, [rows, in, out_dim, has_bias = bias != nullptr](Node<T>& n) {
    ConstMatMap<T> dy(n.grad.data(), rows, out_dim);
    if (auto* gx = grad_of(n, 0)) {
      MatMap<T>(gx->data(), rows, in).noalias() += dy * ConstMatMap<T>(value_of(n, 1).data(), in, out_dim).transpose();
    }
    if (auto* gw = grad_of(n, 1)) {
      MatMap<T>(gw->data(), in, out_dim).noalias() += ConstMatMap<T>(value_of(n, 0).data(), rows, in).transpose() * dy;
    }
    if (has_bias) {
      if (auto* gb = grad_of(n, 2)) {
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb->data(), out_dim) += dy.colwise().sum();
      }
    }
  });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  const int c = x.dim(-1);
  require(gamma.value().size() == static_cast<std::size_t>(c) && beta.value().size() == static_cast<std::size_t>(c),
          "layer_norm: parameter size mismatch");
  const std::size_t rows = x.value().size() / c;
  std::vector<T> mean(rows), invstd(rows);
  Tensor<T> out(x.shape());
  const T* xv = x.value().data();
  const T* gv = gamma.value().data();
  const T* bv = beta.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* p = xv + r * c;
    double s = 0, ss = 0;
    for (int i = 0; i < c; ++i) s += p[i];
    const double m = s / c;
    for (int i = 0; i < c; ++i) ss += (p[i] - m) * (p[i] - m);
    mean[r] = static_cast<T>(m);
    invstd[r] = static_cast<T>(1.0 / std::sqrt(ss / c + static_cast<double>(eps)));
    T* o = out.data() + r * c;
    for (int i = 0; i < c; ++i) o[i] = (p[i] - mean[r]) * invstd[r] * gv[i] + bv[i];
  }
  return make_result<T>(std::move(out), {x, gamma, beta},
                        [mean = std::move(mean), invstd = std::move(invstd), rows, c](Node<T>& n) {
                          const T* xv = value_of(n, 0).data();
                          const T* gv = value_of(n, 1).data();
                          auto* gx = grad_of(n, 0);
                          auto* gg = grad_of(n, 1);
                          auto* gb = grad_of(n, 2);
                          std::vector<T> xhat(c), dxhat(c);
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T* p = xv + r * c;
                            const T* dy = n.grad.data() + r * c;
                            double s1 = 0, s2 = 0;
                            for (int i = 0; i < c; ++i) {
                              xhat[i] = (p[i] - mean[r]) * invstd[r];
                              dxhat[i] = dy[i] * gv[i];
                              s1 += dxhat[i];
                              s2 += dxhat[i] * xhat[i];
                              if (gg) (*gg)[i] += dy[i] * xhat[i];
                              if (gb) (*gb)[i] += dy[i];
                            }
                            if (!gx) continue;
                            const T m1 = static_cast<T>(s1 / c), m2 = static_cast<T>(s2 / c);
                            T* d = gx->data() + r * c;
                            for (int i = 0; i < c; ++i) d[i] += invstd[r] * (dxhat[i] - m1 - xhat[i] * m2);
                          }
                        });
}

template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads, Tensor<T>* weights_out) {
  require(q.value().rank() == 3 && k.value().rank() == 3 && v.value().rank() == 3,
          "attention: inputs must be [B, N, C]");
  require(k.shape() == v.shape(), "attention: key/value shape mismatch");
  require(q.dim(0) == k.dim(0) && q.dim(2) == k.dim(2), "attention: query/key batch or channel mismatch");
  const int batch = q.dim(0), nq = q.dim(1), nk = k.dim(1), c = q.dim(2);
  require(heads >= 1 && c % heads == 0, "attention: channels not divisible by heads");
  const int d = c / heads;
  const T scale_factor = T(1) / std::sqrt(static_cast<T>(d));

  const std::size_t a_block = static_cast<std::size_t>(nq) * nk;
  typename Tensor<T>::Storage weights(static_cast<std::size_t>(batch) * heads * a_block);
  Tensor<T> out(q.shape());
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      ConstStridedMap<T> qh(q.value().data() + static_cast<std::size_t>(b) * nq * c + h * d, nq, d, Eigen::OuterStride<>(c));
      ConstStridedMap<T> kh(k.value().data() + static_cast<std::size_t>(b) * nk * c + h * d, nk, d, Eigen::OuterStride<>(c));
      ConstStridedMap<T> vh(v.value().data() + static_cast<std::size_t>(b) * nk * c + h * d, nk, d, Eigen::OuterStride<>(c));
      MatMap<T> a(weights.data() + (static_cast<std::size_t>(b) * heads + h) * a_block, nq, nk);
      a.noalias() = scale_factor * (qh * kh.transpose());
      for (int r = 0; r < nq; ++r) {
        auto row = a.row(r);
        const T mx = row.maxCoeff();
        row = (row.array() - mx).exp().matrix();
        row /= row.sum();
      }
      StridedMap<T> oh(out.data() + static_cast<std::size_t>(b) * nq * c + h * d, nq, d, Eigen::OuterStride<>(c));
      oh.noalias() = a * vh;
    }
  }
  if (weights_out) *weights_out = Tensor<T>({batch, heads, nq, nk}, std::vector<T>(weights.begin(), weights.end()));

  return make_result<T>(std::move(out), {q, k, v},
                        [weights = std::move(weights), batch, heads, nq, nk, c, d, a_block, scale_factor](Node<T>& n) {
                          auto* gq = grad_of(n, 0);
                          auto* gk = grad_of(n, 1);
                          auto* gv = grad_of(n, 2);
                          const Tensor<T>& qv = value_of(n, 0);
                          const Tensor<T>& kv = value_of(n, 1);
                          const Tensor<T>& vv = value_of(n, 2);
                          RowMat<T> da, ds;
                          for (int b = 0; b < batch; ++b) {
                            const std::size_t qo = static_cast<std::size_t>(b) * nq * c;
                            const std::size_t ko = static_cast<std::size_t>(b) * nk * c;
                            for (int h = 0; h < heads; ++h) {
                              ConstMatMap<T> a(weights.data() + (static_cast<std::size_t>(b) * heads + h) * a_block, nq, nk);
                              ConstStridedMap<T> doh(n.grad.data() + qo + h * d, nq, d, Eigen::OuterStride<>(c));
                              ConstStridedMap<T> qh(qv.data() + qo + h * d, nq, d, Eigen::OuterStride<>(c));
                              ConstStridedMap<T> kh(kv.data() + ko + h * d, nk, d, Eigen::OuterStride<>(c));
                              ConstStridedMap<T> vh(vv.data() + ko + h * d, nk, d, Eigen::OuterStride<>(c));
                              if (gv) {
                                StridedMap<T>(gv->data() + ko + h * d, nk, d, Eigen::OuterStride<>(c)).noalias() +=
                                    a.transpose() * doh;
                              }
                              if (!gq && !gk) continue;
                              da.noalias() = doh * vh.transpose();
                              const auto row_dot = (da.array() * a.array()).rowwise().sum().eval();
                              ds = (a.array() * (da.array().colwise() - row_dot)).matrix();
                              if (gq) {
                                StridedMap<T>(gq->data() + qo + h * d, nq, d, Eigen::OuterStride<>(c)).noalias() +=
                                    scale_factor * (ds * kh);
                              }
                              if (gk) {
                                StridedMap<T>(gk->data() + ko + h * d, nk, d, Eigen::OuterStride<>(c)).noalias() +=
                                    scale_factor * (ds.transpose() * qh);
                              }
                            }
                          }
                        });
}

// ---------------------------------------------------------------- reductions & losses

template <typename T>
Var<T> sum(const Var<T>& a) {
  double s = 0;
  for (T v : a.value().values()) s += v;
  return make_result<T>(Tensor<T>::scalar(static_cast<T>(s)), {a}, [](Node<T>& n) {
    if (auto* g = grad_of(n, 0)) arr(*g) += n.grad[0];
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  require(a.value().size() > 0, "mean: empty input");
  double s = 0;
  for (T v : a.value().values()) s += v;
  const double count = static_cast<double>(a.value().size());
  return make_result<T>(Tensor<T>::scalar(static_cast<T>(s / count)), {a}, [count](Node<T>& n) {
    if (auto* g = grad_of(n, 0)) arr(*g) += static_cast<T>(n.grad[0] / count);
  });
}

template <typename T>
Var<T> weighted_sum(const std::vector<Var<T>>& parts, const std::vector<T>& weights) {
  require(parts.size() == weights.size(), "weighted_sum: parts/weights size mismatch");
  T total = T(0);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    require(parts[i].value().size() == 1, "weighted_sum: parts must be scalars");
    total += weights[i] * parts[i].value()[0];
  }
  return make_result<T>(Tensor<T>::scalar(total), parts, [weights](Node<T>& n) {
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (auto* g = grad_of(n, i)) (*g)[0] += weights[i] * n.grad[0];
    }
  });
}

template <typename T>
Var<T> bce(const Var<T>& pred, const Tensor<T>& target, T eps) {
  require(pred.shape() == target.shape(),
          "bce: prediction " + shape_str(pred.shape()) + " vs target " + shape_str(target.shape()));
  require(pred.value().size() > 0, "bce: empty input");
  const T* p = pred.value().data();
  const T* y = target.data();
  const std::size_t count = target.size();
  double total = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const double pc = std::clamp(static_cast<double>(p[i]), static_cast<double>(eps), 1.0 - static_cast<double>(eps));
    total -= y[i] * std::log(pc) + (1.0 - y[i]) * std::log(1.0 - pc);
  }
  return make_result<T>(Tensor<T>::scalar(static_cast<T>(total / count)), {pred}, [target, eps, count](Node<T>& n) {
    auto* g = grad_of(n, 0);
    if (!g) return;
    const T* p = value_of(n, 0).data();
    const T scale_factor = n.grad[0] / static_cast<T>(count);
    for (std::size_t i = 0; i < count; ++i) {
      if (p[i] <= eps || p[i] >= T(1) - eps) continue;
      (*g)[i] += scale_factor * ((T(1) - target[i]) / (T(1) - p[i]) - target[i] / p[i]);
    }
  });
}

template <typename T>
Var<T> masked_l1(const Var<T>& pred, const Tensor<T>& target, bool reduce_mean) {
  require(pred.shape() == target.shape(),
          "masked_l1: prediction " + shape_str(pred.shape()) + " vs target " + shape_str(target.shape()));
  const T* p = pred.value().data();
  const T* y = target.data();
  const std::size_t count = target.size();
  double total = 0;
  for (std::size_t i = 0; i < count; ++i) total += std::abs((1.0 - y[i]) * (static_cast<double>(p[i]) - y[i]));
  const double denom = reduce_mean ? static_cast<double>(count) : 1.0;
  return make_result<T>(Tensor<T>::scalar(static_cast<T>(total / denom)), {pred}, [target, count, denom](Node<T>& n) {
    auto* g = grad_of(n, 0);
    if (!g) return;
    const T* p = value_of(n, 0).data();
    const T scale_factor = static_cast<T>(n.grad[0] / denom);
    for (std::size_t i = 0; i < count; ++i) {
      const T mask = T(1) - target[i];
      const T diff = p[i] - target[i];
      const T sign = diff > T(0) ? T(1) : (diff < T(0) ? T(-1) : T(0));
      (*g)[i] += scale_factor * mask * sign;
    }
  });
}

void enable_flush_to_zero() {
#if defined(__SSE__)
  _MM_SET_FLUSH_ZERO_MODE(_MM_FLUSH_ZERO_ON);
  _MM_SET_DENORMALS_ZERO_MODE(_MM_DENORMALS_ZERO_ON);
#endif
}

#define MSFORMER_INSTANTIATE_OPS(T)                                                                             \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                            \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                                            \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                            \
  template Var<T> scale(const Var<T>&, T);                                                                      \
  template Var<T> relu(const Var<T>&);                                                                          \
  template Var<T> gelu(const Var<T>&);                                                                          \
  template Var<T> sigmoid(const Var<T>&);                                                                       \
  template Var<T> reshape(const Var<T>&, Shape);                                                                \
  template Var<T> concat(const std::vector<Var<T>>&, int);                                                      \
  template Var<T> slice(const Var<T>&, int, int, int);                                                          \
  template Var<T> broadcast_batch(const Var<T>&, int);                                                          \
  template Var<T> to_tokens(const Var<T>&);                                                                     \
  template Var<T> from_tokens(const Var<T>&, int, int);                                                         \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>*, int, int);                                \
  template Var<T> batch_norm(const Var<T>&, const Var<T>&, const Var<T>&, Tensor<T>&, Tensor<T>&, bool, T, T); \
  template Var<T> max_pool2d(const Var<T>&, int, int, int);                                                     \
  template Var<T> upsample_bilinear(const Var<T>&, int, int);                                                   \
  template Var<T> adaptive_max_pool_tokens(const Var<T>&, int, int, int, int);                                  \
  template Var<T> adaptive_avg_pool_tokens(const Var<T>&, int, int, int, int);                                  \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>*);                                          \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                                   \
  template Var<T> attention(const Var<T>&, const Var<T>&, const Var<T>&, int, Tensor<T>*);                      \
  template Var<T> sum(const Var<T>&);                                                                           \
  template Var<T> mean(const Var<T>&);                                                                          \
  template Var<T> weighted_sum(const std::vector<Var<T>>&, const std::vector<T>&);                              \
  template Var<T> bce(const Var<T>&, const Tensor<T>&, T);                                                      \
  template Var<T> masked_l1(const Var<T>&, const Tensor<T>&, bool);

MSFORMER_INSTANTIATE_OPS(float)
MSFORMER_INSTANTIATE_OPS(double)

}  // namespace msformer::ops
