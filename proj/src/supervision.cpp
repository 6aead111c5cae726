#include "msformer/supervision.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace msformer::supervision {
namespace {

template <typename T>
Var<T> zero() {
  return Var<T>(Tensor<T>::scalar(T(0)));
}

template <typename T>
void require_same_shape(const Shape& pred, const Shape& target, const char* op) {
  if (pred != target) {
    throw std::invalid_argument(std::string(op) + ": prediction " + shape_str(pred) + " does not match target " +
                                shape_str(target));
  }
}

template <typename T>
Var<T> binary_cross_entropy(const Var<T>& pred, const Tensor<T>& target, const char* op) {
  require_same_shape<T>(pred.shape(), target.shape(), op);
  return ops::bce(pred, target, static_cast<T>(kProbabilityEps));
}

// Target must be {0,1} and constant on each patch of every [.., H, W] plane.
template <typename T>
void check_block_constant(const Tensor<T>& y, data::PatchSize patch) {
  if (y.rank() < 2) throw std::invalid_argument("loss_upcl: target needs at least two axes");
  const int h = y.dim(-2), w = y.dim(-1);
  data::check_divisible(h, w, patch);
  const std::size_t planes = y.size() / (static_cast<std::size_t>(h) * w);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* plane = y.data() + p * h * w;
    for (int r = 0; r < h; ++r) {
      for (int c = 0; c < w; ++c) {
        const T v = plane[r * w + c];
        if (v != T(0) && v != T(1)) {
          throw std::invalid_argument("loss_upcl: target value " + std::to_string(static_cast<double>(v)) +
                                      " is not binary");
        }
        const T anchor = plane[(r - r % patch.h) * w + (c - c % patch.w)];
        if (v != anchor) {
          throw std::invalid_argument("loss_upcl: target is not constant on the " + std::to_string(patch.h) + "x" +
                                      std::to_string(patch.w) + " patch containing pixel (" + std::to_string(r) +
                                      ", " + std::to_string(c) + ")");
        }
      }
    }
  }
}

}  // namespace

template <typename T>
ChangeMap<T> predict_change_map(const TokenMap<T>& p_final, const nn::Linear<T>& projection, int out_h, int out_w) {
  const int stride = encoder::kTokenStride;
  if (out_h % stride != 0 || out_w % stride != 0 || p_final.grid_h != out_h / stride ||
      p_final.grid_w != out_w / stride) {
    throw std::invalid_argument("predict_change_map: token grid " + std::to_string(p_final.grid_h) + "x" +
                                std::to_string(p_final.grid_w) + " does not match output " + std::to_string(out_h) +
                                "x" + std::to_string(out_w) + " at stride " + std::to_string(stride));
  }
  Var<T> logits = projection(p_final.tokens);
  Var<T> coarse = ops::from_tokens(ops::sigmoid(logits), p_final.grid_h, p_final.grid_w);
  return {ops::upsample_bilinear(coarse, out_h, out_w)};
}

template <typename T>
Var<T> local_max(const Var<T>& map, PatchGrid grid) {
  if (map.value().rank() != 4 || map.dim(1) != 1) {
    throw std::invalid_argument("local_max: expected [B, 1, H, W], got " + shape_str(map.shape()));
  }
  const int batch = map.dim(0), h = map.dim(2), w = map.dim(3);
  if (grid.h < 1 || grid.w < 1 || h % grid.h != 0 || w % grid.w != 0) {
    throw std::invalid_argument("local_max: " + std::to_string(h) + "x" + std::to_string(w) +
                                " map cannot be split into a " + std::to_string(grid.h) + "x" + std::to_string(grid.w) +
                                " patch grid");
  }
  // With one channel the NCHW layout is already [B, H*W, 1].
  Var<T> tokens = ops::reshape(map, {batch, h * w, 1});
  Var<T> pooled = ops::adaptive_max_pool_tokens(tokens, h, w, grid.h, grid.w);
  return ops::reshape(pooled, {batch, 1, grid.h, grid.w});
}

template <typename T>
Var<T> loss_pcl(const Var<T>& g_local, const Tensor<T>& y_local) {
  return binary_cross_entropy(g_local, y_local, "loss_pcl");
}

template <typename T>
Var<T> loss_sp(const Var<T>& q_s, const Tensor<T>& y_local) {
  return binary_cross_entropy(q_s, y_local, "loss_sp");
}

template <typename T>
Var<T> loss_upcl(const Var<T>& g, const Tensor<T>& y_expanded, data::PatchSize patch, bool reduce_mean) {
  require_same_shape<T>(g.shape(), y_expanded.shape(), "loss_upcl");
  check_block_constant(y_expanded, patch);
  return ops::masked_l1(g, y_expanded, reduce_mean);
}

template <typename T>
double LossBundle<T>::sp_sum() const {
  double s = 0;
  for (const auto& l : l_sp) s += l.value().item();
  return s;
}

template <typename T>
std::string LossBundle<T>::describe() const {
  std::ostringstream os;
  os << "total=" << total.value().item() << " pcl=" << l_pcl.value().item() << " upcl=" << l_upcl.value().item();
  for (std::size_t s = 0; s < l_sp.size(); ++s) os << " sp" << s << "=" << l_sp[s].value().item();
  if (l_direct.defined()) os << " direct=" << l_direct.value().item();
  return os.str();
}

template <typename T>
LossBundle<T> combine(std::vector<Var<T>> l_sp, Var<T> l_pcl, Var<T> l_upcl) {
  LossBundle<T> b;
  b.l_sp = std::move(l_sp);
  b.l_pcl = std::move(l_pcl);
  b.l_upcl = std::move(l_upcl);
  b.l_direct = zero<T>();
  std::vector<Var<T>> parts = b.l_sp;
  parts.push_back(b.l_pcl);
  parts.push_back(b.l_upcl);
  b.total = ops::weighted_sum(parts, std::vector<T>(parts.size(), T(1)));
  return b;
}

template <typename T>
LossBundle<T> total_loss(const ChangeMap<T>& g, const std::vector<Var<T>>& q_s, const LossTargets<T>& targets,
                         const TrainConfig& cfg) {
  const AblationFlags& ab = cfg.ablation;
  const LossWeights& lw = cfg.loss_weights;
  const Var<T>& map = g.probabilities;
  if (map.value().rank() != 4) throw std::invalid_argument("total_loss: change map must be [B, 1, H, W]");
  const PatchGrid grid{targets.y_local.dim(-2), targets.y_local.dim(-1)};

  LossBundle<T> b;
  b.l_pcl = zero<T>();
  b.l_upcl = zero<T>();
  b.l_direct = zero<T>();
  for (const auto& q : q_s) b.l_sp.push_back(loss_sp(q, targets.y_local));
  if (ab.direct_sup) {
    b.l_direct = binary_cross_entropy(map, targets.y_expanded, "direct supervision");
  } else {
    if (!ab.no_pcl) b.l_pcl = loss_pcl(local_max(map, grid), targets.y_local);
    if (!ab.no_upcl) b.l_upcl = loss_upcl(map, targets.y_expanded, targets.patch, cfg.upcl_reduction == "mean");
  }

  std::vector<Var<T>> parts = b.l_sp;
  std::vector<T> weights(parts.size(), static_cast<T>(lw.sp));
  parts.push_back(b.l_pcl);
  weights.push_back(static_cast<T>(lw.pcl));
  parts.push_back(b.l_upcl);
  weights.push_back(static_cast<T>(lw.upcl));
  parts.push_back(b.l_direct);
  weights.push_back(static_cast<T>(lw.direct));
  b.total = ops::weighted_sum(parts, weights);
  return b;
}

#define MSFORMER_INSTANTIATE_SUPERVISION(T)                                                                      \
  template ChangeMap<T> predict_change_map(const TokenMap<T>&, const nn::Linear<T>&, int, int);                  \
  template Var<T> local_max(const Var<T>&, PatchGrid);                                                           \
  template Var<T> loss_pcl(const Var<T>&, const Tensor<T>&);                                                     \
  template Var<T> loss_sp(const Var<T>&, const Tensor<T>&);                                                      \
  template Var<T> loss_upcl(const Var<T>&, const Tensor<T>&, data::PatchSize, bool);                             \
  template struct LossBundle<T>;                                                                                 \
  template LossBundle<T> combine(std::vector<Var<T>>, Var<T>, Var<T>);                                           \
  template LossBundle<T> total_loss(const ChangeMap<T>&, const std::vector<Var<T>>&, const LossTargets<T>&,      \
                                    const TrainConfig&);

MSFORMER_INSTANTIATE_SUPERVISION(float)
MSFORMER_INSTANTIATE_SUPERVISION(double)

}  // namespace msformer::supervision
