#pragma once

#include <string>
#include <vector>

#include "msformer/config.hpp"
#include "msformer/data.hpp"
#include "msformer/memory_transformer.hpp"

namespace msformer::supervision {

/// Change probabilities G at full input resolution, [B, 1, H, W].
template <typename T>
struct ChangeMap {
  Var<T> probabilities;
};

inline constexpr double kProbabilityEps = 1e-6;

/// 1x1 projection to one channel, sigmoid, bilinear x4 upsample.
template <typename T>
ChangeMap<T> predict_change_map(const TokenMap<T>& p_final, const nn::Linear<T>& projection, int out_h, int out_w);

template <typename T>
class ChangeHead {
 public:
  ChangeHead() = default;
  ChangeHead(nn::ParameterStore<T>& store, const std::string& prefix, int channels, nn::Rng& rng)
      : projection_(store, prefix + ".proj", channels, 1, true, rng) {}

  ChangeMap<T> operator()(const TokenMap<T>& p_final, int out_h, int out_w) const {
    return predict_change_map(p_final, projection_, out_h, out_w);
  }

  nn::Linear<T>& projection() { return projection_; }

 private:
  nn::Linear<T> projection_;
};

/// Per-patch maximum of a [B, 1, H, W] map, giving [B, 1, grid.h, grid.w].
template <typename T>
Var<T> local_max(const Var<T>& map, PatchGrid grid);

/// Mean BCE between a predicted local-scale map and its binary target.
template <typename T>
Var<T> loss_pcl(const Var<T>& g_local, const Tensor<T>& y_local);

/// Same functional as loss_pcl, applied to one block's auxiliary map.
template <typename T>
Var<T> loss_sp(const Var<T>& q_s, const Tensor<T>& y_local);

/// |(1 - Y)(G - Y)| reduced over all pixels. Y must be binary and constant on
/// every patch of `patch`.
template <typename T>
Var<T> loss_upcl(const Var<T>& g, const Tensor<T>& y_expanded, data::PatchSize patch, bool reduce_mean = true);

/// Binary label targets for one batch.
template <typename T>
struct LossTargets {
  data::PatchSize patch;
  Tensor<T> y_local;     // [B, 1, H / patch.h, W / patch.w]
  Tensor<T> y_expanded;  // [B, 1, H, W]
};

template <typename T>
struct LossBundle {
  Var<T> l_pcl;
  Var<T> l_upcl;
  std::vector<Var<T>> l_sp;
  Var<T> l_direct;  // zero unless direct supervision replaces the patch losses
  Var<T> total;

  double sp_sum() const;
  std::string describe() const;
};

/// Weighted sum of the components. Components switched off by the ablation
/// flags are reported as constant zeros.
template <typename T>
LossBundle<T> total_loss(const ChangeMap<T>& g, const std::vector<Var<T>>& q_s, const LossTargets<T>& targets,
                         const TrainConfig& cfg);

/// total = sum(l_sp) + l_pcl + l_upcl from already computed parts.
template <typename T>
LossBundle<T> combine(std::vector<Var<T>> l_sp, Var<T> l_pcl, Var<T> l_upcl);

}  // namespace msformer::supervision
