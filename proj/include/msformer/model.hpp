#pragma once

#include <optional>
#include <vector>

#include "msformer/config.hpp"
#include "msformer/encoder.hpp"
#include "msformer/memory_transformer.hpp"
#include "msformer/supervision.hpp"

namespace msformer {

template <typename T>
struct ModelOutput {
  supervision::ChangeMap<T> change;
  std::vector<Var<T>> aux;  // one Q_s per block; empty without the attention stack
  TokenMap<T> tokens;
};

/// Encoder, memory transformer and change head with parameters owned by one
/// store. Construction order is fixed, so a seed fixes every initial value.
template <typename T>
class MSFormerModel {
 public:
  explicit MSFormerModel(const TrainConfig& cfg);
  MSFormerModel(const MSFormerModel&) = delete;
  MSFormerModel& operator=(const MSFormerModel&) = delete;

  /// Images are [B, 3, H, W] in [0, 1]; normalization happens inside.
  ModelOutput<T> forward(const Tensor<T>& images_t1, const Tensor<T>& images_t2, bool training,
                         std::vector<transformer::BlockTrace<T>>* traces = nullptr) const;

  PatchGrid patch_grid(int height, int width) const;

  const TrainConfig& config() const { return cfg_; }
  nn::ParameterStore<T>& store() { return store_; }
  const nn::ParameterStore<T>& store() const { return store_; }
  const encoder::ChangeEncoder<T>& change_encoder() const { return encoder_; }
  transformer::MemoryTransformer<T>* memory_transformer() { return transformer_ ? &*transformer_ : nullptr; }
  supervision::ChangeHead<T>& head() { return head_; }

 private:
  Tensor<T> normalize(const Tensor<T>& images) const;

  TrainConfig cfg_;
  nn::ParameterStore<T> store_;
  nn::Rng rng_;
  encoder::ChangeEncoder<T> encoder_;
  std::optional<transformer::MemoryTransformer<T>> transformer_;
  supervision::ChangeHead<T> head_;
};

/// Stacks H x W x 3 images into one [B, 3, H, W] batch.
template <typename T>
Tensor<T> stack_images(const std::vector<const Tensor<float>*>& images);

}  // namespace msformer
