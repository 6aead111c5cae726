#include "msformer/model.hpp"

#include <stdexcept>

namespace msformer {

template <typename T>
MSFormerModel<T>::MSFormerModel(const TrainConfig& cfg)
    : cfg_((validate(cfg), cfg)),
      rng_(cfg.seed),
      encoder_(store_, cfg.backbone_width, cfg.channels, rng_) {
  if (!cfg_.ablation.no_bab) transformer_.emplace(store_, cfg_, rng_);
  head_ = supervision::ChangeHead<T>(store_, "head", cfg_.channels, rng_);
}

template <typename T>
Tensor<T> MSFormerModel<T>::normalize(const Tensor<T>& images) const {
  if (images.rank() != 4 || images.dim(1) != 3) {
    throw std::invalid_argument("model input must be [B, 3, H, W], got " + shape_str(images.shape()));
  }
  Tensor<T> out = images;
  const std::size_t plane = static_cast<std::size_t>(images.dim(2)) * images.dim(3);
  for (int b = 0; b < images.dim(0); ++b) {
    for (int c = 0; c < 3; ++c) {
      const T mean = static_cast<T>(cfg_.input_mean[c]);
      const T inv_std = static_cast<T>(1.0 / cfg_.input_std[c]);
      T* p = out.data() + (static_cast<std::size_t>(b) * 3 + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] = (p[i] - mean) * inv_std;
    }
  }
  return out;
}

template <typename T>
PatchGrid MSFormerModel<T>::patch_grid(int height, int width) const {
  data::check_divisible(height, width, {cfg_.patch_h, cfg_.patch_w});
  return {height / cfg_.patch_h, width / cfg_.patch_w};
}

template <typename T>
ModelOutput<T> MSFormerModel<T>::forward(const Tensor<T>& images_t1, const Tensor<T>& images_t2, bool training,
                                         std::vector<transformer::BlockTrace<T>>* traces) const {
  const int h = images_t1.dim(2), w = images_t1.dim(3);
  encoder::check_input_size(h, w);
  const PatchGrid grid = patch_grid(h, w);
  TokenMap<T> tokens = encoder_.encode(Var<T>(normalize(images_t1)), Var<T>(normalize(images_t2)), training);
  ModelOutput<T> out;
  if (transformer_) {
    transformer::TransformerOutput<T> t = transformer_->forward(tokens, transformer_->initial_memory(images_t1.dim(0)),
                                                                grid, traces);
    tokens = std::move(t.tokens);
    out.aux = std::move(t.aux);
  }
  out.change = head_(tokens, h, w);
  out.tokens = std::move(tokens);
  return out;
}

template <typename T>
Tensor<T> stack_images(const std::vector<const Tensor<float>*>& images) {
  if (images.empty()) throw std::invalid_argument("stack_images: empty batch");
  const int h = images[0]->dim(0), w = images[0]->dim(1);
  const int batch = static_cast<int>(images.size());
  Tensor<T> out({batch, 3, h, w});
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int b = 0; b < batch; ++b) {
    const Tensor<float>& img = *images[b];
    if (img.shape() != Shape{h, w, 3}) {
      throw std::invalid_argument("stack_images: image " + std::to_string(b) + " has shape " + shape_str(img.shape()) +
                                  ", expected " + shape_str({h, w, 3}));
    }
    T* dst = out.data() + static_cast<std::size_t>(b) * 3 * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      for (int c = 0; c < 3; ++c) dst[c * plane + i] = static_cast<T>(img[i * 3 + c]);
    }
  }
  return out;
}

template class MSFormerModel<float>;
template class MSFormerModel<double>;
template Tensor<float> stack_images<float>(const std::vector<const Tensor<float>*>&);
template Tensor<double> stack_images<double>(const std::vector<const Tensor<float>*>&);

}  // namespace msformer
