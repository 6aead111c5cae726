#include "msformer/encoder.hpp"

#include <stdexcept>

namespace msformer::encoder {

void check_input_size(int height, int width) {
  if (height <= 0 || width <= 0 || height % kDeepestStride != 0 || width % kDeepestStride != 0) {
    throw std::invalid_argument("input " + std::to_string(height) + "x" + std::to_string(width) +
                                " must have both sides divisible by " + std::to_string(kDeepestStride));
  }
}

template <typename T>
BasicBlock<T>::BasicBlock(nn::ParameterStore<T>& store, const std::string& name, int in, int out, int stride,
                          nn::Rng& rng)
    : conv1_(store, name + ".conv1", in, out, 3, stride, 1, false, rng),
      conv2_(store, name + ".conv2", out, out, 3, 1, 1, false, rng),
      bn1_(store, name + ".bn1", out),
      bn2_(store, name + ".bn2", out),
      has_down_(stride != 1 || in != out) {
  if (has_down_) {
    down_conv_ = nn::Conv2d<T>(store, name + ".downsample.0", in, out, 1, stride, 0, false, rng);
    down_bn_ = nn::BatchNorm2d<T>(store, name + ".downsample.1", out);
  }
}

template <typename T>
Var<T> BasicBlock<T>::operator()(const Var<T>& x, bool training) const {
  Var<T> y = ops::relu(bn1_(conv1_(x), training));
  y = bn2_(conv2_(y), training);
  Var<T> shortcut = has_down_ ? down_bn_(down_conv_(x), training) : x;
  return ops::relu(ops::add(y, shortcut));
}

template <typename T>
Backbone<T>::Backbone(nn::ParameterStore<T>& store, const std::string& prefix, int base_width, nn::Rng& rng) {
  const std::size_t first = store.entries().size();
  stem_conv_ = nn::Conv2d<T>(store, prefix + ".conv1", 3, base_width, 7, 2, 3, false, rng);
  stem_bn_ = nn::BatchNorm2d<T>(store, prefix + ".bn1", base_width);
  stem_channels_ = base_width;
  int in = base_width;
  for (int s = 0; s < 4; ++s) {
    const int out = base_width << s;
    channels_[s] = out;
    for (int b = 0; b < 2; ++b) {
      const std::string name = prefix + ".layer" + std::to_string(s + 1) + "." + std::to_string(b);
      stages_[s][b] = BasicBlock<T>(store, name, b == 0 ? in : out, out, b == 0 ? 2 : 1, rng);
    }
    in = out;
  }
  for (std::size_t i = first; i < store.entries().size(); ++i) names_.push_back(store.entries()[i].name);
}

template <typename T>
MultiLevelFeatures<T> Backbone<T>::extract_features(const Var<T>& images, bool training) const {
  if (images.value().rank() != 4 || images.dim(1) != 3) {
    throw std::invalid_argument("extract_features: expected [B, 3, H, W], got " + shape_str(images.shape()));
  }
  check_input_size(images.dim(2), images.dim(3));
  Var<T> x = ops::relu(stem_bn_(stem_conv_(images), training));
  x = ops::max_pool2d(x, 3, 2, 1);
  MultiLevelFeatures<T> out;
  out.stem = x;
  for (int s = 0; s < 4; ++s) {
    x = stages_[s][0](x, training);
    x = stages_[s][1](x, training);
    out.levels[s] = x;
  }
  return out;
}

template <typename T>
DifferenceFeatures<T> temporal_difference(const MultiLevelFeatures<T>& f1, const MultiLevelFeatures<T>& f2) {
  DifferenceFeatures<T> d;
  for (std::size_t i = 0; i < 4; ++i) {
    if (f1.levels[i].shape() != f2.levels[i].shape()) {
      throw std::invalid_argument("temporal_difference: level " + std::to_string(i + 2) + " shape " +
                                  shape_str(f1.levels[i].shape()) + " vs " + shape_str(f2.levels[i].shape()));
    }
    d.levels[i] = ops::sub(f1.levels[i], f2.levels[i]);
  }
  if (f1.stem.defined() != f2.stem.defined()) throw std::invalid_argument("temporal_difference: stem on one side only");
  if (f1.stem.defined()) {
    if (f1.stem.shape() != f2.stem.shape()) {
      throw std::invalid_argument("temporal_difference: stem shape " + shape_str(f1.stem.shape()) + " vs " +
                                  shape_str(f2.stem.shape()));
    }
    d.stem = ops::sub(f1.stem, f2.stem);
  }
  return d;
}

template <typename T>
FpnDecoder<T>::FpnDecoder(nn::ParameterStore<T>& store, const std::string& prefix, std::array<int, 4> in_channels,
                          int stem_channels, int channels, nn::Rng& rng) {
  for (int i = 0; i < 4; ++i) {
    const std::string level = std::to_string(i + 2);
    lateral_[i] = nn::Conv2d<T>(store, prefix + ".lateral" + level, in_channels[i], channels, 1, 1, 0, false, rng);
    lateral_bn_[i] = nn::BatchNorm2d<T>(store, prefix + ".lateral" + level + ".bn", channels);
    smooth_[i] = nn::Conv2d<T>(store, prefix + ".smooth" + level, channels, channels, 3, 1, 1, false, rng);
    smooth_bn_[i] = nn::BatchNorm2d<T>(store, prefix + ".smooth" + level + ".bn", channels);
  }
  stem_lateral_ = nn::Conv2d<T>(store, prefix + ".lateral1", stem_channels, channels, 1, 1, 0, false, rng);
  stem_lateral_bn_ = nn::BatchNorm2d<T>(store, prefix + ".lateral1.bn", channels);
  stem_smooth_ = nn::Conv2d<T>(store, prefix + ".smooth1", channels, channels, 3, 1, 1, false, rng);
  stem_smooth_bn_ = nn::BatchNorm2d<T>(store, prefix + ".smooth1.bn", channels);
}

template <typename T>
TokenMap<T> FpnDecoder<T>::decode_aggregate(const DifferenceFeatures<T>& d, bool training) const {
  for (int i = 1; i < 4; ++i) {
    const auto& fine = d.levels[i - 1].shape();
    const auto& coarse = d.levels[i].shape();
    if (fine.size() != 4 || coarse.size() != 4 || fine[0] != coarse[0] || fine[2] != 2 * coarse[2] ||
        fine[3] != 2 * coarse[3]) {
      throw std::invalid_argument("decode_aggregate: levels do not form a stride-2 pyramid");
    }
  }
  if (!d.stem.defined()) throw std::invalid_argument("decode_aggregate: missing the stride-4 stem difference");
  const int out_h = 2 * d.levels[0].dim(2);
  const int out_w = 2 * d.levels[0].dim(3);
  if (d.stem.value().rank() != 4 || d.stem.dim(0) != d.levels[0].dim(0) || d.stem.dim(2) != out_h ||
      d.stem.dim(3) != out_w) {
    throw std::invalid_argument("decode_aggregate: stem " + shape_str(d.stem.shape()) + " is not at stride 4");
  }
  std::array<Var<T>, 4> lat;
  for (int i = 0; i < 4; ++i) lat[i] = ops::relu(lateral_bn_[i](lateral_[i](d.levels[i]), training));
  for (int i = 2; i >= 0; --i) {
    lat[i] = ops::add(lat[i], ops::upsample_bilinear(lat[i + 1], lat[i].dim(2), lat[i].dim(3)));
  }
  Var<T> merged;
  for (int i = 0; i < 4; ++i) {
    Var<T> level = ops::relu(smooth_bn_[i](smooth_[i](lat[i]), training));
    level = ops::upsample_bilinear(level, out_h, out_w);
    merged = merged.defined() ? ops::add(merged, level) : level;
  }
  Var<T> fine = ops::relu(stem_lateral_bn_(stem_lateral_(d.stem), training));
  fine = ops::add(fine, ops::upsample_bilinear(lat[0], out_h, out_w));
  merged = ops::add(merged, ops::relu(stem_smooth_bn_(stem_smooth_(fine), training)));
  return TokenMap<T>{ops::to_tokens(merged), out_h, out_w};
}

template <typename T>
ChangeEncoder<T>::ChangeEncoder(nn::ParameterStore<T>& store, int base_width, int channels, nn::Rng& rng)
    : backbone_(store, "backbone", base_width, rng),
      decoder_(store, "decoder", backbone_.level_channels(), backbone_.stem_channels(), channels, rng) {}

template <typename T>
TokenMap<T> ChangeEncoder<T>::encode(const Var<T>& images_t1, const Var<T>& images_t2, bool training) const {
  if (images_t1.shape() != images_t2.shape()) {
    throw std::invalid_argument("encode: temporal images differ in shape " + shape_str(images_t1.shape()) + " vs " +
                                shape_str(images_t2.shape()));
  }
  const int batch = images_t1.dim(0);
  MultiLevelFeatures<T> both = backbone_.extract_features(ops::concat<T>({images_t1, images_t2}, 0), training);
  MultiLevelFeatures<T> f1, f2;
  for (int i = 0; i < 4; ++i) {
    f1.levels[i] = ops::slice(both.levels[i], 0, 0, batch);
    f2.levels[i] = ops::slice(both.levels[i], 0, batch, batch);
  }
  f1.stem = ops::slice(both.stem, 0, 0, batch);
  f2.stem = ops::slice(both.stem, 0, batch, batch);
  return decoder_.decode_aggregate(temporal_difference(f1, f2), training);
}

template class BasicBlock<float>;
template class BasicBlock<double>;
template class Backbone<float>;
template class Backbone<double>;
template class FpnDecoder<float>;
template class FpnDecoder<double>;
template class ChangeEncoder<float>;
template class ChangeEncoder<double>;
template DifferenceFeatures<float> temporal_difference(const MultiLevelFeatures<float>&, const MultiLevelFeatures<float>&);
template DifferenceFeatures<double> temporal_difference(const MultiLevelFeatures<double>&,
                                                        const MultiLevelFeatures<double>&);

}  // namespace msformer::encoder
