#pragma once

#include <array>
#include <string>
#include <vector>

#include "msformer/nn.hpp"

namespace msformer {

/// Backbone outputs at strides 8, 16, 32 and 64 (levels i = 2..5, spatial
/// size H / 2^(i+1)). Each entry is NCHW.
template <typename T>
struct MultiLevelFeatures {
  std::array<Var<T>, 4> levels;
  Var<T> stem;  // stride-4 stem output (level 1), optional
};

/// Signed per-level difference of the two temporal feature pyramids.
template <typename T>
struct DifferenceFeatures {
  std::array<Var<T>, 4> levels;
  Var<T> stem;
};

/// Feature tokens [B, grid_h * grid_w, C] in row-major grid order.
template <typename T>
struct TokenMap {
  Var<T> tokens;
  int grid_h = 0;
  int grid_w = 0;

  int channels() const { return tokens.dim(2); }
  int count() const { return grid_h * grid_w; }
};

namespace encoder {

inline constexpr int kDeepestStride = 64;
inline constexpr int kTokenStride = 4;

/// Throws std::invalid_argument unless both sides are multiples of 64.
void check_input_size(int height, int width);

template <typename T>
class BasicBlock {
 public:
  BasicBlock() = default;
  BasicBlock(nn::ParameterStore<T>& store, const std::string& name, int in, int out, int stride, nn::Rng& rng);
  Var<T> operator()(const Var<T>& x, bool training) const;

 private:
  nn::Conv2d<T> conv1_, conv2_, down_conv_;
  nn::BatchNorm2d<T> bn1_, bn2_, down_bn_;
  bool has_down_ = false;
};

/// Residual encoder with the 18-layer topology (2 basic blocks per stage).
/// The first stage is strided so the four outputs land at strides 8..64.
template <typename T>
class Backbone {
 public:
  Backbone(nn::ParameterStore<T>& store, const std::string& prefix, int base_width, nn::Rng& rng);

  /// images: [B, 3, H, W] with H, W multiples of 64.
  MultiLevelFeatures<T> extract_features(const Var<T>& images, bool training) const;

  std::array<int, 4> level_channels() const { return channels_; }
  int stem_channels() const { return stem_channels_; }
  /// Names of every tensor this backbone registered.
  const std::vector<std::string>& parameter_names() const { return names_; }

 private:
  nn::Conv2d<T> stem_conv_;
  nn::BatchNorm2d<T> stem_bn_;
  std::array<std::array<BasicBlock<T>, 2>, 4> stages_;
  std::array<int, 4> channels_{};
  int stem_channels_ = 0;
  std::vector<std::string> names_;
};

template <typename T>
DifferenceFeatures<T> temporal_difference(const MultiLevelFeatures<T>& f1, const MultiLevelFeatures<T>& f2);

/// Feature-pyramid decoder: lateral 1x1 projections, top-down upsample-and-add,
/// a 3x3 smoothing conv per level, then every level resized to stride 4 and
/// summed into one C-channel map. The stride-4 stem difference enters as the
/// finest lateral (level 1).
template <typename T>
class FpnDecoder {
 public:
  FpnDecoder(nn::ParameterStore<T>& store, const std::string& prefix, std::array<int, 4> in_channels,
             int stem_channels, int channels, nn::Rng& rng);

  TokenMap<T> decode_aggregate(const DifferenceFeatures<T>& d, bool training) const;

 private:
  std::array<nn::Conv2d<T>, 4> lateral_, smooth_;
  std::array<nn::BatchNorm2d<T>, 4> lateral_bn_, smooth_bn_;
  nn::Conv2d<T> stem_lateral_, stem_smooth_;
  nn::BatchNorm2d<T> stem_lateral_bn_, stem_smooth_bn_;
};

/// Runs both temporal images through one backbone as a single batch.
template <typename T>
class ChangeEncoder {
 public:
  ChangeEncoder(nn::ParameterStore<T>& store, int base_width, int channels, nn::Rng& rng);

  TokenMap<T> encode(const Var<T>& images_t1, const Var<T>& images_t2, bool training) const;

  const Backbone<T>& backbone() const { return backbone_; }
  const FpnDecoder<T>& decoder() const { return decoder_; }

 private:
  Backbone<T> backbone_;
  FpnDecoder<T> decoder_;
};

}  // namespace encoder
}  // namespace msformer
