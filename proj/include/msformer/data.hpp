#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "msformer/tensor.hpp"

namespace msformer::data {

using Mask = Tensor<std::uint8_t>;

/// Error carrying one message per offending file.
class DatasetError : public std::runtime_error {
 public:
  explicit DatasetError(std::vector<std::string> problems);
  const std::vector<std::string>& problems() const noexcept { return problems_; }

 private:
  std::vector<std::string> problems_;
};

/// One registered image pair. Images are H x W x 3 in [0, 1]; the optional
/// mask is H x W with 1 = changed.
struct BiTemporalSample {
  std::string id;
  Tensor<float> image_t1;
  Tensor<float> image_t2;
  std::optional<Mask> pixel_mask;

  int height() const { return image_t1.dim(0); }
  int width() const { return image_t1.dim(1); }
  /// Throws std::invalid_argument when an invariant does not hold.
  void validate() const;
};

struct PatchSize {
  int h = 0;
  int w = 0;
  friend bool operator==(const PatchSize&, const PatchSize&) = default;
};

/// Rectangle k of the non-overlapping patch tiling, k in row-major order.
struct PatchRegion {
  int index;
  int row0;
  int col0;
  int rows;
  int cols;
};

/// Throws std::invalid_argument naming each axis that the patch does not divide.
void check_divisible(int height, int width, PatchSize patch);

std::vector<PatchRegion> crop_into_patch_grid(int height, int width, PatchSize patch);
std::vector<PatchRegion> crop_into_patch_grid(const BiTemporalSample& sample, PatchSize patch);

/// Binary per-patch labels and their block-constant pixel expansion.
struct PatchLabelGrid {
  PatchSize patch;
  Mask grid;      // (H / patch.h) x (W / patch.w)
  Mask expanded;  // H x W

  int grid_h() const { return grid.dim(0); }
  int grid_w() const { return grid.dim(1); }
};

/// grid[k] = 1 iff some pixel of region k is 1. Rejects non-binary masks.
PatchLabelGrid generate_patch_labels(const Mask& pixel_mask, PatchSize patch);

/// Per-patch maximum of a [0, 1] map.
struct LocalScaleMap {
  Tensor<float> values;
};

LocalScaleMap downsample_local(const Tensor<float>& map, PatchSize patch);

Tensor<float> mask_to_float(const Mask& mask);

struct AugmentFlags {
  bool hflip = false;
  bool vflip = false;
  bool temporal_exchange = false;
};

/// Independent fair coin per flag.
AugmentFlags sample_augment_flags(std::mt19937_64& rng);

/// Flips act on both images, the pixel mask and the patch labels; temporal
/// exchange swaps the images only.
std::pair<BiTemporalSample, PatchLabelGrid> augment(const BiTemporalSample& sample, const PatchLabelGrid& labels,
                                                    AugmentFlags flags);

Tensor<float> flip_image(const Tensor<float>& image, bool horizontal, bool vertical);
Mask flip_mask(const Mask& mask, bool horizontal, bool vertical);

/// Accepts {0,1} or {0,255} encodings, returns {0,1}. Anything else throws.
Mask normalize_mask(const Mask& raw, const std::string& source);

/// Reads <root>/<split>/{A,B,label}/<id>.png in filename order. The label
/// directory is optional; when present every pair needs a mask.
std::vector<BiTemporalSample> load_dataset(const std::filesystem::path& root, const std::string& split);

void write_sample(const std::filesystem::path& root, const std::string& split, const BiTemporalSample& sample);

std::filesystem::path patch_label_dir(const std::filesystem::path& root, const std::string& split, PatchSize patch);

/// Writes plabel_<h>x<w>/<id>.png (0/255 block-constant expansion) for every
/// sample with a mask. Returns the number of files written.
std::size_t export_patch_labels(const std::filesystem::path& root, const std::string& split,
                                const std::vector<BiTemporalSample>& samples, PatchSize patch);

}  // namespace msformer::data
