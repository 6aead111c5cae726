#include "msformer/data.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include "msformer/image_io.hpp"

namespace fs = std::filesystem;

namespace msformer::data {
namespace {

std::string join_lines(const std::vector<std::string>& lines) {
  std::string out;
  for (const auto& l : lines) {
    if (!out.empty()) out += "\n";
    out += l;
  }
  return out;
}

}  // namespace

DatasetError::DatasetError(std::vector<std::string> problems)
    : std::runtime_error(join_lines(problems)), problems_(std::move(problems)) {}

void BiTemporalSample::validate() const {
  auto fail = [this](const std::string& what) { throw std::invalid_argument("sample '" + id + "': " + what); };
  if (image_t1.rank() != 3 || image_t1.dim(2) != 3) fail("image_t1 must be H x W x 3, got " + shape_str(image_t1.shape()));
  if (image_t2.shape() != image_t1.shape()) {
    fail("image_t2 shape " + shape_str(image_t2.shape()) + " differs from image_t1 " + shape_str(image_t1.shape()));
  }
  for (const auto* img : {&image_t1, &image_t2}) {
    for (float v : img->values()) {
      if (!(v >= 0.0f && v <= 1.0f)) fail("pixel value outside [0, 1]");
    }
  }
  if (pixel_mask) {
    if (pixel_mask->shape() != Shape{height(), width()}) {
      fail("mask shape " + shape_str(pixel_mask->shape()) + " does not match image " + std::to_string(height()) + "x" +
           std::to_string(width()));
    }
    for (auto v : pixel_mask->values()) {
      if (v > 1) fail("mask value " + std::to_string(v) + " is not binary");
    }
  }
}

void check_divisible(int height, int width, PatchSize patch) {
  if (patch.h <= 0 || patch.w <= 0) {
    throw std::invalid_argument("patch size must be positive, got " + std::to_string(patch.h) + "x" +
                                std::to_string(patch.w));
  }
  std::vector<std::string> axes;
  if (height % patch.h != 0) {
    axes.push_back("height " + std::to_string(height) + " is not divisible by patch height " + std::to_string(patch.h));
  }
  if (width % patch.w != 0) {
    axes.push_back("width " + std::to_string(width) + " is not divisible by patch width " + std::to_string(patch.w));
  }
  if (!axes.empty()) {
    std::string msg = "image ";
    for (std::size_t i = 0; i < axes.size(); ++i) msg += (i ? "; image " : "") + axes[i];
    throw std::invalid_argument(msg);
  }
}

std::vector<PatchRegion> crop_into_patch_grid(int height, int width, PatchSize patch) {
  check_divisible(height, width, patch);
  const int gh = height / patch.h, gw = width / patch.w;
  std::vector<PatchRegion> regions;
  regions.reserve(static_cast<std::size_t>(gh) * gw);
  for (int r = 0; r < gh; ++r) {
    for (int c = 0; c < gw; ++c) regions.push_back({r * gw + c, r * patch.h, c * patch.w, patch.h, patch.w});
  }
  return regions;
}

std::vector<PatchRegion> crop_into_patch_grid(const BiTemporalSample& sample, PatchSize patch) {
  return crop_into_patch_grid(sample.height(), sample.width(), patch);
}

PatchLabelGrid generate_patch_labels(const Mask& pixel_mask, PatchSize patch) {
  if (pixel_mask.rank() != 2) throw std::invalid_argument("pixel mask must be H x W, got " + shape_str(pixel_mask.shape()));
  for (auto v : pixel_mask.values()) {
    if (v > 1) throw std::invalid_argument("pixel mask value " + std::to_string(v) + " is not binary");
  }
  const int h = pixel_mask.dim(0), w = pixel_mask.dim(1);
  check_divisible(h, w, patch);
  const int gh = h / patch.h, gw = w / patch.w;
  PatchLabelGrid out{patch, Mask({gh, gw}), Mask({h, w})};
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      if (pixel_mask[static_cast<std::size_t>(r) * w + c]) out.grid[static_cast<std::size_t>(r / patch.h) * gw + c / patch.w] = 1;
    }
  }
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      out.expanded[static_cast<std::size_t>(r) * w + c] = out.grid[static_cast<std::size_t>(r / patch.h) * gw + c / patch.w];
    }
  }
  return out;
}

LocalScaleMap downsample_local(const Tensor<float>& map, PatchSize patch) {
  if (map.rank() != 2) throw std::invalid_argument("downsample_local: map must be H x W, got " + shape_str(map.shape()));
  for (float v : map.values()) {
    if (!(v >= 0.0f && v <= 1.0f)) throw std::invalid_argument("downsample_local: value outside [0, 1]");
  }
  const int h = map.dim(0), w = map.dim(1);
  check_divisible(h, w, patch);
  const int gh = h / patch.h, gw = w / patch.w;
  LocalScaleMap out{Tensor<float>({gh, gw})};
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      float& cell = out.values[static_cast<std::size_t>(r / patch.h) * gw + c / patch.w];
      cell = std::max(cell, map[static_cast<std::size_t>(r) * w + c]);
    }
  }
  return out;
}

Tensor<float> mask_to_float(const Mask& mask) { return mask.cast<float>(); }

AugmentFlags sample_augment_flags(std::mt19937_64& rng) {
  std::bernoulli_distribution coin(0.5);
  AugmentFlags f;
  f.hflip = coin(rng);
  f.vflip = coin(rng);
  f.temporal_exchange = coin(rng);
  return f;
}

namespace {
template <typename V>
Tensor<V> flip_hw(const Tensor<V>& t, bool horizontal, bool vertical) {
  if (!horizontal && !vertical) return t;
  const int h = t.dim(0), w = t.dim(1);
  const std::size_t depth = t.size() / (static_cast<std::size_t>(h) * w);
  Tensor<V> out(t.shape());
  for (int r = 0; r < h; ++r) {
    const int sr = vertical ? h - 1 - r : r;
    for (int c = 0; c < w; ++c) {
      const int sc = horizontal ? w - 1 - c : c;
      std::copy_n(t.data() + (static_cast<std::size_t>(sr) * w + sc) * depth, depth,
                  out.data() + (static_cast<std::size_t>(r) * w + c) * depth);
    }
  }
  return out;
}
}  // namespace

Tensor<float> flip_image(const Tensor<float>& image, bool horizontal, bool vertical) {
  return flip_hw(image, horizontal, vertical);
}

Mask flip_mask(const Mask& mask, bool horizontal, bool vertical) { return flip_hw(mask, horizontal, vertical); }

std::pair<BiTemporalSample, PatchLabelGrid> augment(const BiTemporalSample& sample, const PatchLabelGrid& labels,
                                                    AugmentFlags flags) {
  BiTemporalSample s;
  s.id = sample.id;
  s.image_t1 = flip_image(sample.image_t1, flags.hflip, flags.vflip);
  s.image_t2 = flip_image(sample.image_t2, flags.hflip, flags.vflip);
  if (sample.pixel_mask) s.pixel_mask = flip_mask(*sample.pixel_mask, flags.hflip, flags.vflip);
  if (flags.temporal_exchange) std::swap(s.image_t1, s.image_t2);
  PatchLabelGrid l{labels.patch, flip_mask(labels.grid, flags.hflip, flags.vflip),
                   flip_mask(labels.expanded, flags.hflip, flags.vflip)};
  return {std::move(s), std::move(l)};
}

Mask normalize_mask(const Mask& raw, const std::string& source) {
  bool has_one = false, has_255 = false;
  for (auto v : raw.values()) {
    if (v == 1) {
      has_one = true;
    } else if (v == 255) {
      has_255 = true;
    } else if (v != 0) {
      throw std::invalid_argument(source + ": mask value " + std::to_string(v) + " is neither 0/1 nor 0/255");
    }
  }
  if (has_one && has_255) throw std::invalid_argument(source + ": mask mixes the 0/1 and 0/255 encodings");
  Mask out = raw;
  for (auto& v : out.values()) v = v ? 1 : 0;
  return out;
}

std::vector<BiTemporalSample> load_dataset(const fs::path& root, const std::string& split) {
  const fs::path base = root / split;
  const fs::path dir_a = base / "A", dir_b = base / "B", dir_label = base / "label";
  std::vector<std::string> problems;
  if (!fs::is_directory(dir_a)) problems.push_back("missing directory: " + dir_a.string());
  if (!fs::is_directory(dir_b)) problems.push_back("missing directory: " + dir_b.string());
  if (!problems.empty()) throw DatasetError(problems);
  const bool has_labels = fs::is_directory(dir_label);

  auto list_ids = [](const fs::path& dir) {
    std::set<std::string> ids;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.is_regular_file() && entry.path().extension() == ".png") ids.insert(entry.path().stem().string());
    }
    return ids;
  };
  const auto ids_a = list_ids(dir_a);
  const auto ids_b = list_ids(dir_b);
  for (const auto& id : ids_a) {
    if (!ids_b.count(id)) problems.push_back("missing file: " + (dir_b / (id + ".png")).string());
    if (has_labels && !fs::is_regular_file(dir_label / (id + ".png"))) {
      problems.push_back("missing file: " + (dir_label / (id + ".png")).string());
    }
  }
  for (const auto& id : ids_b) {
    if (!ids_a.count(id)) problems.push_back("missing file: " + (dir_a / (id + ".png")).string());
  }
  if (!problems.empty()) throw DatasetError(problems);

  std::vector<BiTemporalSample> samples;
  samples.reserve(ids_a.size());
  for (const auto& id : ids_a) {
    try {
      BiTemporalSample s;
      s.id = id;
      s.image_t1 = io::read_png_rgb(dir_a / (id + ".png"));
      s.image_t2 = io::read_png_rgb(dir_b / (id + ".png"));
      if (has_labels) {
        const fs::path mask_path = dir_label / (id + ".png");
        s.pixel_mask = normalize_mask(io::read_png_gray(mask_path), mask_path.string());
      }
      s.validate();
      samples.push_back(std::move(s));
    } catch (const std::exception& e) {
      problems.push_back(id + ": " + e.what());
    }
  }
  if (!problems.empty()) throw DatasetError(problems);
  return samples;
}

void write_sample(const fs::path& root, const std::string& split, const BiTemporalSample& sample) {
  const fs::path base = root / split;
  fs::create_directories(base / "A");
  fs::create_directories(base / "B");
  io::write_png_rgb(base / "A" / (sample.id + ".png"), sample.image_t1);
  io::write_png_rgb(base / "B" / (sample.id + ".png"), sample.image_t2);
  if (sample.pixel_mask) {
    fs::create_directories(base / "label");
    Mask out = *sample.pixel_mask;
    for (auto& v : out.values()) v = v ? 255 : 0;
    io::write_png_gray(base / "label" / (sample.id + ".png"), out);
  }
}

fs::path patch_label_dir(const fs::path& root, const std::string& split, PatchSize patch) {
  return root / split / ("plabel_" + std::to_string(patch.h) + "x" + std::to_string(patch.w));
}

std::size_t export_patch_labels(const fs::path& root, const std::string& split,
                                const std::vector<BiTemporalSample>& samples, PatchSize patch) {
  std::vector<std::string> problems;
  std::vector<std::pair<std::string, Mask>> outputs;
  for (const auto& s : samples) {
    if (!s.pixel_mask) {
      problems.push_back(s.id + ": no pixel mask to derive patch labels from");
      continue;
    }
    try {
      PatchLabelGrid labels = generate_patch_labels(*s.pixel_mask, patch);
      for (auto& v : labels.expanded.values()) v = v ? 255 : 0;
      outputs.emplace_back(s.id, std::move(labels.expanded));
    } catch (const std::exception& e) {
      problems.push_back(s.id + ": " + e.what());
    }
  }
  if (!problems.empty()) throw DatasetError(problems);
  const fs::path dir = patch_label_dir(root, split, patch);
  fs::create_directories(dir);
  for (const auto& [id, mask] : outputs) io::write_png_gray(dir / (id + ".png"), mask);
  return outputs.size();
}

}  // namespace msformer::data
