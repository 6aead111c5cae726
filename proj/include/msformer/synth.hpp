#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include "msformer/data.hpp"

namespace msformer::synth {

/// Fixed generator constants, listed by `synth --help`.
struct Style {
  double texture_amplitude = 0.12;    // low-frequency sinusoid amplitude
  double pixel_noise = 0.03;          // per-pixel noise shared by both dates
  double temporal_noise = 0.015;      // extra independent noise per date
  double size_min_fraction = 0.22;    // shape extent as a fraction of the image side
  double size_max_fraction = 0.45;
  int max_changes = 3;
  int max_distractors = 2;
  double no_change_probability = 0.1;
  double min_color_distance = 0.35;   // between a changed shape and the local background mean
};

struct SynthOptions {
  int n_samples = 200;
  int image_size = 64;
  std::uint64_t seed = 0;
  double train_fraction = 0.8;
  bool overwrite = false;  // replace existing train/test directories
  Style style;
};

/// One bi-temporal pair with its exact change mask, values quantized to 8 bits.
data::BiTemporalSample generate_sample(const std::string& id, int image_size, const Style& style, std::mt19937_64& rng);

/// Writes <out>/train and <out>/test with A, B and label directories.
/// Returns the number of training samples.
int synth_dataset(const std::filesystem::path& out_dir, const SynthOptions& options);

std::string describe(const Style& style);

}  // namespace msformer::synth
