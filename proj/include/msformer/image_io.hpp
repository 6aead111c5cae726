#pragma once

#include <cstdint>
#include <filesystem>

#include "msformer/tensor.hpp"

namespace msformer::io {

/// 8-bit PNG as H x W x 3 floats in [0, 1] (value / 255). Gray and alpha
/// inputs are converted to RGB.
Tensor<float> read_png_rgb(const std::filesystem::path& path);

/// Raw 8-bit single-channel values, H x W.
Tensor<std::uint8_t> read_png_gray(const std::filesystem::path& path);

/// Quantizes [0, 1] floats with round(v * 255).
void write_png_rgb(const std::filesystem::path& path, const Tensor<float>& image);

void write_png_gray(const std::filesystem::path& path, const Tensor<std::uint8_t>& image);

}  // namespace msformer::io
