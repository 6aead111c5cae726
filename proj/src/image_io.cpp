#include "msformer/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <vector>

namespace msformer::io {
namespace {

std::vector<std::uint8_t> read_png(const std::filesystem::path& path, std::uint32_t format, int& height, int& width) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw std::runtime_error("cannot read PNG '" + path.string() + "': " + image.message);
  }
  image.format = format;
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&image);
    throw std::runtime_error("cannot decode PNG '" + path.string() + "': " + image.message);
  }
  height = static_cast<int>(image.height);
  width = static_cast<int>(image.width);
  return buffer;
}

void write_png(const std::filesystem::path& path, std::uint32_t format, int height, int width,
               const std::uint8_t* data) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(width);
  image.height = static_cast<png_uint_32>(height);
  image.format = format;
  if (!png_image_write_to_file(&image, path.c_str(), 0, data, 0, nullptr)) {
    throw std::runtime_error("cannot write PNG '" + path.string() + "': " + image.message);
  }
}

}  // namespace

Tensor<float> read_png_rgb(const std::filesystem::path& path) {
  int h = 0, w = 0;
  auto bytes = read_png(path, PNG_FORMAT_RGB, h, w);
  Tensor<float> out({h, w, 3});
  for (std::size_t i = 0; i < bytes.size(); ++i) out[i] = static_cast<float>(bytes[i]) / 255.0f;
  return out;
}

Tensor<std::uint8_t> read_png_gray(const std::filesystem::path& path) {
  int h = 0, w = 0;
  auto bytes = read_png(path, PNG_FORMAT_GRAY, h, w);
  return Tensor<std::uint8_t>({h, w}, std::move(bytes));
}

void write_png_rgb(const std::filesystem::path& path, const Tensor<float>& image) {
  if (image.rank() != 3 || image.dim(2) != 3) {
    throw std::invalid_argument("write_png_rgb: expected H x W x 3, got " + shape_str(image.shape()));
  }
  std::vector<std::uint8_t> bytes(image.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    bytes[i] = static_cast<std::uint8_t>(std::lround(std::clamp(image[i], 0.0f, 1.0f) * 255.0f));
  }
  write_png(path, PNG_FORMAT_RGB, image.dim(0), image.dim(1), bytes.data());
}

void write_png_gray(const std::filesystem::path& path, const Tensor<std::uint8_t>& image) {
  if (image.rank() != 2) throw std::invalid_argument("write_png_gray: expected H x W, got " + shape_str(image.shape()));
  write_png(path, PNG_FORMAT_GRAY, image.dim(0), image.dim(1), image.data());
}

}  // namespace msformer::io
