#include "cfprobe/image.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>

#include <fmt/format.h>

#include "cfprobe/error.hpp"

namespace cfprobe {
namespace {

void check_dims(int height, int width) {
  if (height <= 0 || width <= 0 || !std::has_single_bit(static_cast<unsigned>(height)) ||
      !std::has_single_bit(static_cast<unsigned>(width)))
    throw ShapeError(fmt::format("image dims {}x{} must be positive powers of two", height, width));
}

}  // namespace

ImageArray::ImageArray(int height, int width, float fill) : height_(height), width_(width) {
  check_dims(height, width);
  pixels_.assign(static_cast<std::size_t>(height) * width, fill);
}

ImageArray::ImageArray(int height, int width, std::vector<float> pixels)
    : height_(height), width_(width), pixels_(std::move(pixels)) {
  check_dims(height, width);
  if (pixels_.size() != static_cast<std::size_t>(height) * width)
    throw ShapeError(fmt::format("pixel buffer has {} values, expected {}x{}", pixels_.size(), height, width));
}

void ImageArray::validate() const {
  for (std::size_t i = 0; i < pixels_.size(); ++i) {
    const float p = pixels_[i];
    if (!std::isfinite(p) || p < 0.0f || p > 1.0f)
      throw ValidationError(fmt::format("pixel {} = {} is outside [0, 1]", i, p));
  }
}

void ImageArray::clamp01() {
  for (float& p : pixels_) p = std::isfinite(p) ? std::clamp(p, 0.0f, 1.0f) : 0.0f;
}

std::vector<std::uint8_t> to_bytes(const ImageArray& img) {
  std::vector<std::uint8_t> out(img.size());
  auto px = img.pixels();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<std::uint8_t>(std::lround(std::clamp(px[i], 0.0f, 1.0f) * 255.0f));
  return out;
}

ImageArray from_bytes(int height, int width, std::span<const std::uint8_t> bytes) {
  std::vector<float> px(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) px[i] = static_cast<float>(bytes[i]) / 255.0f;
  return ImageArray(height, width, std::move(px));
}

void write_png(const std::filesystem::path& path, const ImageArray& img) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width());
  image.height = static_cast<png_uint_32>(img.height());
  image.format = PNG_FORMAT_GRAY;
  const auto bytes = to_bytes(img);
  if (!png_image_write_to_file(&image, path.c_str(), 0, bytes.data(), 0, nullptr))
    throw ArtifactError(fmt::format("cannot write {}: {}", path.string(), image.message));
}

ImageArray read_png(const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str()))
    throw ArtifactError(fmt::format("cannot read {}: {}", path.string(), image.message));
  image.format = PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, bytes.data(), 0, nullptr)) {
    png_image_free(&image);
    throw ArtifactError(fmt::format("cannot decode {}: {}", path.string(), image.message));
  }
  return from_bytes(static_cast<int>(image.height), static_cast<int>(image.width), bytes);
}

ImageArray abs_difference(const ImageArray& a, const ImageArray& b) {
  if (a.height() != b.height() || a.width() != b.width())
    throw ShapeError(fmt::format("shape mismatch {}x{} vs {}x{}", a.height(), a.width(), b.height(), b.width()));
  ImageArray out(a.height(), a.width());
  auto pa = a.pixels();
  auto pb = b.pixels();
  auto po = out.pixels();
  for (std::size_t i = 0; i < po.size(); ++i) po[i] = std::fabs(pa[i] - pb[i]);
  return out;
}

}  // namespace cfprobe
