#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace cfprobe {

/// Grayscale image, row-major, pixel values in [0, 1].
class ImageArray {
 public:
  ImageArray() = default;
  /// Throws ShapeError unless height and width are positive powers of two.
  ImageArray(int height, int width, float fill = 0.0f);
  ImageArray(int height, int width, std::vector<float> pixels);

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return pixels_.size(); }
  bool empty() const { return pixels_.empty(); }

  float& at(int y, int x) { return pixels_[static_cast<std::size_t>(y) * width_ + x]; }
  float at(int y, int x) const { return pixels_[static_cast<std::size_t>(y) * width_ + x]; }

  std::span<float> pixels() { return pixels_; }
  std::span<const float> pixels() const { return pixels_; }

  /// Throws ValidationError on non-finite or out-of-range pixels.
  void validate() const;
  /// Clamp every pixel into [0, 1].
  void clamp01();

  friend bool operator==(const ImageArray&, const ImageArray&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<float> pixels_;
};

inline constexpr int kDefaultImageSize = 64;

/// 8-bit quantization: round(clamp(p) * 255).
std::vector<std::uint8_t> to_bytes(const ImageArray& img);
ImageArray from_bytes(int height, int width, std::span<const std::uint8_t> bytes);

void write_png(const std::filesystem::path& path, const ImageArray& img);
ImageArray read_png(const std::filesystem::path& path);

/// |a - b| elementwise. Throws ShapeError on mismatch.
ImageArray abs_difference(const ImageArray& a, const ImageArray& b);

}  // namespace cfprobe
