#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "glotran/geometry.hpp"

namespace glotran::imaging {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 8-bit interleaved RGB raster, row-major.
class Image {
 public:
  static constexpr int kChannels = 3;

  Image() = default;
  Image(int width, int height);
  Image(int width, int height, std::vector<std::uint8_t> pixels);

  int width() const { return width_; }
  int height() const { return height_; }
  int channels() const { return kChannels; }
  bool empty() const { return pixels_.empty(); }

  std::span<const std::uint8_t> pixels() const { return pixels_; }
  std::span<std::uint8_t> pixels() { return pixels_; }

  std::uint8_t at(int x, int y, int c) const {
    return pixels_[(static_cast<std::size_t>(y) * width_ + x) * kChannels + c];
  }
  std::uint8_t& at(int x, int y, int c) {
    return pixels_[(static_cast<std::size_t>(y) * width_ + x) * kChannels + c];
  }

  void fill(std::uint8_t r, std::uint8_t g, std::uint8_t b);

  friend bool operator==(const Image&, const Image&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint8_t> pixels_;
};

struct GlobalView {
  Image image;
  int source_width = 0;
  int source_height = 0;
  int resolution = 0;
};

/// Scale applied to a crop, kept as a ratio so dims can be recomputed exactly.
struct ScaleRatio {
  int num = 1;
  int den = 1;
  double value() const { return static_cast<double>(num) / den; }
  friend bool operator==(const ScaleRatio&, const ScaleRatio&) = default;
};

struct SliceCrop {
  Image image;
  BoundingBox source_box;
  ScaleRatio scale;
};

struct PatchGrid {
  int patch_size = 1;
  int rows = 0;
  int cols = 0;
  int count() const { return rows * cols; }
};

inline constexpr int kDefaultSliceCap = 448;
inline constexpr int kMinGlobalResolution = 16;

Image load_image(const std::filesystem::path& path);
Image decode_image(std::span<const std::uint8_t> bytes);

/// PNG encoding is byte-deterministic for a given image.
std::vector<std::uint8_t> encode_png(const Image& img);
std::vector<std::uint8_t> encode_jpeg(const Image& img, int quality = 95);
void save_png(const Image& img, const std::filesystem::path& path);
void save_jpeg(const Image& img, const std::filesystem::path& path, int quality = 95);

/// Bilinear resample with half-pixel centers; identity when dims already match.
Image resize_bilinear(const Image& img, int width, int height);

GlobalView downsample_global(const Image& img, int resolution);

/// Crops `box` (clamped if it overhangs by at most 2 px) and caps the long
/// side at `cap`. Throws ImageError for degenerate or far out-of-bounds boxes.
SliceCrop crop_region(const Image& img, const BoundingBox& box, int cap = kDefaultSliceCap);

/// Dimensions a box of the given size takes after applying the long-side cap.
struct CappedSize {
  int width = 0;
  int height = 0;
  ScaleRatio scale;
};
CappedSize capped_size(int width, int height, int cap);

PatchGrid patch_grid(int width, int height, int patch_size);
long long patch_token_count(int width, int height, int patch_size);

/// Grayscale luma (BT.601 integer weights) as doubles.
std::vector<double> to_gray(const Image& img);

/// Variance of the 4-neighbour Laplacian over interior pixels of the gray image.
double laplacian_variance(const Image& img);

}  // namespace glotran::imaging
