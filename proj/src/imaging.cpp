#include "glotran/imaging.hpp"

#include <png.h>
#include <stdio.h>  // jpeglib.h needs FILE
#include <jpeglib.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstring>
#include <fstream>
#include <iterator>

namespace glotran::imaging {

Image::Image(int width, int height) : Image(width, height, {}) {}

Image::Image(int width, int height, std::vector<std::uint8_t> pixels)
    : width_(width), height_(height), pixels_(std::move(pixels)) {
  if (width < 1 || height < 1) {
    throw ImageError("image dimensions must be positive, got " + std::to_string(width) + "x" +
                     std::to_string(height));
  }
  const std::size_t expected = static_cast<std::size_t>(width) * height * kChannels;
  if (pixels_.empty()) {
    pixels_.assign(expected, 0);
  } else if (pixels_.size() != expected) {
    throw ImageError("pixel buffer length " + std::to_string(pixels_.size()) +
                     " does not match " + std::to_string(expected));
  }
}

void Image::fill(std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  for (std::size_t i = 0; i < pixels_.size(); i += kChannels) {
    pixels_[i] = r;
    pixels_[i + 1] = g;
    pixels_[i + 2] = b;
  }
}

namespace {

bool is_png(std::span<const std::uint8_t> bytes) {
  static constexpr std::uint8_t kSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  return bytes.size() >= 8 && std::memcmp(bytes.data(), kSig, 8) == 0;
}

bool is_jpeg(std::span<const std::uint8_t> bytes) {
  return bytes.size() >= 3 && bytes[0] == 0xff && bytes[1] == 0xd8 && bytes[2] == 0xff;
}

Image decode_png(std::span<const std::uint8_t> bytes) {
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&png, bytes.data(), bytes.size())) {
    throw ImageError(std::string("png decode: ") + png.message);
  }
  // Alpha is composited onto black by the simplified API when dropped.
  png.format = PNG_FORMAT_RGB;
  if (png.width == 0 || png.height == 0) {
    png_image_free(&png);
    throw ImageError("png decode: empty image");
  }
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buf.data(), 0, nullptr)) {
    std::string msg = png.message;
    png_image_free(&png);
    throw ImageError("png decode: " + msg);
  }
  return Image(static_cast<int>(png.width), static_cast<int>(png.height), std::move(buf));
}

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

// Kept free of non-trivial locals so longjmp cannot skip destructors.
bool decode_jpeg_raw(const std::uint8_t* data, std::size_t size, std::uint8_t** out, int* w,
                     int* h, char* message) {
  jpeg_decompress_struct cinfo;
  JpegErrorManager err;
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_error_exit;
  *out = nullptr;
  if (setjmp(err.jump)) {
    std::strncpy(message, err.message, JMSG_LENGTH_MAX);
    jpeg_destroy_decompress(&cinfo);
    std::free(*out);
    *out = nullptr;
    return false;
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, data, static_cast<unsigned long>(size));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  *w = static_cast<int>(cinfo.output_width);
  *h = static_cast<int>(cinfo.output_height);
  const std::size_t stride = static_cast<std::size_t>(*w) * 3;
  *out = static_cast<std::uint8_t*>(std::malloc(stride * (*h)));
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = *out + stride * cinfo.output_scanline;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return true;
}

bool encode_jpeg_raw(const std::uint8_t* pixels, int w, int h, int quality, unsigned char** out,
                     unsigned long* out_size, char* message) {
  jpeg_compress_struct cinfo;
  JpegErrorManager err;
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_error_exit;
  if (setjmp(err.jump)) {
    std::strncpy(message, err.message, JMSG_LENGTH_MAX);
    jpeg_destroy_compress(&cinfo);
    return false;
  }
  jpeg_create_compress(&cinfo);
  jpeg_mem_dest(&cinfo, out, out_size);
  cinfo.image_width = static_cast<JDIMENSION>(w);
  cinfo.image_height = static_cast<JDIMENSION>(h);
  cinfo.input_components = 3;
  cinfo.in_color_space = JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  const std::size_t stride = static_cast<std::size_t>(w) * 3;
  while (cinfo.next_scanline < cinfo.image_height) {
    auto* row = const_cast<JSAMPROW>(pixels + stride * cinfo.next_scanline);
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
  return true;
}

Image decode_jpeg(std::span<const std::uint8_t> bytes) {
  std::uint8_t* raw = nullptr;
  int w = 0;
  int h = 0;
  char message[JMSG_LENGTH_MAX] = {};
  if (!decode_jpeg_raw(bytes.data(), bytes.size(), &raw, &w, &h, message)) {
    throw ImageError(std::string("jpeg decode: ") + message);
  }
  std::vector<std::uint8_t> buf(raw, raw + static_cast<std::size_t>(w) * h * 3);
  std::free(raw);
  return Image(w, h, std::move(buf));
}

void write_bytes(const std::vector<std::uint8_t>& bytes, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ImageError("cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ImageError("write failed: " + path.string());
}

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

}  // namespace

Image decode_image(std::span<const std::uint8_t> bytes) {
  if (is_png(bytes)) return decode_png(bytes);
  if (is_jpeg(bytes)) return decode_jpeg(bytes);
  throw ImageError("unsupported image encoding");
}

Image load_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("cannot open image: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  try {
    return decode_image(bytes);
  } catch (const ImageError& e) {
    throw ImageError(path.string() + ": " + e.what());
  }
}

std::vector<std::uint8_t> encode_png(const Image& img) {
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(img.width());
  png.height = static_cast<png_uint_32>(img.height());
  png.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&png, nullptr, &size, 0, img.pixels().data(), 0, nullptr)) {
    throw ImageError(std::string("png encode: ") + png.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&png, out.data(), &size, 0, img.pixels().data(), 0, nullptr)) {
    throw ImageError(std::string("png encode: ") + png.message);
  }
  out.resize(size);
  return out;
}

std::vector<std::uint8_t> encode_jpeg(const Image& img, int quality) {
  unsigned char* raw = nullptr;
  unsigned long size = 0;
  char message[JMSG_LENGTH_MAX] = {};
  if (!encode_jpeg_raw(img.pixels().data(), img.width(), img.height(), quality, &raw, &size,
                       message)) {
    std::free(raw);
    throw ImageError(std::string("jpeg encode: ") + message);
  }
  std::vector<std::uint8_t> out(raw, raw + size);
  std::free(raw);
  return out;
}

void save_png(const Image& img, const std::filesystem::path& path) {
  write_bytes(encode_png(img), path);
}

void save_jpeg(const Image& img, const std::filesystem::path& path, int quality) {
  write_bytes(encode_jpeg(img, quality), path);
}

Image resize_bilinear(const Image& img, int width, int height) {
  if (width < 1 || height < 1) throw ImageError("resize target must be positive");
  if (width == img.width() && height == img.height()) return img;

  struct Tap {
    int i0;
    int i1;
    double f;
  };
  auto taps = [](int dst, int src) {
    std::vector<Tap> out(static_cast<std::size_t>(dst));
    const double ratio = static_cast<double>(src) / dst;
    for (int d = 0; d < dst; ++d) {
      double s = std::clamp((d + 0.5) * ratio - 0.5, 0.0, static_cast<double>(src - 1));
      const int i0 = static_cast<int>(std::floor(s));
      out[d] = {i0, std::min(i0 + 1, src - 1), s - i0};
    }
    return out;
  };
  const auto xs = taps(width, img.width());
  const auto ys = taps(height, img.height());

  Image out(width, height);
  for (int y = 0; y < height; ++y) {
    const Tap& ty = ys[y];
    for (int x = 0; x < width; ++x) {
      const Tap& tx = xs[x];
      for (int c = 0; c < Image::kChannels; ++c) {
        const double top = img.at(tx.i0, ty.i0, c) * (1.0 - tx.f) + img.at(tx.i1, ty.i0, c) * tx.f;
        const double bot = img.at(tx.i0, ty.i1, c) * (1.0 - tx.f) + img.at(tx.i1, ty.i1, c) * tx.f;
        out.at(x, y, c) = to_byte(top * (1.0 - ty.f) + bot * ty.f);
      }
    }
  }
  return out;
}

GlobalView downsample_global(const Image& img, int resolution) {
  if (resolution < kMinGlobalResolution) {
    throw ImageError("global resolution must be >= " + std::to_string(kMinGlobalResolution));
  }
  return {resize_bilinear(img, resolution, resolution), img.width(), img.height(), resolution};
}

CappedSize capped_size(int width, int height, int cap) {
  if (cap < 1) throw ImageError("slice cap must be positive");
  const int long_side = std::max(width, height);
  if (long_side <= cap) return {width, height, {1, 1}};
  auto scaled = [&](int v) {
    if (v == long_side) return cap;
    // round(v * cap / long_side) in integers
    const long long n = 2LL * v * cap + long_side;
    return std::max(1, static_cast<int>(n / (2LL * long_side)));
  };
  return {scaled(width), scaled(height), {cap, long_side}};
}

SliceCrop crop_region(const Image& img, const BoundingBox& box, int cap) {
  constexpr int kOverhang = 2;
  if (box.x_min < -kOverhang || box.y_min < -kOverhang || box.x_max > img.width() + kOverhang ||
      box.y_max > img.height() + kOverhang) {
    throw ImageError("box outside image bounds");
  }
  BoundingBox b = box;
  b.x_min = std::clamp(b.x_min, 0, img.width());
  b.x_max = std::clamp(b.x_max, 0, img.width());
  b.y_min = std::clamp(b.y_min, 0, img.height());
  b.y_max = std::clamp(b.y_max, 0, img.height());
  if (b.width() <= 0 || b.height() <= 0) throw ImageError("degenerate crop box");

  Image crop(b.width(), b.height());
  const std::size_t row_bytes = static_cast<std::size_t>(b.width()) * Image::kChannels;
  for (int y = 0; y < b.height(); ++y) {
    std::memcpy(crop.pixels().data() + static_cast<std::size_t>(y) * row_bytes,
                img.pixels().data() +
                    (static_cast<std::size_t>(b.y_min + y) * img.width() + b.x_min) * Image::kChannels,
                row_bytes);
  }
  const CappedSize size = capped_size(b.width(), b.height(), cap);
  if (size.scale.num != size.scale.den) crop = resize_bilinear(crop, size.width, size.height);
  return {std::move(crop), b, size.scale};
}

PatchGrid patch_grid(int width, int height, int patch_size) {
  if (patch_size < 1) throw ImageError("patch size must be >= 1");
  return {patch_size, (height + patch_size - 1) / patch_size, (width + patch_size - 1) / patch_size};
}

long long patch_token_count(int width, int height, int patch_size) {
  const PatchGrid g = patch_grid(width, height, patch_size);
  return static_cast<long long>(g.rows) * g.cols;
}

std::vector<double> to_gray(const Image& img) {
  std::vector<double> gray(static_cast<std::size_t>(img.width()) * img.height());
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      gray[static_cast<std::size_t>(y) * img.width() + x] =
          (299.0 * img.at(x, y, 0) + 587.0 * img.at(x, y, 1) + 114.0 * img.at(x, y, 2)) / 1000.0;
    }
  }
  return gray;
}

double laplacian_variance(const Image& img) {
  const int w = img.width();
  const int h = img.height();
  if (w < 3 || h < 3) return 0.0;
  const auto g = to_gray(img);
  auto at = [&](int x, int y) { return g[static_cast<std::size_t>(y) * w + x]; };
  double sum = 0.0;
  double sum_sq = 0.0;
  const double n = static_cast<double>(w - 2) * (h - 2);
  for (int y = 1; y < h - 1; ++y) {
    for (int x = 1; x < w - 1; ++x) {
      const double l = at(x - 1, y) + at(x + 1, y) + at(x, y - 1) + at(x, y + 1) - 4.0 * at(x, y);
      sum += l;
      sum_sq += l * l;
    }
  }
  const double mean = sum / n;
  return std::max(0.0, sum_sq / n - mean * mean);
}

}  // namespace glotran::imaging
