#include <gtest/gtest.h>

#include <fstream>
#include <random>

#include "glotran/imaging.hpp"
#include "support/temp_dir.hpp"

using namespace glotran;
using namespace glotran::imaging;

namespace {

Image random_image(std::mt19937& rng, int w, int h) {
  Image img(w, h);
  std::uniform_int_distribution<int> byte(0, 255);
  for (auto& p : img.pixels()) p = static_cast<std::uint8_t>(byte(rng));
  return img;
}

}  // namespace

TEST(Image, ConstructorValidatesBuffer) {
  EXPECT_THROW(Image(0, 4), ImageError);
  EXPECT_THROW(Image(2, 2, std::vector<std::uint8_t>(5)), ImageError);
  Image img(3, 2);
  EXPECT_EQ(img.pixels().size(), 18u);
}

TEST(ImageIo, PngRoundTripAndDeterministicBytes) {
  std::mt19937 rng(1);
  const Image img = random_image(rng, 640, 480);
  const auto a = encode_png(img);
  const auto b = encode_png(img);
  EXPECT_EQ(a, b);
  const Image back = decode_image(a);
  EXPECT_EQ(back.width(), 640);
  EXPECT_EQ(back.height(), 480);
  EXPECT_EQ(back, img);
}

TEST(ImageIo, SingleWhitePixel) {
  testing_support::TempDir dir;
  Image img(1, 1);
  img.fill(255, 255, 255);
  save_png(img, dir / "w.png");
  const Image back = load_image(dir / "w.png");
  ASSERT_EQ(back.width(), 1);
  EXPECT_EQ(back.at(0, 0, 0), 255);
  EXPECT_EQ(back.at(0, 0, 1), 255);
  EXPECT_EQ(back.at(0, 0, 2), 255);
}

TEST(ImageIo, JpegDecodes) {
  Image img(32, 16);
  img.fill(200, 100, 50);
  const Image back = decode_image(encode_jpeg(img, 95));
  EXPECT_EQ(back.width(), 32);
  EXPECT_EQ(back.height(), 16);
  EXPECT_NEAR(back.at(5, 5, 0), 200, 4);
}

TEST(ImageIo, TruncatedAndMissingFilesFail) {
  testing_support::TempDir dir;
  std::mt19937 rng(2);
  auto bytes = encode_png(random_image(rng, 20, 20));
  bytes.resize(bytes.size() / 2);
  {
    std::ofstream out(dir / "t.png", std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  EXPECT_THROW(load_image(dir / "t.png"), ImageError);
  EXPECT_THROW(load_image(dir / "missing.png"), ImageError);
  const std::vector<std::uint8_t> junk = {1, 2, 3, 4, 5, 6, 7, 8};
  EXPECT_THROW(decode_image(junk), ImageError);
}

TEST(Downsample, OutputDimsAndSourceRecorded) {
  Image img(1792, 896);
  const GlobalView g = downsample_global(img, 224);
  EXPECT_EQ(g.image.width(), 224);
  EXPECT_EQ(g.image.height(), 224);
  EXPECT_EQ(g.source_width, 1792);
  EXPECT_EQ(g.source_height, 896);
  EXPECT_THROW(downsample_global(img, 15), ImageError);
}

TEST(Downsample, IdentityAtNativeResolution) {
  std::mt19937 rng(3);
  const Image img = random_image(rng, 224, 224);
  EXPECT_EQ(downsample_global(img, 224).image, img);
}

TEST(Downsample, IdempotentAtFixedResolution) {
  std::mt19937 rng(4);
  const Image img = random_image(rng, 300, 170);
  const Image once = downsample_global(img, 64).image;
  EXPECT_EQ(downsample_global(once, 64).image, once);
}

TEST(Downsample, ConstantFieldsPreserved) {
  std::mt19937 rng(5);
  std::uniform_int_distribution<int> byte(0, 255);
  std::uniform_int_distribution<int> dim(16, 300);
  for (int k = 0; k < 100; ++k) {
    Image img(dim(rng), dim(rng));
    const auto r = static_cast<std::uint8_t>(byte(rng));
    const auto gc = static_cast<std::uint8_t>(byte(rng));
    const auto b = static_cast<std::uint8_t>(byte(rng));
    img.fill(r, gc, b);
    const int res = std::uniform_int_distribution<int>(16, 256)(rng);
    const Image out = downsample_global(img, res).image;
    for (int y = 0; y < res; ++y)
      for (int x = 0; x < res; ++x) {
        ASSERT_EQ(out.at(x, y, 0), r);
        ASSERT_EQ(out.at(x, y, 1), gc);
        ASSERT_EQ(out.at(x, y, 2), b);
      }
  }
}

TEST(Crop, UnderCapIsNative) {
  std::mt19937 rng(6);
  const Image img = random_image(rng, 200, 100);
  const SliceCrop c = crop_region(img, {10, 10, 110, 40}, 448);
  EXPECT_EQ(c.image.width(), 100);
  EXPECT_EQ(c.image.height(), 30);
  EXPECT_EQ(c.scale, (ScaleRatio{1, 1}));
  for (int y = 0; y < 30; ++y)
    for (int x = 0; x < 100; ++x) ASSERT_EQ(c.image.at(x, y, 1), img.at(x + 10, y + 10, 1));
}

TEST(Crop, LongSideCappedWithRecomputedDims) {
  Image img(1000, 100);
  const SliceCrop c = crop_region(img, {50, 20, 950, 80}, 448);
  EXPECT_EQ(c.image.width(), 448);
  const int expected_h = static_cast<int>(std::lround(60.0 * 448.0 / 900.0));
  EXPECT_EQ(c.image.height(), expected_h);
  EXPECT_DOUBLE_EQ(c.scale.value(), 448.0 / 900.0);
  EXPECT_LE(c.scale.value(), 1.0);
}

TEST(Crop, CropOfFullBoxIsIdentity) {
  std::mt19937 rng(7);
  const Image img = random_image(rng, 80, 60);
  const SliceCrop c = crop_region(img, {0, 0, 80, 60}, 448);
  EXPECT_EQ(c.image, img);
  EXPECT_EQ(crop_region(c.image, {0, 0, 80, 60}, 448).image, img);
}

TEST(Crop, SmallOverhangClampedLargeRejected) {
  Image img(50, 50);
  const SliceCrop c = crop_region(img, {-2, -1, 52, 51}, 448);
  EXPECT_EQ(c.source_box.x_min, 0);
  EXPECT_EQ(c.source_box.x_max, 50);
  EXPECT_EQ(c.image.width(), 50);
  EXPECT_THROW(crop_region(img, {-3, 0, 10, 10}, 448), ImageError);
  EXPECT_THROW(crop_region(img, {5, 5, 5, 20}, 448), ImageError);
}

TEST(PatchGrid, TokenCounts) {
  EXPECT_EQ(patch_token_count(224, 224, 16), 196);
  EXPECT_EQ(patch_token_count(448, 448, 16), 784);
  // padded 7 x 4 grid, enumerated
  long long cells = 0;
  for (int y = 0; y < 50; y += 16)
    for (int x = 0; x < 100; x += 16) ++cells;
  EXPECT_EQ(cells, 28);
  EXPECT_EQ(patch_token_count(100, 50, 16), cells);
  const PatchGrid g = patch_grid(100, 50, 16);
  EXPECT_EQ(g.rows, 4);
  EXPECT_EQ(g.cols, 7);
}

TEST(PatchGrid, Monotone) {
  for (int p : {1, 7, 16}) {
    long long prev = 0;
    for (int r = 16; r <= 512; ++r) {
      const long long t = patch_token_count(r, r, p);
      EXPECT_GE(t, prev);
      prev = t;
    }
    for (int w = 1; w < 100; ++w) EXPECT_LE(patch_token_count(w, 33, p), patch_token_count(w + 1, 33, p));
  }
  for (int r : {224, 448, 896}) EXPECT_LT(patch_token_count(r, r, 16), patch_token_count(2 * r, 2 * r, 16));
}

TEST(Laplacian, ConstantImageIsZeroAndEdgesAreNot) {
  Image flat(40, 40);
  flat.fill(120, 120, 120);
  EXPECT_DOUBLE_EQ(laplacian_variance(flat), 0.0);
  Image stripes(40, 40);
  for (int y = 0; y < 40; ++y)
    for (int x = 0; x < 40; ++x)
      for (int c = 0; c < 3; ++c) stripes.at(x, y, c) = (x / 2) % 2 ? 255 : 0;
  EXPECT_GT(laplacian_variance(stripes), 1000.0);
}
