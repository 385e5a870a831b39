// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>

#include "maskcycle/errors.hpp"
#include "maskcycle/image_io.hpp"

using namespace maskcycle;

namespace {

const std::filesystem::path kFixtures = std::filesystem::path(__FILE__).parent_path() / "data";

RawImage gradient(int w, int h, int channels) {
  RawImage img{w, h, channels, std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h * channels)};
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<std::uint8_t>((i * 37) % 256);
  return img;
}

}  // namespace

TEST(Png, RoundTripsGrayRgbAndRgba) {
  for (int channels : {1, 3, 4}) {
    const auto img = gradient(7, 5, channels);
    const auto back = decode_png(encode_png(img));
    EXPECT_EQ(back.width, 7);
    EXPECT_EQ(back.height, 5);
    EXPECT_EQ(back.channels, channels);
    EXPECT_EQ(back.pixels, img.pixels);
  }
}

TEST(Png, OneBitRoundTrip) {
  RawImage img{9, 3, 1, std::vector<std::uint8_t>(27, 0)};
  img.pixels[0] = img.pixels[10] = img.pixels[26] = 255;
  const auto bytes = encode_png(img, 1);
  EXPECT_EQ(decode_png(bytes).pixels, img.pixels);
  img.pixels[1] = 7;
  EXPECT_THROW(encode_png(img, 1), InputError);
}

TEST(Png, GarbageIsAFormatError) {
  const std::vector<std::uint8_t> junk{0x89, 'P', 'N', 'G', 1, 2, 3};
  EXPECT_THROW(decode_png(junk), FormatError);
  EXPECT_THROW(decode_image(std::vector<std::uint8_t>{1, 2, 3, 4}), FormatError);
  auto bytes = encode_png(gradient(16, 16, 3));
  bytes.resize(bytes.size() / 2);
  EXPECT_THROW(decode_png(bytes), FormatError);
}

TEST(Jpeg, DecodesFixture) {
  const auto img = read_image(kFixtures / "solid_8x6.jpg");
  EXPECT_EQ(img.width, 8);
  EXPECT_EQ(img.height, 6);
  EXPECT_EQ(img.channels, 3);
  EXPECT_NEAR(img.at(2, 3, 0), 200, 4);
  EXPECT_NEAR(img.at(2, 3, 1), 40, 4);
  EXPECT_NEAR(img.at(2, 3, 2), 90, 4);
}

TEST(Tensor, AffineScaling) {
  RawImage white{2, 2, 3, std::vector<std::uint8_t>(12, 255)};
  RawImage black{2, 2, 3, std::vector<std::uint8_t>(12, 0)};
  EXPECT_TRUE(torch::equal(to_tensor(white), torch::ones({3, 2, 2})));
  EXPECT_TRUE(torch::equal(to_tensor(black), -torch::ones({3, 2, 2})));
}

TEST(Tensor, GrayIsReplicatedAndAlphaDropped) {
  const auto gray = to_tensor(gradient(4, 3, 1));
  ASSERT_EQ(gray.sizes(), (std::vector<int64_t>{3, 3, 4}));
  EXPECT_TRUE(torch::equal(gray[0], gray[1]));
  EXPECT_TRUE(torch::equal(gray[0], gray[2]));
  const auto rgba = gradient(4, 3, 4);
  const auto t = to_tensor(rgba);
  EXPECT_EQ(t.size(0), 3);
  EXPECT_FLOAT_EQ(t[2][1][1].item<float>(), 2.0f * rgba.at(1, 1, 2) / 255.0f - 1.0f);
}

TEST(Tensor, RawRoundTrip) {
  const auto img = gradient(6, 6, 3);
  EXPECT_EQ(to_raw(to_tensor(img)).pixels, img.pixels);
  const auto clamped = to_raw(torch::full({3, 1, 1}, 3.0));
  EXPECT_EQ(clamped.pixels, (std::vector<std::uint8_t>{255, 255, 255}));
}

TEST(Resize, ShapeAndConstantPreserved) {
  const auto out = resize_bilinear(torch::full({3, 10, 20}, 0.25), 8);
  EXPECT_EQ(out.sizes(), (std::vector<int64_t>{3, 8, 8}));
  EXPECT_TRUE(torch::allclose(out, torch::full({3, 8, 8}, 0.25)));
}

TEST(TileGrid, LayoutAndBackground) {
  const auto tile = -torch::ones({3, 4, 4});
  const auto sheet = tile_grid({{tile, torch::Tensor()}, {tile, tile}}, 4, 2);
  EXPECT_EQ(sheet.sizes(), (std::vector<int64_t>{3, 2 * 4 + 3 * 2, 2 * 4 + 3 * 2}));
  EXPECT_FLOAT_EQ(sheet[0][0][0].item<float>(), 1.0f);
  EXPECT_FLOAT_EQ(sheet[0][2][2].item<float>(), -1.0f);
  EXPECT_FLOAT_EQ(sheet[0][2][8].item<float>(), 1.0f);
}

TEST(Base64, RoundTripAndErrors) {
  for (std::size_t n : {0u, 1u, 2u, 3u, 4u, 100u}) {
    std::vector<std::uint8_t> bytes(n);
    for (std::size_t i = 0; i < n; ++i) bytes[i] = static_cast<std::uint8_t>(i * 7 + 1);
    EXPECT_EQ(base64_decode(base64_encode(bytes)), bytes);
  }
  EXPECT_EQ(base64_encode(std::vector<std::uint8_t>{'h', 'i'}), "aGk=");
  EXPECT_THROW(base64_decode("not base64!"), FormatError);
  EXPECT_THROW(base64_decode("abc"), FormatError);
}

TEST(Files, AtomicWriteAndMissingRead) {
  const auto path = std::filesystem::temp_directory_path() / "maskcycle_io_test.bin";
  const std::vector<std::uint8_t> data{1, 2, 3};
  write_file_atomic(path, data);
  EXPECT_EQ(read_file(path), data);
  std::filesystem::remove(path);
  EXPECT_THROW(read_file(path), InputError);
}
