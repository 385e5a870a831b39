// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace maskcycle {

/// 8-bit pixels, interleaved row-major (height x width x channels).
struct RawImage {
  int width = 0;
  int height = 0;
  int channels = 0;  // 1 (gray), 3 (RGB) or 4 (RGBA)
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(int row, int col, int channel = 0) const {
    return pixels[(static_cast<std::size_t>(row) * width + col) * channels + channel];
  }
};

RawImage decode_png(std::span<const std::uint8_t> bytes);
RawImage decode_jpeg(std::span<const std::uint8_t> bytes);
/// Dispatches on the file signature (PNG or JPEG).
RawImage decode_image(std::span<const std::uint8_t> bytes);

/// bit_depth 8, or 1 for single-channel black/white images whose pixels are 0 or 255.
std::vector<std::uint8_t> encode_png(const RawImage& image, int bit_depth = 8);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

RawImage read_image(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const RawImage& image, int bit_depth = 8);

/// [3, H, W] float tensor in [-1, 1] via 2x/255 - 1. Gray is replicated to
/// three channels and alpha is dropped.
torch::Tensor to_tensor(const RawImage& image);
/// Inverse of to_tensor for a [3, H, W] (or [1, H, W]) tensor; values are clamped to [-1, 1].
RawImage to_raw(const torch::Tensor& image);

/// Bilinear resize of a [C, H, W] tensor to size x size.
torch::Tensor resize_bilinear(const torch::Tensor& image, int size);
torch::Tensor resize_bilinear(const torch::Tensor& image, int height, int width);

/// Pastes [3, size, size] tiles into a rows x cols sheet. Undefined tensors leave a white cell.
torch::Tensor tile_grid(const std::vector<std::vector<torch::Tensor>>& cells, int cell_size, int padding = 2);

std::string base64_encode(std::span<const std::uint8_t> bytes);
/// Throws FormatError on malformed input.
std::vector<std::uint8_t> base64_decode(const std::string& text);

}  // namespace maskcycle
