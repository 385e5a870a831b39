// SPDX-License-Identifier: Apache-2.0
#include "maskcycle/image_io.hpp"

#include <jpeglib.h>
#include <openssl/evp.h>
#include <png.h>

#include <algorithm>
#include <csetjmp>
#include <cstring>
#include <fstream>
#include <iterator>

#include "maskcycle/errors.hpp"

namespace maskcycle {

namespace {

struct PngReadCursor {
  std::span<const std::uint8_t> bytes;
  std::size_t offset = 0;
};

void png_read_from_span(png_structp png, png_bytep out, png_size_t length) {
  auto* cursor = static_cast<PngReadCursor*>(png_get_io_ptr(png));
  if (cursor->offset + length > cursor->bytes.size()) png_error(png, "truncated PNG stream");
  std::memcpy(out, cursor->bytes.data() + cursor->offset, length);
  cursor->offset += length;
}

void png_write_to_vector(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + length);
}

void png_flush_noop(png_structp) {}

struct PngErrorState {
  std::string message;
};

[[noreturn]] void png_error_jump(png_structp png, png_const_charp message) {
  static_cast<PngErrorState*>(png_get_error_ptr(png))->message = message;
  png_longjmp(png, 1);
}

void png_warn_silent(png_structp, png_const_charp) {}

bool has_png_signature(std::span<const std::uint8_t> bytes) {
  return bytes.size() >= 8 && png_sig_cmp(bytes.data(), 0, 8) == 0;
}

bool has_jpeg_signature(std::span<const std::uint8_t> bytes) {
  return bytes.size() >= 3 && bytes[0] == 0xFF && bytes[1] == 0xD8 && bytes[2] == 0xFF;
}

}  // namespace

RawImage decode_png(std::span<const std::uint8_t> bytes) {
  if (!has_png_signature(bytes)) throw FormatError("not a PNG stream");

  PngErrorState err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_error_jump, png_warn_silent);
  if (png == nullptr) throw FormatError("PNG: cannot allocate reader");
  png_infop info = png_create_info_struct(png);
  PngReadCursor cursor{bytes, 0};
  RawImage image;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("PNG: " + err.message);
  }
  png_set_read_fn(png, &cursor, png_read_from_span);
  png_read_info(png, info);

  const int color_type = png_get_color_type(png, info);
  const int bit_depth = png_get_bit_depth(png, info);
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (bit_depth == 16) png_set_strip_16(png);
  png_read_update_info(png, info);

  image.width = static_cast<int>(png_get_image_width(png, info));
  image.height = static_cast<int>(png_get_image_height(png, info));
  image.channels = png_get_channels(png, info);
  const std::size_t row_bytes = png_get_rowbytes(png, info);
  image.pixels.resize(row_bytes * image.height);
  rows.resize(image.height);
  for (int r = 0; r < image.height; ++r) rows[r] = image.pixels.data() + r * row_bytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  // Gray+alpha is folded to plain gray.
  if (image.channels == 2) {
    std::vector<std::uint8_t> gray(static_cast<std::size_t>(image.width) * image.height);
    for (std::size_t i = 0; i < gray.size(); ++i) gray[i] = image.pixels[2 * i];
    image.pixels = std::move(gray);
    image.channels = 1;
  }
  return image;
}

namespace {

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr info) {
  auto* err = reinterpret_cast<JpegErrorManager*>(info->err);
  (*info->err->format_message)(info, err->message);
  std::longjmp(err->jump, 1);
}

}  // namespace

RawImage decode_jpeg(std::span<const std::uint8_t> bytes) {
  if (!has_jpeg_signature(bytes)) throw FormatError("not a JPEG stream");
  jpeg_decompress_struct info{};
  JpegErrorManager err{};
  info.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_error_exit;
  RawImage image;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&info);
    throw FormatError(std::string("JPEG: ") + err.message);
  }
  jpeg_create_decompress(&info);
  jpeg_mem_src(&info, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&info, TRUE);
  if (info.jpeg_color_space != JCS_GRAYSCALE) info.out_color_space = JCS_RGB;
  jpeg_start_decompress(&info);
  image.width = static_cast<int>(info.output_width);
  image.height = static_cast<int>(info.output_height);
  image.channels = info.output_components;
  const std::size_t stride = static_cast<std::size_t>(image.width) * image.channels;
  image.pixels.resize(stride * image.height);
  while (info.output_scanline < info.output_height) {
    JSAMPROW row = image.pixels.data() + info.output_scanline * stride;
    jpeg_read_scanlines(&info, &row, 1);
  }
  jpeg_finish_decompress(&info);
  jpeg_destroy_decompress(&info);
  return image;
}

RawImage decode_image(std::span<const std::uint8_t> bytes) {
  if (has_png_signature(bytes)) return decode_png(bytes);
  if (has_jpeg_signature(bytes)) return decode_jpeg(bytes);
  throw FormatError("unrecognized image format (expected PNG or JPEG)");
}

std::vector<std::uint8_t> encode_png(const RawImage& image, int bit_depth) {
  if (image.width <= 0 || image.height <= 0) throw InputError("cannot encode an empty image");
  if (image.pixels.size() != static_cast<std::size_t>(image.width) * image.height * image.channels)
    throw InputError("pixel buffer does not match image dimensions");
  if (bit_depth != 8 && bit_depth != 1) throw InputError("PNG bit depth must be 1 or 8");
  if (bit_depth == 1 && image.channels != 1) throw InputError("1-bit PNG needs a single-channel image");

  int color_type = PNG_COLOR_TYPE_GRAY;
  switch (image.channels) {
    case 1: color_type = PNG_COLOR_TYPE_GRAY; break;
    case 3: color_type = PNG_COLOR_TYPE_RGB; break;
    case 4: color_type = PNG_COLOR_TYPE_RGB_ALPHA; break;
    default: throw InputError("unsupported channel count " + std::to_string(image.channels));
  }

  const std::size_t stride = static_cast<std::size_t>(image.width) * image.channels;
  std::vector<std::uint8_t> packed;
  if (bit_depth == 1) {
    for (auto v : image.pixels)
      if (v != 0 && v != 255) throw InputError("1-bit PNG pixels must be 0 or 255");
    const std::size_t packed_stride = (image.width + 7) / 8;
    packed.assign(packed_stride * image.height, 0);
    for (int r = 0; r < image.height; ++r)
      for (int c = 0; c < image.width; ++c)
        if (image.pixels[r * stride + c] == 255)
          packed[r * packed_stride + c / 8] |= static_cast<std::uint8_t>(0x80 >> (c % 8));
  }

  std::vector<std::uint8_t> out;
  PngErrorState err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_error_jump, png_warn_silent);
  if (png == nullptr) throw FormatError("PNG: cannot allocate writer");
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw FormatError("PNG: " + err.message);
  }
  png_set_write_fn(png, &out, png_write_to_vector, png_flush_noop);
  png_set_IHDR(png, info, image.width, image.height, bit_depth, color_type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int r = 0; r < image.height; ++r) {
    const std::uint8_t* row =
        bit_depth == 1 ? packed.data() + r * ((image.width + 7) / 8) : image.pixels.data() + r * stride;
    png_write_row(png, const_cast<png_bytep>(row));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw InputError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

RawImage read_image(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return decode_image(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_png(const std::filesystem::path& path, const RawImage& image, int bit_depth) {
  const auto bytes = encode_png(image, bit_depth);
  write_file_atomic(path, bytes);
}

torch::Tensor to_tensor(const RawImage& image) {
  if (image.channels < 1 || image.channels > 4) throw InputError("unsupported channel count");
  auto hwc = torch::from_blob(const_cast<std::uint8_t*>(image.pixels.data()),
                              {image.height, image.width, image.channels}, torch::kUInt8)
                 .to(torch::kFloat32);
  torch::Tensor rgb;
  if (image.channels >= 3) {
    rgb = hwc.slice(2, 0, 3);
  } else {
    rgb = hwc.slice(2, 0, 1).expand({image.height, image.width, 3});
  }
  return (rgb.permute({2, 0, 1}) * (2.0f / 255.0f) - 1.0f).contiguous();
}

RawImage to_raw(const torch::Tensor& image) {
  if (image.dim() != 3 || (image.size(0) != 3 && image.size(0) != 1))
    throw InputError("expected a [3,H,W] or [1,H,W] image tensor");
  auto bytes = ((image.detach().to(torch::kCPU, torch::kFloat32).clamp(-1.0, 1.0) + 1.0) * 127.5)
                   .round()
                   .to(torch::kUInt8)
                   .permute({1, 2, 0})
                   .contiguous();
  RawImage raw;
  raw.channels = static_cast<int>(image.size(0));
  raw.height = static_cast<int>(image.size(1));
  raw.width = static_cast<int>(image.size(2));
  raw.pixels.assign(bytes.data_ptr<std::uint8_t>(), bytes.data_ptr<std::uint8_t>() + bytes.numel());
  return raw;
}

torch::Tensor resize_bilinear(const torch::Tensor& image, int height, int width) {
  if (image.dim() != 3) throw InputError("resize expects a [C,H,W] tensor");
  if (image.size(1) == height && image.size(2) == width) return image;
  namespace F = torch::nn::functional;
  return F::interpolate(image.unsqueeze(0), F::InterpolateFuncOptions()
                                                .size(std::vector<int64_t>{height, width})
                                                .mode(torch::kBilinear)
                                                .align_corners(false))
      .squeeze(0);
}

torch::Tensor resize_bilinear(const torch::Tensor& image, int size) { return resize_bilinear(image, size, size); }

torch::Tensor tile_grid(const std::vector<std::vector<torch::Tensor>>& cells, int cell_size, int padding) {
  const auto rows = static_cast<int64_t>(cells.size());
  int64_t cols = 0;
  for (const auto& row : cells) cols = std::max<int64_t>(cols, static_cast<int64_t>(row.size()));
  const int64_t step = cell_size + padding;
  auto sheet = torch::ones({3, rows * step + padding, cols * step + padding});
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t c = 0; c < static_cast<int64_t>(cells[r].size()); ++c) {
      const auto& tile = cells[r][c];
      if (!tile.defined()) continue;
      if (tile.dim() != 3 || tile.size(1) != cell_size || tile.size(2) != cell_size)
        throw InputError("grid tile does not match the cell size");
      auto rgb = tile.size(0) == 1 ? tile.expand({3, cell_size, cell_size}) : tile;
      sheet.slice(1, padding + r * step, padding + r * step + cell_size)
          .slice(2, padding + c * step, padding + c * step + cell_size)
          .copy_(rgb.detach());
    }
  }
  return sheet;
}

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int written = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                      static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(written));
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  std::string clean;
  clean.reserve(text.size());
  for (char ch : text)
    if (ch != '\n' && ch != '\r' && ch != ' ' && ch != '\t') clean.push_back(ch);
  if (clean.empty()) return {};
  if (clean.size() % 4 != 0) throw FormatError("malformed base64: length is not a multiple of 4");
  for (char ch : clean) {
    const bool ok = std::isalnum(static_cast<unsigned char>(ch)) || ch == '+' || ch == '/' || ch == '=';
    if (!ok) throw FormatError("malformed base64: invalid character");
  }
  std::vector<std::uint8_t> out(3 * clean.size() / 4);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(clean.data()),
                                static_cast<int>(clean.size()));
  if (n < 0) throw FormatError("malformed base64");
  // EVP_DecodeBlock keeps the padding bytes; drop them.
  std::size_t pad = 0;
  if (clean.back() == '=') ++pad;
  if (clean.size() >= 2 && clean[clean.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

}  // namespace maskcycle
