// SPDX-License-Identifier: Apache-2.0
#include "maskcycle/mask.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "maskcycle/errors.hpp"
#include "maskcycle/image_io.hpp"

namespace maskcycle {

Mask::Mask(int size, std::uint8_t fill) : size_(size) {
  if (size < 1) throw ParameterError("mask size must be >= 1, got " + std::to_string(size));
  if (fill > 1) throw InputError("mask entries must be 0 or 1");
  bits_.assign(static_cast<std::size_t>(size) * size, fill);
}

Mask Mask::from_tensor(const torch::Tensor& bits) {
  auto grid = bits.dim() == 3 ? bits.squeeze(0) : bits;
  if (grid.dim() != 2 || grid.size(0) != grid.size(1)) throw InputError("mask tensor must be square [H,W]");
  auto values = grid.detach().to(torch::kCPU, torch::kFloat64).contiguous();
  if (!torch::logical_or(values == 0.0, values == 1.0).all().item<bool>())
    throw InputError("mask tensor has entries other than 0 and 1");
  Mask mask(static_cast<int>(grid.size(0)));
  const double* src = values.data_ptr<double>();
  for (std::size_t i = 0; i < mask.bits_.size(); ++i) mask.bits_[i] = src[i] != 0.0 ? 1 : 0;
  return mask;
}

void Mask::set(int row, int col, std::uint8_t value) {
  if (value > 1) throw InputError("mask entries must be 0 or 1");
  bits_[index(row, col)] = value;
}

void Mask::fill_rect(int row0, int row1, int col0, int col1) {
  row0 = std::clamp(row0, 0, size_);
  row1 = std::clamp(row1, 0, size_);
  col0 = std::clamp(col0, 0, size_);
  col1 = std::clamp(col1, 0, size_);
  for (int r = row0; r < row1; ++r) std::fill(bits_.begin() + index(r, col0), bits_.begin() + index(r, col1), 1);
}

std::int64_t Mask::count() const { return std::accumulate(bits_.begin(), bits_.end(), std::int64_t{0}); }

double Mask::coverage() const { return bits_.empty() ? 0.0 : static_cast<double>(count()) / bits_.size(); }

torch::Tensor Mask::to_tensor() const {
  auto t = torch::empty({1, size_, size_}, torch::kFloat32);
  float* dst = t.data_ptr<float>();
  for (std::size_t i = 0; i < bits_.size(); ++i) dst[i] = bits_[i];
  return t;
}

// ---- scheme configuration --------------------------------------------------

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};

void check_scale(double scale, const char* what) {
  if (!(scale > 0.0 && scale <= 1.0))
    throw ParameterError(std::string(what) + " scale must be in (0, 1], got " + std::to_string(scale));
}

void check_keys(const nlohmann::json& json, std::initializer_list<const char*> allowed) {
  for (const auto& [key, value] : json.items()) {
    if (key == "variant") continue;
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* k) { return key == k; }) == allowed.end())
      throw ParameterError("unknown mask scheme parameter '" + key + "'");
  }
}

template <class T>
T get_or(const nlohmann::json& json, const char* key, T fallback) {
  if (!json.contains(key)) return fallback;
  try {
    return json.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ParameterError(std::string("mask scheme parameter '") + key + "' has the wrong type");
  }
}

}  // namespace

std::string scheme_name(const MaskSchemeConfig& config) {
  return std::visit(Overloaded{
                        [](const CenteredSquare&) { return std::string("centered-square"); },
                        [](const MultiRectangles&) { return std::string("multi-rectangles"); },
                        [](const AttentionBinarize&) { return std::string("attention-binarize"); },
                        [](const Round&) { return std::string("round"); },
                        [](const Full&) { return std::string("full"); },
                    },
                    config);
}

nlohmann::json scheme_to_json(const MaskSchemeConfig& config) {
  nlohmann::json json{{"variant", scheme_name(config)}};
  std::visit(Overloaded{
                 [&](const CenteredSquare& c) { json["scale"] = c.scale; },
                 [&](const MultiRectangles& c) {
                   json["min_max_num_rects"] = c.min_max_num_rects;
                   json["min_sum_rel_area"] = c.min_sum_rel_area;
                   json["min_rect_size"] = c.min_rect_size;
                   json["max_rect_size"] = c.max_rect_size;
                 },
                 [&](const AttentionBinarize& c) { json["threshold"] = c.threshold; },
                 [&](const Round& c) { json["scale"] = c.scale; },
                 [](const Full&) {},
             },
             config);
  return json;
}

MaskSchemeConfig scheme_from_json(const nlohmann::json& json) {
  if (!json.is_object() || !json.contains("variant") || !json["variant"].is_string())
    throw ParameterError("mask scheme must be a JSON object with a string 'variant'");
  const auto variant = json["variant"].get<std::string>();
  MaskSchemeConfig config;
  if (variant == "centered-square") {
    check_keys(json, {"scale"});
    config = CenteredSquare{get_or(json, "scale", 1.0)};
  } else if (variant == "multi-rectangles") {
    check_keys(json, {"min_max_num_rects", "min_sum_rel_area", "min_rect_size", "max_rect_size"});
    MultiRectangles c;
    c.min_max_num_rects = get_or(json, "min_max_num_rects", c.min_max_num_rects);
    c.min_sum_rel_area = get_or(json, "min_sum_rel_area", c.min_sum_rel_area);
    c.min_rect_size = get_or(json, "min_rect_size", c.min_rect_size);
    c.max_rect_size = get_or(json, "max_rect_size", c.max_rect_size);
    config = c;
  } else if (variant == "attention-binarize") {
    check_keys(json, {"threshold"});
    config = AttentionBinarize{get_or(json, "threshold", 0.5)};
  } else if (variant == "round") {
    check_keys(json, {"scale"});
    config = Round{get_or(json, "scale", 1.0)};
  } else if (variant == "full") {
    check_keys(json, {});
    config = Full{};
  } else {
    throw ParameterError("unknown mask scheme variant '" + variant + "'");
  }
  validate_scheme(config);
  return config;
}

void validate_scheme(const MaskSchemeConfig& config) {
  std::visit(Overloaded{
                 [](const CenteredSquare& c) { check_scale(c.scale, "centered-square"); },
                 [](const MultiRectangles& c) {
                   if (c.min_max_num_rects < 1) throw ParameterError("min_max_num_rects must be >= 1");
                   if (!(c.min_sum_rel_area > 0.0 && c.min_sum_rel_area <= 1.0))
                     throw ParameterError("min_sum_rel_area must be in (0, 1]");
                   if (c.min_rect_size < 0 || c.max_rect_size < 0)
                     throw ParameterError("rectangle size bounds must be positive (0 selects the default)");
                   if (c.min_rect_size > 0 && c.max_rect_size > 0 && c.min_rect_size > c.max_rect_size)
                     throw ParameterError("min_rect_size must not exceed max_rect_size");
                 },
                 [](const AttentionBinarize& c) {
                   if (!(c.threshold >= 0.0 && c.threshold <= 1.0))
                     throw ParameterError("attention threshold must be in [0, 1]");
                 },
                 [](const Round& c) { check_scale(c.scale, "round"); },
                 [](const Full&) {},
             },
             config);
}

// ---- samplers ----------------------------------------------------------------

Mask sample_centered_square(int size, double scale) {
  check_scale(scale, "centered-square");
  Mask mask(size);
  const int side = static_cast<int>(std::lround(scale * size));
  const int offset = (size - side) / 2;
  mask.fill_rect(offset, offset + side, offset, offset + side);
  return mask;
}

Mask sample_round(int size, double scale) {
  check_scale(scale, "round");
  Mask mask(size);
  const double center = size / 2.0;
  const double radius = scale * size / 2.0;
  for (int i = 0; i < size; ++i) {
    for (int j = 0; j < size; ++j) {
      const double di = i + 0.5 - center;
      const double dj = j + 0.5 - center;
      if (di * di + dj * dj <= radius * radius) mask.set(i, j, 1);
    }
  }
  return mask;
}

MultiRectangles resolve_multi_rectangles(int size, const MultiRectangles& config) {
  if (size < 1) throw ParameterError("mask size must be >= 1");
  validate_scheme(config);
  MultiRectangles resolved = config;
  if (resolved.min_rect_size == 0) resolved.min_rect_size = std::max(1, size / 10);
  if (resolved.max_rect_size == 0) resolved.max_rect_size = size;
  if (resolved.min_rect_size > size)
    throw ParameterError("min_rect_size " + std::to_string(resolved.min_rect_size) + " exceeds the image size " +
                         std::to_string(size));
  if (resolved.max_rect_size > size)
    throw ParameterError("max_rect_size " + std::to_string(resolved.max_rect_size) + " exceeds the image size " +
                         std::to_string(size));
  if (resolved.min_rect_size > resolved.max_rect_size)
    throw ParameterError("min_rect_size must not exceed max_rect_size");
  return resolved;
}

MultiRectanglesSample multi_rectangles_raw(int size, const MultiRectangles& config, Rng& rng) {
  const auto cfg = resolve_multi_rectangles(size, config);
  MultiRectanglesSample out;
  out.mask = Mask(size);
  out.min_num_rects = static_cast<int>(rng.uniform_int(1, cfg.min_max_num_rects));
  const double total = static_cast<double>(size) * size;
  while (out.num_rects < out.min_num_rects || out.sum_rel_area < cfg.min_sum_rel_area) {
    Rect r{};
    r.row0 = static_cast<int>(rng.uniform_int(0, size - cfg.min_rect_size));
    r.col0 = static_cast<int>(rng.uniform_int(0, size - cfg.min_rect_size));
    r.row1 = static_cast<int>(rng.uniform_int(r.row0 + cfg.min_rect_size, std::min(r.row0 + cfg.max_rect_size, size)));
    r.col1 = static_cast<int>(rng.uniform_int(r.col0 + cfg.min_rect_size, std::min(r.col0 + cfg.max_rect_size, size)));
    out.mask.fill_rect(r.row0, r.row1, r.col0, r.col1);
    out.rects.push_back(r);
    out.num_rects += 1;
    out.sum_rel_area += static_cast<double>(r.height()) * r.width() / total;
  }
  return out;
}

MultiRectanglesSample sample_multi_rectangles(int size, const MultiRectangles& config, Rng& rng) {
  auto out = multi_rectangles_raw(size, config, rng);
  if (config.min_sum_rel_area >= 1.0) out.mask = Mask::full(size);
  return out;
}

Mask binarize_attention(const torch::Tensor& attention, double threshold) {
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw ParameterError("attention threshold must be in [0, 1]");
  auto map = attention.dim() == 3 ? attention.squeeze(0) : attention;
  if (map.dim() != 2 || map.size(0) != map.size(1)) throw InputError("attention map must be a square [H,W] grid");
  auto values = map.detach().to(torch::kCPU, torch::kFloat64).contiguous();
  if (!torch::isfinite(values).all().item<bool>()) throw InputError("attention map has non-finite entries");
  if ((values < 0.0).any().item<bool>() || (values > 1.0).any().item<bool>())
    throw InputError("attention map entries must lie in [0, 1]");
  return Mask::from_tensor((values >= threshold).to(torch::kFloat64));
}

Mask sample_mask(int size, const MaskSchemeConfig& config, Rng& rng) {
  return std::visit(Overloaded{
                        [&](const CenteredSquare& c) { return sample_centered_square(size, c.scale); },
                        [&](const MultiRectangles& c) { return sample_multi_rectangles(size, c, rng).mask; },
                        [&](const AttentionBinarize&) -> Mask {
                          throw ParameterError("attention-binarize masks are built from an attention map, not sampled");
                        },
                        [&](const Round& c) { return sample_round(size, c.scale); },
                        [&](const Full&) { return Mask::full(size); },
                    },
                    config);
}

// ---- application ---------------------------------------------------------------

torch::Tensor apply(const Mask& mask, const torch::Tensor& image) {
  if (image.dim() != 3 && image.dim() != 4) throw InputError("apply expects a [C,H,W] or [N,C,H,W] image");
  const auto h = image.size(-2);
  const auto w = image.size(-1);
  if (h != mask.size() || w != mask.size())
    throw InputError("mask size " + std::to_string(mask.size()) + " does not match image " + std::to_string(h) + "x" +
                     std::to_string(w));
  auto m = mask.to_tensor().to(image.options());
  if (image.dim() == 4) m = m.unsqueeze(0);
  return image * m;
}

Mask invert(const Mask& mask) {
  Mask out(mask.size());
  for (int i = 0; i < mask.size(); ++i)
    for (int j = 0; j < mask.size(); ++j) out.set(i, j, static_cast<std::uint8_t>(1 - mask.at(i, j)));
  return out;
}

// ---- persistence -------------------------------------------------------------

std::vector<std::uint8_t> encode_mask_png(const Mask& mask) {
  RawImage raw;
  raw.width = raw.height = mask.size();
  raw.channels = 1;
  raw.pixels.resize(mask.bits().size());
  std::transform(mask.bits().begin(), mask.bits().end(), raw.pixels.begin(),
                 [](std::uint8_t b) { return static_cast<std::uint8_t>(b ? 255 : 0); });
  return encode_png(raw, 1);
}

Mask decode_mask_png(std::span<const std::uint8_t> bytes) {
  const RawImage raw = decode_png(bytes);
  if (raw.width != raw.height)
    throw FormatError("mask PNG must be square, got " + std::to_string(raw.width) + "x" + std::to_string(raw.height));
  const int colour = raw.channels >= 3 ? 3 : 1;
  Mask mask(raw.width);
  for (int i = 0; i < raw.height; ++i) {
    for (int j = 0; j < raw.width; ++j) {
      const std::uint8_t v = raw.at(i, j, 0);
      for (int c = 1; c < colour; ++c)
        if (raw.at(i, j, c) != v) throw FormatError("mask PNG has a non-gray pixel");
      if (v != 0 && v != 255)
        throw FormatError("mask PNG has non-binary value " + std::to_string(v) + " at (" + std::to_string(i) + "," +
                          std::to_string(j) + ")");
      mask.set(i, j, v == 255 ? 1 : 0);
    }
  }
  return mask;
}

void write_mask(const std::filesystem::path& path, const Mask& mask) {
  const auto bytes = encode_mask_png(mask);
  write_file_atomic(path, bytes);
}

Mask read_mask(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return decode_mask_png(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

torch::Tensor read_attention_map(const std::filesystem::path& path) {
  const RawImage raw = read_image(path);
  auto hwc = torch::from_blob(const_cast<std::uint8_t*>(raw.pixels.data()), {raw.height, raw.width, raw.channels},
                              torch::kUInt8)
                 .to(torch::kFloat32);
  return hwc.select(2, 0) / 255.0f;
}

Mask resize_nearest(const Mask& mask, int size) {
  if (size == mask.size()) return mask;
  Mask out(size);
  for (int i = 0; i < size; ++i) {
    const int si = std::min(mask.size() - 1, static_cast<int>(static_cast<std::int64_t>(i) * mask.size() / size));
    for (int j = 0; j < size; ++j) {
      const int sj = std::min(mask.size() - 1, static_cast<int>(static_cast<std::int64_t>(j) * mask.size() / size));
      out.set(i, j, mask.at(si, sj));
    }
  }
  return out;
}

}  // namespace maskcycle
