// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "maskcycle/rng.hpp"

namespace maskcycle {

/// Square binary pixel mask. Entries equal to 1 form the masked region (kept and
/// translated); entries equal to 0 form the contextual region.
class Mask {
 public:
  Mask() = default;
  explicit Mask(int size, std::uint8_t fill = 0);

  static Mask full(int size) { return Mask(size, 1); }
  static Mask zeros(int size) { return Mask(size, 0); }
  /// Throws InputError unless every entry of the [H, W] or [1, H, W] tensor is exactly 0 or 1.
  static Mask from_tensor(const torch::Tensor& bits);

  int size() const { return size_; }
  std::uint8_t at(int row, int col) const { return bits_[index(row, col)]; }
  void set(int row, int col, std::uint8_t value);
  /// Sets the half-open block [row0, row1) x [col0, col1) to 1.
  void fill_rect(int row0, int row1, int col0, int col1);

  std::span<const std::uint8_t> bits() const { return bits_; }
  std::int64_t count() const;
  double coverage() const;
  bool is_full() const { return count() == static_cast<std::int64_t>(bits_.size()); }
  bool is_empty() const { return count() == 0; }

  /// [1, size, size] float tensor with values 0 and 1.
  torch::Tensor to_tensor() const;

  friend bool operator==(const Mask&, const Mask&) = default;

 private:
  std::size_t index(int row, int col) const { return static_cast<std::size_t>(row) * size_ + col; }

  int size_ = 0;
  std::vector<std::uint8_t> bits_;
};

// ---- scheme configuration --------------------------------------------------

struct CenteredSquare {
  double scale = 1.0;
};

/// Parameters of the multi-rectangles sampler. Rectangle bounds of 0 mean
/// "derive from the image size": min_rect_size = size / 10, max_rect_size = size.
struct MultiRectangles {
  int min_max_num_rects = 5;
  double min_sum_rel_area = 0.15;
  int min_rect_size = 0;
  int max_rect_size = 0;
};

struct AttentionBinarize {
  double threshold = 0.5;
};

struct Round {
  double scale = 1.0;
};

struct Full {};

using MaskSchemeConfig = std::variant<CenteredSquare, MultiRectangles, AttentionBinarize, Round, Full>;

/// Variant tag used in JSON ("centered-square", "multi-rectangles", ...).
std::string scheme_name(const MaskSchemeConfig& config);
nlohmann::json scheme_to_json(const MaskSchemeConfig& config);
/// Throws ParameterError on unknown variants, unknown keys or out-of-range values.
MaskSchemeConfig scheme_from_json(const nlohmann::json& json);
/// Range checks that do not depend on the image size.
void validate_scheme(const MaskSchemeConfig& config);

// ---- samplers ----------------------------------------------------------------

Mask sample_centered_square(int size, double scale);
Mask sample_round(int size, double scale);

struct Rect {
  int row0, row1, col0, col1;  // half-open
  int height() const { return row1 - row0; }
  int width() const { return col1 - col0; }
};

struct MultiRectanglesSample {
  Mask mask;
  int min_num_rects = 0;     // drawn uniformly from [1, min_max_num_rects]
  int num_rects = 0;         // loop iterations executed
  double sum_rel_area = 0.0;  // raw accumulated area over size^2, overlaps counted twice
  std::vector<Rect> rects;
};

/// Multi-rectangles sampler with size-dependent defaults resolved.
MultiRectangles resolve_multi_rectangles(int size, const MultiRectangles& config);

/// The literal rectangle loop: keeps drawing rectangles until at least
/// min_num_rects were drawn and the accumulated relative area reaches
/// min_sum_rel_area. The mask is the union of the drawn rectangles.
MultiRectanglesSample multi_rectangles_raw(int size, const MultiRectangles& config, Rng& rng);

/// multi_rectangles_raw, plus the degenerate case min_sum_rel_area >= 1
/// which returns the full mask (the loop still runs so rng consumption and the
/// loop statistics are unchanged).
MultiRectanglesSample sample_multi_rectangles(int size, const MultiRectangles& config, Rng& rng);

/// bits = map >= threshold. The map is [H, W] (or [1, H, W]) with entries in [0, 1].
Mask binarize_attention(const torch::Tensor& attention, double threshold);

/// Draws one mask of the given size from any scheme except attention-binarize,
/// which needs a map and raises ParameterError here.
Mask sample_mask(int size, const MaskSchemeConfig& config, Rng& rng);

// ---- application ---------------------------------------------------------------

/// Channel-broadcast product image * mask. Accepts [C, H, W] or [N, C, H, W].
torch::Tensor apply(const Mask& mask, const torch::Tensor& image);
Mask invert(const Mask& mask);

// ---- persistence -------------------------------------------------------------

/// 1-bit grayscale PNG, 0 -> black, 1 -> white.
std::vector<std::uint8_t> encode_mask_png(const Mask& mask);
/// Accepts any PNG whose pixels are all exactly black or white (0 or 255),
/// gray or colour with equal channels; anything else is a FormatError.
Mask decode_mask_png(std::span<const std::uint8_t> bytes);
void write_mask(const std::filesystem::path& path, const Mask& mask);
Mask read_mask(const std::filesystem::path& path);

/// Grayscale attention map read from an image file, scaled to [0, 1].
torch::Tensor read_attention_map(const std::filesystem::path& path);

/// Nearest-neighbour resize; the result stays binary.
Mask resize_nearest(const Mask& mask, int size);

}  // namespace maskcycle
