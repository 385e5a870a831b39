// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <torch/torch.h>

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "maskcycle/data.hpp"
#include "maskcycle/image_io.hpp"
#include "maskcycle/mask.hpp"
#include "maskcycle/nets.hpp"

namespace maskcycle {

// ---- feature extraction ------------------------------------------------------

class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::string id() const = 0;
  virtual int dimension() const = 0;
  /// images: [N, 3, H, W] in [-1, 1]; resized internally. Returns [N, d] float64.
  virtual torch::Tensor extract(const torch::Tensor& images) = 0;
};

/// Registry lookup. Known ids:
///   "toy-mnist"  fixed-seed random conv features (64-d) for 32x32 desk-scale runs;
///   "inception"  a TorchScript module at $MASKCYCLE_INCEPTION_PATH mapping
///                [N,3,299,299] in [-1,1] to [N,d] features.
/// Throws ParameterError for unknown ids and LoadError when inception weights are missing.
std::unique_ptr<FeatureExtractor> make_extractor(const std::string& id);
std::vector<std::string> extractor_ids();

/// Throws InputError for fewer than two images.
torch::Tensor extract_features(FeatureExtractor& extractor, const torch::Tensor& images, int batch_size = 64);

// ---- statistics ------------------------------------------------------------------

struct FeatureStats {
  Eigen::VectorXd mu;
  Eigen::MatrixXd sigma;  // unbiased sample covariance
  std::int64_t n = 0;
  std::string extractor_id;

  /// features: [n, d]. Throws InputError for n < 2.
  static FeatureStats fit(const torch::Tensor& features, const std::string& extractor_id);
  int dimension() const { return static_cast<int>(mu.size()); }
};

void save_stats(const FeatureStats& stats, const std::filesystem::path& path);
FeatureStats load_stats(const std::filesystem::path& path);

struct FrechetOptions {
  double jitter = 1e-6;          // added to the covariance diagonal when an eigenvalue dips below 0
  double negative_tolerance = 1e-6;  // how far below zero counts as a genuine eigenvalue failure (relative)
};

/// ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)), clamped at 0.
double frechet_distance(const FeatureStats& p, const FeatureStats& q, const FrechetOptions& options = {});

// ---- FID matrices ----------------------------------------------------------------

struct FidMatrix {
  std::vector<std::string> labels;
  Eigen::MatrixXd values;

  double at(const std::string& row, const std::string& col) const;
  std::size_t index(const std::string& label) const;
  bool symmetric(double tol = 1e-6) const;
  bool zero_diagonal(double tol = 1e-6) const;
  nlohmann::json to_json() const;
  static FidMatrix from_json(const nlohmann::json& json);
  /// Heatmap: one cell_px square per entry, dark = small distance.
  RawImage heatmap(int cell_px = 32) const;
};

FidMatrix fid_matrix_from_stats(const std::vector<std::string>& labels, const std::vector<FeatureStats>& stats,
                                const FrechetOptions& options = {});

enum class Direction { A, B };

struct FidMatrixOptions {
  std::vector<double> scales{0.5, 0.8, 1.0};
  Direction direction = Direction::B;
  bool include_train_half = false;  // adds "train-half": a seeded random half of the train split
  std::uint64_t seed = 0;
  int max_images = 0;  // per set; 0 = full split
  std::optional<std::filesystem::path> cache_dir;  // fid-cache/ for real-data stats
};

struct FidReport {
  FidMatrix matrix;
  std::map<std::string, std::int64_t> counts;  // images per label
  std::map<std::string, bool> comparisons;      // e.g. "gen@0.8,test < gen@1.0,test"
  std::string extractor_id;
  std::string direction;
  nlohmann::json to_json() const;
};

/// Labels: train, test, [train-half], gen@<scale>... Real sets come from the
/// target domain; generated sets translate the other domain's test split with
/// a centered-square mask at each scale.
FidReport fid_matrix(ModelSet& models, const std::filesystem::path& dataset_root, FeatureExtractor& extractor,
                     const FidMatrixOptions& options);

/// Cache root: $MASKCYCLE_CACHE if set, else ./fid-cache.
std::filesystem::path default_cache_dir();

// ---- output grids ----------------------------------------------------------------

struct OutputGrid {
  torch::Tensor sheet;  // [3, H, W] in [-1, 1]
  std::vector<std::vector<torch::Tensor>> generated;  // [source][mask] -> [3, R, R]
  int rows = 0;  // sources + 1 header row
  int cols = 0;  // masks + 1 header column
};

/// First row shows the masks, first column the sources, other cells the
/// generator output for that (source, mask) pair.
OutputGrid render_output_grid(Generator& generator, const std::vector<torch::Tensor>& sources,
                              const std::vector<Mask>& masks);

/// Centered-square and (optionally) round masks at each scale, in that order.
std::vector<Mask> grid_masks(int size, const std::vector<double>& scales, bool include_square, bool include_round);

}  // namespace maskcycle
