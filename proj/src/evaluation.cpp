// SPDX-License-Identifier: Apache-2.0
#include "maskcycle/evaluation.hpp"

#include <torch/script.h>

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>

#include "maskcycle/errors.hpp"
#include "maskcycle/rng.hpp"

namespace maskcycle {

// ---- feature extraction ------------------------------------------------------

namespace {

/// Three stride-2 ReLU convs with fixed random weights, then global average pooling.
class ToyDigitsExtractor final : public FeatureExtractor {
 public:
  ToyDigitsExtractor() {
    auto gen = at::detail::createCPUGenerator(kSeed);
    const auto make = [&](int in, int out) {
      const double std = std::sqrt(2.0 / (in * 9));
      return std::make_pair(torch::randn({out, in, 3, 3}, gen, torch::kFloat32) * std,
                            torch::randn({out}, gen, torch::kFloat32) * 0.05);
    };
    layers_ = {make(3, 16), make(16, 32), make(32, kDim)};
  }

  std::string id() const override { return "toy-mnist"; }
  int dimension() const override { return kDim; }

  torch::Tensor extract(const torch::Tensor& images) override {
    torch::NoGradGuard no_grad;
    auto x = images.to(torch::kFloat32);
    if (x.size(-1) != kInput || x.size(-2) != kInput) {
      namespace F = torch::nn::functional;
      x = F::interpolate(x, F::InterpolateFuncOptions()
                                .size(std::vector<int64_t>{kInput, kInput})
                                .mode(torch::kBilinear)
                                .align_corners(false));
    }
    for (const auto& [w, b] : layers_) x = torch::relu(torch::conv2d(x, w, b, /*stride=*/2, /*padding=*/1));
    return x.mean({2, 3}).to(torch::kFloat64);
  }

 private:
  static constexpr std::uint64_t kSeed = 20180513;
  static constexpr int kDim = 64;
  static constexpr int kInput = 32;
  std::vector<std::pair<torch::Tensor, torch::Tensor>> layers_;
};

class TorchScriptExtractor final : public FeatureExtractor {
 public:
  TorchScriptExtractor(std::string id, const std::filesystem::path& path, int input_size)
      : id_(std::move(id)), input_size_(input_size) {
    try {
      module_ = torch::jit::load(path.string());
    } catch (const c10::Error& e) {
      throw LoadError("cannot load feature extractor " + path.string() + ": " + e.what_without_backtrace());
    }
    module_.eval();
    dimension_ = static_cast<int>(run(torch::zeros({2, 3, input_size_, input_size_})).size(1));
  }

  std::string id() const override { return id_; }
  int dimension() const override { return dimension_; }
  torch::Tensor extract(const torch::Tensor& images) override { return run(images); }

 private:
  torch::Tensor run(const torch::Tensor& images) {
    torch::NoGradGuard no_grad;
    namespace F = torch::nn::functional;
    auto x = F::interpolate(images.to(torch::kFloat32), F::InterpolateFuncOptions()
                                                            .size(std::vector<int64_t>{input_size_, input_size_})
                                                            .mode(torch::kBilinear)
                                                            .align_corners(false));
    auto out = module_.forward({x}).toTensor();
    return out.reshape({out.size(0), -1}).to(torch::kFloat64);
  }

  std::string id_;
  int input_size_;
  int dimension_ = 0;
  torch::jit::script::Module module_;
};

}  // namespace

std::vector<std::string> extractor_ids() { return {"toy-mnist", "inception"}; }

std::unique_ptr<FeatureExtractor> make_extractor(const std::string& id) {
  if (id == "toy-mnist") return std::make_unique<ToyDigitsExtractor>();
  if (id == "inception") {
    const char* path = std::getenv("MASKCYCLE_INCEPTION_PATH");
    if (path == nullptr || *path == '\0')
      throw LoadError("extractor 'inception' needs MASKCYCLE_INCEPTION_PATH pointing at a TorchScript module");
    return std::make_unique<TorchScriptExtractor>("inception", path, 299);
  }
  throw ParameterError("unknown feature extractor '" + id + "'");
}

torch::Tensor extract_features(FeatureExtractor& extractor, const torch::Tensor& images, int batch_size) {
  if (images.dim() != 4 || images.size(1) != 3) throw InputError("feature extraction expects [N,3,H,W] images");
  if (images.size(0) < 2) throw InputError("feature extraction needs at least two images");
  std::vector<torch::Tensor> chunks;
  for (int64_t start = 0; start < images.size(0); start += batch_size)
    chunks.push_back(extractor.extract(images.slice(0, start, std::min<int64_t>(start + batch_size, images.size(0)))));
  return torch::cat(chunks, 0);
}

// ---- statistics ------------------------------------------------------------------

FeatureStats FeatureStats::fit(const torch::Tensor& features, const std::string& extractor_id) {
  if (features.dim() != 2) throw InputError("features must be an [n, d] matrix");
  const auto n = features.size(0);
  const auto d = features.size(1);
  if (n < 2) throw InputError("at least two samples are needed to fit feature statistics");
  auto f = features.to(torch::kFloat64).contiguous();
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> x(f.data_ptr<double>(), n,
                                                                                             d);
  FeatureStats s;
  s.n = n;
  s.extractor_id = extractor_id;
  s.mu = x.colwise().mean().transpose();
  const Eigen::MatrixXd centered = x.rowwise() - s.mu.transpose();
  s.sigma = (centered.transpose() * centered) / static_cast<double>(n - 1);
  s.sigma = 0.5 * (s.sigma + s.sigma.transpose());
  return s;
}

namespace {

constexpr char kStatsMagic[8] = {'M', 'C', 'F', 'S', 'T', 'A', 'T', '1'};

}  // namespace

void save_stats(const FeatureStats& stats, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    const std::int64_t d = stats.dimension();
    const std::int64_t id_len = static_cast<std::int64_t>(stats.extractor_id.size());
    out.write(kStatsMagic, sizeof(kStatsMagic));
    out.write(reinterpret_cast<const char*>(&stats.n), sizeof(stats.n));
    out.write(reinterpret_cast<const char*>(&d), sizeof(d));
    out.write(reinterpret_cast<const char*>(&id_len), sizeof(id_len));
    out.write(stats.extractor_id.data(), id_len);
    out.write(reinterpret_cast<const char*>(stats.mu.data()), d * sizeof(double));
    out.write(reinterpret_cast<const char*>(stats.sigma.data()), d * d * sizeof(double));
    if (!out) throw Error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

FeatureStats load_stats(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open feature stats " + path.string());
  char magic[sizeof(kStatsMagic)];
  in.read(magic, sizeof(magic));
  if (!in || !std::equal(std::begin(magic), std::end(magic), std::begin(kStatsMagic)))
    throw LoadError("not a feature stats file: " + path.string());
  FeatureStats s;
  std::int64_t d = 0, id_len = 0;
  in.read(reinterpret_cast<char*>(&s.n), sizeof(s.n));
  in.read(reinterpret_cast<char*>(&d), sizeof(d));
  in.read(reinterpret_cast<char*>(&id_len), sizeof(id_len));
  if (!in || d < 1 || d > (1 << 16) || id_len < 0 || id_len > 256) throw LoadError("corrupt feature stats header");
  s.extractor_id.resize(id_len);
  in.read(s.extractor_id.data(), id_len);
  s.mu.resize(d);
  s.sigma.resize(d, d);
  in.read(reinterpret_cast<char*>(s.mu.data()), d * sizeof(double));
  in.read(reinterpret_cast<char*>(s.sigma.data()), d * d * sizeof(double));
  if (!in) throw LoadError("truncated feature stats file: " + path.string());
  return s;
}

namespace {

/// Symmetric PSD square root. Eigenvalues that dip below zero trigger a
/// jitter * I shift; whatever is still negative after that is clamped to 0.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, const FrechetOptions& options) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(m);
  if (solver.info() != Eigen::Success) throw NumericError("eigendecomposition failed in covariance square root");
  Eigen::VectorXd values = solver.eigenvalues();
  if (values.minCoeff() < 0.0) values.array() += options.jitter;
  values = values.cwiseMax(0.0);
  return solver.eigenvectors() * values.cwiseSqrt().asDiagonal() * solver.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const FeatureStats& p, const FeatureStats& q, const FrechetOptions& options) {
  if (p.dimension() != q.dimension())
    throw InputError("feature dimensions differ: " + std::to_string(p.dimension()) + " vs " +
                     std::to_string(q.dimension()));
  if (p.sigma.rows() != p.dimension() || q.sigma.rows() != q.dimension() || p.sigma.cols() != p.dimension() ||
      q.sigma.cols() != q.dimension())
    throw InputError("covariance shape does not match the mean");
  const double scale = std::max({1.0, p.sigma.cwiseAbs().maxCoeff(), q.sigma.cwiseAbs().maxCoeff()});
  if ((p.sigma - p.sigma.transpose()).cwiseAbs().maxCoeff() > 1e-9 * scale ||
      (q.sigma - q.sigma.transpose()).cwiseAbs().maxCoeff() > 1e-9 * scale)
    throw InputError("covariance matrices must be symmetric");

  const Eigen::MatrixXd root_p = psd_sqrt(p.sigma, options);
  // Tr (S_p S_q)^(1/2) = Tr (S_p^(1/2) S_q S_p^(1/2))^(1/2); the inner product is symmetric PSD.
  Eigen::MatrixXd inner = root_p * q.sigma * root_p;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(inner, Eigen::EigenvaluesOnly);
  if (solver.info() != Eigen::Success) throw NumericError("eigendecomposition failed in Frechet distance");
  const Eigen::VectorXd values = solver.eigenvalues();
  const double largest = std::max(1.0, values.cwiseAbs().maxCoeff());
  if (values.minCoeff() < -options.negative_tolerance * largest * values.size())
    throw NumericError("covariance product has a significantly negative eigenvalue; square root failed");
  const double trace_sqrt = values.cwiseMax(0.0).cwiseSqrt().sum();

  const double mean_term = (p.mu - q.mu).squaredNorm();
  const double distance = mean_term + p.sigma.trace() + q.sigma.trace() - 2.0 * trace_sqrt;
  if (distance < 0.0) {
    if (distance < -1e-6 * std::max(1.0, p.sigma.trace() + q.sigma.trace()))
      std::cerr << "warning: Frechet distance " << distance << " clamped to 0\n";
    return 0.0;
  }
  return distance;
}

// ---- FID matrices ----------------------------------------------------------------

std::size_t FidMatrix::index(const std::string& label) const {
  const auto it = std::find(labels.begin(), labels.end(), label);
  if (it == labels.end()) throw InputError("FID matrix has no label '" + label + "'");
  return static_cast<std::size_t>(it - labels.begin());
}

double FidMatrix::at(const std::string& row, const std::string& col) const { return values(index(row), index(col)); }

bool FidMatrix::symmetric(double tol) const { return (values - values.transpose()).cwiseAbs().maxCoeff() <= tol; }

bool FidMatrix::zero_diagonal(double tol) const { return values.diagonal().cwiseAbs().maxCoeff() <= tol; }

nlohmann::json FidMatrix::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < values.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < values.cols(); ++j) row.push_back(values(i, j));
    rows.push_back(row);
  }
  return {{"labels", labels}, {"values", rows}};
}

FidMatrix FidMatrix::from_json(const nlohmann::json& json) {
  FidMatrix m;
  try {
    m.labels = json.at("labels").get<std::vector<std::string>>();
    const auto rows = json.at("values").get<std::vector<std::vector<double>>>();
    const auto n = static_cast<Eigen::Index>(m.labels.size());
    if (static_cast<Eigen::Index>(rows.size()) != n) throw FormatError("FID matrix rows do not match labels");
    m.values.resize(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      if (static_cast<Eigen::Index>(rows[i].size()) != n) throw FormatError("FID matrix is not square");
      for (Eigen::Index j = 0; j < n; ++j) m.values(i, j) = rows[i][j];
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("FID matrix JSON: ") + e.what());
  }
  return m;
}

RawImage FidMatrix::heatmap(int cell_px) const {
  const int n = static_cast<int>(labels.size());
  RawImage img;
  img.width = img.height = std::max(1, n * cell_px);
  img.channels = 3;
  img.pixels.assign(static_cast<std::size_t>(img.width) * img.height * 3, 255);
  const double top = n > 0 ? std::max(values.maxCoeff(), 1e-12) : 1.0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const double t = std::clamp(values(i, j) / top, 0.0, 1.0);
      // dark blue (close) to yellow (far)
      const auto r = static_cast<std::uint8_t>(std::lround(20 + 235 * t));
      const auto g = static_cast<std::uint8_t>(std::lround(30 + 200 * t));
      const auto b = static_cast<std::uint8_t>(std::lround(110 * (1.0 - t)));
      for (int y = i * cell_px; y < (i + 1) * cell_px; ++y) {
        for (int x = j * cell_px; x < (j + 1) * cell_px; ++x) {
          auto* px = &img.pixels[(static_cast<std::size_t>(y) * img.width + x) * 3];
          px[0] = r;
          px[1] = g;
          px[2] = b;
        }
      }
    }
  }
  return img;
}

FidMatrix fid_matrix_from_stats(const std::vector<std::string>& labels, const std::vector<FeatureStats>& stats,
                                const FrechetOptions& options) {
  if (labels.size() != stats.size()) throw InputError("one label per feature set is required");
  const auto n = static_cast<Eigen::Index>(labels.size());
  FidMatrix m;
  m.labels = labels;
  m.values = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double d = frechet_distance(stats[i], stats[j], options);
      m.values(i, j) = d;
      m.values(j, i) = d;
    }
  }
  return m;
}

std::filesystem::path default_cache_dir() {
  const char* root = std::getenv("MASKCYCLE_CACHE");
  if (root != nullptr && *root != '\0') return std::filesystem::path(root);
  return std::filesystem::path("fid-cache");
}

nlohmann::json FidReport::to_json() const {
  return {{"matrix", matrix.to_json()},
          {"counts", counts},
          {"comparisons", comparisons},
          {"extractor", extractor_id},
          {"direction", direction}};
}

namespace {

std::string scale_label(double scale) {
  std::ostringstream out;
  out << "gen@" << std::setprecision(3) << scale;
  std::string s = out.str();
  if (s.find('.') == std::string::npos) s += ".0";
  return s;
}

std::string cache_key(const std::filesystem::path& folder, const std::vector<std::filesystem::path>& files, int size,
                      const std::string& extractor) {
  std::ostringstream key;
  key << std::filesystem::absolute(folder).lexically_normal().string() << '|' << size << '|' << extractor;
  for (const auto& f : files) {
    std::error_code ec;
    key << '|' << f.filename().string() << ':' << std::filesystem::file_size(f, ec);
  }
  std::ostringstream hex;
  hex << std::hex << std::setw(16) << std::setfill('0') << std::hash<std::string>{}(key.str());
  return hex.str();
}

torch::Tensor translate_all(Generator& generator, const torch::Tensor& sources, const Mask& mask, int batch) {
  torch::NoGradGuard no_grad;
  const auto m = mask.to_tensor().unsqueeze(0);
  std::vector<torch::Tensor> out;
  for (int64_t s = 0; s < sources.size(0); s += batch)
    out.push_back(generator->forward(sources.slice(0, s, std::min<int64_t>(s + batch, sources.size(0))), m));
  return torch::cat(out, 0);
}

}  // namespace

FidReport fid_matrix(ModelSet& models, const std::filesystem::path& dataset_root, FeatureExtractor& extractor,
                     const FidMatrixOptions& options) {
  if (options.scales.empty()) throw ParameterError("at least one mask scale is needed");
  for (double s : options.scales)
    if (!(s > 0.0 && s <= 1.0)) throw ParameterError("mask scales must lie in (0, 1]");
  const int size = models.config.resolution;
  const char target = options.direction == Direction::A ? 'A' : 'B';
  const char source = options.direction == Direction::A ? 'B' : 'A';
  Generator& generator = options.direction == Direction::A ? models.g_ba : models.g_ab;
  models.eval();

  DatasetSpec spec;
  spec.root = dataset_root;
  spec.resolution = size;

  FidReport report;
  report.extractor_id = extractor.id();
  report.direction = std::string(1, target);
  std::vector<std::string> labels;
  std::vector<FeatureStats> stats;

  const auto add_set = [&](const std::string& label, const torch::Tensor& images) {
    if (images.size(0) < 2)
      throw InputError("FID set '" + label + "' has " + std::to_string(images.size(0)) + " images; at least 2 needed");
    labels.push_back(label);
    stats.push_back(FeatureStats::fit(extract_features(extractor, images), extractor.id()));
    report.counts[label] = images.size(0);
  };

  const auto real_set = [&](const std::string& label, Split split) {
    const auto folder = spec.folder(target, split);
    if (!std::filesystem::is_directory(folder)) throw DatasetError("missing split folder " + folder.string());
    auto files = list_images(folder);
    if (options.max_images > 0 && files.size() > static_cast<std::size_t>(options.max_images))
      files.resize(options.max_images);
    if (options.cache_dir) {
      const auto path = *options.cache_dir / (cache_key(folder, files, size, extractor.id()) + ".stats");
      if (std::filesystem::exists(path)) {
        labels.push_back(label);
        stats.push_back(load_stats(path));
        report.counts[label] = stats.back().n;
        return;
      }
      add_set(label, ImageFolder(folder, size, options.max_images).stack());
      save_stats(stats.back(), path);
      return;
    }
    add_set(label, ImageFolder(folder, size, options.max_images).stack());
  };

  real_set("train", Split::Train);
  real_set("test", Split::Test);

  if (options.include_train_half) {
    const ImageFolder train(spec.folder(target, Split::Train), size, options.max_images);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(options.seed);
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
    order.resize(order.size() / 2);
    std::vector<torch::Tensor> half;
    for (auto i : order) half.push_back(train[i]);
    if (half.size() < 2) throw InputError("train split is too small to resample a half");
    add_set("train-half", torch::stack(half));
  }

  const ImageFolder sources(spec.folder(source, Split::Test), size, options.max_images);
  const auto source_stack = sources.stack();
  for (double scale : options.scales)
    add_set(scale_label(scale), translate_all(generator, source_stack, sample_centered_square(size, scale), 16));

  report.matrix = fid_matrix_from_stats(labels, stats);

  const auto has = [&](const std::string& l) { return std::find(labels.begin(), labels.end(), l) != labels.end(); };
  for (double scale : options.scales) {
    const auto g = scale_label(scale);
    report.comparisons["FID(" + g + ",train) < FID(" + g + ",test)"] =
        report.matrix.at(g, "train") < report.matrix.at(g, "test");
  }
  if (has("gen@0.8") && has("gen@1.0"))
    report.comparisons["FID(gen@0.8,test) < FID(gen@1.0,test)"] =
        report.matrix.at("gen@0.8", "test") < report.matrix.at("gen@1.0", "test");
  if (has("train-half") && has("gen@1.0"))
    report.comparisons["FID(train,train-half) < FID(train,gen@1.0)"] =
        report.matrix.at("train", "train-half") < report.matrix.at("train", "gen@1.0");
  return report;
}

// ---- output grids ----------------------------------------------------------------

std::vector<Mask> grid_masks(int size, const std::vector<double>& scales, bool include_square, bool include_round) {
  std::vector<Mask> masks;
  if (include_square)
    for (double s : scales) masks.push_back(sample_centered_square(size, s));
  if (include_round)
    for (double s : scales) masks.push_back(sample_round(size, s));
  return masks;
}

OutputGrid render_output_grid(Generator& generator, const std::vector<torch::Tensor>& sources,
                              const std::vector<Mask>& masks) {
  const int size = generator->resolution();
  for (const auto& m : masks)
    if (m.size() != size)
      throw InputError("grid mask size " + std::to_string(m.size()) + " differs from model resolution " +
                       std::to_string(size));
  for (const auto& s : sources)
    if (s.dim() != 3 || s.size(0) != 3 || s.size(1) != size || s.size(2) != size)
      throw InputError("grid sources must be [3," + std::to_string(size) + "," + std::to_string(size) + "] images");

  generator->eval();
  torch::NoGradGuard no_grad;
  OutputGrid grid;
  grid.rows = static_cast<int>(sources.size()) + 1;
  grid.cols = static_cast<int>(masks.size()) + 1;
  std::vector<std::vector<torch::Tensor>> cells(grid.rows, std::vector<torch::Tensor>(grid.cols));
  for (std::size_t k = 0; k < masks.size(); ++k)
    cells[0][k + 1] = (masks[k].to_tensor() * 2.0 - 1.0).expand({3, size, size});
  for (std::size_t j = 0; j < sources.size(); ++j) {
    cells[j + 1][0] = sources[j];
    std::vector<torch::Tensor> row;
    for (std::size_t k = 0; k < masks.size(); ++k) {
      auto out = translate(generator, sources[j], masks[k]);
      row.push_back(out);
      cells[j + 1][k + 1] = out;
    }
    grid.generated.push_back(std::move(row));
  }
  grid.sheet = tile_grid(cells, size);
  return grid;
}

}  // namespace maskcycle
