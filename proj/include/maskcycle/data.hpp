// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "maskcycle/rng.hpp"

namespace maskcycle {

enum class Split { Train, Test };

std::string to_string(Split split);
Split split_from_string(const std::string& name);

/// Unpaired two-domain dataset laid out as {root}/{trainA,trainB,testA,testB}/*.{png,jpg}.
struct DatasetSpec {
  std::filesystem::path root;
  int resolution = 128;
  Split split = Split::Train;
  bool flip = true;          // random horizontal flip (train split only)
  bool crop_jitter = false;  // load at 1.12x resolution then random-crop (train split only)
  int batch_size = 1;
  int max_images = 0;  // 0 = every file; otherwise the first N files in sorted order

  std::filesystem::path folder(char domain) const;
  std::filesystem::path folder(char domain, Split split) const;
  int load_size() const;
  void validate() const;
};

nlohmann::json to_json(const DatasetSpec& spec);
DatasetSpec dataset_spec_from_json(const nlohmann::json& json);

/// Every image of one domain folder, decoded, resized and scaled to [-1, 1].
class ImageFolder {
 public:
  /// Throws DatasetError listing every undecodable file, or when the folder is
  /// missing or holds no images.
  ImageFolder(const std::filesystem::path& folder, int size, int max_images = 0);

  std::size_t size() const { return images_.size(); }
  const torch::Tensor& operator[](std::size_t i) const { return images_[i]; }
  const std::vector<std::filesystem::path>& files() const { return files_; }
  /// [N, 3, size, size] stack of all images.
  torch::Tensor stack() const;

 private:
  std::vector<std::filesystem::path> files_;
  std::vector<torch::Tensor> images_;
};

/// Image files (png/jpg/jpeg) directly inside folder, sorted by name.
std::vector<std::filesystem::path> list_images(const std::filesystem::path& folder);

struct Batch {
  torch::Tensor a;  // [N, 3, R, R]
  torch::Tensor b;  // [N, 3, R, R]
};

torch::Tensor hflip(const torch::Tensor& image);

struct AugmentOptions {
  bool enabled = true;
  bool flip = true;
  bool crop_jitter = false;
  int resolution = 128;
};

/// Random horizontal flip with p = 0.5, then (if crop_jitter) a random
/// resolution x resolution crop. Disabled augmentation returns the input unchanged.
torch::Tensor train_augment(const torch::Tensor& image, const AugmentOptions& options, Rng& rng);

/// Endless unpaired batches. Each domain walks its own independent
/// permutation, reshuffled every epoch.
class UnpairedLoader {
 public:
  UnpairedLoader(const DatasetSpec& spec, std::uint64_t seed);

  Batch next();
  std::size_t size_a() const { return a_.size(); }
  std::size_t size_b() const { return b_.size(); }
  std::int64_t epoch_a() const { return epoch_a_; }
  std::int64_t epoch_b() const { return epoch_b_; }
  /// Indices (into the folders) of the images in the most recent batch.
  const std::vector<std::size_t>& last_indices_a() const { return last_a_; }
  const std::vector<std::size_t>& last_indices_b() const { return last_b_; }

 private:
  torch::Tensor draw(const ImageFolder& folder, std::vector<std::size_t>& order, std::size_t& cursor,
                     std::int64_t& epoch, std::vector<std::size_t>& picked);

  DatasetSpec spec_;
  ImageFolder a_;
  ImageFolder b_;
  Rng rng_;
  std::vector<std::size_t> order_a_, order_b_;
  std::size_t cursor_a_ = 0, cursor_b_ = 0;
  std::int64_t epoch_a_ = 0, epoch_b_ = 0;
  std::vector<std::size_t> last_a_, last_b_;
};

}  // namespace maskcycle
