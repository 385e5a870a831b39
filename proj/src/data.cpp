// SPDX-License-Identifier: Apache-2.0
#include "maskcycle/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "maskcycle/errors.hpp"
#include "maskcycle/image_io.hpp"

namespace maskcycle {

std::string to_string(Split split) { return split == Split::Train ? "train" : "test"; }

Split split_from_string(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "test") return Split::Test;
  throw ParameterError("unknown split '" + name + "' (expected train or test)");
}

std::filesystem::path DatasetSpec::folder(char domain, Split s) const {
  return root / (to_string(s) + std::string(1, domain));
}

std::filesystem::path DatasetSpec::folder(char domain) const { return folder(domain, split); }

int DatasetSpec::load_size() const {
  return crop_jitter && split == Split::Train ? static_cast<int>(std::lround(resolution * 1.12)) : resolution;
}

void DatasetSpec::validate() const {
  if (root.empty()) throw ParameterError("dataset root is not set");
  if (resolution < 1) throw ParameterError("dataset resolution must be >= 1");
  if (batch_size < 1) throw ParameterError("batch size must be >= 1");
  if (max_images < 0) throw ParameterError("max_images must be >= 0");
}

nlohmann::json to_json(const DatasetSpec& spec) {
  return {{"root", spec.root.string()},     {"resolution", spec.resolution},
          {"split", to_string(spec.split)}, {"flip", spec.flip},
          {"crop_jitter", spec.crop_jitter}, {"batch_size", spec.batch_size},
          {"max_images", spec.max_images}};
}

DatasetSpec dataset_spec_from_json(const nlohmann::json& json) {
  DatasetSpec spec;
  try {
    for (const auto& [key, value] : json.items()) {
      if (key == "root") spec.root = value.get<std::string>();
      else if (key == "resolution") spec.resolution = value.get<int>();
      else if (key == "split") spec.split = split_from_string(value.get<std::string>());
      else if (key == "flip") spec.flip = value.get<bool>();
      else if (key == "crop_jitter") spec.crop_jitter = value.get<bool>();
      else if (key == "batch_size") spec.batch_size = value.get<int>();
      else if (key == "max_images") spec.max_images = value.get<int>();
      else throw ParameterError("unknown dataset key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParameterError(std::string("dataset config: ") + e.what());
  }
  return spec;
}

std::vector<std::filesystem::path> list_images(const std::filesystem::path& folder) {
  std::vector<std::filesystem::path> files;
  if (!std::filesystem::is_directory(folder)) return files;
  for (const auto& entry : std::filesystem::directory_iterator(folder)) {
    if (!entry.is_regular_file()) continue;
    auto ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

ImageFolder::ImageFolder(const std::filesystem::path& folder, int size, int max_images) {
  if (!std::filesystem::is_directory(folder)) throw DatasetError("dataset folder does not exist: " + folder.string());
  files_ = list_images(folder);
  if (max_images > 0 && files_.size() > static_cast<std::size_t>(max_images)) files_.resize(max_images);
  if (files_.empty()) throw DatasetError("dataset folder has no png/jpg images: " + folder.string());
  std::vector<std::string> bad;
  images_.reserve(files_.size());
  for (const auto& file : files_) {
    try {
      images_.push_back(resize_bilinear(to_tensor(read_image(file)), size).contiguous());
    } catch (const Error& e) {
      bad.push_back(file.filename().string());
    }
  }
  if (!bad.empty()) {
    std::string list;
    for (const auto& name : bad) list += (list.empty() ? "" : ", ") + name;
    throw DatasetError("undecodable images in " + folder.string() + ": " + list);
  }
}

torch::Tensor ImageFolder::stack() const { return torch::stack(images_); }

torch::Tensor hflip(const torch::Tensor& image) { return image.flip({-1}); }

torch::Tensor train_augment(const torch::Tensor& image, const AugmentOptions& options, Rng& rng) {
  if (!options.enabled) return image;
  auto out = image;
  if (options.flip && rng.coin(0.5)) out = hflip(out);
  const auto h = out.size(-2);
  const auto w = out.size(-1);
  if (options.crop_jitter && (h > options.resolution || w > options.resolution)) {
    const auto top = rng.uniform_int(0, h - options.resolution);
    const auto left = rng.uniform_int(0, w - options.resolution);
    out = out.slice(-2, top, top + options.resolution).slice(-1, left, left + options.resolution);
  }
  if (out.size(-2) != options.resolution || out.size(-1) != options.resolution)
    out = resize_bilinear(out, options.resolution);
  return out.contiguous();
}

namespace {

void shuffle(std::vector<std::size_t>& order, Rng& rng) {
  // Fisher-Yates with our own integer draws so the order is reproducible across standard libraries.
  for (std::size_t i = order.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
    std::swap(order[i - 1], order[j]);
  }
}

}  // namespace

UnpairedLoader::UnpairedLoader(const DatasetSpec& spec, std::uint64_t seed)
    : spec_((spec.validate(), spec)),
      a_(spec.folder('A'), spec.load_size(), spec.max_images),
      b_(spec.folder('B'), spec.load_size(), spec.max_images),
      rng_(seed) {
  order_a_.resize(a_.size());
  order_b_.resize(b_.size());
  std::iota(order_a_.begin(), order_a_.end(), 0);
  std::iota(order_b_.begin(), order_b_.end(), 0);
  shuffle(order_a_, rng_);
  shuffle(order_b_, rng_);
}

torch::Tensor UnpairedLoader::draw(const ImageFolder& folder, std::vector<std::size_t>& order, std::size_t& cursor,
                                   std::int64_t& epoch, std::vector<std::size_t>& picked) {
  const AugmentOptions aug{spec_.split == Split::Train, spec_.flip, spec_.crop_jitter, spec_.resolution};
  std::vector<torch::Tensor> images;
  picked.clear();
  for (int i = 0; i < spec_.batch_size; ++i) {
    if (cursor == order.size()) {
      cursor = 0;
      ++epoch;
      shuffle(order, rng_);
    }
    const auto idx = order[cursor++];
    picked.push_back(idx);
    images.push_back(train_augment(folder[idx], aug, rng_));
  }
  return torch::stack(images);
}

Batch UnpairedLoader::next() {
  Batch batch;
  batch.a = draw(a_, order_a_, cursor_a_, epoch_a_, last_a_);
  batch.b = draw(b_, order_b_, cursor_b_, epoch_b_, last_b_);
  return batch;
}

}  // namespace maskcycle
