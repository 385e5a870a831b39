// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>

#include "maskcycle/mask.hpp"

namespace maskcycle {

/// Architecture sizes. A zero residual_blocks picks 6 blocks at >= 128 px and 3 below.
struct NetConfig {
  int resolution = 128;
  int generator_filters = 64;
  int residual_blocks = 0;
  int encoder_filters = 32;
  int discriminator_filters = 64;

  int resolved_residual_blocks() const { return residual_blocks > 0 ? residual_blocks : (resolution >= 128 ? 6 : 3); }
  /// Resolution must be a positive multiple of 16 (four stride-2 stages in the discriminator).
  void validate() const;
};

nlohmann::json to_json(const NetConfig& config);
NetConfig net_config_from_json(const nlohmann::json& json);

class ResidualBlockImpl : public torch::nn::Module {
 public:
  explicit ResidualBlockImpl(int channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(ResidualBlock);

/// Core translator G: reflection-padded 7x7 stem, two stride-2 downsampling
/// convs, residual blocks, two transposed-conv upsampling stages and a 7x7 tanh head.
class CoreTranslatorImpl : public torch::nn::Module {
 public:
  CoreTranslatorImpl(int filters, int blocks);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Sequential layers_{nullptr};
};
TORCH_MODULE(CoreTranslator);

/// Mask encoder E: three 3x3 convs over [g * m, a * (1 - m), m] (7 channels),
/// instance norm after the first two, tanh on the output.
class MaskEncoderImpl : public torch::nn::Module {
 public:
  explicit MaskEncoderImpl(int filters);
  torch::Tensor forward(const torch::Tensor& combined);

 private:
  torch::nn::Sequential layers_{nullptr};
};
TORCH_MODULE(MaskEncoder);

/// Intermediate tensors of one generator pass.
struct GeneratorTrace {
  torch::Tensor core_input;     // a * m, the only thing G sees
  torch::Tensor core_output;    // G(a * m)
  torch::Tensor context_input;  // a * (1 - m)
  torch::Tensor output;         // E([g * m, a * (1 - m), m])
};

/// Generator = core translator G + mask encoder E.
class GeneratorImpl : public torch::nn::Module {
 public:
  explicit GeneratorImpl(const NetConfig& config);

  /// a: [N, 3, H, W]; mask: [N or 1, 1, H, W] with entries in {0, 1}.
  torch::Tensor forward(const torch::Tensor& a, const torch::Tensor& mask);
  GeneratorTrace trace(const torch::Tensor& a, const torch::Tensor& mask);

  int resolution() const { return resolution_; }
  CoreTranslator& core() { return core_; }
  MaskEncoder& encoder() { return encoder_; }

 private:
  void check_inputs(const torch::Tensor& a, const torch::Tensor& mask) const;

  int resolution_;
  CoreTranslator core_{nullptr};
  MaskEncoder encoder_{nullptr};
};
TORCH_MODULE(Generator);

/// Patch discriminator: four 4x4 stride-2 convs with leaky ReLU (instance norm
/// on all but the first) and a 3x3 one-channel score conv. An input of side S
/// yields an (S / 16) x (S / 16) score grid.
class DiscriminatorImpl : public torch::nn::Module {
 public:
  explicit DiscriminatorImpl(const NetConfig& config);
  torch::Tensor forward(const torch::Tensor& x);

  int resolution() const { return resolution_; }
  static int grid_size(int resolution) { return resolution / 16; }

 private:
  int resolution_;
  torch::nn::Sequential layers_{nullptr};
};
TORCH_MODULE(Discriminator);

/// Single-image convenience: [3, H, W] image and a Mask -> [3, H, W] output.
torch::Tensor translate(Generator& generator, const torch::Tensor& image, const Mask& mask);
/// Single-image convenience: [3, H, W] -> [1, g, g] score grid.
torch::Tensor discriminate(Discriminator& discriminator, const torch::Tensor& image);

/// Conv weights ~ N(0, 0.02), biases zero. Draws from the global torch generator.
void init_weights(torch::nn::Module& module);

/// Both generators and all four discriminators.
struct ModelSet {
  NetConfig config;
  Generator g_ab{nullptr};
  Generator g_ba{nullptr};
  Discriminator d_a_full{nullptr};
  Discriminator d_a_masked{nullptr};
  Discriminator d_b_full{nullptr};
  Discriminator d_b_masked{nullptr};

  /// Seeds the global torch generator with init_seed and builds freshly initialized networks.
  static ModelSet create(const NetConfig& config, std::uint64_t init_seed);
  /// Builds networks drawing initial weights from the current global generator state.
  static ModelSet build(const NetConfig& config);

  std::vector<torch::Tensor> generator_parameters() const;
  std::vector<torch::Tensor> discriminator_parameters() const;
  void train(bool on = true);
  void eval() { train(false); }
};

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  ModelSet models;
  std::int64_t iteration = 0;
  nlohmann::json scheme = nlohmann::json::object();
  nlohmann::json config = nlohmann::json::object();  // training config snapshot
  std::string domain_a = "A";
  std::string domain_b = "B";
  // Serialized optimizer states, empty when absent.
  std::string optimizer_generators;
  std::string optimizer_discriminators;

  nlohmann::json manifest() const;
};

/// Single torch archive holding the JSON manifest
/// {format_version, resolution, iteration, scheme, net, config, domains} and the
/// parameter blobs of all six networks. Written to a temporary file then renamed.
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
/// Throws LoadError on a missing, truncated or corrupt file and on a format version mismatch.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace maskcycle
