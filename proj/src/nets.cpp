// SPDX-License-Identifier: Apache-2.0
#include "maskcycle/nets.hpp"

#include <cstring>
#include <sstream>

#include "maskcycle/errors.hpp"

namespace maskcycle {

namespace nn = torch::nn;

void NetConfig::validate() const {
  if (resolution < 16 || resolution % 16 != 0)
    throw ParameterError("resolution must be a positive multiple of 16, got " + std::to_string(resolution));
  if (generator_filters < 1 || encoder_filters < 1 || discriminator_filters < 1)
    throw ParameterError("filter counts must be >= 1");
  if (residual_blocks < 0) throw ParameterError("residual_blocks must be >= 0 (0 selects the default)");
}

nlohmann::json to_json(const NetConfig& config) {
  return {{"resolution", config.resolution},
          {"generator_filters", config.generator_filters},
          {"residual_blocks", config.residual_blocks},
          {"encoder_filters", config.encoder_filters},
          {"discriminator_filters", config.discriminator_filters}};
}

NetConfig net_config_from_json(const nlohmann::json& json) {
  NetConfig c;
  try {
    c.resolution = json.value("resolution", c.resolution);
    c.generator_filters = json.value("generator_filters", c.generator_filters);
    c.residual_blocks = json.value("residual_blocks", c.residual_blocks);
    c.encoder_filters = json.value("encoder_filters", c.encoder_filters);
    c.discriminator_filters = json.value("discriminator_filters", c.discriminator_filters);
  } catch (const nlohmann::json::exception& e) {
    throw ParameterError(std::string("network config: ") + e.what());
  }
  for (const auto& [key, value] : json.items()) {
    if (key != "resolution" && key != "generator_filters" && key != "residual_blocks" && key != "encoder_filters" &&
        key != "discriminator_filters")
      throw ParameterError("unknown network config key '" + key + "'");
  }
  c.validate();
  return c;
}

namespace {

nn::Conv2d conv(int in, int out, int kernel, int stride = 1, int padding = 0) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, kernel).stride(stride).padding(padding));
}

nn::InstanceNorm2d instance_norm(int channels) { return nn::InstanceNorm2d(nn::InstanceNorm2dOptions(channels)); }

}  // namespace

ResidualBlockImpl::ResidualBlockImpl(int channels) {
  body_ = register_module("body", nn::Sequential(nn::ReflectionPad2d(1), conv(channels, channels, 3),
                                                 instance_norm(channels), nn::ReLU(true), nn::ReflectionPad2d(1),
                                                 conv(channels, channels, 3), instance_norm(channels)));
}

torch::Tensor ResidualBlockImpl::forward(const torch::Tensor& x) { return x + body_->forward(x); }

CoreTranslatorImpl::CoreTranslatorImpl(int filters, int blocks) {
  nn::Sequential seq;
  seq->push_back(nn::ReflectionPad2d(3));
  seq->push_back(conv(3, filters, 7));
  seq->push_back(instance_norm(filters));
  seq->push_back(nn::ReLU(true));
  int channels = filters;
  for (int i = 0; i < 2; ++i) {
    seq->push_back(conv(channels, channels * 2, 3, 2, 1));
    seq->push_back(instance_norm(channels * 2));
    seq->push_back(nn::ReLU(true));
    channels *= 2;
  }
  for (int i = 0; i < blocks; ++i) seq->push_back(ResidualBlock(channels));
  for (int i = 0; i < 2; ++i) {
    seq->push_back(nn::ConvTranspose2d(
        nn::ConvTranspose2dOptions(channels, channels / 2, 3).stride(2).padding(1).output_padding(1)));
    seq->push_back(instance_norm(channels / 2));
    seq->push_back(nn::ReLU(true));
    channels /= 2;
  }
  seq->push_back(nn::ReflectionPad2d(3));
  seq->push_back(conv(channels, 3, 7));
  seq->push_back(nn::Tanh());
  layers_ = register_module("layers", seq);
}

torch::Tensor CoreTranslatorImpl::forward(const torch::Tensor& x) { return layers_->forward(x); }

MaskEncoderImpl::MaskEncoderImpl(int filters) {
  layers_ = register_module(
      "layers", nn::Sequential(conv(7, filters, 3, 1, 1), instance_norm(filters), nn::ReLU(true),
                               conv(filters, filters, 3, 1, 1), instance_norm(filters), nn::ReLU(true),
                               conv(filters, 3, 3, 1, 1), nn::Tanh()));
}

torch::Tensor MaskEncoderImpl::forward(const torch::Tensor& combined) { return layers_->forward(combined); }

GeneratorImpl::GeneratorImpl(const NetConfig& config) : resolution_(config.resolution) {
  config.validate();
  core_ = register_module("core", CoreTranslator(config.generator_filters, config.resolved_residual_blocks()));
  encoder_ = register_module("encoder", MaskEncoder(config.encoder_filters));
}

void GeneratorImpl::check_inputs(const torch::Tensor& a, const torch::Tensor& mask) const {
  if (a.dim() != 4 || a.size(1) != 3) throw InputError("generator input must be [N,3,H,W]");
  if (a.size(2) != resolution_ || a.size(3) != resolution_)
    throw InputError("generator expects " + std::to_string(resolution_) + "x" + std::to_string(resolution_) +
                     " images, got " + std::to_string(a.size(2)) + "x" + std::to_string(a.size(3)));
  if (mask.dim() != 4 || mask.size(1) != 1 || mask.size(2) != resolution_ || mask.size(3) != resolution_)
    throw InputError("mask must be [N,1,H,W] at the generator resolution");
  if (mask.size(0) != 1 && mask.size(0) != a.size(0)) throw InputError("mask batch must be 1 or match the images");
}

GeneratorTrace GeneratorImpl::trace(const torch::Tensor& a, const torch::Tensor& mask) {
  check_inputs(a, mask);
  GeneratorTrace t;
  t.core_input = a * mask;
  t.core_output = core_->forward(t.core_input);
  t.context_input = a * (1.0 - mask);
  auto m = mask.expand({a.size(0), 1, resolution_, resolution_});
  t.output = encoder_->forward(torch::cat({t.core_output * mask, t.context_input, m}, 1));
  return t;
}

torch::Tensor GeneratorImpl::forward(const torch::Tensor& a, const torch::Tensor& mask) {
  return trace(a, mask).output;
}

DiscriminatorImpl::DiscriminatorImpl(const NetConfig& config) : resolution_(config.resolution) {
  config.validate();
  const int f = config.discriminator_filters;
  nn::Sequential seq;
  const auto lrelu = [] { return nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2).inplace(true)); };
  seq->push_back(conv(3, f, 4, 2, 1));
  seq->push_back(lrelu());
  int channels = f;
  for (int i = 1; i < 4; ++i) {
    const int next = f * std::min(1 << i, 8);
    seq->push_back(conv(channels, next, 4, 2, 1));
    seq->push_back(instance_norm(next));
    seq->push_back(lrelu());
    channels = next;
  }
  seq->push_back(conv(channels, 1, 3, 1, 1));
  layers_ = register_module("layers", seq);
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != 3 || x.size(2) != resolution_ || x.size(3) != resolution_)
    throw InputError("discriminator expects [N,3," + std::to_string(resolution_) + "," + std::to_string(resolution_) +
                     "] input");
  return layers_->forward(x);
}

torch::Tensor translate(Generator& generator, const torch::Tensor& image, const Mask& mask) {
  if (image.dim() != 3) throw InputError("translate expects a single [3,H,W] image");
  if (mask.size() != generator->resolution() || image.size(1) != generator->resolution() ||
      image.size(2) != generator->resolution())
    throw InputError("image and mask must match the generator resolution " + std::to_string(generator->resolution()));
  return generator->forward(image.unsqueeze(0), mask.to_tensor().unsqueeze(0)).squeeze(0);
}

torch::Tensor discriminate(Discriminator& discriminator, const torch::Tensor& image) {
  if (image.dim() != 3) throw InputError("discriminate expects a single [3,H,W] image");
  return discriminator->forward(image.unsqueeze(0)).squeeze(0);
}

void init_weights(torch::nn::Module& module) {
  torch::NoGradGuard no_grad;
  for (auto& child : module.modules(/*include_self=*/true)) {
    if (auto* c = child->as<nn::Conv2d>()) {
      nn::init::normal_(c->weight, 0.0, 0.02);
      if (c->bias.defined()) nn::init::zeros_(c->bias);
    } else if (auto* t = child->as<nn::ConvTranspose2d>()) {
      nn::init::normal_(t->weight, 0.0, 0.02);
      if (t->bias.defined()) nn::init::zeros_(t->bias);
    }
  }
}

ModelSet ModelSet::build(const NetConfig& config) {
  config.validate();
  ModelSet set;
  set.config = config;
  set.g_ab = Generator(config);
  set.g_ba = Generator(config);
  set.d_a_full = Discriminator(config);
  set.d_a_masked = Discriminator(config);
  set.d_b_full = Discriminator(config);
  set.d_b_masked = Discriminator(config);
  for (auto* m : std::initializer_list<torch::nn::Module*>{set.g_ab.get(), set.g_ba.get(), set.d_a_full.get(),
                                                           set.d_a_masked.get(), set.d_b_full.get(),
                                                           set.d_b_masked.get()})
    init_weights(*m);
  return set;
}

ModelSet ModelSet::create(const NetConfig& config, std::uint64_t init_seed) {
  torch::manual_seed(init_seed);
  return build(config);
}

std::vector<torch::Tensor> ModelSet::generator_parameters() const {
  auto params = g_ab->parameters();
  auto more = g_ba->parameters();
  params.insert(params.end(), more.begin(), more.end());
  return params;
}

std::vector<torch::Tensor> ModelSet::discriminator_parameters() const {
  std::vector<torch::Tensor> params;
  for (const auto* d : {&d_a_full, &d_a_masked, &d_b_full, &d_b_masked}) {
    auto p = (*d)->parameters();
    params.insert(params.end(), p.begin(), p.end());
  }
  return params;
}

void ModelSet::train(bool on) {
  g_ab->train(on);
  g_ba->train(on);
  d_a_full->train(on);
  d_a_masked->train(on);
  d_b_full->train(on);
  d_b_masked->train(on);
}

// ---- checkpoints -------------------------------------------------------------

nlohmann::json Checkpoint::manifest() const {
  return {{"format_version", kCheckpointFormatVersion},
          {"resolution", models.config.resolution},
          {"iteration", iteration},
          {"scheme", scheme},
          {"net", to_json(models.config)},
          {"config", config},
          {"domains", {domain_a, domain_b}}};
}

namespace {

const char* const kNetworkKeys[] = {"g_ab", "g_ba", "d_a_full", "d_a_masked", "d_b_full", "d_b_masked"};

std::vector<torch::nn::Module*> networks(const ModelSet& set) {
  return {set.g_ab.ptr().get(),       set.g_ba.ptr().get(),     set.d_a_full.ptr().get(),
          set.d_a_masked.ptr().get(), set.d_b_full.ptr().get(), set.d_b_masked.ptr().get()};
}

torch::Tensor bytes_to_tensor(const std::string& bytes) {
  auto t = torch::empty({static_cast<int64_t>(bytes.size())}, torch::kUInt8);
  if (!bytes.empty()) std::memcpy(t.data_ptr<std::uint8_t>(), bytes.data(), bytes.size());
  return t;
}

std::string tensor_to_bytes(const torch::Tensor& t) {
  auto c = t.contiguous();
  return {reinterpret_cast<const char*>(c.data_ptr<std::uint8_t>()), static_cast<std::size_t>(c.numel())};
}

}  // namespace

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  torch::serialize::OutputArchive archive;
  archive.write("manifest", bytes_to_tensor(checkpoint.manifest().dump()));
  const auto nets = networks(checkpoint.models);
  for (std::size_t i = 0; i < nets.size(); ++i) {
    torch::serialize::OutputArchive sub;
    nets[i]->save(sub);
    archive.write(kNetworkKeys[i], sub);
  }
  archive.write("optimizer_generators", bytes_to_tensor(checkpoint.optimizer_generators));
  archive.write("optimizer_discriminators", bytes_to_tensor(checkpoint.optimizer_discriminators));

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  archive.save_to(tmp.string());
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw LoadError("checkpoint not found: " + path.string());
  Checkpoint checkpoint;
  try {
    torch::serialize::InputArchive archive;
    archive.load_from(path.string());
    torch::Tensor manifest_bytes;
    archive.read("manifest", manifest_bytes);
    const auto manifest = nlohmann::json::parse(tensor_to_bytes(manifest_bytes));
    const int version = manifest.at("format_version").get<int>();
    if (version != kCheckpointFormatVersion)
      throw LoadError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kCheckpointFormatVersion) + ")");
    checkpoint.iteration = manifest.at("iteration").get<std::int64_t>();
    checkpoint.scheme = manifest.value("scheme", nlohmann::json::object());
    checkpoint.config = manifest.value("config", nlohmann::json::object());
    const auto domains = manifest.value("domains", nlohmann::json::array({"A", "B"}));
    checkpoint.domain_a = domains.at(0).get<std::string>();
    checkpoint.domain_b = domains.at(1).get<std::string>();
    checkpoint.models = ModelSet::build(net_config_from_json(manifest.at("net")));
    const auto nets = networks(checkpoint.models);
    for (std::size_t i = 0; i < nets.size(); ++i) {
      torch::serialize::InputArchive sub;
      archive.read(kNetworkKeys[i], sub);
      nets[i]->load(sub);
    }
    torch::Tensor opt;
    archive.read("optimizer_generators", opt);
    checkpoint.optimizer_generators = tensor_to_bytes(opt);
    archive.read("optimizer_discriminators", opt);
    checkpoint.optimizer_discriminators = tensor_to_bytes(opt);
  } catch (const LoadError&) {
    throw;
  } catch (const c10::Error& e) {
    throw LoadError("cannot load checkpoint " + path.string() + ": " + e.what_without_backtrace());
  } catch (const std::exception& e) {
    throw LoadError("cannot load checkpoint " + path.string() + ": " + e.what());
  }
  return checkpoint;
}

}  // namespace maskcycle
