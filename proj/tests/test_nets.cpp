// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "maskcycle/errors.hpp"
#include "maskcycle/nets.hpp"

using namespace maskcycle;

namespace {

NetConfig tiny(int resolution = 32) {
  NetConfig c;
  c.resolution = resolution;
  c.generator_filters = 8;
  c.encoder_filters = 8;
  c.discriminator_filters = 8;
  return c;
}

torch::Tensor random_images(int n, int size) { return torch::rand({n, 3, size, size}) * 2 - 1; }

std::filesystem::path temp_path(const std::string& name) { return std::filesystem::temp_directory_path() / name; }

}  // namespace

TEST(NetConfig, ValidationAndDefaults) {
  EXPECT_EQ(NetConfig{}.resolved_residual_blocks(), 6);
  EXPECT_EQ(tiny().resolved_residual_blocks(), 3);
  auto bad = tiny(30);
  EXPECT_THROW(bad.validate(), ParameterError);
  const auto json = to_json(tiny());
  EXPECT_EQ(to_json(net_config_from_json(json)), json);
  EXPECT_THROW(net_config_from_json({{"filters", 3}}), ParameterError);
}

TEST(Generator, CoreSeesOnlyTheMaskedRegion) {
  torch::manual_seed(0);
  Generator g(tiny());
  g->eval();
  torch::NoGradGuard no_grad;
  Rng rng(1);
  for (int k = 0; k < 5; ++k) {
    const auto m = sample_mask(32, MultiRectangles{}, rng).to_tensor().unsqueeze(0);
    const auto a1 = random_images(1, 32);
    const auto a2 = a1 * m + random_images(1, 32) * (1 - m);
    const auto t1 = g->trace(a1, m);
    const auto t2 = g->trace(a2, m);
    EXPECT_TRUE(torch::equal(t1.core_input, t2.core_input));
    EXPECT_TRUE(torch::equal(t1.core_output, t2.core_output));
  }
}

TEST(Generator, FullMaskZeroesTheContextBranch) {
  torch::manual_seed(0);
  Generator g(tiny());
  const auto a = random_images(2, 32);
  const auto t = g->trace(a, torch::ones({1, 1, 32, 32}));
  EXPECT_TRUE(torch::equal(t.context_input, torch::zeros_like(a)));
  EXPECT_TRUE(torch::equal(t.core_input, a));
  EXPECT_EQ(t.output.sizes(), a.sizes());
  EXPECT_LE(t.output.abs().max().item<double>(), 1.0);
}

TEST(Generator, RandomInitGivesFiniteInRangeOutput) {
  torch::manual_seed(3);
  Generator g(tiny(64));
  const auto out = g->forward(random_images(2, 64), torch::bernoulli(torch::full({2, 1, 64, 64}, 0.5)));
  EXPECT_TRUE(torch::isfinite(out).all().item<bool>());
  EXPECT_LE(out.abs().max().item<double>(), 1.0);
}

TEST(Generator, RejectsResolutionMismatch) {
  Generator g(tiny());
  EXPECT_THROW(g->forward(random_images(1, 64), torch::ones({1, 1, 64, 64})), InputError);
  EXPECT_THROW(g->forward(random_images(1, 32), torch::ones({1, 1, 16, 16})), InputError);
  EXPECT_THROW(translate(g, torch::zeros({3, 32, 32}), Mask::full(16)), InputError);
}

TEST(Discriminator, GridSizeAndDeterminism) {
  for (int r : {16, 32, 64, 128}) {
    Discriminator d(tiny(r));
    d->eval();
    const auto x = random_images(2, r);
    const auto s1 = d->forward(x);
    EXPECT_EQ(s1.sizes(), (std::vector<int64_t>{2, 1, r / 16, r / 16}));
    EXPECT_TRUE(torch::equal(s1, d->forward(x)));
    EXPECT_TRUE(torch::isfinite(s1).all().item<bool>());
  }
  Discriminator d(tiny());
  EXPECT_THROW(discriminate(d, torch::zeros({3, 64, 64})), InputError);
}

TEST(Init, ConvWeightsFollowTheNormalPrior) {
  auto models = ModelSet::create(NetConfig{}, 5);
  std::vector<torch::Tensor> weights;
  for (const auto& p : models.g_ab->named_parameters())
    if (p.key().ends_with("weight") && p.value().dim() == 4) weights.push_back(p.value().flatten());
  const auto all = torch::cat(weights);
  EXPECT_NEAR(all.mean().item<double>(), 0.0, 1e-3);
  EXPECT_NEAR(all.std().item<double>(), 0.02, 1e-3);
}

TEST(ModelSet, SameSeedSameParameters) {
  const auto a = ModelSet::create(tiny(), 9);
  const auto b = ModelSet::create(tiny(), 9);
  const auto c = ModelSet::create(tiny(), 10);
  const auto pa = a.generator_parameters(), pb = b.generator_parameters(), pc = c.generator_parameters();
  ASSERT_EQ(pa.size(), pb.size());
  bool all_equal = true, any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    all_equal &= torch::equal(pa[i], pb[i]);
    any_diff |= !torch::equal(pa[i], pc[i]);
  }
  EXPECT_TRUE(all_equal);
  EXPECT_TRUE(any_diff);
  EXPECT_EQ(a.discriminator_parameters().size(), 4 * ModelSet::create(tiny(), 1).d_a_full->parameters().size());
}

TEST(Checkpoint, RoundTripPreservesOutputs) {
  Checkpoint c{ModelSet::create(tiny(), 2)};
  c.iteration = 1234;
  c.scheme = {{"variant", "full"}};
  c.domain_a = "mnist";
  c.domain_b = "svhn";
  c.optimizer_generators = std::string("\x01\x00\x02", 3);
  c.models.eval();
  const auto probe = torch::rand({3, 32, 32}) * 2 - 1;
  const auto mask = sample_centered_square(32, 0.5);
  torch::NoGradGuard no_grad;
  const auto before_ab = translate(c.models.g_ab, probe, mask);
  const auto before_d = discriminate(c.models.d_b_masked, probe);

  const auto path = temp_path("maskcycle_ckpt_roundtrip.pt");
  save_checkpoint(c, path);
  auto loaded = load_checkpoint(path);
  loaded.models.eval();
  EXPECT_EQ(loaded.iteration, 1234);
  EXPECT_EQ(loaded.scheme, c.scheme);
  EXPECT_EQ(loaded.domain_a, "mnist");
  EXPECT_EQ(loaded.domain_b, "svhn");
  EXPECT_EQ(loaded.optimizer_generators, c.optimizer_generators);
  EXPECT_TRUE(loaded.optimizer_discriminators.empty());
  EXPECT_EQ(loaded.models.config.generator_filters, 8);
  EXPECT_LE((translate(loaded.models.g_ab, probe, mask) - before_ab).abs().max().item<double>(), 1e-6);
  EXPECT_LE((discriminate(loaded.models.d_b_masked, probe) - before_d).abs().max().item<double>(), 1e-6);
  std::filesystem::remove(path);
}

TEST(Checkpoint, TruncatedFileIsALoadError) {
  const auto path = temp_path("maskcycle_ckpt_truncated.pt");
  save_checkpoint(Checkpoint{ModelSet::create(tiny(), 2)}, path);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) / 2);
  EXPECT_THROW(load_checkpoint(path), LoadError);
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), LoadError);
}

TEST(Checkpoint, VersionMismatchIsALoadError) {
  const auto path = temp_path("maskcycle_ckpt_version.pt");
  save_checkpoint(Checkpoint{ModelSet::create(tiny(), 2)}, path);
  torch::serialize::InputArchive in;
  in.load_from(path.string());
  torch::Tensor manifest;
  in.read("manifest", manifest);
  auto json = nlohmann::json::parse(std::string(reinterpret_cast<const char*>(manifest.data_ptr<std::uint8_t>()),
                                                static_cast<std::size_t>(manifest.numel())));
  json["format_version"] = kCheckpointFormatVersion + 1;
  const auto text = json.dump();
  auto bytes = torch::empty({static_cast<int64_t>(text.size())}, torch::kUInt8);
  std::memcpy(bytes.data_ptr<std::uint8_t>(), text.data(), text.size());
  torch::serialize::OutputArchive out;
  out.write("manifest", bytes);
  out.save_to(path.string());
  EXPECT_THROW(load_checkpoint(path), LoadError);
  std::filesystem::remove(path);
}
