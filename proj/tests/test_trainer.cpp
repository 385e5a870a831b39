// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "maskcycle/errors.hpp"
#include "maskcycle/trainer.hpp"

using namespace maskcycle;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_config(const fs::path& out) {
  TrainConfig c;
  c.dataset.root = MASKCYCLE_TEST_DATA;
  c.dataset.resolution = 32;
  c.dataset.max_images = 8;
  c.net.resolution = 32;
  c.net.generator_filters = 8;
  c.net.encoder_filters = 8;
  c.net.discriminator_filters = 8;
  c.iterations = 3;
  c.seed = 17;
  c.out_dir = out;
  return c;
}

Batch random_batch(int n = 1) { return {torch::rand({n, 3, 32, 32}) * 2 - 1, torch::rand({n, 3, 32, 32}) * 2 - 1}; }

std::vector<torch::Tensor> snapshot(const std::vector<torch::Tensor>& params) {
  std::vector<torch::Tensor> out;
  for (const auto& p : params) out.push_back(p.detach().clone());
  return out;
}

bool unchanged(const std::vector<torch::Tensor>& before, const std::vector<torch::Tensor>& after) {
  for (std::size_t i = 0; i < before.size(); ++i)
    if (!torch::equal(before[i], after[i])) return false;
  return true;
}

std::vector<std::string> lines(const fs::path& path) {
  std::ifstream in(path);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

class TrainerDir : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("maskcycle_trainer_" + std::to_string(::getpid()));
    fs::remove_all(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

}  // namespace

TEST(TrainConfig, JsonRoundTripAndValidation) {
  auto c = tiny_config("out");
  const auto json = to_json(c);
  EXPECT_EQ(to_json(train_config_from_json(json)), json);
  EXPECT_THROW(train_config_from_json({{"iterationz", 3}}), ParameterError);
  EXPECT_THROW(train_config_from_json({{"iterations", "three"}}), ParameterError);

  const auto follows = train_config_from_json({{"dataset", {{"root", "x"}, {"resolution", 64}}}});
  EXPECT_EQ(follows.net.resolution, 64);

  c.scheme = AttentionBinarize{};
  EXPECT_THROW(c.validate(), ParameterError);
  c = tiny_config("out");
  c.net.resolution = 64;
  EXPECT_THROW(c.validate(), ParameterError);
  c = tiny_config("out");
  c.iterations = 0;
  EXPECT_THROW(c.validate(), ParameterError);
}

TEST(FakeBuffer, FillsThenMixes) {
  Rng rng(0);
  FakeBuffer empty_pool(50);
  const auto fresh = torch::rand({1, 3, 4, 4});
  EXPECT_TRUE(torch::equal(empty_pool.draw(fresh, rng), fresh));
  EXPECT_EQ(empty_pool.size(), 1u);

  FakeBuffer disabled(0);
  for (int i = 0; i < 5; ++i) {
    const auto x = torch::rand({2, 3, 4, 4});
    EXPECT_TRUE(torch::equal(disabled.draw(x, rng), x));
  }
  EXPECT_EQ(disabled.size(), 0u);

  FakeBuffer pool(50);
  for (int n = 1; n <= 50; ++n) {
    pool.draw(torch::rand({1, 3, 4, 4}), rng);
    EXPECT_EQ(pool.size(), static_cast<std::size_t>(n));
  }
  int returned_old = 0;
  for (int k = 0; k < 200; ++k) {
    const auto x = torch::full({1, 3, 4, 4}, 5.0 + k);
    returned_old += !torch::equal(pool.draw(x, rng), x);
  }
  EXPECT_EQ(pool.size(), 50u);
  EXPECT_GT(returned_old, 60);
  EXPECT_LT(returned_old, 140);
}

TEST(FakeBuffer, OutputIsDetached) {
  Rng rng(0);
  FakeBuffer pool(4);
  const auto x = torch::rand({2, 3, 4, 4}).requires_grad_(true);
  EXPECT_FALSE(pool.draw(x * 2, rng).requires_grad());
}

TEST(Trainer, OneStepIsFinite) {
  Trainer t(tiny_config("unused"));
  const auto r = t.step(random_batch());
  for (double v : {r.gan_a, r.gan_b, r.cyc_a, r.cyc_b, r.idt_a, r.idt_b, r.total, r.d_a, r.d_b})
    EXPECT_TRUE(std::isfinite(v));
  EXPECT_EQ(t.iteration(), 1);
  EXPECT_NEAR(r.total, (r.gan_a + r.gan_b) + 10 * (r.cyc_a + r.cyc_b) + 5 * (r.idt_a + r.idt_b), 1e-9);
}

TEST(Trainer, ZeroLearningRateLeavesParametersUnchanged) {
  auto c = tiny_config("unused");
  c.learning_rate = 0.0;
  Trainer t(c);
  const auto g = snapshot(t.models().generator_parameters());
  const auto d = snapshot(t.models().discriminator_parameters());
  t.step(random_batch());
  t.step(random_batch());
  EXPECT_TRUE(unchanged(g, t.models().generator_parameters()));
  EXPECT_TRUE(unchanged(d, t.models().discriminator_parameters()));
}

TEST(Trainer, GeneratorStepLeavesDiscriminatorsAlone) {
  Trainer t(tiny_config("unused"));
  const auto d = snapshot(t.models().discriminator_parameters());
  const auto g = snapshot(t.models().generator_parameters());
  const auto batch = random_batch();
  const auto out = t.generator_step(batch, t.mask_for_iteration(1));
  EXPECT_TRUE(unchanged(d, t.models().discriminator_parameters()));
  EXPECT_FALSE(unchanged(g, t.models().generator_parameters()));
  for (const auto& p : t.models().discriminator_parameters()) {
    EXPECT_TRUE(p.requires_grad());
    EXPECT_TRUE(!p.grad().defined() || p.grad().abs().sum().item<double>() == 0.0);
  }
  EXPECT_FALSE(out.fake_a.requires_grad());
}

TEST(Trainer, DiscriminatorStepLeavesGeneratorsAlone) {
  Trainer t(tiny_config("unused"));
  const auto batch = random_batch();
  const auto generated = t.generator_step(batch, t.mask_for_iteration(1));
  const auto g = snapshot(t.models().generator_parameters());
  const auto d = snapshot(t.models().discriminator_parameters());
  const auto [d_a, d_b] = t.discriminator_step(batch, generated);
  EXPECT_TRUE(std::isfinite(d_a) && std::isfinite(d_b));
  EXPECT_TRUE(unchanged(g, t.models().generator_parameters()));
  EXPECT_FALSE(unchanged(d, t.models().discriminator_parameters()));
  EXPECT_EQ(t.buffer_a().size(), 1u);
}

TEST(Trainer, OneMaskPerIterationFromTheSeed) {
  auto c = tiny_config("unused");
  Trainer a(c), b(c);
  EXPECT_EQ(a.mask_for_iteration(5), b.mask_for_iteration(5));
  bool differs = false;
  for (int i = 1; i < 10; ++i) differs |= !(a.mask_for_iteration(i) == a.mask_for_iteration(i + 1));
  EXPECT_TRUE(differs);
  a.step(random_batch(2));
  EXPECT_EQ(a.last_mask(), a.mask_for_iteration(1));
}

TEST(Trainer, RejectsWrongBatchResolution) {
  Trainer t(tiny_config("unused"));
  EXPECT_THROW(t.step({torch::zeros({1, 3, 64, 64}), torch::zeros({1, 3, 64, 64})}), InputError);
}

TEST(Trainer, LinearDecayReachesZero) {
  auto c = tiny_config("unused");
  c.iterations = 10;
  c.lr_decay_start = 5;
  Trainer t(c);
  EXPECT_DOUBLE_EQ(t.current_learning_rate(), 2e-4);
  for (int i = 0; i < 9; ++i) t.step(random_batch());
  EXPECT_GT(t.current_learning_rate(), 0.0);
  EXPECT_LT(t.current_learning_rate(), 2e-4);
}

TEST_F(TrainerDir, BookkeepingCheckpointsAndLogs) {
  auto c = tiny_config(dir_);
  c.checkpoint_every = 1;
  c.snapshot_every = 3;
  const auto final = fit(c);
  EXPECT_EQ(final.iteration, 3);
  EXPECT_EQ(lines(dir_ / "log.jsonl").size(), 3u);
  for (const char* name : {"iter_000001.pt", "iter_000002.pt", "iter_000003.pt"})
    EXPECT_TRUE(fs::exists(dir_ / "checkpoints" / name)) << name;
  EXPECT_TRUE(fs::exists(dir_ / "snapshots" / "iter_000003.png"));
  EXPECT_TRUE(fs::exists(dir_ / "final.pt"));
  const auto first = nlohmann::json::parse(lines(dir_ / "log.jsonl")[0]);
  EXPECT_EQ(first["iter"], 1);
}

TEST_F(TrainerDir, ResumeContinuesNumbering) {
  auto c = tiny_config(dir_);
  c.iterations = 2;
  fit(c);
  c.iterations = 3;
  const auto resumed = fit(c, dir_ / "final.pt");
  EXPECT_EQ(resumed.iteration, 5);
  const auto log = lines(dir_ / "log.jsonl");
  ASSERT_EQ(log.size(), 5u);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(nlohmann::json::parse(log[i])["iter"], i + 1);
  EXPECT_FALSE(resumed.optimizer_generators.empty());
}

TEST_F(TrainerDir, SameSeedSameLog) {
  auto c = tiny_config(dir_ / "x");
  fit(c);
  c.out_dir = dir_ / "y";
  fit(c);
  EXPECT_EQ(lines(dir_ / "x" / "log.jsonl"), lines(dir_ / "y" / "log.jsonl"));
  c.out_dir = dir_ / "z";
  c.seed = 18;
  fit(c);
  EXPECT_NE(lines(dir_ / "x" / "log.jsonl"), lines(dir_ / "z" / "log.jsonl"));
}

TEST_F(TrainerDir, MissingDatasetFailsBeforeTraining) {
  auto c = tiny_config(dir_);
  c.dataset.root = dir_ / "nowhere";
  EXPECT_THROW(fit(c), DatasetError);
  EXPECT_FALSE(fs::exists(dir_ / "log.jsonl"));
}
