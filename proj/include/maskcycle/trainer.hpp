// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <nlohmann/json.hpp>
#include <optional>
#include <vector>

#include "maskcycle/data.hpp"
#include "maskcycle/mask.hpp"
#include "maskcycle/nets.hpp"
#include "maskcycle/objectives.hpp"
#include "maskcycle/rng.hpp"

namespace maskcycle {

struct TrainConfig {
  LossWeights weights;
  MaskSchemeConfig scheme = MultiRectangles{};
  std::int64_t iterations = 1000;  // steps run by one fit() call
  double learning_rate = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  std::int64_t checkpoint_every = 0;  // 0 disables periodic checkpoints
  std::int64_t snapshot_every = 0;    // 0 disables snapshot grids
  std::uint64_t seed = 0;
  DatasetSpec dataset;
  NetConfig net;
  int buffer_capacity = 50;
  AdversarialCriterion criterion = AdversarialCriterion::LeastSquares;
  std::int64_t lr_decay_start = 0;  // > 0: linear decay to zero after this iteration
  std::filesystem::path out_dir = "runs/default";

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);
/// Missing keys keep their defaults; unknown keys are rejected. net.resolution
/// follows dataset.resolution unless given explicitly.
TrainConfig train_config_from_json(const nlohmann::json& json);

/// History pool of generated images for discriminator inputs.
class FakeBuffer {
 public:
  explicit FakeBuffer(int capacity = 50) : capacity_(capacity) {}

  /// Per image of the batch: while the pool is not full, store and return the
  /// fresh image; afterwards return it with p = 0.5, otherwise swap it with a
  /// random stored image and return the old one.
  torch::Tensor draw(const torch::Tensor& fresh, Rng& rng);

  int capacity() const { return capacity_; }
  std::size_t size() const { return images_.size(); }

 private:
  int capacity_;
  std::vector<torch::Tensor> images_;
};

/// Everything the generator update produced, kept for the discriminator update and for inspection.
struct GeneratorStepResult {
  torch::Tensor mask;    // [1, 1, R, R]
  torch::Tensor fake_a;  // G_BA(b, m), detached
  torch::Tensor fake_b;  // G_AB(a, m), detached
  torch::Tensor rec_a;   // G_BA(fake_b, m), detached
  torch::Tensor rec_b;   // G_AB(fake_a, m), detached
  LossParts parts;
  double generator_total = 0;
};

class Trainer {
 public:
  explicit Trainer(TrainConfig config);
  /// Continues from a checkpoint: parameters, optimizer states and the iteration counter.
  Trainer(TrainConfig config, const Checkpoint& resume);

  /// One full iteration: sample one mask, update both generators, then all four discriminators.
  LossReport step(const Batch& batch);

  /// The mask for the next iteration. Depends only on the seed and the iteration number.
  Mask mask_for_iteration(std::int64_t iteration) const;

  GeneratorStepResult generator_step(const Batch& batch, const Mask& mask);
  /// Returns {dA, dB}.
  std::pair<double, double> discriminator_step(const Batch& batch, const GeneratorStepResult& generated);

  Checkpoint checkpoint() const;

  ModelSet& models() { return models_; }
  const TrainConfig& config() const { return config_; }
  std::int64_t iteration() const { return iteration_; }
  const Mask& last_mask() const { return last_mask_; }
  double current_learning_rate() const;
  const FakeBuffer& buffer_a() const { return buffer_a_; }

 private:
  void make_optimizers();
  void apply_learning_rate_schedule();
  [[noreturn]] void abort_non_finite(const std::string& what, const LossParts& parts, const Mask& mask) const;

  TrainConfig config_;
  ModelSet models_;
  std::unique_ptr<torch::optim::Adam> optimizer_g_;
  std::unique_ptr<torch::optim::Adam> optimizer_d_;
  FakeBuffer buffer_a_;
  FakeBuffer buffer_b_;
  Rng buffer_rng_;
  std::int64_t iteration_ = 0;
  std::int64_t start_iteration_ = 0;
  Mask last_mask_;
};

/// Called after every iteration with the iteration number and its report.
using FitObserver = std::function<void(std::int64_t, const LossReport&)>;

/// Runs config.iterations steps, from scratch or from resume. Writes
/// out_dir/log.jsonl (one JSON line per iteration, appended when resuming),
/// out_dir/checkpoints/iter_NNNNNN.pt every checkpoint_every iterations,
/// out_dir/snapshots/iter_NNNNNN.png every snapshot_every iterations and
/// out_dir/final.pt at the end.
Checkpoint fit(const TrainConfig& config, const std::optional<std::filesystem::path>& resume = std::nullopt,
               const FitObserver& observer = {});

/// Two rows [source, mask, translation, reconstruction] for a -> b and b -> a.
torch::Tensor snapshot_grid(const Batch& batch, const GeneratorStepResult& generated);

}  // namespace maskcycle
