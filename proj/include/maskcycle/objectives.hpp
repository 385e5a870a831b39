// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <nlohmann/json.hpp>
#include <string>

#include "maskcycle/nets.hpp"

namespace maskcycle {

/// Loss weights; defaults are the published settings.
struct LossWeights {
  double gan_masked = 0.7;  // weight of the masked discriminator in each GAN term
  double cyc_masked = 0.3;  // weight of the masked region in each cycle term
  double cyc = 10.0;
  double idt = 5.0;

  void validate() const;
};

nlohmann::json to_json(const LossWeights& weights);
LossWeights loss_weights_from_json(const nlohmann::json& json);

/// Least squares is the default; Log is the binary cross-entropy form on raw scores.
enum class AdversarialCriterion { LeastSquares, Log };

std::string to_string(AdversarialCriterion criterion);
AdversarialCriterion adversarial_criterion_from_string(const std::string& name);

/// Mean criterion of a score grid against a constant target (1 real, 0 fake).
torch::Tensor adversarial_loss(const torch::Tensor& scores, bool target_real,
                               AdversarialCriterion criterion = AdversarialCriterion::LeastSquares);

/// gan_masked * adv(masked_scores, real) + (1 - gan_masked) * adv(full_scores, real).
torch::Tensor gan_loss_generator_from_scores(const torch::Tensor& full_scores, const torch::Tensor& masked_scores,
                                             const LossWeights& weights,
                                             AdversarialCriterion criterion = AdversarialCriterion::LeastSquares);

/// Generator-side GAN term for one domain: the full discriminator sees fake, the
/// masked discriminator sees fake * mask.
torch::Tensor gan_loss_generator(Discriminator& full, Discriminator& masked, const torch::Tensor& fake,
                                 const torch::Tensor& mask, const LossWeights& weights,
                                 AdversarialCriterion criterion = AdversarialCriterion::LeastSquares);

/// 0.5 * (adv(real_scores, real) + adv(fake_scores, fake)).
torch::Tensor discriminator_loss_from_scores(const torch::Tensor& real_scores, const torch::Tensor& fake_scores,
                                             AdversarialCriterion criterion = AdversarialCriterion::LeastSquares);

/// Discriminator loss on a real/fake pair; fake is detached, so no gradient
/// reaches whatever produced it.
torch::Tensor discriminator_loss(Discriminator& d, const torch::Tensor& real, const torch::Tensor& fake,
                                 AdversarialCriterion criterion = AdversarialCriterion::LeastSquares);

/// cyc_masked * mean|(a - rec) * m| + (1 - cyc_masked) * mean|(a - rec) * (1 - m)|.
/// Both means run over every element, so cyc_masked = 0.5 gives 0.5 * mean|a - rec|.
torch::Tensor cycle_loss(const torch::Tensor& a, const torch::Tensor& reconstructed, const torch::Tensor& mask,
                         const LossWeights& weights);

/// mean|a - identity_output|.
torch::Tensor identity_loss(const torch::Tensor& a, const torch::Tensor& identity_output);

/// Throws NumericError naming the term when any entry is NaN or infinite.
void ensure_finite(const torch::Tensor& value, const std::string& name);

struct LossParts {
  double gan_a = 0, gan_b = 0, cyc_a = 0, cyc_b = 0, idt_a = 0, idt_b = 0;
  double d_a = 0, d_b = 0;
};

struct LossReport {
  double gan_a = 0, gan_b = 0, cyc_a = 0, cyc_b = 0, idt_a = 0, idt_b = 0;
  double total = 0;
  double d_a = 0, d_b = 0;
  LossWeights weights;

  /// One line of the training log: {"iter": n, "ganA": ..., "total": ..., "dA": ..., "dB": ...}.
  nlohmann::json to_json(std::int64_t iteration) const;
};

/// total = (ganA + ganB) + cyc * (cycA + cycB) + idt * (idtA + idtB).
LossReport full_objective(const LossParts& parts, const LossWeights& weights);

}  // namespace maskcycle
