// SPDX-License-Identifier: Apache-2.0
#include "maskcycle/objectives.hpp"

#include <cmath>

#include "maskcycle/errors.hpp"

namespace maskcycle {

void LossWeights::validate() const {
  if (!(gan_masked >= 0.0 && gan_masked <= 1.0)) throw ParameterError("lambda_gan_masked must be in [0, 1]");
  if (!(cyc_masked >= 0.0 && cyc_masked <= 1.0)) throw ParameterError("lambda_cyc_masked must be in [0, 1]");
  if (!(cyc >= 0.0) || !std::isfinite(cyc)) throw ParameterError("lambda_cyc must be finite and >= 0");
  if (!(idt >= 0.0) || !std::isfinite(idt)) throw ParameterError("lambda_idt must be finite and >= 0");
}

nlohmann::json to_json(const LossWeights& w) {
  return {{"lambda_gan_masked", w.gan_masked}, {"lambda_cyc_masked", w.cyc_masked}, {"lambda_cyc", w.cyc},
          {"lambda_idt", w.idt}};
}

LossWeights loss_weights_from_json(const nlohmann::json& json) {
  LossWeights w;
  for (const auto& [key, value] : json.items()) {
    if (!value.is_number()) throw ParameterError("loss weight '" + key + "' must be a number");
    if (key == "lambda_gan_masked") w.gan_masked = value.get<double>();
    else if (key == "lambda_cyc_masked") w.cyc_masked = value.get<double>();
    else if (key == "lambda_cyc") w.cyc = value.get<double>();
    else if (key == "lambda_idt") w.idt = value.get<double>();
    else throw ParameterError("unknown loss weight '" + key + "'");
  }
  w.validate();
  return w;
}

std::string to_string(AdversarialCriterion criterion) {
  return criterion == AdversarialCriterion::LeastSquares ? "least-squares" : "log";
}

AdversarialCriterion adversarial_criterion_from_string(const std::string& name) {
  if (name == "least-squares") return AdversarialCriterion::LeastSquares;
  if (name == "log") return AdversarialCriterion::Log;
  throw ParameterError("unknown adversarial criterion '" + name + "' (expected least-squares or log)");
}

void ensure_finite(const torch::Tensor& value, const std::string& name) {
  if (!torch::isfinite(value.detach()).all().item<bool>()) throw NumericError("non-finite value in " + name);
}

torch::Tensor adversarial_loss(const torch::Tensor& scores, bool target_real, AdversarialCriterion criterion) {
  ensure_finite(scores, "discriminator scores");
  const double target = target_real ? 1.0 : 0.0;
  if (criterion == AdversarialCriterion::LeastSquares) return (scores - target).pow(2).mean();
  return torch::binary_cross_entropy_with_logits(scores, torch::full_like(scores, target));
}

torch::Tensor gan_loss_generator_from_scores(const torch::Tensor& full_scores, const torch::Tensor& masked_scores,
                                             const LossWeights& weights, AdversarialCriterion criterion) {
  return weights.gan_masked * adversarial_loss(masked_scores, true, criterion) +
         (1.0 - weights.gan_masked) * adversarial_loss(full_scores, true, criterion);
}

torch::Tensor gan_loss_generator(Discriminator& full, Discriminator& masked, const torch::Tensor& fake,
                                 const torch::Tensor& mask, const LossWeights& weights,
                                 AdversarialCriterion criterion) {
  return gan_loss_generator_from_scores(full->forward(fake), masked->forward(fake * mask), weights, criterion);
}

torch::Tensor discriminator_loss_from_scores(const torch::Tensor& real_scores, const torch::Tensor& fake_scores,
                                             AdversarialCriterion criterion) {
  if (real_scores.sizes() != fake_scores.sizes()) throw InputError("real and fake score grids differ in shape");
  return 0.5 * (adversarial_loss(real_scores, true, criterion) + adversarial_loss(fake_scores, false, criterion));
}

torch::Tensor discriminator_loss(Discriminator& d, const torch::Tensor& real, const torch::Tensor& fake,
                                 AdversarialCriterion criterion) {
  if (real.sizes() != fake.sizes()) throw InputError("real and fake images differ in shape");
  return discriminator_loss_from_scores(d->forward(real), d->forward(fake.detach()), criterion);
}

torch::Tensor cycle_loss(const torch::Tensor& a, const torch::Tensor& reconstructed, const torch::Tensor& mask,
                         const LossWeights& weights) {
  if (a.sizes() != reconstructed.sizes()) throw InputError("cycle loss: image and reconstruction differ in shape");
  const auto diff = a - reconstructed;
  // Each region term is averaged over all elements, not over the region only.
  const auto masked = (diff * mask).abs().mean();
  const auto context = (diff * (1.0 - mask)).abs().mean();
  return weights.cyc_masked * masked + (1.0 - weights.cyc_masked) * context;
}

torch::Tensor identity_loss(const torch::Tensor& a, const torch::Tensor& identity_output) {
  if (a.sizes() != identity_output.sizes()) throw InputError("identity loss: shapes differ");
  return (a - identity_output).abs().mean();
}

nlohmann::json LossReport::to_json(std::int64_t iteration) const {
  return {{"iter", iteration}, {"ganA", gan_a}, {"ganB", gan_b}, {"cycA", cyc_a}, {"cycB", cyc_b}, {"idtA", idt_a},
          {"idtB", idt_b},     {"total", total}, {"dA", d_a},     {"dB", d_b}};
}

LossReport full_objective(const LossParts& parts, const LossWeights& weights) {
  weights.validate();
  const std::pair<const char*, double> terms[] = {{"ganA", parts.gan_a}, {"ganB", parts.gan_b}, {"cycA", parts.cyc_a},
                                                  {"cycB", parts.cyc_b}, {"idtA", parts.idt_a}, {"idtB", parts.idt_b},
                                                  {"dA", parts.d_a},     {"dB", parts.d_b}};
  for (const auto& [name, value] : terms)
    if (!std::isfinite(value)) throw NumericError(std::string("non-finite loss component ") + name);
  LossReport report;
  report.gan_a = parts.gan_a;
  report.gan_b = parts.gan_b;
  report.cyc_a = parts.cyc_a;
  report.cyc_b = parts.cyc_b;
  report.idt_a = parts.idt_a;
  report.idt_b = parts.idt_b;
  report.d_a = parts.d_a;
  report.d_b = parts.d_b;
  report.weights = weights;
  report.total = (parts.gan_a + parts.gan_b) + weights.cyc * (parts.cyc_a + parts.cyc_b) +
                 weights.idt * (parts.idt_a + parts.idt_b);
  return report;
}

}  // namespace maskcycle
