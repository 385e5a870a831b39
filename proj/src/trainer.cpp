// SPDX-License-Identifier: Apache-2.0
#include "maskcycle/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "maskcycle/errors.hpp"
#include "maskcycle/image_io.hpp"

namespace maskcycle {

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over seed and stream id
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t kMaskStream = 1;
constexpr std::uint64_t kBufferStream = 2;
constexpr std::uint64_t kDataStream = 3;

void set_requires_grad(const std::vector<torch::Tensor>& params, bool on) {
  for (auto p : params) p.set_requires_grad(on);
}

std::string iteration_name(std::int64_t iteration) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "iter_%06lld", static_cast<long long>(iteration));
  return buf;
}

template <class T>
T read_key(const nlohmann::json& json, const char* key) {
  try {
    return json.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ParameterError(std::string("config key '") + key + "' has the wrong type");
  }
}

}  // namespace

// ---- config --------------------------------------------------------------------

void TrainConfig::validate() const {
  weights.validate();
  validate_scheme(scheme);
  if (std::holds_alternative<AttentionBinarize>(scheme))
    throw ParameterError("training needs a sampleable mask scheme; attention-binarize masks come from attention maps");
  if (iterations <= 0) throw ParameterError("iterations must be > 0");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ParameterError("learning_rate must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw ParameterError("adam betas must lie in [0, 1)");
  if (checkpoint_every < 0 || snapshot_every < 0) throw ParameterError("checkpoint/snapshot intervals must be >= 0");
  if (buffer_capacity < 0) throw ParameterError("buffer_capacity must be >= 0");
  if (lr_decay_start < 0) throw ParameterError("lr_decay_start must be >= 0");
  net.validate();
  if (net.resolution != dataset.resolution)
    throw ParameterError("net resolution " + std::to_string(net.resolution) + " differs from dataset resolution " +
                         std::to_string(dataset.resolution));
  if (std::holds_alternative<MultiRectangles>(scheme))
    resolve_multi_rectangles(net.resolution, std::get<MultiRectangles>(scheme));
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"weights", to_json(c.weights)},
          {"scheme", scheme_to_json(c.scheme)},
          {"iterations", c.iterations},
          {"learning_rate", c.learning_rate},
          {"adam_betas", {c.beta1, c.beta2}},
          {"checkpoint_every", c.checkpoint_every},
          {"snapshot_every", c.snapshot_every},
          {"seed", c.seed},
          {"dataset", to_json(c.dataset)},
          {"net", to_json(c.net)},
          {"buffer_capacity", c.buffer_capacity},
          {"criterion", to_string(c.criterion)},
          {"lr_decay_start", c.lr_decay_start},
          {"out_dir", c.out_dir.string()}};
}

TrainConfig train_config_from_json(const nlohmann::json& json) {
  if (!json.is_object()) throw ParameterError("training config must be a JSON object");
  TrainConfig c;
  bool net_resolution_given = false;
  for (const auto& [key, value] : json.items()) {
    if (key == "weights") c.weights = loss_weights_from_json(value);
    else if (key == "scheme") c.scheme = scheme_from_json(value);
    else if (key == "iterations") c.iterations = read_key<std::int64_t>(json, "iterations");
    else if (key == "learning_rate") c.learning_rate = read_key<double>(json, "learning_rate");
    else if (key == "adam_betas") {
      const auto betas = read_key<std::vector<double>>(json, "adam_betas");
      if (betas.size() != 2) throw ParameterError("adam_betas must hold two numbers");
      c.beta1 = betas[0];
      c.beta2 = betas[1];
    } else if (key == "checkpoint_every") c.checkpoint_every = read_key<std::int64_t>(json, "checkpoint_every");
    else if (key == "snapshot_every") c.snapshot_every = read_key<std::int64_t>(json, "snapshot_every");
    else if (key == "seed") c.seed = read_key<std::uint64_t>(json, "seed");
    else if (key == "dataset") c.dataset = dataset_spec_from_json(value);
    else if (key == "net") {
      c.net = net_config_from_json(value);
      net_resolution_given = value.contains("resolution");
    } else if (key == "buffer_capacity") c.buffer_capacity = read_key<int>(json, "buffer_capacity");
    else if (key == "criterion") c.criterion = adversarial_criterion_from_string(read_key<std::string>(json, "criterion"));
    else if (key == "lr_decay_start") c.lr_decay_start = read_key<std::int64_t>(json, "lr_decay_start");
    else if (key == "out_dir") c.out_dir = read_key<std::string>(json, "out_dir");
    else throw ParameterError("unknown training config key '" + key + "'");
  }
  if (!net_resolution_given) c.net.resolution = c.dataset.resolution;
  return c;
}

// ---- fake buffer -------------------------------------------------------------

torch::Tensor FakeBuffer::draw(const torch::Tensor& fresh, Rng& rng) {
  const auto detached = fresh.detach();
  if (capacity_ == 0) return detached;
  std::vector<torch::Tensor> out;
  out.reserve(detached.size(0));
  for (int64_t i = 0; i < detached.size(0); ++i) {
    auto image = detached[i].clone();
    if (images_.size() < static_cast<std::size_t>(capacity_)) {
      images_.push_back(image);
      out.push_back(image);
    } else if (rng.coin(0.5)) {
      const auto slot = static_cast<std::size_t>(rng.uniform_int(0, capacity_ - 1));
      out.push_back(images_[slot]);
      images_[slot] = image;
    } else {
      out.push_back(image);
    }
  }
  return torch::stack(out);
}

// ---- trainer -------------------------------------------------------------------

Trainer::Trainer(TrainConfig config)
    : config_(std::move(config)),
      buffer_a_(config_.buffer_capacity),
      buffer_b_(config_.buffer_capacity),
      buffer_rng_(mix_seed(config_.seed, kBufferStream)) {
  config_.validate();
  models_ = ModelSet::create(config_.net, config_.seed);
  make_optimizers();
}

Trainer::Trainer(TrainConfig config, const Checkpoint& resume)
    : config_(std::move(config)),
      models_(resume.models),
      buffer_a_(config_.buffer_capacity),
      buffer_b_(config_.buffer_capacity),
      buffer_rng_(mix_seed(config_.seed ^ static_cast<std::uint64_t>(resume.iteration), kBufferStream)),
      iteration_(resume.iteration),
      start_iteration_(resume.iteration) {
  config_.net = resume.models.config;
  config_.validate();
  make_optimizers();
  if (!resume.optimizer_generators.empty()) {
    std::istringstream in(resume.optimizer_generators);
    torch::serialize::InputArchive archive;
    archive.load_from(in);
    optimizer_g_->load(archive);
  }
  if (!resume.optimizer_discriminators.empty()) {
    std::istringstream in(resume.optimizer_discriminators);
    torch::serialize::InputArchive archive;
    archive.load_from(in);
    optimizer_d_->load(archive);
  }
}

void Trainer::make_optimizers() {
  const auto options = torch::optim::AdamOptions(config_.learning_rate).betas({config_.beta1, config_.beta2});
  optimizer_g_ = std::make_unique<torch::optim::Adam>(models_.generator_parameters(), options);
  optimizer_d_ = std::make_unique<torch::optim::Adam>(models_.discriminator_parameters(), options);
}

double Trainer::current_learning_rate() const {
  const auto start = config_.lr_decay_start;
  if (start <= 0) return config_.learning_rate;
  const auto end = start_iteration_ + config_.iterations;
  const auto next = iteration_ + 1;
  if (next <= start || end <= start) return config_.learning_rate;
  const double frac = static_cast<double>(next - start) / static_cast<double>(end - start + 1);
  return config_.learning_rate * std::max(0.0, 1.0 - frac);
}

void Trainer::apply_learning_rate_schedule() {
  const double lr = current_learning_rate();
  for (auto* opt : {optimizer_g_.get(), optimizer_d_.get()})
    for (auto& group : opt->param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
}

Mask Trainer::mask_for_iteration(std::int64_t iteration) const {
  Rng rng(mix_seed(config_.seed, kMaskStream ^ (static_cast<std::uint64_t>(iteration) << 8)));
  return sample_mask(config_.net.resolution, config_.scheme, rng);
}

void Trainer::abort_non_finite(const std::string& what, const LossParts& p, const Mask& mask) const {
  std::ostringstream msg;
  msg << "non-finite " << what << " at iteration " << iteration_ + 1 << ": ganA=" << p.gan_a << " ganB=" << p.gan_b
      << " cycA=" << p.cyc_a << " cycB=" << p.cyc_b << " idtA=" << p.idt_a << " idtB=" << p.idt_b << " dA=" << p.d_a
      << " dB=" << p.d_b << " mask_coverage=" << mask.coverage() << " mask_size=" << mask.size();
  throw NumericError(msg.str());
}

GeneratorStepResult Trainer::generator_step(const Batch& batch, const Mask& mask) {
  const auto& w = config_.weights;
  models_.train();
  GeneratorStepResult out;
  out.mask = mask.to_tensor().unsqueeze(0);
  const auto& m = out.mask;
  const auto& a = batch.a;
  const auto& b = batch.b;

  auto& g_ab = models_.g_ab;
  auto& g_ba = models_.g_ba;
  const auto fake_b = g_ab->forward(a, m);
  const auto fake_a = g_ba->forward(b, m);
  const auto rec_a = g_ba->forward(fake_b, m);
  const auto rec_b = g_ab->forward(fake_a, m);
  const auto idt_a = g_ba->forward(a, m);
  const auto idt_b = g_ab->forward(b, m);

  // Discriminators are frozen for the generator update.
  const auto d_params = models_.discriminator_parameters();
  set_requires_grad(d_params, false);
  torch::Tensor gan_a, gan_b;
  try {
    gan_a = gan_loss_generator(models_.d_a_full, models_.d_a_masked, fake_a, m, w, config_.criterion);
    gan_b = gan_loss_generator(models_.d_b_full, models_.d_b_masked, fake_b, m, w, config_.criterion);
  } catch (const NumericError&) {
    set_requires_grad(d_params, true);
    abort_non_finite("discriminator scores", out.parts, mask);
  }
  const auto cyc_a = cycle_loss(a, rec_a, m, w);
  const auto cyc_b = cycle_loss(b, rec_b, m, w);
  const auto l_idt_a = identity_loss(a, idt_a);
  const auto l_idt_b = identity_loss(b, idt_b);
  const auto total = (gan_a + gan_b) + w.cyc * (cyc_a + cyc_b) + w.idt * (l_idt_a + l_idt_b);

  out.parts.gan_a = gan_a.item<double>();
  out.parts.gan_b = gan_b.item<double>();
  out.parts.cyc_a = cyc_a.item<double>();
  out.parts.cyc_b = cyc_b.item<double>();
  out.parts.idt_a = l_idt_a.item<double>();
  out.parts.idt_b = l_idt_b.item<double>();
  out.generator_total = total.item<double>();
  if (!std::isfinite(out.generator_total)) {
    set_requires_grad(d_params, true);
    abort_non_finite("generator loss", out.parts, mask);
  }

  optimizer_g_->zero_grad();
  total.backward();
  optimizer_g_->step();
  set_requires_grad(d_params, true);

  out.fake_a = fake_a.detach();
  out.fake_b = fake_b.detach();
  out.rec_a = rec_a.detach();
  out.rec_b = rec_b.detach();
  return out;
}

std::pair<double, double> Trainer::discriminator_step(const Batch& batch, const GeneratorStepResult& generated) {
  const double lm = config_.weights.gan_masked;
  const auto crit = config_.criterion;
  const auto& m = generated.mask;
  const auto pool_a = buffer_a_.draw(generated.fake_a, buffer_rng_);
  const auto pool_b = buffer_b_.draw(generated.fake_b, buffer_rng_);

  const auto l_da = (1.0 - lm) * discriminator_loss(models_.d_a_full, batch.a, pool_a, crit) +
                    lm * discriminator_loss(models_.d_a_masked, batch.a * m, pool_a * m, crit);
  const auto l_db = (1.0 - lm) * discriminator_loss(models_.d_b_full, batch.b, pool_b, crit) +
                    lm * discriminator_loss(models_.d_b_masked, batch.b * m, pool_b * m, crit);
  const auto l_d = l_da + l_db;
  const double d_a = l_da.item<double>();
  const double d_b = l_db.item<double>();
  if (!std::isfinite(d_a) || !std::isfinite(d_b)) {
    LossParts parts = generated.parts;
    parts.d_a = d_a;
    parts.d_b = d_b;
    abort_non_finite("discriminator loss", parts, Mask::from_tensor(m.squeeze(0)));
  }
  optimizer_d_->zero_grad();
  l_d.backward();
  optimizer_d_->step();
  return {d_a, d_b};
}

LossReport Trainer::step(const Batch& batch) {
  if (batch.a.dim() != 4 || batch.b.dim() != 4 || batch.a.size(-1) != config_.net.resolution ||
      batch.b.size(-1) != config_.net.resolution)
    throw InputError("batch does not match the configured resolution " + std::to_string(config_.net.resolution));
  apply_learning_rate_schedule();
  last_mask_ = mask_for_iteration(iteration_ + 1);
  auto generated = generator_step(batch, last_mask_);
  const auto [d_a, d_b] = discriminator_step(batch, generated);
  generated.parts.d_a = d_a;
  generated.parts.d_b = d_b;
  ++iteration_;
  return full_objective(generated.parts, config_.weights);
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.models = models_;
  c.iteration = iteration_;
  c.scheme = scheme_to_json(config_.scheme);
  c.config = to_json(config_);
  {
    std::ostringstream out;
    torch::serialize::OutputArchive archive;
    optimizer_g_->save(archive);
    archive.save_to(out);
    c.optimizer_generators = out.str();
  }
  {
    std::ostringstream out;
    torch::serialize::OutputArchive archive;
    optimizer_d_->save(archive);
    archive.save_to(out);
    c.optimizer_discriminators = out.str();
  }
  return c;
}

torch::Tensor snapshot_grid(const Batch& batch, const GeneratorStepResult& generated) {
  const int size = static_cast<int>(batch.a.size(-1));
  const auto mask_rgb = (generated.mask[0] * 2.0 - 1.0).expand({3, size, size});
  std::vector<std::vector<torch::Tensor>> rows = {
      {batch.a[0], mask_rgb, generated.fake_b[0], generated.rec_a[0]},
      {batch.b[0], mask_rgb, generated.fake_a[0], generated.rec_b[0]},
  };
  return tile_grid(rows, size);
}

Checkpoint fit(const TrainConfig& config, const std::optional<std::filesystem::path>& resume,
               const FitObserver& observer) {
  config.validate();
  std::optional<Checkpoint> from;
  if (resume) from = load_checkpoint(*resume);

  Trainer trainer = from ? Trainer(config, *from) : Trainer(config);
  UnpairedLoader loader(config.dataset, mix_seed(config.seed ^ static_cast<std::uint64_t>(trainer.iteration()),
                                                 kDataStream));

  std::filesystem::create_directories(config.out_dir);
  std::ofstream log(config.out_dir / "log.jsonl", from ? std::ios::app : std::ios::trunc);
  if (!log) throw Error("cannot open loss log in " + config.out_dir.string());

  for (std::int64_t k = 0; k < config.iterations; ++k) {
    const std::int64_t it = trainer.iteration() + 1;
    try {
      const Batch batch = loader.next();
      const LossReport report = trainer.step(batch);
      log << report.to_json(it).dump() << '\n';
      log.flush();
      if (observer) observer(it, report);
      if (config.checkpoint_every > 0 && it % config.checkpoint_every == 0)
        save_checkpoint(trainer.checkpoint(), config.out_dir / "checkpoints" / (iteration_name(it) + ".pt"));
      if (config.snapshot_every > 0 && it % config.snapshot_every == 0) {
        torch::NoGradGuard no_grad;
        auto& models = trainer.models();
        const auto m = trainer.last_mask().to_tensor().unsqueeze(0);
        GeneratorStepResult shown;
        shown.mask = m;
        shown.fake_b = models.g_ab->forward(batch.a, m);
        shown.fake_a = models.g_ba->forward(batch.b, m);
        shown.rec_a = models.g_ba->forward(shown.fake_b, m);
        shown.rec_b = models.g_ab->forward(shown.fake_a, m);
        write_png(config.out_dir / "snapshots" / (iteration_name(it) + ".png"), to_raw(snapshot_grid(batch, shown)));
      }
    } catch (const NumericError&) {
      throw;
    } catch (const Error& e) {
      throw Error("iteration " + std::to_string(it) + ": " + e.what());
    } catch (const c10::Error& e) {
      throw Error("iteration " + std::to_string(it) + ": " + e.what_without_backtrace());
    }
  }
  auto final = trainer.checkpoint();
  save_checkpoint(final, config.out_dir / "final.pt");
  return final;
}

}  // namespace maskcycle
