// SPDX-License-Identifier: Apache-2.0
// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any failure.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "maskcycle/evaluation.hpp"
#include "maskcycle/objectives.hpp"
#include "maskcycle/trainer.hpp"
#include "oracles.hpp"

using namespace maskcycle;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Outcome {
  bool pass = true;
  std::string detail;
};

class Detail {
 public:
  template <class T>
  Detail& operator<<(const T& v) {
    s_ << v;
    return *this;
  }
  std::string str() const { return s_.str(); }

 private:
  std::ostringstream s_;
};

int failures = 0;

void report(const std::string& name, const std::function<Outcome()>& check) {
  Outcome o;
  try {
    o = check();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  failures += !o.pass;
  std::cout << (o.pass ? "PASS  " : "FAIL  ") << name << "  (" << o.detail << ")" << std::endl;
}

// ---- masking ---------------------------------------------------------------------

Outcome masking_suite() {
  const auto start = Clock::now();
  int good = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    Rng rng(seed);
    const auto s = sample_multi_rectangles(128, MultiRectangles{}, rng);
    bool binary = true;
    for (auto b : s.mask.bits()) binary &= b <= 1;
    good += binary && s.num_rects >= s.min_num_rects && s.sum_rel_area >= 0.15;
  }
  int full = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    MultiRectangles cfg;
    cfg.min_sum_rel_area = 1.0;
    full += sample_multi_rectangles(128, cfg, rng).mask.is_full();
  }
  const double elapsed = seconds_since(start);
  Detail d;
  d << good << "/1000 satisfy the guard, " << full << "/100 full masks, " << elapsed << " s";
  return {good == 1000 && full == 100 && elapsed < 5.0, d.str()};
}

// ---- losses ------------------------------------------------------------------------

NetConfig small_net() {
  NetConfig c;
  c.resolution = 32;
  c.generator_filters = 16;
  c.encoder_filters = 16;
  c.discriminator_filters = 16;
  return c;
}

Outcome loss_fallback() {
  auto models = ModelSet::create(small_net(), 5);
  LossWeights w;
  w.gan_masked = 0.0;
  w.cyc_masked = 0.5;
  torch::NoGradGuard no_grad;
  const auto a = torch::rand({2, 3, 32, 32}) * 2 - 1;
  const auto b = torch::rand({2, 3, 32, 32}) * 2 - 1;
  const auto m = Mask::full(32).to_tensor().unsqueeze(0);
  const auto fake_b = models.g_ab->forward(a, m);
  const auto rec_a = models.g_ba->forward(fake_b, m);
  const auto idt_b = models.g_ab->forward(b, m);

  const double gan = gan_loss_generator(models.d_b_full, models.d_b_masked, fake_b, m, w).item<double>();
  const double gan_ref = oracle::lsgan_generator(models.d_b_full->forward(fake_b));
  const double cyc = cycle_loss(a, rec_a, m, w).item<double>();
  const double cyc_ref = 0.5 * oracle::mean_abs_diff(a, rec_a);
  const double idt = identity_loss(b, idt_b).item<double>();
  const double idt_ref = oracle::mean_abs_diff(b, idt_b);
  // Discriminator side with the same weights: (1 - 0) * full term + 0 * masked term.
  const double disc = (1.0 - w.gan_masked) * discriminator_loss(models.d_b_full, b, fake_b).item<double>() +
                      w.gan_masked * discriminator_loss(models.d_b_masked, b * m, fake_b * m).item<double>();
  const double disc_ref =
      oracle::lsgan_discriminator(models.d_b_full->forward(b), models.d_b_full->forward(fake_b));

  const double worst = std::max({std::abs(gan - gan_ref), std::abs(cyc - cyc_ref), std::abs(idt - idt_ref),
                                 std::abs(disc - disc_ref)});
  Detail d;
  d << "max deviation " << worst << " over gan/cycle/identity/discriminator terms";
  return {worst <= 1e-6, d.str()};
}

Outcome gradient_checks() {
  torch::manual_seed(21);
  const auto a = torch::randn({2, 4, 4}, torch::kFloat64);
  const auto rec = torch::randn({2, 4, 4}, torch::kFloat64);
  const auto m = torch::tensor({1, 0, 1, 0, 1, 1, 0, 0, 0, 1, 1, 0, 1, 0, 0, 1}, torch::kFloat64).view({1, 4, 4});
  const LossWeights w;
  const double cyc = oracle::gradient_check([&](const torch::Tensor& r) { return cycle_loss(a, r, m, w); }, rec);
  const double cyc_src = oracle::gradient_check([&](const torch::Tensor& x) { return cycle_loss(x, rec, m, w); }, a);
  const double idt = oracle::gradient_check([&](const torch::Tensor& x) { return identity_loss(a, x); }, rec);
  const double worst = std::max({cyc, cyc_src, idt});
  Detail d;
  d << "max relative error " << worst;
  return {worst < 1e-4, d.str()};
}

Outcome masked_dependence() {
  torch::manual_seed(8);
  Generator g(small_net());
  g->eval();
  torch::NoGradGuard no_grad;
  Rng rng(8);
  int equal = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto mask = sample_mask(32, MultiRectangles{}, rng).to_tensor().unsqueeze(0);
    const auto a1 = torch::rand({1, 3, 32, 32}) * 2 - 1;
    const auto a2 = a1 * mask + (torch::rand({1, 3, 32, 32}) * 2 - 1) * (1 - mask);
    if (!torch::equal(a1 * mask, a2 * mask)) continue;
    equal += torch::equal(g->trace(a1, mask).core_output, g->trace(a2, mask).core_output);
  }
  Detail d;
  d << equal << "/100 trials with bit-identical core outputs";
  return {equal == 100, d.str()};
}

Outcome frechet_oracle() {
  const auto stats = [](const Eigen::VectorXd& mu, const Eigen::MatrixXd& sigma) {
    FeatureStats s;
    s.mu = mu;
    s.sigma = sigma;
    s.n = 2;
    return s;
  };
  Eigen::MatrixXd a = Eigen::MatrixXd::Random(6, 6);
  const auto same = stats(Eigen::VectorXd::Random(6), a * a.transpose());
  const double zero = frechet_distance(same, same);

  Eigen::VectorXd v(2);
  v << 3, 4;
  const auto p = stats(Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2));
  const auto q = stats(v, Eigen::MatrixXd::Identity(2, 2));
  const double shift = frechet_distance(p, q);
  const double shift_ref = oracle::frechet_isotropic(p.mu, 1.0, q.mu, 1.0);

  const auto r = stats(Eigen::VectorXd::Zero(4), 4.0 * Eigen::MatrixXd::Identity(4, 4));
  const auto s = stats(Eigen::VectorXd::Zero(4), Eigen::MatrixXd::Identity(4, 4));
  const double scaled = frechet_distance(r, s);
  const double scaled_ref = oracle::frechet_isotropic(r.mu, 4.0, s.mu, 1.0);

  Detail d;
  d << "identical " << zero << ", shift " << shift << " (oracle " << shift_ref << "), scaled " << scaled
    << " (oracle " << scaled_ref << ")";
  return {zero <= 1e-6 && std::abs(shift - 25.0) <= 1e-4 && std::abs(shift - shift_ref) <= 1e-4 &&
              std::abs(scaled - 4.0) <= 1e-4 && std::abs(scaled - scaled_ref) <= 1e-4,
          d.str()};
}

// ---- training ----------------------------------------------------------------------

struct SmokeRun {
  std::vector<std::string> log;
  std::vector<double> cycle;  // cycA + cycB per iteration
  bool all_finite = true;
  double seconds = 0;
  fs::path final_checkpoint;
};

TrainConfig smoke_config(const fs::path& out) {
  TrainConfig c;
  c.dataset.root = MASKCYCLE_TEST_DATA;
  c.dataset.resolution = 32;
  c.net.resolution = 32;
  c.iterations = 500;
  c.seed = 2026;
  c.out_dir = out;
  return c;
}

SmokeRun smoke_run(const fs::path& out) {
  fs::remove_all(out);
  SmokeRun run;
  const auto start = Clock::now();
  fit(smoke_config(out), std::nullopt, [&](std::int64_t, const LossReport& r) {
    for (double v : {r.gan_a, r.gan_b, r.cyc_a, r.cyc_b, r.idt_a, r.idt_b, r.total, r.d_a, r.d_b})
      run.all_finite &= std::isfinite(v);
    run.cycle.push_back(r.cyc_a + r.cyc_b);
  });
  run.seconds = seconds_since(start);
  std::ifstream in(out / "log.jsonl");
  for (std::string line; std::getline(in, line);) run.log.push_back(line);
  run.final_checkpoint = out / "final.pt";
  return run;
}

double mean(const std::vector<double>& v, std::size_t from, std::size_t to) {
  double s = 0;
  for (std::size_t i = from; i < to; ++i) s += v[i];
  return s / static_cast<double>(to - from);
}

}  // namespace

int main() {
  torch::set_num_threads(1);
  std::cout << "acceptance criteria" << std::endl;

  report("masking suite", masking_suite);
  report("loss fallback", loss_fallback);
  report("gradient checks", gradient_checks);
  report("masked dependence", masked_dependence);
  report("frechet oracle", frechet_oracle);

  const fs::path work = fs::current_path() / "acceptance_runs";
  std::optional<SmokeRun> first, second;
  report("training smoke", [&]() -> Outcome {
    first = smoke_run(work / "smoke_1");
    if (first->cycle.size() != 500) return {false, "expected 500 iterations"};
    const double early = mean(first->cycle, 0, 50);
    const double late = mean(first->cycle, 450, 500);
    Detail d;
    d << "cycle mean iters 1-50 " << early << ", iters 451-500 " << late << ", all finite "
      << (first->all_finite ? "yes" : "no") << ", " << first->seconds << " s";
    return {first->all_finite && late < early && first->seconds <= 1800, d.str()};
  });

  report("fid matrix mechanics", [&]() -> Outcome {
    if (!first) return {false, "no smoke checkpoint"};
    auto checkpoint = load_checkpoint(first->final_checkpoint);
    auto extractor = make_extractor("toy-mnist");
    FidMatrixOptions opts;
    opts.include_train_half = true;
    opts.cache_dir = work / "fid-cache";
    const auto r = fid_matrix(checkpoint.models, MASKCYCLE_TEST_DATA, *extractor, opts);
    const double half = r.matrix.at("train", "train-half");
    const double gen = r.matrix.at("train", "gen@1.0");
    Detail d;
    d << "FID(train,train-half) " << half << ", FID(train,gen@1.0) " << gen << ", FID(gen@0.8,test) "
      << r.matrix.at("gen@0.8", "test") << ", FID(gen@1.0,test) " << r.matrix.at("gen@1.0", "test");
    return {r.matrix.symmetric(1e-6) && r.matrix.zero_diagonal(1e-6) && half < gen, d.str()};
  });

  report("round-mask probe", [&]() -> Outcome {
    if (!first) return {false, "no smoke checkpoint"};
    auto checkpoint = load_checkpoint(first->final_checkpoint);
    const ImageFolder sources(fs::path(MASKCYCLE_TEST_DATA) / "testA", 32, 8);
    std::vector<torch::Tensor> images;
    for (std::size_t i = 0; i < sources.size(); ++i) images.push_back(sources[i]);
    const auto grid = render_output_grid(checkpoint.models.g_ab, images, grid_masks(32, {0.5, 0.8, 1.0}, false, true));
    bool ok = grid.cols == 4 && grid.rows == 9;
    double peak = 0;
    for (const auto& row : grid.generated)
      for (const auto& cell : row) {
        ok &= torch::isfinite(cell).all().item<bool>();
        peak = std::max(peak, cell.abs().max().item<double>());
      }
    Detail d;
    d << grid.rows - 1 << " sources x " << grid.cols - 1 << " round masks, max |output| " << peak;
    return {ok && peak <= 1.0, d.str()};
  });

  report("determinism", [&]() -> Outcome {
    if (!first) return {false, "no first run"};
    second = smoke_run(work / "smoke_2");
    Detail d;
    d << first->log.size() << " and " << second->log.size() << " log lines, "
      << (first->log == second->log ? "identical" : "different");
    return {!first->log.empty() && first->log == second->log, d.str()};
  });

  std::cout << (failures == 0 ? "all acceptance criteria passed" : std::to_string(failures) + " criteria failed")
            << std::endl;
  return failures == 0 ? 0 : 1;
}
