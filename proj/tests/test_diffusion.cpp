#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "voxcut/diffusion.hpp"
#include "voxcut/schedule.hpp"

using namespace voxcut;

namespace {

template <typename T>
FeatureTensor<T> random_tensor(int k, std::uint64_t seed) {
  Rng rng(seed);
  FeatureTensor<T> t(k);
  for (auto& v : t.data) v = static_cast<T>(rng.normal());
  return t;
}

// Analytic denoiser that knows the clean tensor: eps(x, n) recovers the exact
// noise that q_sample would have used to land on x.
template <typename T>
struct OracleDenoiser {
  FeatureTensor<T> x0;
  const NoiseSchedule* schedule;

  void predict(const std::vector<FeatureTensor<T>>& states, int n, const Condition<T>&,
               std::vector<FeatureTensor<T>>& out) const {
    const T a = static_cast<T>(std::sqrt(schedule->alpha_bar_at(n)));
    const T b = static_cast<T>(std::sqrt(1.0 - schedule->alpha_bar_at(n)));
    out.assign(states.size(), FeatureTensor<T>(x0.k));
    for (std::size_t m = 0; m < states.size(); ++m)
      for (std::size_t i = 0; i < x0.data.size(); ++i)
        out[m].data[i] = (states[m].data[i] - a * x0.data[i]) / b;
  }
};

template <typename T>
struct ZeroDenoiser {
  int k;
  void predict(const std::vector<FeatureTensor<T>>& states, int, const Condition<T>&,
               std::vector<FeatureTensor<T>>& out) const {
    out.assign(states.size(), FeatureTensor<T>(k));
  }
};

}  // namespace

TEST_CASE("make_schedule closed forms") {
  const NoiseSchedule s = make_schedule(2, 0.1, 0.1);
  REQUIRE(std::abs(s.alpha_bar_at(1) - 0.9) < 1e-12);
  REQUIRE(std::abs(s.alpha_bar_at(2) - 0.81) < 1e-12);
  REQUIRE(std::abs(s.beta_tilde_at(2) - 0.052631578947368425) < 1e-12);
  // the n=1 slot stores beta_1 so the table stays positive
  REQUIRE(s.beta_tilde_at(1) == 0.1);
}

TEST_CASE("default schedule ends near pure noise") {
  const NoiseSchedule s = default_schedule(1000);
  REQUIRE(s.alpha_bar_at(1000) < 5e-5);
  for (int n = 2; n <= 1000; ++n) {
    REQUIRE(s.alpha_bar_at(n) < s.alpha_bar_at(n - 1));
    REQUIRE(s.beta_at(n) >= s.beta_at(n - 1));
    REQUIRE(s.beta_tilde_at(n) > 0.0);
    REQUIRE(s.beta_tilde_at(n) <= s.beta_at(n));
  }
}

TEST_CASE("make_schedule rejects invalid parameters") {
  REQUIRE_THROWS_AS(make_schedule(0, 0.1, 0.2), config_error);
  REQUIRE_THROWS_AS(make_schedule(10, 0.0, 0.2), config_error);
  REQUIRE_THROWS_AS(make_schedule(10, 0.3, 0.2), config_error);
  REQUIRE_THROWS_AS(make_schedule(10, 0.1, 1.0), config_error);
}

TEST_CASE("q_sample limits") {
  // alpha_bar ~ 1: output collapses to the clean signal
  const NoiseSchedule tiny = make_schedule(1, 1e-12, 1e-12);
  const auto x0 = random_tensor<double>(2, 1);
  const auto noise = random_tensor<double>(2, 2);
  const auto out = q_sample(x0, 1, noise, tiny);
  for (std::size_t i = 0; i < out.data.size(); ++i)
    REQUIRE(std::abs(out.data[i] - x0.data[i]) < 1e-5);

  // zero signal: output is exactly sqrt(1 - abar) * eps
  const NoiseSchedule s = default_schedule(100);
  FeatureTensor<double> zero(2);
  const auto out2 = q_sample(zero, 40, noise, s);
  const double b = std::sqrt(1.0 - s.alpha_bar_at(40));
  for (std::size_t i = 0; i < out2.data.size(); ++i)
    REQUIRE(out2.data[i] == b * noise.data[i]);

  FeatureTensor<double> mismatched(3);
  REQUIRE_THROWS_AS(q_sample(x0, 40, mismatched, s), std::invalid_argument);
}

TEST_CASE("q_sample Monte Carlo variance matches 1 - alpha_bar") {
  const NoiseSchedule s = default_schedule(1000);
  const int n = 500;
  FeatureTensor<double> x0(1);
  x0.data = {0.3, -0.2, 0.7};
  Rng rng(9);
  double sum = 0, sum2 = 0;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    FeatureTensor<double> noise(1);
    for (auto& v : noise.data) v = rng.normal();
    const double v = q_sample(x0, n, noise, s).data[0];
    sum += v;
    sum2 += v * v;
  }
  const double mean = sum / draws;
  const double var = sum2 / draws - mean * mean;
  const double expected = 1.0 - s.alpha_bar_at(n);
  REQUIRE(std::abs(var - expected) / expected < 0.05);
}

TEST_CASE("cfg_epsilon is the guided affine blend") {
  const auto eps_c = random_tensor<double>(2, 3);
  const auto eps_u = random_tensor<double>(2, 4);

  // w = 0: conditional branch exactly
  REQUIRE(cfg_epsilon(eps_c, eps_u, 0.0).data == eps_c.data);
  // agreement fixed point: identical branches are unchanged by any w
  const auto same = cfg_epsilon(eps_c, eps_c, 3.7);
  for (std::size_t i = 0; i < same.data.size(); ++i)
    REQUIRE(std::abs(same.data[i] - eps_c.data[i]) < 1e-12);

  // scalar arithmetic at the production guidance scale
  FeatureTensor<double> one(1), zero(1);
  one.data = {1, 1, 1};
  REQUIRE(std::abs(cfg_epsilon(one, zero, 0.2).data[0] - 1.2) < 1e-12);

  // linear in both arguments
  auto scaled_c = eps_c, scaled_u = eps_u;
  for (auto& v : scaled_c.data) v *= 2.5;
  for (auto& v : scaled_u.data) v *= 2.5;
  const auto lhs = cfg_epsilon(scaled_c, scaled_u, 0.7);
  const auto rhs = cfg_epsilon(eps_c, eps_u, 0.7);
  for (std::size_t i = 0; i < lhs.data.size(); ++i)
    REQUIRE(std::abs(lhs.data[i] - 2.5 * rhs.data[i]) < 1e-9);
}

TEST_CASE("ddpm_step matches the hand-evaluated posterior mean") {
  // custom single-entry tables: alpha = 0.99, alpha_bar = 0.5
  NoiseSchedule s;
  s.n_steps = 1;
  s.beta = {0.01};
  s.alpha = {0.99};
  s.alpha_bar = {0.5};
  s.beta_tilde = {0.01};
  FeatureTensor<double> x(1), eps(1);
  x.data = {1.0, 1.0, 1.0};
  eps.data = {0.2, 0.2, 0.2};
  Rng rng(1);
  const auto out = ddpm_step(x, 1, eps, s, rng);  // n = 1: mean exactly, no noise
  REQUIRE(std::abs(out.data[0] - 1.0021951390411372) < 1e-12);
}

TEST_CASE("ddpm_step vanishing update and determinism") {
  const NoiseSchedule tiny = make_schedule(1, 1e-12, 1e-12);
  const auto x = random_tensor<double>(2, 5);
  FeatureTensor<double> zero_eps(2);
  Rng rng(1);
  const auto out = ddpm_step(x, 1, zero_eps, tiny, rng);
  for (std::size_t i = 0; i < out.data.size(); ++i)
    REQUIRE(std::abs(out.data[i] - x.data[i]) < 1e-9);

  const NoiseSchedule s = default_schedule(100);
  const auto eps = random_tensor<double>(2, 6);
  Rng r1(42), r2(42);
  const auto a = ddpm_step(x, 50, eps, s, r1);
  const auto b = ddpm_step(x, 50, eps, s, r2);
  REQUIRE(a.data == b.data);
}

TEST_CASE("ddim_step no-op and inversion identities") {
  NoiseSchedule flat;
  flat.n_steps = 2;
  flat.beta = {0.1, 0.1};
  flat.alpha = {0.9, 0.9};
  flat.alpha_bar = {0.5, 0.5};  // equal levels: the step must be the identity
  flat.beta_tilde = {0.1, 0.1};
  const auto x = random_tensor<double>(2, 7);
  const auto eps = random_tensor<double>(2, 8);
  const auto noop = ddim_step(x, 2, 1, eps, flat);
  for (std::size_t i = 0; i < x.data.size(); ++i)
    REQUIRE(std::abs(noop.data[i] - x.data[i]) < 1e-12);

  // with the true noise, one macro step to 0 recovers x0
  const NoiseSchedule s = default_schedule(1000);
  const auto x0 = random_tensor<double>(2, 9);
  const auto noise = random_tensor<double>(2, 10);
  const auto x_n = q_sample(x0, 700, noise, s);
  const auto rec = ddim_step(x_n, 700, 0, noise, s);
  for (std::size_t i = 0; i < x0.data.size(); ++i)
    REQUIRE(std::abs(rec.data[i] - x0.data[i]) < 1e-9);

  REQUIRE_THROWS_AS(ddim_step(x, 1, 1, eps, s), std::invalid_argument);
}

TEST_CASE("ddim timestep grid") {
  const auto grid = ddim_timesteps(1000, 20);
  REQUIRE(grid.size() == 20);
  REQUIRE(grid.front() == 1000);
  REQUIRE(grid.back() == 1);
  for (std::size_t i = 1; i < grid.size(); ++i) REQUIRE(grid[i] < grid[i - 1]);

  REQUIRE(ddim_timesteps(1000, 1) == std::vector<int>{1000});
  const auto dense = ddim_timesteps(10, 50);
  REQUIRE(dense.size() == 10);  // duplicates collapse
}

TEST_CASE("20-step DDIM with the oracle denoiser recovers x0") {
  const NoiseSchedule s = default_schedule(1000);
  OracleDenoiser<double> oracle{random_tensor<double>(1, 21), &s};
  const Condition<double> cond = Condition<double>::null_condition(1);
  SamplerKind ddim;
  ddim.ddim_steps = 20;
  const auto batch = sample_conditional(oracle, s, cond, 3, 0.0, ddim, 99);
  for (const auto& sample : batch.samples)
    for (std::size_t i = 0; i < sample.data.size(); ++i)
      REQUIRE(std::abs(sample.data[i] - oracle.x0.data[i]) < 1e-6);
}

TEST_CASE("sample_conditional is deterministic per seed") {
  const NoiseSchedule s = default_schedule(50);
  ZeroDenoiser<float> zero{2};
  Condition<float> cond = Condition<float>::null_condition(2);
  cond.null_flag = false;
  SamplerKind ddim;
  ddim.ddim_steps = 5;
  const auto a = sample_conditional(zero, s, cond, 2, 0.2, ddim, 7);
  const auto b = sample_conditional(zero, s, cond, 2, 0.2, ddim, 7);
  REQUIRE(a.samples[0].data == b.samples[0].data);
  REQUIRE(a.samples[1].data == b.samples[1].data);

  SamplerKind ddpm;
  ddpm.kind = SamplerKind::Kind::Ddpm;
  const auto c = sample_conditional(zero, s, cond, 1, 0.0, ddpm, 7);
  const auto d = sample_conditional(zero, s, cond, 1, 0.0, ddpm, 7);
  REQUIRE(c.samples[0].data == d.samples[0].data);
}

TEST_CASE("replacement forces agreement with a fully observed condition") {
  const NoiseSchedule s = default_schedule(200);
  ZeroDenoiser<float> zero{3};

  Condition<float> cond;
  cond.observed = FeatureTensor<float>(3);
  cond.mask = VoxelMask(3);
  Rng rng(31);
  for (auto& b : cond.mask.bits) b = 1;
  for (auto& v : cond.observed.data)
    v = static_cast<float>(rng.uniform_int(0, 1) * 2 - 1) * 0.6f;

  SamplerKind ddim;
  ddim.ddim_steps = 10;
  const auto batch = sample_conditional(zero, s, cond, 4, 0.2, ddim, 3);
  for (const auto& sample : batch.samples) REQUIRE(sample.data == cond.observed.data);
}
