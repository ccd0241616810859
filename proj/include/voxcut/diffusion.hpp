#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "voxcut/errors.hpp"
#include "voxcut/rng.hpp"
#include "voxcut/schedule.hpp"
#include "voxcut/voxel_grid.hpp"

namespace voxcut {

// Conditioning input for the denoiser: observed voxel features in tensor
// space (zero wherever the mask is clear) plus the observation mask. The null
// branch used by classifier-free guidance carries an empty observation and
// null_flag = true.
template <typename T = float>
struct Condition {
  FeatureTensor<T> observed;
  VoxelMask mask;
  bool null_flag = false;

  static Condition null_condition(int k) {
    Condition c;
    c.observed = FeatureTensor<T>(k);
    c.mask = VoxelMask(k);
    c.null_flag = true;
    return c;
  }
};

struct SamplerKind {
  enum class Kind { Ddpm, Ddim };
  Kind kind = Kind::Ddim;
  int ddim_steps = 20;

  static SamplerKind parse(const std::string& text) {
    SamplerKind s;
    if (text == "ddpm") {
      s.kind = Kind::Ddpm;
      return s;
    }
    if (text == "ddim") return s;
    if (text.rfind("ddim:", 0) == 0) {
      s.ddim_steps = std::stoi(text.substr(5));
      if (s.ddim_steps < 1) throw config_error("ddim step count must be positive");
      return s;
    }
    throw config_error("sampler must be 'ddpm' or 'ddim:<steps>', got '" + text + "'");
  }

  std::string to_string() const {
    return kind == Kind::Ddpm ? "ddpm" : "ddim:" + std::to_string(ddim_steps);
  }
};

template <typename T = float>
struct SampleBatch {
  std::vector<FeatureTensor<T>> samples;
  std::uint64_t seed = 0;
  double guidance_w = 0.0;
  SamplerKind sampler;
};

namespace detail {

template <typename T>
void check_same_shape(const FeatureTensor<T>& a, const FeatureTensor<T>& b, const char* what) {
  if (a.k != b.k || a.data.size() != b.data.size())
    throw std::invalid_argument(std::string("tensor shape mismatch in ") + what);
}

}  // namespace detail

// Forward diffusion in closed form: sqrt(abar_n) x0 + sqrt(1 - abar_n) eps.
template <typename T>
FeatureTensor<T> q_sample(const FeatureTensor<T>& x0, int n, const FeatureTensor<T>& noise,
                          const NoiseSchedule& schedule) {
  detail::check_same_shape(x0, noise, "q_sample");
  if (n < 1 || n > schedule.n_steps) throw std::out_of_range("diffusion step out of range");
  const T a = static_cast<T>(std::sqrt(schedule.alpha_bar_at(n)));
  const T b = static_cast<T>(std::sqrt(1.0 - schedule.alpha_bar_at(n)));
  FeatureTensor<T> out(x0.k);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = a * x0.data[i] + b * noise.data[i];
  return out;
}

// Classifier-free guidance blend: (1 + w) eps_cond - w eps_uncond.
template <typename T>
FeatureTensor<T> cfg_epsilon(const FeatureTensor<T>& eps_cond, const FeatureTensor<T>& eps_uncond,
                             double w) {
  detail::check_same_shape(eps_cond, eps_uncond, "cfg_epsilon");
  FeatureTensor<T> out(eps_cond.k);
  const T wc = static_cast<T>(1.0 + w), wu = static_cast<T>(w);
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = wc * eps_cond.data[i] - wu * eps_uncond.data[i];
  return out;
}

// One ancestral (DDPM) reverse step. The posterior mean uses the guided noise
// estimate; fresh noise scaled by sqrt(beta_tilde) is added except at n = 1,
// which returns the mean exactly.
template <typename T>
FeatureTensor<T> ddpm_step(const FeatureTensor<T>& x_n, int n, const FeatureTensor<T>& eps_guided,
                           const NoiseSchedule& schedule, Rng& rng) {
  detail::check_same_shape(x_n, eps_guided, "ddpm_step");
  if (n < 1 || n > schedule.n_steps) throw std::out_of_range("diffusion step out of range");
  const double alpha = schedule.alpha_at(n);
  const T inv_sqrt_alpha = static_cast<T>(1.0 / std::sqrt(alpha));
  const T eps_coef = static_cast<T>((1.0 - alpha) / std::sqrt(1.0 - schedule.alpha_bar_at(n)));
  const T sigma = n > 1 ? static_cast<T>(std::sqrt(schedule.beta_tilde_at(n))) : T(0);

  FeatureTensor<T> out(x_n.k);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    const T mu = inv_sqrt_alpha * (x_n.data[i] - eps_coef * eps_guided.data[i]);
    out.data[i] = n > 1 ? mu + sigma * static_cast<T>(rng.normal()) : mu;
  }
  return out;
}

// One deterministic DDIM step from n to n_prev (n_prev may be 0, which lands
// on the clean estimate exactly).
template <typename T>
FeatureTensor<T> ddim_step(const FeatureTensor<T>& x_n, int n, int n_prev,
                           const FeatureTensor<T>& eps_guided, const NoiseSchedule& schedule) {
  detail::check_same_shape(x_n, eps_guided, "ddim_step");
  if (n < 1 || n > schedule.n_steps) throw std::out_of_range("diffusion step out of range");
  if (n_prev >= n || n_prev < 0) throw std::invalid_argument("ddim_step requires 0 <= n_prev < n");
  const double abar = schedule.alpha_bar_at(n);
  const double abar_prev = schedule.alpha_bar_at(n_prev);
  const T x0_coef = static_cast<T>(1.0 / std::sqrt(abar));
  const T eps_in_coef = static_cast<T>(std::sqrt(1.0 - abar));
  const T sig_coef = static_cast<T>(std::sqrt(abar_prev));
  const T eps_out_coef = static_cast<T>(std::sqrt(1.0 - abar_prev));

  FeatureTensor<T> out(x_n.k);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    const T x0_hat = x0_coef * (x_n.data[i] - eps_in_coef * eps_guided.data[i]);
    out.data[i] = sig_coef * x0_hat + eps_out_coef * eps_guided.data[i];
  }
  return out;
}

// Descending inference grid for DDIM: `steps` timesteps spread uniformly over
// [1, N], duplicates removed. The trajectory visits each entry and finishes
// with a step to 0.
inline std::vector<int> ddim_timesteps(int n_steps, int steps) {
  if (steps < 1) throw config_error("ddim step count must be positive");
  std::vector<int> grid;
  for (int i = steps - 1; i >= 0; --i) {
    const double t = steps == 1 ? 1.0 : static_cast<double>(i) / (steps - 1);
    const int n = 1 + static_cast<int>(std::lround(t * (n_steps - 1)));
    if (grid.empty() || grid.back() != n) grid.push_back(n);
  }
  return grid;
}

namespace detail {

// Imposes the observation on the state at noise level n: masked voxels are
// overwritten with q_sample of the observed values (n >= 1), or the observed
// values themselves at n = 0.
template <typename T>
void impose_observation(FeatureTensor<T>& x, const Condition<T>& cond, int n,
                        const NoiseSchedule& schedule, Rng& rng) {
  if (cond.mask.count() == 0) return;
  T a = T(1), b = T(0);
  if (n >= 1) {
    a = static_cast<T>(std::sqrt(schedule.alpha_bar_at(n)));
    b = static_cast<T>(std::sqrt(1.0 - schedule.alpha_bar_at(n)));
  }
  const std::size_t cells = cond.mask.bits.size();
  for (std::size_t i = 0; i < cells; ++i) {
    if (!cond.mask.bits[i]) continue;
    for (int c = 0; c < 3; ++c) {
      const std::size_t j = i * 3 + c;
      x.data[j] = n >= 1 ? a * cond.observed.data[j] + b * static_cast<T>(rng.normal())
                         : cond.observed.data[j];
    }
  }
}

}  // namespace detail

// Draws M reverse-diffusion trajectories from N(0, I), conditioned on the
// observation. The denoiser is queried in lockstep over all trajectories:
//   denoiser.predict(states, n, condition) -> per-trajectory noise estimates
// With replacement conditioning on (the default), observed voxels are
// re-imposed at the matching noise level after every step, so finished
// samples agree with the observation exactly.
//
// Trajectory m draws all its noise from a stream derived from (seed, m);
// results do not depend on how predict() batches internally.
template <typename T, typename DenoiserT>
SampleBatch<T> sample_conditional(const DenoiserT& denoiser, const NoiseSchedule& schedule,
                                  const Condition<T>& condition, int m_samples, double w,
                                  const SamplerKind& sampler, std::uint64_t seed,
                                  bool replacement = true) {
  if (m_samples < 1) throw config_error("sample count M must be at least 1");
  const int k = condition.observed.k;
  if (k < 1) throw config_error("condition has no resolution");

  SampleBatch<T> batch;
  batch.seed = seed;
  batch.guidance_w = w;
  batch.sampler = sampler;
  batch.samples.resize(m_samples, FeatureTensor<T>(k));

  std::vector<Rng> rngs;
  rngs.reserve(m_samples);
  for (int m = 0; m < m_samples; ++m)
    rngs.push_back(Rng::derive(seed, {0x7Aull, static_cast<std::uint64_t>(m)}));

  for (int m = 0; m < m_samples; ++m) {
    auto& x = batch.samples[m];
    for (auto& v : x.data) v = static_cast<T>(rngs[m].normal());
    if (replacement)
      detail::impose_observation(x, condition, schedule.n_steps, schedule, rngs[m]);
  }

  // (n, n_prev) pairs shared by every trajectory
  std::vector<std::pair<int, int>> steps;
  if (sampler.kind == SamplerKind::Kind::Ddpm) {
    for (int n = schedule.n_steps; n >= 1; --n) steps.emplace_back(n, n - 1);
  } else {
    const std::vector<int> grid = ddim_timesteps(schedule.n_steps, sampler.ddim_steps);
    for (std::size_t i = 0; i < grid.size(); ++i)
      steps.emplace_back(grid[i], i + 1 < grid.size() ? grid[i + 1] : 0);
  }

  const Condition<T> null_cond = Condition<T>::null_condition(k);
  const bool use_cfg = w != 0.0 && !condition.null_flag;
  std::vector<FeatureTensor<T>> eps_cond, eps_uncond;

  for (const auto& [n, n_prev] : steps) {
    denoiser.predict(batch.samples, n, condition, eps_cond);
    if (use_cfg) denoiser.predict(batch.samples, n, null_cond, eps_uncond);
    for (int m = 0; m < m_samples; ++m) {
      const FeatureTensor<T> eps =
          use_cfg ? cfg_epsilon(eps_cond[m], eps_uncond[m], w) : std::move(eps_cond[m]);
      if (sampler.kind == SamplerKind::Kind::Ddpm)
        batch.samples[m] = ddpm_step(batch.samples[m], n, eps, schedule, rngs[m]);
      else
        batch.samples[m] = ddim_step(batch.samples[m], n, n_prev, eps, schedule);
      if (replacement) detail::impose_observation(batch.samples[m], condition, n_prev, schedule, rngs[m]);
    }
  }

  for (const auto& s : batch.samples)
    for (T v : s.data)
      if (!std::isfinite(static_cast<double>(v)))
        throw numeric_error("sampler produced a non-finite value");
  return batch;
}

}  // namespace voxcut
