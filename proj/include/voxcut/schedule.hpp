#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "voxcut/errors.hpp"

namespace voxcut {

// Precomputed diffusion tables, index n-1 holds the value for step n in
// [1, N]. All entries are double so derived quantities stay exact to closed
// form.
struct NoiseSchedule {
  int n_steps = 0;
  std::vector<double> beta;
  std::vector<double> alpha;       // 1 - beta_n
  std::vector<double> alpha_bar;   // prod_{s<=n} alpha_s
  std::vector<double> beta_tilde;  // beta_n (1 - abar_{n-1}) / (1 - abar_n)

  double beta_at(int n) const { return beta.at(n - 1); }
  double alpha_at(int n) const { return alpha.at(n - 1); }
  // abar_0 = 1 by convention, so a step to n = 0 denoises completely
  double alpha_bar_at(int n) const { return n == 0 ? 1.0 : alpha_bar.at(n - 1); }
  double beta_tilde_at(int n) const { return beta_tilde.at(n - 1); }
};

// Linear beta schedule between beta_start and beta_end over n_steps steps.
inline NoiseSchedule make_schedule(int n_steps, double beta_start, double beta_end) {
  if (n_steps < 1) throw config_error("diffusion step count must be at least 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw config_error("beta range must satisfy 0 < beta_start <= beta_end < 1");

  NoiseSchedule s;
  s.n_steps = n_steps;
  s.beta.resize(n_steps);
  s.alpha.resize(n_steps);
  s.alpha_bar.resize(n_steps);
  s.beta_tilde.resize(n_steps);
  double abar = 1.0;
  for (int i = 0; i < n_steps; ++i) {
    const double t = n_steps == 1 ? 0.0 : static_cast<double>(i) / (n_steps - 1);
    const double abar_prev = abar;
    s.beta[i] = beta_start + (beta_end - beta_start) * t;
    s.alpha[i] = 1.0 - s.beta[i];
    abar *= s.alpha[i];
    s.alpha_bar[i] = abar;
    // the closed form gives 0 at n = 1 (abar_0 = 1); the table stores beta_1
    // there so it stays positive, and sampling never adds noise at step 1
    s.beta_tilde[i] = i == 0 ? s.beta[0] : s.beta[i] * (1.0 - abar_prev) / (1.0 - abar);
  }
  return s;
}

inline NoiseSchedule default_schedule(int n_steps = 1000) {
  return make_schedule(n_steps, 1e-4, 0.02);
}

}  // namespace voxcut
