#pragma once

// Noise schedule, forward noising, deterministic reverse step and inversion.
// Timesteps are 1-based over the training range; step 0 is the data itself
// and alpha_bar(0) is defined as exactly 1 so the terminal update is clean.

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "scrub/errors.hpp"
#include "scrub/tensor.hpp"

namespace scrub {

struct NoiseSchedule {
  int total_steps = 0;  // T
  double beta_start = 0.0;
  double beta_end = 0.0;
  std::vector<double> beta;       // index i holds beta at t = i+1
  std::vector<double> alpha;      // 1 - beta
  std::vector<double> alpha_bar;  // running product of alpha
  std::vector<int> inference_steps;  // strictly decreasing, drawn from 1..T

  double alpha_bar_at(int t) const {
    if (t < 0 || t > total_steps) throw ConfigError("timestep " + std::to_string(t) + " out of range");
    return t == 0 ? 1.0 : alpha_bar[static_cast<std::size_t>(t - 1)];
  }

  int inference_count() const { return static_cast<int>(inference_steps.size()); }

  /// Train timestep for 1-based inference index i; index 0 maps to step 0.
  int step_at(int index) const {
    if (index < 0 || index > inference_count()) {
      throw ConfigError("inference index " + std::to_string(index) + " out of range");
    }
    if (index == 0) return 0;
    return inference_steps[static_cast<std::size_t>(inference_count() - index)];
  }
};

/// Linear beta ramp over T training steps with an evenly spaced subset of
/// inference timesteps.
inline NoiseSchedule make_schedule(int total_steps, double beta_start, double beta_end,
                                   int inference_count) {
  if (total_steps < 1) throw ConfigError("schedule needs at least one step");
  if (!(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0)) {
    throw ConfigError("beta range must satisfy 0 < beta_start <= beta_end < 1");
  }
  if (inference_count < 1 || inference_count > total_steps) {
    throw ConfigError("inference step count must lie in [1, T]");
  }

  NoiseSchedule s;
  s.total_steps = total_steps;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.beta.resize(static_cast<std::size_t>(total_steps));
  s.alpha.resize(s.beta.size());
  s.alpha_bar.resize(s.beta.size());
  double running = 1.0;
  for (int i = 0; i < total_steps; ++i) {
    const double frac = (total_steps == 1) ? 0.0 : static_cast<double>(i) / (total_steps - 1);
    s.beta[i] = beta_start + (beta_end - beta_start) * frac;
    s.alpha[i] = 1.0 - s.beta[i];
    running *= s.alpha[i];
    s.alpha_bar[i] = running;
  }

  s.inference_steps.resize(static_cast<std::size_t>(inference_count));
  for (int i = 1; i <= inference_count; ++i) {
    const auto t = static_cast<int>(
        std::llround(static_cast<double>(i) * total_steps / inference_count));
    s.inference_steps[static_cast<std::size_t>(inference_count - i)] = t;
  }
  return s;
}

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
template <class S>
TensorT<S> add_noise(const NoiseSchedule& sched, const TensorT<S>& x0, int t,
                     const TensorT<S>& eps) {
  if (!x0.same_shape(eps)) throw ShapeError("noise shape does not match data shape");
  const double abar = sched.alpha_bar_at(t);
  return affine_combine(static_cast<S>(std::sqrt(abar)), x0,
                        static_cast<S>(std::sqrt(1.0 - abar)), eps);
}

/// Deterministic reverse update from t to t_prev:
/// z_prev = sqrt(abar_prev) * (z_t - sqrt(1-abar_t) eps) / sqrt(abar_t)
///          + sqrt(1-abar_prev) * eps.
template <class S>
TensorT<S> ddim_step(const NoiseSchedule& sched, const TensorT<S>& z_t, const TensorT<S>& eps_hat,
                     int t, int t_prev) {
  if (!z_t.same_shape(eps_hat)) throw ShapeError("eps_hat shape does not match latent shape");
  if (!(t > t_prev && t_prev >= 0)) {
    throw ConfigError("ddim_step requires t > t_prev >= 0, got t=" + std::to_string(t) +
                      " t_prev=" + std::to_string(t_prev));
  }
  const double abar_t = sched.alpha_bar_at(t);
  const double abar_p = sched.alpha_bar_at(t_prev);
  const double scale = std::sqrt(abar_p / abar_t);
  const double eps_coef = std::sqrt(1.0 - abar_p) - scale * std::sqrt(1.0 - abar_t);
  return affine_combine(static_cast<S>(scale), z_t, static_cast<S>(eps_coef), eps_hat);
}

template <class S>
using EpsFn = std::function<TensorT<S>(const TensorT<S>&, int)>;

/// One inversion step t_prev -> t, the algebraic inverse of ddim_step for a
/// fixed eps.
template <class S>
TensorT<S> ddim_invert_step(const NoiseSchedule& sched, const TensorT<S>& x_prev,
                            const TensorT<S>& eps, int t, int t_prev) {
  const double abar_t = sched.alpha_bar_at(t);
  const double abar_p = sched.alpha_bar_at(t_prev);
  const double scale = std::sqrt(abar_p / abar_t);
  const double eps_coef = std::sqrt(1.0 - abar_p) - scale * std::sqrt(1.0 - abar_t);
  return affine_combine(static_cast<S>(1.0 / scale), x_prev,
                        static_cast<S>(-eps_coef / scale), eps);
}

/// Run the reverse-step recurrence backwards to recover the noisy trajectory
/// of x0 under eps_fn. Entry i-1 of the result holds x at inference index i
/// (timestep sched.step_at(i)); the caller keeps x0 itself for index 0.
///
/// The reverse step reads eps at the state being produced, so each inversion
/// step solves x_t = (x_prev - B eps(x_t, t)) / A, a fixed-point problem.
/// Iterates are seeded with eps evaluated at x_prev, refined `refinements`
/// times, and scored by how exactly the forward step maps them back onto
/// x_prev; the best-scoring iterate wins, so extra refinements never make a
/// step worse even where the iteration stops contracting. For a state-free
/// eps_fn every iterate coincides and the recurrence reduces to its closed
/// form.
template <class S>
std::vector<TensorT<S>> ddim_invert(const NoiseSchedule& sched, const TensorT<S>& x0,
                                    const EpsFn<S>& eps_fn, int refinements = 3) {
  if (refinements < 0) throw ConfigError("refinement count must be non-negative");
  std::vector<TensorT<S>> trajectory;
  trajectory.reserve(static_cast<std::size_t>(sched.inference_count()));
  TensorT<S> x = x0;
  for (int i = 1; i <= sched.inference_count(); ++i) {
    const int t = sched.step_at(i);
    const int t_prev = sched.step_at(i - 1);

    TensorT<S> candidate = ddim_invert_step(sched, x, eps_fn(x, t), t, t_prev);
    TensorT<S> best = candidate;
    S best_residual = std::numeric_limits<S>::max();
    for (int r = 0; r <= refinements; ++r) {
      const TensorT<S> eps = eps_fn(candidate, t);
      const S residual = max_abs_difference(ddim_step(sched, candidate, eps, t, t_prev), x);
      if (residual < best_residual) {
        best_residual = residual;
        best = candidate;
      }
      if (r < refinements) candidate = ddim_invert_step(sched, x, eps, t, t_prev);
    }
    x = std::move(best);
    trajectory.push_back(x);
  }
  return trajectory;
}

}  // namespace scrub
