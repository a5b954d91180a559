#pragma once

// Removal guidance: extrapolate each step's noise prediction from the plain
// branch toward the masked-attention branch,
//   eps_hat = eps_plain + s * (eps_redirected - eps_plain).
// The perturbed branch runs tempered masked attention inside the window
// [ss_cutoff, steps] (inference indices, counting down) and plain masked
// attention below it. Guidance applies at every inference step.

#include "scrub/denoiser.hpp"
#include "scrub/errors.hpp"
#include "scrub/tensor.hpp"

namespace scrub {

struct GuidanceConfig {
  double scale = 9.0;   // 0 disables guidance
  double lambda = 0.3;  // tempering factor inside the window
  int steps = 40;       // total inference steps
  int ss_cutoff = 30;   // last step index (counting down) using the tempered mode

  void validate() const {
    if (scale < 0.0) throw ConfigError("guidance scale must be non-negative");
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
    if (!(1 <= ss_cutoff && ss_cutoff <= steps)) {
      throw ConfigError("tempering cutoff must lie in [1, steps]");
    }
  }
};

template <class S>
TensorT<S> guided_epsilon(const TensorT<S>& eps_plain, const TensorT<S>& eps_redirected,
                          double scale) {
  if (!eps_plain.same_shape(eps_redirected)) {
    throw ShapeError("guidance branches have mismatched shapes");
  }
  if (scale < 0.0) throw ConfigError("guidance scale must be non-negative");
  // The endpoints collapse exactly; elsewhere the update is evaluated in its
  // literal form.
  if (scale == 0.0) return eps_plain;
  if (scale == 1.0) return eps_redirected;
  const S s = static_cast<S>(scale);
  TensorT<S> out = eps_plain;
  for (std::size_t i = 0; i < out.numel(); ++i) {
    out[i] = eps_plain[i] + s * (eps_redirected[i] - eps_plain[i]);
  }
  return out;
}

/// Mode of the perturbed branch at 1-based inference index `step_index`
/// (steps count down from cfg.steps to 1).
inline AttentionMode perturbed_mode_for_step(const GuidanceConfig& cfg, int step_index) {
  if (step_index >= cfg.ss_cutoff && step_index <= cfg.steps) {
    return AttentionMode::tempered(cfg.lambda);
  }
  return AttentionMode::masked();
}

/// Two predictions combined per the guidance rule. scale == 0 short-circuits
/// to the single standard prediction.
template <class S>
PredictResult<S> guided_predict(const Denoiser<S>& net, const TensorT<S>& z_t, int t,
                                int step_index, const RemovalMask& mask,
                                const GuidanceConfig& cfg, bool record = false) {
  cfg.validate();
  if (cfg.scale == 0.0) {
    return net.predict(z_t, t, AttentionMode::standard(), nullptr, record);
  }
  PredictResult<S> plain = net.predict(z_t, t, AttentionMode::standard(), nullptr, record);
  const AttentionMode mode = perturbed_mode_for_step(cfg, step_index);
  PredictResult<S> redirected = net.predict(z_t, t, mode, &mask, record);

  PredictResult<S> out;
  out.eps = guided_epsilon(plain.eps, redirected.eps, cfg.scale);
  if (record) {
    out.records = std::move(plain.records);
    for (auto& rec : redirected.records) out.records.push_back(std::move(rec));
  }
  return out;
}

}  // namespace scrub
