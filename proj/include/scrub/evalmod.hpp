#pragma once

// Removal quality against exact synthetic ground truth. These are
// pixel-space oracle metrics: fill error against the known background,
// removal strength as distance from the original composite, and a background
// drift bound that checks the blending guarantee.

#include <span>
#include <string>
#include <vector>

#include "scrub/datagen.hpp"
#include "scrub/pipeline.hpp"
#include "scrub/tensor.hpp"

namespace scrub {

/// Mean squared error over mask==1 pixels, all channels.
double masked_mse(const Tensor& result, const Tensor& reference, const MaskTensor& mask);

/// Max absolute difference over mask==0 pixels.
double background_drift(const Tensor& result, const Tensor& input, const MaskTensor& mask);

struct EvalRow {
  RemovalConfig cfg;
  std::size_t scenes = 0;
  double fill_mse_mean = 0, fill_mse_sd = 0;    // vs ground-truth background
  double strength_mean = 0, strength_sd = 0;    // vs original composite
  double drift_max = 0;
};

struct RemovalReport {
  std::vector<EvalRow> rows;
  /// Per-scene fill errors aligned with rows; kept for paired comparisons.
  std::vector<std::vector<double>> per_scene_fill;
  std::vector<std::vector<double>> per_scene_strength;

  std::string text() const;
  std::string csv() const;
};

/// Run every config over the corpus and aggregate. Scene runs execute in
/// parallel across `jobs` threads with per-scene streams forked from the
/// config seed, so results are independent of the job count.
RemovalReport removal_report(const std::vector<Scene>& corpus, const Checkpoint& ckpt,
                             std::span<const RemovalConfig> configs, int jobs = 1);

}  // namespace scrub
