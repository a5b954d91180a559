#pragma once

// Shared fixtures: tiny trained checkpoints and masks for pipeline-level
// tests.

#include <vector>

#include "scrub/datagen.hpp"
#include "scrub/pipeline.hpp"
#include "scrub/trainer.hpp"

namespace scrub::testsupport {

inline DenoiserConfig tiny_net_config(int image_size = 16) {
  DenoiserConfig cfg;
  cfg.image_size = image_size;
  cfg.in_channels = 3;
  cfg.base_width = 8;
  cfg.channel_mult = {1, 2};
  cfg.attention_resolutions = {image_size / 2};
  return cfg;
}

/// A briefly trained checkpoint over a handful of synthetic scenes; enough
/// structure for pipeline tests without meaningful runtime.
inline Checkpoint tiny_checkpoint(int image_size = 16, int steps = 40) {
  Checkpoint ckpt;
  ckpt.net = std::make_shared<Denoiser<float>>(tiny_net_config(image_size), Rng(1001));
  ckpt.schedule_steps = 200;
  ckpt.beta_start = 1e-4;
  ckpt.beta_end = 0.02;
  ckpt.default_inference_steps = 10;

  SceneSpec spec;
  spec.size = image_size;
  auto scenes = gen_scenes(2024, spec, 0, 6);
  std::vector<Tensor> dataset;
  for (const auto& s : scenes) dataset.push_back(s.composite);

  auto sched = make_schedule(ckpt.schedule_steps, ckpt.beta_start, ckpt.beta_end, 10);
  TrainOptions opts;
  opts.steps = steps;
  opts.batch = 2;
  opts.lr = 1e-3;
  opts.log_every = 20;
  Rng rng(77);
  train(*ckpt.net, dataset, sched, rng, opts);
  return ckpt;
}

inline MaskTensor block_mask(int image_size, int x0, int y0, int x1, int y1) {
  auto m = MaskTensor::zeros({static_cast<std::size_t>(image_size),
                              static_cast<std::size_t>(image_size)});
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) {
      m.at2(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = 1;
    }
  }
  return m;
}

}  // namespace scrub::testsupport
