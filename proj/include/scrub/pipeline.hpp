#pragma once

// End-to-end object removal.
//
// The stochastic pipeline noises the input to the deepest inference step and
// denoises with guidance, re-noising the original with fresh seeded noise
// each step and blending it back outside the mask. The deterministic
// pipeline recovers the noisy trajectory by inversion first and blends
// against the stored trajectory instead, so repeated runs are bit-identical.
//
// The codec is the boundary that would hold a learned autoencoder; at desk
// scale it is the identity and diffusion runs directly in [0,1] pixel space.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "scrub/attention.hpp"
#include "scrub/errors.hpp"
#include "scrub/guidance.hpp"
#include "scrub/tensor.hpp"
#include "scrub/trainer.hpp"

namespace scrub {

enum class PipelineKind : std::uint8_t { Sip, Dip };

inline const char* pipeline_name(PipelineKind k) { return k == PipelineKind::Sip ? "sip" : "dip"; }
inline PipelineKind pipeline_from_name(const std::string& name) {
  if (name == "sip") return PipelineKind::Sip;
  if (name == "dip") return PipelineKind::Dip;
  throw ConfigError("unknown pipeline '" + name + "'");
}

struct RemovalConfig {
  PipelineKind pipeline = PipelineKind::Sip;
  int steps = 40;               // inference steps
  int ss_cutoff = 30;           // last step (counting down) with tempered attention
  double guidance_scale = 9.0;  // s
  double lambda = 0.3;
  std::uint64_t seed = 123;
  bool record_trace = false;

  void validate() const {
    if (steps < 1) throw ConfigError("steps must be positive");
    guidance().validate();
  }

  GuidanceConfig guidance() const { return {guidance_scale, lambda, steps, ss_cutoff}; }

  static RemovalConfig sip_defaults() { return {PipelineKind::Sip, 40, 30, 9.0, 0.3, 123, false}; }
  static RemovalConfig dip_defaults() { return {PipelineKind::Dip, 50, 40, 9.0, 0.3, 123, false}; }
  static RemovalConfig defaults_for(PipelineKind kind) {
    return kind == PipelineKind::Sip ? sip_defaults() : dip_defaults();
  }
};

/// Encode/decode boundary. Identity keeps pixels bit-exact both ways.
struct Codec {
  enum class Kind : std::uint8_t { Identity } kind = Kind::Identity;

  Tensor encode(const Tensor& image) const { return image; }
  Tensor decode(const Tensor& latent) const { return latent; }
};

/// Elementwise select: generated content where the mask is set, the supplied
/// (re-noised) original elsewhere. No arithmetic, so the unmasked region is
/// bit-exact.
Tensor blend_latents(const Tensor& z, const Tensor& x_noised, const MaskTensor& mask_latent);

struct RunTrace {
  std::vector<AttentionRecord<float>> records;
  std::vector<Tensor> latents;  // z after each step, deepest first
  std::vector<int> timesteps;   // train timestep per retained latent
};

struct RemovalResult {
  Tensor image;  // {C, H, W} in [0,1]
  RunTrace trace;
};

RemovalResult sip_remove(const Checkpoint& ckpt, const Tensor& image, const RemovalMask& mask,
                         const RemovalConfig& cfg);
RemovalResult dip_remove(const Checkpoint& ckpt, const Tensor& image, const RemovalMask& mask,
                         const RemovalConfig& cfg);

inline RemovalResult remove_object(const Checkpoint& ckpt, const Tensor& image,
                                   const RemovalMask& mask, const RemovalConfig& cfg) {
  return cfg.pipeline == PipelineKind::Sip ? sip_remove(ckpt, image, mask, cfg)
                                           : dip_remove(ckpt, image, mask, cfg);
}

/// Build the removal mask a checkpoint needs from a base H x W mask.
RemovalMask removal_mask_for(const Checkpoint& ckpt, const MaskTensor& base);

void write_trace(const RunTrace& trace, const RemovalMask& mask, const RemovalConfig& cfg,
                 const std::filesystem::path& path);

struct LoadedTrace {
  RunTrace trace;
  MaskTensor mask_base;
  std::map<int, MaskTensor> mask_flat;
};
LoadedTrace read_trace(const std::filesystem::path& path);

}  // namespace scrub
