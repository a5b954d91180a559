#include "scrub/pipeline.hpp"

#include "scrub/archive.hpp"
#include "scrub/schedule.hpp"

namespace scrub {

Tensor blend_latents(const Tensor& z, const Tensor& x_noised, const MaskTensor& mask_latent) {
  if (!z.same_shape(x_noised)) throw ShapeError("blend inputs have mismatched shapes");
  if (z.rank() != 3 || mask_latent.rank() != 2 || mask_latent.extent(0) != z.extent(1) ||
      mask_latent.extent(1) != z.extent(2)) {
    throw ShapeError("blend mask must be H x W at the latent resolution");
  }
  check_binary(mask_latent);
  Tensor out = x_noised;
  const std::size_t plane = mask_latent.numel();
  for (std::size_t c = 0; c < z.extent(0); ++c) {
    for (std::size_t p = 0; p < plane; ++p) {
      if (mask_latent[p]) out[c * plane + p] = z[c * plane + p];
    }
  }
  return out;
}

RemovalMask removal_mask_for(const Checkpoint& ckpt, const MaskTensor& base) {
  const auto res = ckpt.net->config().mask_resolutions();
  return RemovalMask::build(base, res);
}

namespace {

void check_io(const Checkpoint& ckpt, const Tensor& image, const RemovalMask& mask) {
  const DenoiserConfig& cfg = ckpt.net->config();
  const auto hw = static_cast<std::size_t>(cfg.image_size);
  if (image.shape() != Shape{static_cast<std::size_t>(cfg.in_channels), hw, hw}) {
    throw ShapeError("image shape " + shape_to_string(image.shape()) +
                     " does not match the checkpoint (" + std::to_string(cfg.in_channels) + "x" +
                     std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size) + ")");
  }
  if (mask.base.shape() != Shape{hw, hw}) {
    throw ShapeError("mask resolution does not match the checkpoint");
  }
}

void retain(RunTrace& trace, const RemovalConfig& cfg, PredictResult<float>&& pr,
            const Tensor& z, int t) {
  if (!cfg.record_trace) return;
  for (auto& rec : pr.records) trace.records.push_back(std::move(rec));
  trace.latents.push_back(z);
  trace.timesteps.push_back(t);
}

}  // namespace

RemovalResult sip_remove(const Checkpoint& ckpt, const Tensor& image, const RemovalMask& mask,
                         const RemovalConfig& cfg) {
  cfg.validate();
  if (cfg.pipeline != PipelineKind::Sip) throw ConfigError("config is not for the sip pipeline");
  check_io(ckpt, image, mask);

  const Codec codec;
  const NoiseSchedule sched = ckpt.schedule(cfg.steps);
  const GuidanceConfig gcfg = cfg.guidance();
  Rng rng(cfg.seed);

  const Tensor x0 = codec.encode(image);
  Tensor eps0 = rng.normal_tensor<float>(x0.shape());
  Tensor z = add_noise(sched, x0, sched.step_at(cfg.steps), eps0);

  RemovalResult out;
  for (int i = cfg.steps; i >= 1; --i) {
    const int t = sched.step_at(i);
    const int t_prev = sched.step_at(i - 1);
    PredictResult<float> pr =
        guided_predict(*ckpt.net, z, t, i, mask, gcfg, cfg.record_trace);
    z = ddim_step(sched, z, pr.eps, t, t_prev);
    Tensor step_noise = rng.normal_tensor<float>(x0.shape());
    Tensor x_prev = add_noise(sched, x0, t_prev, step_noise);
    z = blend_latents(z, x_prev, mask.base);
    retain(out.trace, cfg, std::move(pr), z, t_prev);
  }
  out.image = codec.decode(z);
  return out;
}

RemovalResult dip_remove(const Checkpoint& ckpt, const Tensor& image, const RemovalMask& mask,
                         const RemovalConfig& cfg) {
  cfg.validate();
  if (cfg.pipeline != PipelineKind::Dip) throw ConfigError("config is not for the dip pipeline");
  check_io(ckpt, image, mask);

  const Codec codec;
  const NoiseSchedule sched = ckpt.schedule(cfg.steps);
  const GuidanceConfig gcfg = cfg.guidance();

  const Tensor x0 = codec.encode(image);
  EpsFn<float> eps_fn = [&](const Tensor& x, int t) {
    return ckpt.net->predict(x, t, AttentionMode::standard(), nullptr).eps;
  };
  const std::vector<Tensor> trajectory = ddim_invert(sched, x0, eps_fn);

  Tensor z = trajectory.back();
  RemovalResult out;
  for (int i = cfg.steps; i >= 1; --i) {
    const int t = sched.step_at(i);
    const int t_prev = sched.step_at(i - 1);
    PredictResult<float> pr =
        guided_predict(*ckpt.net, z, t, i, mask, gcfg, cfg.record_trace);
    z = ddim_step(sched, z, pr.eps, t, t_prev);
    const Tensor& x_prev = (i == 1) ? x0 : trajectory[static_cast<std::size_t>(i - 2)];
    z = blend_latents(z, x_prev, mask.base);
    retain(out.trace, cfg, std::move(pr), z, t_prev);
  }
  out.image = codec.decode(z);
  return out;
}

void write_trace(const RunTrace& trace, const RemovalMask& mask, const RemovalConfig& cfg,
                 const std::filesystem::path& path) {
  TensorArchive arc;
  arc.set_meta("kind", "trace");
  arc.set_meta("pipeline", pipeline_name(cfg.pipeline));
  arc.set_meta("steps", std::to_string(cfg.steps));
  arc.set_meta("ss_cutoff", std::to_string(cfg.ss_cutoff));
  arc.set_meta("s", std::to_string(cfg.guidance_scale));
  arc.set_meta("lambda", std::to_string(cfg.lambda));
  arc.set_meta("seed", std::to_string(cfg.seed));
  arc.set_meta("record_count", std::to_string(trace.records.size()));
  arc.set_meta("latent_count", std::to_string(trace.latents.size()));

  arc.add("mask.base", mask.base);
  for (const auto& [res, flat] : mask.per_resolution) {
    arc.add("mask.n" + std::to_string(res), flat);
  }
  for (std::size_t i = 0; i < trace.records.size(); ++i) {
    const auto& rec = trace.records[i];
    const std::string key = "rec." + std::to_string(i);
    arc.set_meta(key + ".layer", rec.layer_id);
    arc.set_meta(key + ".timestep", std::to_string(rec.timestep));
    arc.set_meta(key + ".kind", attention_kind_name(rec.kind));
    arc.add(key + ".similarity", rec.similarity);
    arc.add(key + ".attention", rec.attention);
    arc.add(key + ".output", rec.output);
  }
  for (std::size_t i = 0; i < trace.latents.size(); ++i) {
    arc.add("latent." + std::to_string(i), trace.latents[i]);
    arc.set_meta("latent." + std::to_string(i) + ".timestep",
                 std::to_string(trace.timesteps[i]));
  }
  arc.write(path);
}

LoadedTrace read_trace(const std::filesystem::path& path) {
  TensorArchive arc = TensorArchive::read(path);
  if (arc.meta_or("kind", "") != "trace") {
    throw ArchiveError("'" + path.string() + "' is not a trace archive");
  }
  LoadedTrace out;
  out.mask_base = arc.get_u8("mask.base");
  for (const std::string& name : arc.names()) {
    if (name.rfind("mask.n", 0) == 0) {
      out.mask_flat[std::stoi(name.substr(6))] = arc.get_u8(name);
    }
  }
  const auto records = std::stoul(arc.meta_or("record_count", "0"));
  for (std::size_t i = 0; i < records; ++i) {
    const std::string key = "rec." + std::to_string(i);
    AttentionRecord<float> rec;
    rec.layer_id = arc.meta_or(key + ".layer", "");
    rec.timestep = std::stoi(arc.meta_or(key + ".timestep", "0"));
    const std::string kind = arc.meta_or(key + ".kind", "standard");
    if (kind == "standard") rec.kind = AttentionKind::Standard;
    else if (kind == "masked") rec.kind = AttentionKind::Masked;
    else if (kind == "tempered_obj") rec.kind = AttentionKind::TemperedObj;
    else if (kind == "tempered_bg") rec.kind = AttentionKind::TemperedBg;
    else throw ArchiveError("trace record " + std::to_string(i) + " has unknown kind");
    rec.similarity = arc.get_f32(key + ".similarity");
    rec.attention = arc.get_f32(key + ".attention");
    rec.output = arc.get_f32(key + ".output");
    out.trace.records.push_back(std::move(rec));
  }
  const auto latents = std::stoul(arc.meta_or("latent_count", "0"));
  for (std::size_t i = 0; i < latents; ++i) {
    out.trace.latents.push_back(arc.get_f32("latent." + std::to_string(i)));
    out.trace.timesteps.push_back(
        std::stoi(arc.meta_or("latent." + std::to_string(i) + ".timestep", "0")));
  }
  return out;
}

}  // namespace scrub
