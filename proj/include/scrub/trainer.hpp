#pragma once

// Noise-prediction training loop and checkpoint serialization. The optimizer
// is a momentum-free adaptive step: per weight, a running mean square of the
// gradient (decay 0.99) rescales a plain gradient step
//   ms <- 0.99 ms + 0.01 g^2;  w <- w - lr * g / (sqrt(ms) + 1e-8).
// All sampling comes from the caller's stream in a fixed order, and gradient
// accumulation order over a batch is fixed, so equal seeds give bit-equal
// weights.

#include <atomic>
#include <cmath>
#include <filesystem>
#include <functional>
#include <memory>
#include <thread>
#include <vector>

#include "scrub/archive.hpp"
#include "scrub/denoiser.hpp"
#include "scrub/schedule.hpp"

namespace scrub {

struct TrainOptions {
  int steps = 1000;
  int batch = 4;
  double lr = 2e-4;
  int log_every = 50;
  int jobs = 1;  // threads for per-item gradient evaluation; result is job-count independent
  std::function<void(int step, double loss)> on_log;
  // When training diverges the last finite-loss weights are written here
  // before TrainingError is thrown (if set).
  std::filesystem::path rescue_path;
};

namespace dn {

template <class S>
void adaptive_step(Registry<S>& registry, double lr, double batch_scale) {
  constexpr double kDecay = 0.99;
  constexpr double kEps = 1e-8;
  for (Param<S>* prm : registry) {
    for (std::size_t i = 0; i < prm->value.numel(); ++i) {
      const double g = static_cast<double>(prm->grad[i]) * batch_scale;
      const double ms = kDecay * static_cast<double>(prm->ms[i]) + (1.0 - kDecay) * g * g;
      prm->ms[i] = static_cast<S>(ms);
      prm->value[i] = static_cast<S>(static_cast<double>(prm->value[i]) -
                                     lr * g / (std::sqrt(ms) + kEps));
    }
  }
}

}  // namespace dn

/// Minimize the expected squared error between injected and predicted noise
/// with (image, t ~ Uniform(1, T), eps ~ N(0, I)) samples. Returns the loss
/// logged every `log_every` steps plus the final step. Throws TrainingError
/// on divergence with the last finite-loss weights restored.
template <class S>
std::vector<double> train(Denoiser<S>& net, const std::vector<TensorT<S>>& dataset,
                          const NoiseSchedule& sched, Rng& rng, const TrainOptions& opts) {
  if (dataset.empty()) throw ConfigError("training needs a non-empty dataset");
  if (opts.steps < 0 || opts.batch < 1) throw ConfigError("bad training options");

  struct Sample {
    std::size_t image;
    int t;
    TensorT<S> eps;
  };

  std::vector<double> history;
  std::vector<TensorT<S>> last_good;  // aligned with the registry order
  auto snapshot = [&]() {
    last_good.clear();
    for (const auto* prm : net.params()) last_good.push_back(prm->value);
  };
  auto restore = [&]() {
    for (std::size_t i = 0; i < net.params().size(); ++i) {
      net.params()[i]->value = last_good[i];
    }
    net.after_weight_update();
  };
  snapshot();

  const int jobs = std::max(1, opts.jobs);
  double running = 0.0;
  int running_n = 0;

  for (int step = 1; step <= opts.steps; ++step) {
    std::vector<Sample> batch;
    batch.reserve(static_cast<std::size_t>(opts.batch));
    for (int b = 0; b < opts.batch; ++b) {
      Sample s;
      s.image = rng.uniform_index(dataset.size());
      s.t = static_cast<int>(rng.uniform_int(1, sched.total_steps));
      s.eps = rng.normal_tensor<S>(dataset[0].shape());
      batch.push_back(std::move(s));
    }

    net.zero_grad();
    double loss_sum = 0.0;
    bool blew_up = false;

    // Exploding weights can surface as exceptions (non-finite attention
    // rows) before the loss itself turns NaN; both count as divergence.
    try {
      if (jobs == 1 || opts.batch == 1) {
        for (const Sample& s : batch) {
          DenoiserStash<S> ws;
          TensorT<S> x_t = add_noise(sched, dataset[s.image], s.t, s.eps);
          TensorT<S> pred = net.forward_training(x_t, s.t, ws);
          TensorT<S> dloss;
          loss_sum += Denoiser<S>::mse_loss(pred, s.eps, &dloss);
          net.backward_training(dloss, ws);
        }
      } else {
        // Per-item losses and stashes in parallel, gradients accumulated in
        // batch order afterwards so results do not depend on the job count.
        std::vector<DenoiserStash<S>> stashes(batch.size());
        std::vector<TensorT<S>> dlosses(batch.size());
        std::vector<double> losses(batch.size());
        std::vector<std::exception_ptr> errors(batch.size());
        std::atomic<std::size_t> next{0};
        auto worker = [&]() {
          while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= batch.size()) break;
            try {
              const Sample& s = batch[i];
              TensorT<S> x_t = add_noise(sched, dataset[s.image], s.t, s.eps);
              TensorT<S> pred = net.forward_training(x_t, s.t, stashes[i]);
              losses[i] = Denoiser<S>::mse_loss(pred, s.eps, &dlosses[i]);
            } catch (...) {
              errors[i] = std::current_exception();
            }
          }
        };
        std::vector<std::thread> pool;
        for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
        for (const auto& err : errors) {
          if (err) std::rethrow_exception(err);
        }
        for (std::size_t i = 0; i < batch.size(); ++i) {
          loss_sum += losses[i];
          net.backward_training(dlosses[i], stashes[i]);
        }
      }
    } catch (const Error&) {
      blew_up = true;
    }

    const double loss = loss_sum / opts.batch;
    if (blew_up || !std::isfinite(loss)) {
      restore();
      if (!opts.rescue_path.empty()) {
        TensorArchive arc;
        arc.set_meta("kind", "rescue-weights");
        for (const auto* prm : net.params()) {
          arc.add(prm->name, prm->value.template cast<float>());
        }
        arc.write(opts.rescue_path);
      }
      throw TrainingError("loss diverged at step " + std::to_string(step) +
                          "; last finite-loss weights restored");
    }

    dn::adaptive_step(net.params(), opts.lr, 1.0 / opts.batch);
    net.after_weight_update();

    running += loss;
    ++running_n;
    if (step % std::max(1, opts.log_every) == 0 || step == opts.steps) {
      const double mean = running / running_n;
      history.push_back(mean);
      if (opts.on_log) opts.on_log(step, mean);
      running = 0.0;
      running_n = 0;
      snapshot();
    }
  }
  return history;
}

/// A float denoiser plus the schedule parameters it was trained against.
struct Checkpoint {
  std::shared_ptr<Denoiser<float>> net;
  int schedule_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  int default_inference_steps = 50;

  NoiseSchedule schedule(int inference_steps) const {
    return make_schedule(schedule_steps, beta_start, beta_end, inference_steps);
  }
};

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const DenoiserConfig& cfg = ckpt.net->config();
  TensorArchive arc;
  arc.set_meta("kind", "checkpoint");
  arc.set_meta("ckpt_version", "1");
  arc.set_meta("image_size", std::to_string(cfg.image_size));
  arc.set_meta("in_channels", std::to_string(cfg.in_channels));
  arc.set_meta("base_width", std::to_string(cfg.base_width));
  std::string mult;
  for (int m : cfg.channel_mult) mult += (mult.empty() ? "" : ",") + std::to_string(m);
  arc.set_meta("channel_mult", mult);
  std::string attn;
  for (int r : cfg.attention_resolutions) attn += (attn.empty() ? "" : ",") + std::to_string(r);
  arc.set_meta("attention_resolutions", attn);
  arc.set_meta("heads", std::to_string(cfg.heads));
  arc.set_meta("masked_encoder_attention", cfg.masked_encoder_attention ? "1" : "0");
  arc.set_meta("schedule_steps", std::to_string(ckpt.schedule_steps));
  arc.set_meta("beta_start", std::to_string(ckpt.beta_start));
  arc.set_meta("beta_end", std::to_string(ckpt.beta_end));
  arc.set_meta("default_inference_steps", std::to_string(ckpt.default_inference_steps));
  for (const auto* prm : ckpt.net->params()) arc.add(prm->name, prm->value);
  arc.write(path);
}

inline std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t comma = text.find(',', pos);
    out.push_back(std::stoi(text.substr(pos, comma - pos)));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  TensorArchive arc = TensorArchive::read(path);
  if (arc.meta_or("kind", "") != "checkpoint") {
    throw ArchiveError("'" + path.string() + "' is not a checkpoint archive");
  }
  if (arc.meta_or("ckpt_version", "") != "1") {
    throw VersionError("unsupported checkpoint version '" + arc.meta_or("ckpt_version", "?") + "'");
  }
  DenoiserConfig cfg;
  cfg.image_size = std::stoi(arc.meta_or("image_size", "64"));
  cfg.in_channels = std::stoi(arc.meta_or("in_channels", "3"));
  cfg.base_width = std::stoi(arc.meta_or("base_width", "16"));
  cfg.channel_mult = parse_int_list(arc.meta_or("channel_mult", "1,2,4,6"));
  cfg.attention_resolutions = parse_int_list(arc.meta_or("attention_resolutions", "16,8"));
  cfg.heads = std::stoi(arc.meta_or("heads", "1"));
  cfg.masked_encoder_attention = arc.meta_or("masked_encoder_attention", "0") == "1";

  Checkpoint ckpt;
  ckpt.net = std::make_shared<Denoiser<float>>(cfg, Rng(0));
  ckpt.schedule_steps = std::stoi(arc.meta_or("schedule_steps", "1000"));
  ckpt.beta_start = std::stod(arc.meta_or("beta_start", "0.0001"));
  ckpt.beta_end = std::stod(arc.meta_or("beta_end", "0.02"));
  ckpt.default_inference_steps = std::stoi(arc.meta_or("default_inference_steps", "50"));
  for (auto* prm : ckpt.net->params()) {
    Tensor loaded = arc.get_f32(prm->name);
    if (loaded.shape() != prm->value.shape()) {
      throw ArchiveError("checkpoint tensor '" + prm->name + "' has shape " +
                         shape_to_string(loaded.shape()) + ", expected " +
                         shape_to_string(prm->value.shape()));
    }
    prm->value = std::move(loaded);
  }
  ckpt.net->after_weight_update();
  return ckpt;
}

}  // namespace scrub
