#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "scrub/denoiser.hpp"
#include "scrub/trainer.hpp"

using namespace scrub;

namespace {

DenoiserConfig micro_config() {
  DenoiserConfig cfg;
  cfg.image_size = 8;
  cfg.in_channels = 1;
  cfg.base_width = 2;
  cfg.channel_mult = {1, 2};
  cfg.attention_resolutions = {4};
  return cfg;
}

DenoiserConfig small_config() {
  DenoiserConfig cfg;
  cfg.image_size = 16;
  cfg.in_channels = 3;
  cfg.base_width = 8;
  cfg.channel_mult = {1, 2};
  cfg.attention_resolutions = {8};
  return cfg;
}

RemovalMask centered_mask(const DenoiserConfig& cfg) {
  auto base = MaskTensor::zeros({static_cast<std::size_t>(cfg.image_size),
                                 static_cast<std::size_t>(cfg.image_size)});
  const auto q = static_cast<std::size_t>(cfg.image_size / 4);
  for (std::size_t y = q; y < 2 * q; ++y) {
    for (std::size_t x = q; x < 2 * q; ++x) base.at2(y, x) = 1;
  }
  const auto res = cfg.mask_resolutions();
  return RemovalMask::build(base, res);
}

}  // namespace

TEST_CASE("config validation catches impossible layouts") {
  DenoiserConfig cfg = micro_config();
  CHECK_NOTHROW(cfg.validate());
  cfg.attention_resolutions = {3};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = micro_config();
  cfg.channel_mult = {};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = micro_config();
  cfg.image_size = 9;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = micro_config();
  cfg.attention_resolutions = {};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("prediction is deterministic and mask rules are enforced") {
  Denoiser<float> net(small_config(), Rng(3));
  Rng rng(5);
  auto z = rng.normal_tensor<float>({3, 16, 16});

  auto a = net.predict(z, 100, AttentionMode::standard(), nullptr);
  auto b = net.predict(z, 100, AttentionMode::standard(), nullptr);
  CHECK(a.eps == b.eps);

  auto mask = centered_mask(net.config());
  CHECK_THROWS_AS(net.predict(z, 100, AttentionMode::masked(), nullptr), ConfigError);
  CHECK_THROWS_AS(net.predict(z, 100, AttentionMode::standard(), &mask), ConfigError);
  CHECK_THROWS_AS(net.predict(rng.normal_tensor<float>({3, 8, 8}), 100,
                              AttentionMode::standard(), nullptr),
                  ShapeError);
}

TEST_CASE("masked mode with an all-background mask matches standard mode") {
  Denoiser<float> net(small_config(), Rng(7));
  Rng rng(11);
  auto z = rng.normal_tensor<float>({3, 16, 16});
  auto zero_mask = RemovalMask::build(MaskTensor::zeros({16, 16}),
                                      net.config().mask_resolutions());
  auto std_out = net.predict(z, 50, AttentionMode::standard(), nullptr);
  auto masked_out = net.predict(z, 50, AttentionMode::masked(), &zero_mask);
  CHECK(max_abs_difference(std_out.eps, masked_out.eps) <= 1e-6f);

  auto tempered_one = net.predict(z, 50, AttentionMode::tempered(1.0), &zero_mask);
  CHECK(masked_out.eps == tempered_one.eps);
}

TEST_CASE("tempered mode at lambda 1 equals masked mode with a real mask") {
  Denoiser<float> net(small_config(), Rng(7));
  Rng rng(13);
  auto z = rng.normal_tensor<float>({3, 16, 16});
  auto mask = centered_mask(net.config());
  auto masked_out = net.predict(z, 400, AttentionMode::masked(), &mask);
  auto tempered_out = net.predict(z, 400, AttentionMode::tempered(1.0), &mask);
  CHECK(masked_out.eps == tempered_out.eps);
}

TEST_CASE("mode changes act only through decoder attention") {
  Denoiser<float> net(small_config(), Rng(9));
  Rng rng(17);
  // A fresh net has zero attention output projections, so give every weight
  // some structure first.
  for (auto* prm : net.params()) {
    for (std::size_t i = 0; i < prm->value.numel(); ++i) {
      prm->value[i] += 0.1f * static_cast<float>(rng.normal());
    }
  }
  net.after_weight_update();
  auto z = rng.normal_tensor<float>({3, 16, 16});
  auto mask = centered_mask(net.config());

  auto std_out = net.predict(z, 200, AttentionMode::standard(), nullptr);
  auto masked_out = net.predict(z, 200, AttentionMode::masked(), &mask);
  CHECK(max_abs_difference(std_out.eps, masked_out.eps) > 0.0f);

  // Zero every decoder attention output projection: the modes collapse.
  for (auto* prm : net.params()) {
    if (prm->name.rfind("dec_n", 0) == 0 &&
        (prm->name.ends_with(".wo") || prm->name.ends_with(".bo"))) {
      std::fill(prm->value.values().begin(), prm->value.values().end(), 0.0f);
    }
  }
  net.after_weight_update();
  auto std2 = net.predict(z, 200, AttentionMode::standard(), nullptr);
  auto masked2 = net.predict(z, 200, AttentionMode::masked(), &mask);
  CHECK(std2.eps == masked2.eps);
}

TEST_CASE("the ablation flag lets encoder attention see the mask") {
  DenoiserConfig cfg = small_config();
  cfg.masked_encoder_attention = true;
  Denoiser<float> net(cfg, Rng(9));
  Rng rng(17);
  for (auto* prm : net.params()) {
    for (std::size_t i = 0; i < prm->value.numel(); ++i) {
      prm->value[i] += 0.1f * static_cast<float>(rng.normal());
    }
  }
  net.after_weight_update();
  auto z = rng.normal_tensor<float>({3, 16, 16});
  auto mask = centered_mask(net.config());

  auto res = net.predict(z, 200, AttentionMode::masked(), &mask, true);
  // Every attention layer now records the masked kind.
  for (const auto& rec : res.records) CHECK(rec.kind == AttentionKind::Masked);

  // Flag off: zeroing decoder attention no longer collapses the modes,
  // because the encoder and bottleneck still dispatch.
  for (auto* prm : net.params()) {
    if (prm->name.rfind("dec_n", 0) == 0 &&
        (prm->name.ends_with(".wo") || prm->name.ends_with(".bo"))) {
      std::fill(prm->value.values().begin(), prm->value.values().end(), 0.0f);
    }
  }
  net.after_weight_update();
  auto std_out = net.predict(z, 200, AttentionMode::standard(), nullptr);
  auto masked_out = net.predict(z, 200, AttentionMode::masked(), &mask);
  CHECK(max_abs_difference(std_out.eps, masked_out.eps) > 0.0f);
}

TEST_CASE("records are emitted per attention layer with decoder modes tagged") {
  Denoiser<float> net(small_config(), Rng(21));
  Rng rng(23);
  auto z = rng.normal_tensor<float>({3, 16, 16});
  auto mask = centered_mask(net.config());

  auto res = net.predict(z, 123, AttentionMode::masked(), &mask, /*record=*/true);
  // Layers: enc_n8, mid_n8, dec_n8 -> one record each.
  REQUIRE(res.records.size() == 3);
  CHECK(res.records[0].kind == AttentionKind::Standard);
  CHECK(res.records[1].kind == AttentionKind::Standard);
  CHECK(res.records[2].kind == AttentionKind::Masked);
  CHECK(res.records[2].layer_id == "dec_n8");
  CHECK(res.records[2].timestep == 123);

  auto res2 = net.predict(z, 123, AttentionMode::tempered(0.3), &mask, true);
  REQUIRE(res2.records.size() == 4);  // tempered decoder layer emits both branches
  CHECK(res2.records[2].kind == AttentionKind::TemperedObj);
  CHECK(res2.records[3].kind == AttentionKind::TemperedBg);

  // Masked columns of the decoder record are exactly zero.
  const auto& flat = mask.at(8);
  const auto& a = res.records[2].attention;
  for (std::size_t i = 0; i < a.extent(0); ++i) {
    for (std::size_t j = 0; j < a.extent(1); ++j) {
      if (flat[j]) CHECK(a.at2(i, j) == 0.0f);
    }
    double sum = 0;
    for (std::size_t j = 0; j < a.extent(1); ++j) sum += a.at2(i, j);
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("analytic gradients match central finite differences") {
  DenoiserConfig cfg = micro_config();
  Denoiser<double> net(cfg, Rng(31));
  CHECK(net.param_count() <= 5000);

  Rng rng(37);
  auto x0 = rng.normal_tensor<double>({1, 8, 8});
  auto eps = rng.normal_tensor<double>({1, 8, 8});
  auto sched = make_schedule(100, 1e-3, 0.02, 10);
  auto x_t = add_noise(sched, x0, 55, eps);

  // Give the zero-initialized tensors structure so their branches carry
  // signal through the gradient check.
  Rng jitter(41);
  for (auto* prm : net.params()) {
    for (std::size_t i = 0; i < prm->value.numel(); ++i) {
      prm->value[i] += 0.05 * jitter.normal();
    }
  }
  net.after_weight_update();

  auto loss_at = [&]() {
    DenoiserStash<double> ws;
    auto pred = net.forward_training(x_t, 55, ws);
    return Denoiser<double>::mse_loss(pred, eps, nullptr);
  };

  net.zero_grad();
  {
    DenoiserStash<double> ws;
    auto pred = net.forward_training(x_t, 55, ws);
    TensorT<double> dloss;
    Denoiser<double>::mse_loss(pred, eps, &dloss);
    net.backward_training(dloss, ws);
  }

  const double h = 1e-5;
  Rng pick(43);
  double worst_rel = 0.0;
  for (auto* prm : net.params()) {
    // Probe up to three entries per parameter tensor.
    const std::size_t probes = std::min<std::size_t>(3, prm->value.numel());
    for (std::size_t k = 0; k < probes; ++k) {
      const std::size_t i = pick.uniform_index(prm->value.numel());
      const double saved = prm->value[i];
      prm->value[i] = saved + h;
      net.after_weight_update();
      const double up = loss_at();
      prm->value[i] = saved - h;
      net.after_weight_update();
      const double dn = loss_at();
      prm->value[i] = saved;
      net.after_weight_update();
      const double numeric = (up - dn) / (2 * h);
      const double analytic = prm->grad[i];
      // The floor keeps one-ulp loss rounding from dominating entries whose
      // true gradient is ~0.
      const double rel = std::abs(numeric - analytic) /
                         std::max({std::abs(numeric), std::abs(analytic), 1e-6});
      if (rel > worst_rel) worst_rel = rel;
      CHECK(rel <= 1e-3);
    }
  }
  MESSAGE("worst relative gradient error: ", worst_rel);
}

TEST_CASE("training reduces the loss on a single image") {
  DenoiserConfig cfg = micro_config();
  Denoiser<float> net(cfg, Rng(51));
  Rng data_rng(53);
  std::vector<Tensor> dataset{data_rng.normal_tensor<float>({1, 8, 8})};
  for (std::size_t i = 0; i < dataset[0].numel(); ++i) {
    dataset[0][i] = 0.5f + 0.4f * std::sin(static_cast<float>(i));
  }
  auto sched = make_schedule(100, 1e-3, 0.02, 10);

  TrainOptions opts;
  opts.steps = 200;
  opts.batch = 4;
  opts.lr = 1e-3;
  opts.log_every = 10;
  Rng train_rng(55);
  auto history = train(net, dataset, sched, train_rng, opts);
  REQUIRE(history.size() >= 2);
  CHECK(history.back() <= 0.5 * history.front());
}

TEST_CASE("zero learning rate leaves weights bit-identical") {
  Denoiser<float> net(micro_config(), Rng(61));
  std::vector<Tensor> before;
  for (const auto* prm : net.params()) before.push_back(prm->value);

  Rng data_rng(63);
  std::vector<Tensor> dataset{data_rng.normal_tensor<float>({1, 8, 8})};
  auto sched = make_schedule(50, 1e-3, 0.02, 5);
  TrainOptions opts;
  opts.steps = 5;
  opts.batch = 2;
  opts.lr = 0.0;
  Rng train_rng(65);
  train(net, dataset, sched, train_rng, opts);

  std::size_t i = 0;
  for (const auto* prm : net.params()) {
    CHECK(prm->value == before[i]);
    ++i;
  }
}

TEST_CASE("training is deterministic for equal seeds") {
  auto run = [&]() {
    Denoiser<float> net(micro_config(), Rng(71));
    Rng data_rng(73);
    std::vector<Tensor> dataset{data_rng.normal_tensor<float>({1, 8, 8}),
                                data_rng.normal_tensor<float>({1, 8, 8})};
    auto sched = make_schedule(50, 1e-3, 0.02, 5);
    TrainOptions opts;
    opts.steps = 20;
    opts.batch = 2;
    opts.lr = 1e-3;
    Rng train_rng(75);
    train(net, dataset, sched, train_rng, opts);
    std::vector<Tensor> weights;
    for (const auto* prm : net.params()) weights.push_back(prm->value);
    return weights;
  };
  auto w1 = run();
  auto w2 = run();
  REQUIRE(w1.size() == w2.size());
  for (std::size_t i = 0; i < w1.size(); ++i) CHECK(w1[i] == w2[i]);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  const auto path = std::filesystem::temp_directory_path() / "scrub_ckpt_test.atte";
  Checkpoint ckpt;
  ckpt.net = std::make_shared<Denoiser<float>>(small_config(), Rng(81));
  ckpt.schedule_steps = 500;
  ckpt.beta_start = 2e-4;
  ckpt.beta_end = 0.015;
  ckpt.default_inference_steps = 25;
  save_checkpoint(ckpt, path);

  auto back = load_checkpoint(path);
  CHECK(back.schedule_steps == 500);
  CHECK(back.default_inference_steps == 25);
  CHECK(back.net->param_count() == ckpt.net->param_count());

  Rng rng(83);
  auto z = rng.normal_tensor<float>({3, 16, 16});
  auto a = ckpt.net->predict(z, 77, AttentionMode::standard(), nullptr);
  auto b = back.net->predict(z, 77, AttentionMode::standard(), nullptr);
  CHECK(a.eps == b.eps);

  // Truncation is a corrupt archive.
  {
    std::ifstream in(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    bytes.resize(bytes.size() / 2);
    const auto trunc = std::filesystem::temp_directory_path() / "scrub_ckpt_trunc.atte";
    std::ofstream out(trunc, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.close();
    CHECK_THROWS_AS(load_checkpoint(trunc), ArchiveError);
    std::filesystem::remove(trunc);
  }
  std::filesystem::remove(path);
}

TEST_CASE("divergence restores the last finite weights and throws") {
  Denoiser<float> net(micro_config(), Rng(91));
  Rng data_rng(93);
  std::vector<Tensor> dataset{data_rng.normal_tensor<float>({1, 8, 8})};
  auto sched = make_schedule(50, 1e-3, 0.02, 5);
  TrainOptions opts;
  opts.steps = 200;
  opts.batch = 1;
  opts.lr = 1e18;  // guaranteed blow-up
  opts.log_every = 1000;
  Rng train_rng(95);
  CHECK_THROWS_AS(train(net, dataset, sched, train_rng, opts), TrainingError);
  for (const auto* prm : net.params()) {
    for (std::size_t i = 0; i < prm->value.numel(); ++i) {
      CHECK(std::isfinite(prm->value[i]));
    }
  }
}
