#include <doctest.h>

#include "scrub/guidance.hpp"
#include "test_support.hpp"

using namespace scrub;
using namespace scrub::testsupport;

TEST_CASE("guided_epsilon endpoints are exact") {
  Rng rng(3);
  auto plain = rng.normal_tensor<float>({2, 4, 4});
  auto redirected = rng.normal_tensor<float>({2, 4, 4});

  CHECK(guided_epsilon(plain, redirected, 0.0) == plain);
  CHECK(guided_epsilon(plain, redirected, 1.0) == redirected);

  auto zero = Tensor::zeros({2, 4, 4});
  auto nine = guided_epsilon(zero, redirected, 9.0);
  for (std::size_t i = 0; i < nine.numel(); ++i) {
    CHECK(nine[i] == 9.0f * redirected[i]);
  }

  CHECK_THROWS_AS(guided_epsilon(plain, Tensor::zeros({3}), 1.0), ShapeError);
  CHECK_THROWS_AS(guided_epsilon(plain, redirected, -0.5), ConfigError);
}

TEST_CASE("guided_epsilon is affine in the scale") {
  Rng rng(5);
  auto plain = rng.normal_tensor<float>({3, 3});
  auto redirected = rng.normal_tensor<float>({3, 3});
  // Endpoints are the branches themselves; in between the literal update
  // holds bit-for-bit.
  CHECK(guided_epsilon(plain, redirected, 0.0) == plain);
  CHECK(guided_epsilon(plain, redirected, 1.0) == redirected);
  for (double s : {0.5, 9.0}) {
    auto out = guided_epsilon(plain, redirected, s);
    for (std::size_t i = 0; i < out.numel(); ++i) {
      const float expect = plain[i] + static_cast<float>(s) * (redirected[i] - plain[i]);
      CHECK(out[i] == expect);
    }
  }
}

TEST_CASE("perturbed branch mode flips at the tempering window edge") {
  GuidanceConfig cfg{9.0, 0.3, 40, 30};
  CHECK(perturbed_mode_for_step(cfg, 40).kind == AttentionMode::Kind::Tempered);
  CHECK(perturbed_mode_for_step(cfg, 30).kind == AttentionMode::Kind::Tempered);
  CHECK(perturbed_mode_for_step(cfg, 29).kind == AttentionMode::Kind::Masked);
  CHECK(perturbed_mode_for_step(cfg, 1).kind == AttentionMode::Kind::Masked);

  GuidanceConfig bad{9.0, 0.3, 40, 0};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  GuidanceConfig bad2{9.0, 1.5, 40, 30};
  CHECK_THROWS_AS(bad2.validate(), ConfigError);
}

TEST_CASE("guided_predict composes the two branches") {
  auto ckpt = tiny_checkpoint();
  const auto& net = *ckpt.net;
  Rng rng(7);
  auto z = rng.normal_tensor<float>({3, 16, 16});
  auto mask = removal_mask_for(ckpt, block_mask(16, 4, 4, 8, 8));

  GuidanceConfig cfg{4.0, 0.3, 10, 7};

  // Inside the window: tempered branch.
  {
    auto got = guided_predict(net, z, 120, 8, mask, cfg);
    auto plain = net.predict(z, 120, AttentionMode::standard(), nullptr);
    auto pert = net.predict(z, 120, AttentionMode::tempered(0.3), &mask);
    auto manual = guided_epsilon(plain.eps, pert.eps, 4.0);
    CHECK(got.eps == manual);
  }
  // Below the cutoff: plain masked branch.
  {
    auto got = guided_predict(net, z, 40, 3, mask, cfg);
    auto plain = net.predict(z, 40, AttentionMode::standard(), nullptr);
    auto pert = net.predict(z, 40, AttentionMode::masked(), &mask);
    auto manual = guided_epsilon(plain.eps, pert.eps, 4.0);
    CHECK(got.eps == manual);
  }
}

TEST_CASE("guided_predict with zero scale is the standard prediction") {
  auto ckpt = tiny_checkpoint();
  Rng rng(9);
  auto z = rng.normal_tensor<float>({3, 16, 16});
  auto mask = removal_mask_for(ckpt, block_mask(16, 2, 2, 6, 9));
  GuidanceConfig cfg{0.0, 0.3, 10, 7};
  auto got = guided_predict(*ckpt.net, z, 100, 5, mask, cfg);
  auto plain = ckpt.net->predict(z, 100, AttentionMode::standard(), nullptr);
  CHECK(got.eps == plain.eps);
}

TEST_CASE("guided_predict with an all-background mask is standard for any scale") {
  auto ckpt = tiny_checkpoint();
  Rng rng(11);
  auto z = rng.normal_tensor<float>({3, 16, 16});
  auto mask = removal_mask_for(ckpt, MaskTensor::zeros({16, 16}));
  auto plain = ckpt.net->predict(z, 90, AttentionMode::standard(), nullptr);
  for (double s : {0.5, 3.0, 9.0}) {
    GuidanceConfig cfg{s, 0.3, 10, 7};
    auto got = guided_predict(*ckpt.net, z, 90, 9, mask, cfg);
    CHECK(max_abs_difference(got.eps, plain.eps) <= 1e-6f);
  }
}

TEST_CASE("lambda 1 makes the window irrelevant") {
  auto ckpt = tiny_checkpoint();
  Rng rng(13);
  auto z = rng.normal_tensor<float>({3, 16, 16});
  auto mask = removal_mask_for(ckpt, block_mask(16, 5, 6, 11, 12));
  for (int index : {9, 5, 1}) {
    GuidanceConfig tempered{6.0, 1.0, 10, 8};
    GuidanceConfig masked_all{6.0, 1.0, 10, 10};  // window shrunk to the first step
    auto a = guided_predict(*ckpt.net, z, 60, index, mask, tempered);
    auto b = guided_predict(*ckpt.net, z, 60, index, mask, masked_all);
    CHECK(a.eps == b.eps);
  }
}
