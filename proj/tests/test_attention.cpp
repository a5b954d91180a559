#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "scrub/archive.hpp"
#include "scrub/attention.hpp"
#include "scrub/tensor.hpp"

using namespace scrub;

namespace {

TensorD random_tensor(Rng& rng, Shape shape) {
  auto t = TensorD::zeros(std::move(shape));
  rng.fill_normal(t);
  return t;
}

AttentionLayerParams<double> random_params(Rng& rng, int width, int heads = 1) {
  AttentionLayerParams<double> p;
  p.width = width;
  p.heads = heads;
  const auto d = static_cast<std::size_t>(width);
  p.wq = random_tensor(rng, {d, d});
  p.wk = random_tensor(rng, {d, d});
  p.wv = random_tensor(rng, {d, d});
  p.wo = random_tensor(rng, {d, d});
  p.bq = random_tensor(rng, {1, d});
  p.bk = random_tensor(rng, {1, d});
  p.bv = random_tensor(rng, {1, d});
  p.bo = random_tensor(rng, {1, d});
  return p;
}

MaskTensor random_flat_mask(Rng& rng, std::size_t tokens) {
  // At least one foreground and one background token.
  MaskTensor m = MaskTensor::zeros({1, tokens});
  const std::size_t fg = rng.uniform_index(tokens);
  const std::size_t bg = (fg + 1 + rng.uniform_index(tokens - 1)) % tokens;
  for (std::size_t i = 0; i < tokens; ++i) {
    m[i] = rng.uniform_index(2) ? 1 : 0;
  }
  m[fg] = 1;
  m[bg] = 0;
  return m;
}

}  // namespace

TEST_CASE("flatten_mask pools with any-coverage dilation") {
  auto zero = MaskTensor::zeros({4, 4});
  for (int n : {1, 2, 4}) {
    auto flat = flatten_mask(zero, n);
    for (const auto v : flat.values()) CHECK(v == 0);
  }

  auto corner = MaskTensor::from_data({2, 2}, {1, 0, 0, 0});
  auto one = flatten_mask(corner, 1);
  CHECK(one.numel() == 1);
  CHECK(one[0] == 1);

  // A single pixel lands in exactly one pooled quadrant.
  for (std::size_t py = 0; py < 4; ++py) {
    for (std::size_t px = 0; px < 4; ++px) {
      auto base = MaskTensor::zeros({4, 4});
      base.at2(py, px) = 1;
      auto flat = flatten_mask(base, 2);
      std::size_t ones = 0;
      for (const auto v : flat.values()) ones += v;
      CHECK(ones == 1);
      CHECK(flat[(py / 2) * 2 + px / 2] == 1);
    }
  }

  CHECK_THROWS_AS(flatten_mask(zero, 3), ShapeError);
}

TEST_CASE("flatten_mask agrees with a brute-force pooling oracle") {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    auto base = MaskTensor::zeros({8, 8});
    for (std::size_t i = 0; i < base.numel(); ++i) base[i] = rng.uniform_index(4) == 0 ? 1 : 0;
    for (int n : {1, 2, 4, 8}) {
      auto flat = flatten_mask(base, n);
      const std::size_t block = 8 / static_cast<std::size_t>(n);
      for (std::size_t ty = 0; ty < static_cast<std::size_t>(n); ++ty) {
        for (std::size_t tx = 0; tx < static_cast<std::size_t>(n); ++tx) {
          std::uint8_t any = 0;
          for (std::size_t y = ty * block; y < (ty + 1) * block; ++y) {
            for (std::size_t x = tx * block; x < (tx + 1) * block; ++x) any |= base.at2(y, x);
          }
          CHECK(flat[ty * static_cast<std::size_t>(n) + tx] == any);
        }
      }
    }
  }
}

TEST_CASE("removal mask builds variants and rejects degenerate ones") {
  auto base = MaskTensor::zeros({8, 8});
  base.at2(1, 1) = 1;
  base.at2(1, 2) = 1;
  const int resolutions[] = {8, 4, 2};
  auto mask = RemovalMask::build(base, resolutions);
  CHECK(mask.per_resolution.size() == 3);
  CHECK(mask.at(4).numel() == 16);
  CHECK_THROWS_AS(mask.at(16), ConfigError);

  // Scattered foreground covers every 2x2 block: degenerate at n=2.
  auto scatter = MaskTensor::zeros({8, 8});
  for (std::size_t y = 0; y < 8; y += 4) {
    for (std::size_t x = 0; x < 8; x += 4) scatter.at2(y, x) = 1;
  }
  const int coarse[] = {2};
  CHECK_THROWS_AS(RemovalMask::build(scatter, coarse), DegenerateMaskError);
}

TEST_CASE("standard attention trivial cases") {
  Rng rng(11);
  auto p = random_params(rng, 3);
  auto z1 = random_tensor(rng, {1, 3});
  auto [out1, rec1] = standard_attention(p, z1);
  CHECK(rec1.attention.shape() == Shape{1, 1});
  CHECK(rec1.attention[0] == 1.0);
  // With a single token the output is just the projected value vector.
  auto v = matmul(z1, p.wv);
  v.mat().rowwise() += p.bv.mat().row(0);
  auto expect = matmul(v, p.wo);
  expect.mat().rowwise() += p.bo.mat().row(0);
  CHECK(max_abs_difference(out1, expect) < 1e-12);

  // Identical keys make every row uniform.
  auto z = TensorD::zeros({4, 3});
  for (std::size_t i = 0; i < 4; ++i) {
    z.at2(i, 0) = static_cast<double>(i);  // queries differ
  }
  auto pk = p;
  pk.wk = TensorD::zeros({3, 3});  // keys collapse to the bias
  auto [out, rec] = standard_attention(pk, z);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      CHECK(rec.attention.at2(i, j) == doctest::Approx(0.25).epsilon(1e-12));
    }
  }
  (void)out;
}

TEST_CASE("standard attention matches the direct formula on 3 tokens") {
  Rng rng(13);
  auto p = random_params(rng, 4);
  auto z = random_tensor(rng, {3, 4});
  auto [out, rec] = standard_attention(p, z);

  auto q = matmul(z, p.wq);
  q.mat().rowwise() += p.bq.mat().row(0);
  auto k = matmul(z, p.wk);
  k.mat().rowwise() += p.bk.mat().row(0);
  auto v = matmul(z, p.wv);
  v.mat().rowwise() += p.bv.mat().row(0);

  TensorD sim = TensorD::zeros({3, 3});
  sim.mat() = q.mat() * k.mat().transpose() / 2.0;  // sqrt(d) = 2
  CHECK(max_abs_difference(sim, rec.similarity) < 1e-9);

  for (std::size_t i = 0; i < 3; ++i) {
    double denom = 0.0;
    for (std::size_t j = 0; j < 3; ++j) denom += std::exp(sim.at2(i, j));
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(rec.attention.at2(i, j) == doctest::Approx(std::exp(sim.at2(i, j)) / denom).epsilon(1e-6));
    }
  }

  auto op = matmul(rec.attention, v);
  CHECK(max_abs_difference(op, rec.output) < 1e-9);
  auto proj = matmul(op, p.wo);
  proj.mat().rowwise() += p.bo.mat().row(0);
  CHECK(max_abs_difference(out, proj) < 1e-9);
}

TEST_CASE("masked attention with an empty mask is standard attention") {
  Rng rng(17);
  auto p = random_params(rng, 4);
  auto z = random_tensor(rng, {6, 4});
  auto none = MaskTensor::zeros({1, 6});
  auto [std_out, std_rec] = standard_attention(p, z);
  auto [m_out, m_rec] = masked_attention(p, z, none);
  CHECK(max_abs_difference(std_out, m_out) == 0.0);
  CHECK(max_abs_difference(std_rec.attention, m_rec.attention) == 0.0);
}

TEST_CASE("masked attention forces the single surviving column") {
  Rng rng(19);
  for (int trial = 0; trial < 10; ++trial) {
    auto p = random_params(rng, 2);
    auto z = random_tensor(rng, {2, 2});
    auto m = MaskTensor::from_data({1, 2}, {1, 0});
    auto [out, rec] = masked_attention(p, z, m);
    CHECK(rec.attention.at2(0, 0) == 0.0);
    CHECK(rec.attention.at2(1, 0) == 0.0);
    CHECK(rec.attention.at2(0, 1) == 1.0);
    CHECK(rec.attention.at2(1, 1) == 1.0);
    (void)out;
  }
}

TEST_CASE("masked attention equals a softmax restricted to background columns") {
  Rng rng(23);
  auto p = random_params(rng, 4);
  auto z = random_tensor(rng, {4, 4});
  auto m = MaskTensor::from_data({1, 4}, {0, 1, 0, 1});
  auto [out, rec] = masked_attention(p, z, m);

  auto [std_out, std_rec] = standard_attention(p, z);
  (void)std_out;
  for (std::size_t i = 0; i < 4; ++i) {
    double denom = 0.0;
    for (std::size_t j : {std::size_t{0}, std::size_t{2}}) denom += std::exp(std_rec.similarity.at2(i, j));
    for (std::size_t j = 0; j < 4; ++j) {
      const bool masked = (j == 1 || j == 3);
      const double expect = masked ? 0.0 : std::exp(std_rec.similarity.at2(i, j)) / denom;
      CHECK(rec.attention.at2(i, j) == doctest::Approx(expect).epsilon(1e-9));
    }
  }
  (void)out;

  auto all = MaskTensor::from_data({1, 4}, {1, 1, 1, 1});
  CHECK_THROWS_AS(masked_attention(p, z, all), DegenerateMaskError);
}

TEST_CASE("tempered attention at the extremes") {
  Rng rng(29);
  auto p = random_params(rng, 4);
  auto z = random_tensor(rng, {5, 4});
  auto m = MaskTensor::from_data({1, 5}, {1, 0, 0, 1, 0});

  auto [m_out, m_rec] = masked_attention(p, z, m);
  auto [t_out, t_obj, t_bg] = tempered_masked_attention(p, z, m, 1.0);
  CHECK(max_abs_difference(m_out, t_out) == 0.0);
  CHECK(max_abs_difference(m_rec.attention, t_obj.attention) == 0.0);
  CHECK(max_abs_difference(m_rec.attention, t_bg.attention) == 0.0);

  auto [z_out, z_obj, z_bg] = tempered_masked_attention(p, z, m, 0.0);
  (void)z_out;
  (void)z_bg;
  // Foreground rows flatten to uniform over the three background columns.
  for (std::size_t i : {std::size_t{0}, std::size_t{3}}) {
    CHECK(z_obj.attention.at2(i, 0) == 0.0);
    CHECK(z_obj.attention.at2(i, 3) == 0.0);
    for (std::size_t j : {std::size_t{1}, std::size_t{2}, std::size_t{4}}) {
      CHECK(z_obj.attention.at2(i, j) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    }
  }

  CHECK_THROWS_AS(tempered_masked_attention(p, z, m, -0.1), ConfigError);
  CHECK_THROWS_AS(tempered_masked_attention(p, z, m, 1.5), ConfigError);
}

TEST_CASE("tempered attention matches a two-branch oracle at lambda 0.3") {
  Rng rng(31);
  auto p = random_params(rng, 4);
  auto z = random_tensor(rng, {4, 4});
  auto m = MaskTensor::from_data({1, 4}, {0, 1, 1, 0});
  const double lambda = 0.3;
  auto [out, rec_obj, rec_bg] = tempered_masked_attention(p, z, m, lambda);

  auto [std_out, std_rec] = standard_attention(p, z);
  (void)std_out;
  auto v = matmul(z, p.wv);
  v.mat().rowwise() += p.bv.mat().row(0);

  auto full_mask = broadcast_column_mask(m, 4);
  TensorD scaled = std_rec.similarity;
  for (std::size_t i = 0; i < scaled.numel(); ++i) scaled[i] *= lambda;
  auto a_obj = masked_row_softmax(scaled, full_mask);
  auto a_bg = masked_row_softmax(std_rec.similarity, full_mask);
  CHECK(max_abs_difference(a_obj, rec_obj.attention) < 1e-9);
  CHECK(max_abs_difference(a_bg, rec_bg.attention) < 1e-9);

  auto op_obj = matmul(a_obj, v);
  auto op_bg = matmul(a_bg, v);
  TensorD blended = op_bg;
  for (std::size_t i = 0; i < 4; ++i) {
    if (m[i]) {
      for (std::size_t c = 0; c < 4; ++c) blended.at2(i, c) = op_obj.at2(i, c);
    }
  }
  auto proj = matmul(blended, p.wo);
  proj.mat().rowwise() += p.bo.mat().row(0);
  CHECK(max_abs_difference(out, proj) < 1e-9);
}

TEST_CASE("column kill and activation monotonicity hold on random instances") {
  Rng rng(37);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t tokens = 2 + rng.uniform_index(15);
    auto sim = random_tensor(rng, {tokens, tokens});
    auto flat = random_flat_mask(rng, tokens);

    auto a_std = attention_map(sim);
    auto a_masked = attention_map_masked(sim, flat);

    for (std::size_t i = 0; i < tokens; ++i) {
      double fg_mass = 0.0, bg_mass = 0.0;
      for (std::size_t j = 0; j < tokens; ++j) {
        if (flat[j]) {
          CHECK(a_masked.at2(i, j) == 0.0);
          fg_mass += a_masked.at2(i, j);
        } else {
          CHECK(a_masked.at2(i, j) >= a_std.at2(i, j));
          bg_mass += a_masked.at2(i, j);
        }
      }
      CHECK(fg_mass == 0.0);
      CHECK(bg_mass == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("background rows agree between the tempered branches") {
  Rng rng(41);
  auto p = random_params(rng, 4);
  auto z = random_tensor(rng, {6, 4});
  auto m = MaskTensor::from_data({1, 6}, {0, 1, 0, 0, 1, 0});
  auto [m_out, m_rec] = masked_attention(p, z, m);
  auto [t_out, t_obj, t_bg] = tempered_masked_attention(p, z, m, 0.25);
  (void)t_obj;
  for (std::size_t i = 0; i < 6; ++i) {
    if (m[i]) continue;
    for (std::size_t j = 0; j < 4; ++j) {
      CHECK(t_bg.output.at2(i, j) == m_rec.output.at2(i, j));
      CHECK(t_out.at2(i, j) == m_out.at2(i, j));
    }
  }
}

TEST_CASE("tempering suppresses foreground-row variance statistically") {
  Rng rng(43);
  const std::size_t tokens = 12;
  const double lambdas[] = {1.0, 0.7, 0.3, 0.0};
  double mean_var[4] = {0, 0, 0, 0};
  const int draws = 1000;
  for (int d = 0; d < draws; ++d) {
    auto sim = random_tensor(rng, {tokens, tokens});
    auto flat = random_flat_mask(rng, tokens);
    for (int li = 0; li < 4; ++li) {
      auto [a_obj, a_bg] = attention_maps_tempered(sim, flat, lambdas[li]);
      (void)a_bg;
      double var_sum = 0.0;
      int rows = 0;
      for (std::size_t i = 0; i < tokens; ++i) {
        if (!flat[i]) continue;
        double mean = 0.0;
        std::size_t bg = 0;
        for (std::size_t j = 0; j < tokens; ++j) {
          if (!flat[j]) {
            mean += a_obj.at2(i, j);
            ++bg;
          }
        }
        mean /= static_cast<double>(bg);
        double var = 0.0;
        for (std::size_t j = 0; j < tokens; ++j) {
          if (!flat[j]) var += (a_obj.at2(i, j) - mean) * (a_obj.at2(i, j) - mean);
        }
        var_sum += var / static_cast<double>(bg);
        ++rows;
      }
      if (rows > 0) mean_var[li] += var_sum / rows;
    }
  }
  for (int li = 1; li < 4; ++li) {
    CHECK(mean_var[li] <= mean_var[li - 1]);
  }

  // lambda = 0 foreground rows are exactly uniform: every surviving entry is
  // the same value.
  auto sim = random_tensor(rng, {8, 8});
  auto flat = random_flat_mask(rng, 8);
  auto [a_obj, a_bg] = attention_maps_tempered(sim, flat, 0.0);
  (void)a_bg;
  for (std::size_t i = 0; i < 8; ++i) {
    if (!flat[i]) continue;
    double lo = 2.0, hi = -1.0;
    for (std::size_t j = 0; j < 8; ++j) {
      if (!flat[j]) {
        lo = std::min(lo, a_obj.at2(i, j));
        hi = std::max(hi, a_obj.at2(i, j));
      }
    }
    CHECK(lo == hi);
  }
}

TEST_CASE("attention records round-trip through the archive bit-exactly") {
  Rng rng(47);
  auto p = random_params(rng, 4);
  auto z = random_tensor(rng, {4, 4});
  auto m = MaskTensor::from_data({1, 4}, {1, 0, 0, 0});
  auto [out, rec] = masked_attention(p, z, m);
  (void)out;
  rec.layer_id = "dec_n2";
  rec.timestep = 17;

  TensorArchive arc;
  arc.add("rec/similarity", rec.similarity);
  arc.add("rec/attention", rec.attention);
  arc.add("rec/output", rec.output);
  arc.set_meta("rec/layer", rec.layer_id);
  arc.set_meta("rec/kind", attention_kind_name(rec.kind));

  const auto path = std::filesystem::temp_directory_path() / "scrub_record_test.atte";
  arc.write(path);
  auto back = TensorArchive::read(path);
  CHECK(back.get_f64("rec/similarity") == rec.similarity);
  CHECK(back.get_f64("rec/attention") == rec.attention);
  CHECK(back.get_f64("rec/output") == rec.output);
  CHECK(back.meta_or("rec/kind", "") == "masked");
  std::filesystem::remove(path);
}
