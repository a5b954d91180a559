#pragma once

// Self-attention over flattened feature maps, in three flavors:
//   standard   A = softmax(Q K^T / sqrt(d))
//   masked     foreground columns removed before the softmax, so every token
//              attends only to background; renormalization boosts what
//              survives and foreground keys stop influencing anything
//   tempered   foreground rows additionally see lambda-scaled logits, which
//              flattens their attention over the background; background rows
//              keep the plain masked result and the two branches are blended
//              row-wise by the mask
//
// Masks are boolean; no infinity sentinel is ever written into a tensor.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "scrub/errors.hpp"
#include "scrub/linalg.hpp"
#include "scrub/tensor.hpp"

namespace scrub {

/// Downsample a binary H x W mask to an n x n token grid and flatten it
/// row-major to 1 x n^2. Pooling is "any coverage": a token is foreground if
/// any pixel of its block is, so coarse grids never leak foreground pixels
/// into the background token set.
inline MaskTensor flatten_mask(const MaskTensor& base, int n) {
  if (base.rank() != 2) throw ShapeError("flatten_mask expects an H x W mask");
  check_binary(base);
  const std::size_t h = base.extent(0), w = base.extent(1);
  if (n < 1 || h % static_cast<std::size_t>(n) != 0 || w % static_cast<std::size_t>(n) != 0) {
    throw ShapeError("resolution " + std::to_string(n) + " does not divide mask " +
                     shape_to_string(base.shape()));
  }
  const std::size_t bh = h / static_cast<std::size_t>(n), bw = w / static_cast<std::size_t>(n);
  MaskTensor flat = MaskTensor::zeros({1, static_cast<std::size_t>(n) * static_cast<std::size_t>(n)});
  for (std::size_t ty = 0; ty < static_cast<std::size_t>(n); ++ty) {
    for (std::size_t tx = 0; tx < static_cast<std::size_t>(n); ++tx) {
      std::uint8_t hit = 0;
      for (std::size_t y = ty * bh; y < (ty + 1) * bh && !hit; ++y) {
        for (std::size_t x = tx * bw; x < (tx + 1) * bw; ++x) {
          if (base.at2(y, x)) {
            hit = 1;
            break;
          }
        }
      }
      flat[ty * static_cast<std::size_t>(n) + tx] = hit;
    }
  }
  return flat;
}

/// A removal mask plus its flattened variant at every attention resolution
/// the model uses. No variant may be all foreground.
struct RemovalMask {
  MaskTensor base;                          // H x W, 1 = foreground
  std::map<int, MaskTensor> per_resolution; // n -> 1 x n^2

  static RemovalMask build(MaskTensor base_mask, std::span<const int> resolutions) {
    RemovalMask m;
    check_binary(base_mask);
    m.base = std::move(base_mask);
    for (const int n : resolutions) {
      MaskTensor flat = flatten_mask(m.base, n);
      std::size_t ones = 0;
      for (const auto v : flat.values()) ones += v;
      if (ones == flat.numel()) {
        throw DegenerateMaskError("mask covers every token at resolution " + std::to_string(n));
      }
      m.per_resolution.emplace(n, std::move(flat));
    }
    return m;
  }

  const MaskTensor& at(int n) const {
    const auto it = per_resolution.find(n);
    if (it == per_resolution.end()) {
      throw ConfigError("mask has no variant for resolution " + std::to_string(n));
    }
    return it->second;
  }

  bool all_background() const {
    for (const auto v : base.values()) {
      if (v) return false;
    }
    return true;
  }
};

enum class AttentionKind : std::uint8_t { Standard, Masked, TemperedObj, TemperedBg };

inline const char* attention_kind_name(AttentionKind k) {
  switch (k) {
    case AttentionKind::Standard: return "standard";
    case AttentionKind::Masked: return "masked";
    case AttentionKind::TemperedObj: return "tempered_obj";
    case AttentionKind::TemperedBg: return "tempered_bg";
  }
  return "?";
}

/// How decoder attention layers behave during a removal run.
struct AttentionMode {
  enum class Kind : std::uint8_t { Standard, Masked, Tempered } kind = Kind::Standard;
  double lambda = 1.0;  // only read in Tempered mode

  static AttentionMode standard() { return {}; }
  static AttentionMode masked() { return {Kind::Masked, 1.0}; }
  static AttentionMode tempered(double lambda) {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
    return {Kind::Tempered, lambda};
  }

  bool needs_mask() const { return kind != Kind::Standard; }
};

/// Per-layer, per-timestep capture of the attention internals. `similarity`
/// holds the logits after any lambda scaling but before masking (masked cells
/// keep their finite values); `attention` is the post-mask softmax, so masked
/// columns are exactly zero; `output` is attention * V before the output
/// projection.
template <class S>
struct AttentionRecord {
  std::string layer_id;
  int timestep = 0;
  AttentionKind kind = AttentionKind::Standard;
  TensorT<S> similarity;  // N^2 x N^2
  TensorT<S> attention;   // N^2 x N^2
  TensorT<S> output;      // N^2 x d
};

template <class S>
struct AttentionLayerParams {
  TensorT<S> wq, wk, wv, wo;  // d x d
  TensorT<S> bq, bk, bv, bo;  // 1 x d
  int heads = 1;
  int width = 0;  // d

  void validate() const {
    if (width <= 0 || heads <= 0 || width % heads != 0) {
      throw ConfigError("attention width must be positive and divisible by head count");
    }
    for (const TensorT<S>* w : {&wq, &wk, &wv, &wo}) {
      if (w->rank() != 2 || w->extent(0) != static_cast<std::size_t>(width) ||
          w->extent(1) != static_cast<std::size_t>(width)) {
        throw ShapeError("attention projection must be d x d");
      }
    }
  }
};

/// Broadcast a 1 x N^2 flat mask to a full N^2 x N^2 column mask: column j is
/// removed for every row when flat[j] = 1.
inline MaskTensor broadcast_column_mask(const MaskTensor& flat, std::size_t rows) {
  const std::size_t cols = flat.numel();
  MaskTensor full = MaskTensor::zeros({rows, cols});
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) full.at2(i, j) = flat[j];
  }
  return full;
}

/// Attention maps from raw similarity logits. These are the kernels the
/// layer-level ops and the verification suites share.
template <class S>
TensorT<S> attention_map(const TensorT<S>& sim) {
  return row_softmax(sim);
}

template <class S>
TensorT<S> attention_map_masked(const TensorT<S>& sim, const MaskTensor& flat) {
  if (sim.rank() != 2 || flat.numel() != sim.extent(1)) {
    throw ShapeError("flat mask length does not match similarity columns");
  }
  return masked_row_softmax(sim, broadcast_column_mask(flat, sim.extent(0)));
}

template <class S>
std::pair<TensorT<S>, TensorT<S>> attention_maps_tempered(const TensorT<S>& sim,
                                                          const MaskTensor& flat, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
  TensorT<S> scaled = sim;
  for (std::size_t i = 0; i < scaled.numel(); ++i) scaled[i] = static_cast<S>(lambda) * scaled[i];
  return {attention_map_masked(scaled, flat), attention_map_masked(sim, flat)};
}

namespace detail {

template <class S>
struct QkvProjection {
  TensorT<S> q, k, v;  // N^2 x d each
};

template <class S>
QkvProjection<S> project_qkv(const AttentionLayerParams<S>& p, const TensorT<S>& z) {
  p.validate();
  if (z.rank() != 2 || z.extent(1) != static_cast<std::size_t>(p.width)) {
    throw ShapeError("token width does not match attention parameters");
  }
  QkvProjection<S> out{matmul(z, p.wq), matmul(z, p.wk), matmul(z, p.wv)};
  out.q.mat().rowwise() += p.bq.mat().row(0);
  out.k.mat().rowwise() += p.bk.mat().row(0);
  out.v.mat().rowwise() += p.bv.mat().row(0);
  return out;
}

/// Q K^T / sqrt(d_head) for one head (columns [h*dh, (h+1)*dh)).
template <class S>
TensorT<S> head_similarity(const QkvProjection<S>& qkv, int heads, int head) {
  const std::size_t tokens = qkv.q.extent(0);
  const std::size_t dh = qkv.q.extent(1) / static_cast<std::size_t>(heads);
  const auto offset = static_cast<Eigen::Index>(dh * static_cast<std::size_t>(head));
  TensorT<S> sim = TensorT<S>::zeros({tokens, tokens});
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
  sim.mat().noalias() = qkv.q.mat().middleCols(offset, static_cast<Eigen::Index>(dh)) *
                        qkv.k.mat().middleCols(offset, static_cast<Eigen::Index>(dh)).transpose() *
                        scale;
  return sim;
}

template <class S>
void head_apply(TensorT<S>& op, const TensorT<S>& a, const QkvProjection<S>& qkv, int heads,
                int head) {
  const std::size_t dh = qkv.v.extent(1) / static_cast<std::size_t>(heads);
  const auto offset = static_cast<Eigen::Index>(dh * static_cast<std::size_t>(head));
  op.mat().middleCols(offset, static_cast<Eigen::Index>(dh)).noalias() =
      a.mat() * qkv.v.mat().middleCols(offset, static_cast<Eigen::Index>(dh));
}

template <class S>
TensorT<S> project_out(const AttentionLayerParams<S>& p, const TensorT<S>& op) {
  TensorT<S> y = matmul(op, p.wo);
  y.mat().rowwise() += p.bo.mat().row(0);
  return y;
}

// Heads are averaged into the record so a layer always contributes one map.
template <class S>
void record_accumulate(TensorT<S>& dst, const TensorT<S>& src, int heads) {
  const S w = static_cast<S>(1.0 / heads);
  if (dst.numel() == 0) {
    dst = src;
    if (heads > 1) {
      for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] *= w;
    }
  } else {
    for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] += w * src[i];
  }
}

}  // namespace detail

/// Plain self-attention. Returns the projected output and a record holding
/// similarity, attention map and pre-projection output.
template <class S>
std::pair<TensorT<S>, AttentionRecord<S>> standard_attention(const AttentionLayerParams<S>& p,
                                                             const TensorT<S>& z) {
  const auto qkv = detail::project_qkv(p, z);
  const std::size_t tokens = z.extent(0);
  TensorT<S> op = TensorT<S>::zeros({tokens, static_cast<std::size_t>(p.width)});
  AttentionRecord<S> rec;
  rec.kind = AttentionKind::Standard;
  for (int h = 0; h < p.heads; ++h) {
    TensorT<S> sim = detail::head_similarity(qkv, p.heads, h);
    TensorT<S> a = attention_map(sim);
    detail::head_apply(op, a, qkv, p.heads, h);
    detail::record_accumulate(rec.similarity, sim, p.heads);
    detail::record_accumulate(rec.attention, a, p.heads);
  }
  rec.output = op;
  return {detail::project_out(p, op), std::move(rec)};
}

/// Column-masked self-attention: every token's attention over foreground
/// columns is removed and renormalized onto the background.
template <class S>
std::pair<TensorT<S>, AttentionRecord<S>> masked_attention(const AttentionLayerParams<S>& p,
                                                           const TensorT<S>& z,
                                                           const MaskTensor& flat) {
  const auto qkv = detail::project_qkv(p, z);
  const std::size_t tokens = z.extent(0);
  TensorT<S> op = TensorT<S>::zeros({tokens, static_cast<std::size_t>(p.width)});
  AttentionRecord<S> rec;
  rec.kind = AttentionKind::Masked;
  for (int h = 0; h < p.heads; ++h) {
    TensorT<S> sim = detail::head_similarity(qkv, p.heads, h);
    TensorT<S> a = attention_map_masked(sim, flat);
    detail::head_apply(op, a, qkv, p.heads, h);
    detail::record_accumulate(rec.similarity, sim, p.heads);
    detail::record_accumulate(rec.attention, a, p.heads);
  }
  rec.output = op;
  return {detail::project_out(p, op), std::move(rec)};
}

/// Masked attention with a lambda-tempered foreground branch. Foreground rows
/// of the output come from the tempered branch, background rows from the
/// plain masked branch; both are blended before the output projection.
template <class S>
std::tuple<TensorT<S>, AttentionRecord<S>, AttentionRecord<S>> tempered_masked_attention(
    const AttentionLayerParams<S>& p, const TensorT<S>& z, const MaskTensor& flat,
    double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
  const auto qkv = detail::project_qkv(p, z);
  const std::size_t tokens = z.extent(0);
  if (flat.numel() != tokens) throw ShapeError("flat mask length does not match token count");

  TensorT<S> op_obj = TensorT<S>::zeros({tokens, static_cast<std::size_t>(p.width)});
  TensorT<S> op_bg = TensorT<S>::zeros({tokens, static_cast<std::size_t>(p.width)});
  AttentionRecord<S> rec_obj, rec_bg;
  rec_obj.kind = AttentionKind::TemperedObj;
  rec_bg.kind = AttentionKind::TemperedBg;

  for (int h = 0; h < p.heads; ++h) {
    TensorT<S> sim = detail::head_similarity(qkv, p.heads, h);
    auto [a_obj, a_bg] = attention_maps_tempered(sim, flat, lambda);
    detail::head_apply(op_obj, a_obj, qkv, p.heads, h);
    detail::head_apply(op_bg, a_bg, qkv, p.heads, h);

    TensorT<S> scaled = sim;
    for (std::size_t i = 0; i < scaled.numel(); ++i) scaled[i] = static_cast<S>(lambda) * scaled[i];
    detail::record_accumulate(rec_obj.similarity, scaled, p.heads);
    detail::record_accumulate(rec_obj.attention, a_obj, p.heads);
    detail::record_accumulate(rec_bg.similarity, sim, p.heads);
    detail::record_accumulate(rec_bg.attention, a_bg, p.heads);
  }

  // Row-wise blend: foreground rows take the tempered branch.
  TensorT<S> op = op_bg;
  for (std::size_t i = 0; i < tokens; ++i) {
    if (flat[i]) {
      for (std::size_t c = 0; c < static_cast<std::size_t>(p.width); ++c) {
        op.at2(i, c) = op_obj.at2(i, c);
      }
    }
  }
  rec_obj.output = std::move(op_obj);
  rec_bg.output = std::move(op_bg);
  return {detail::project_out(p, op), std::move(rec_obj), std::move(rec_bg)};
}

}  // namespace scrub
