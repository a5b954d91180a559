#pragma once

// Small U-shaped noise predictor over {C, H, W} tensors: residual conv
// blocks with group norm and sinusoidal time conditioning, self-attention at
// the configured resolutions, strided-conv downsampling and nearest-neighbor
// upsampling with skip concatenation. Forward and backward are hand-rolled;
// everything is templated on the scalar so gradient checks can run in double
// while production runs in float.
//
// Decoder attention layers dispatch on the removal mode; encoder and
// bottleneck attention stay standard unless the ablation flag says
// otherwise.

#include <algorithm>
#include <memory>
#include <string>
#include <vector>

#include "scrub/attention.hpp"
#include "scrub/errors.hpp"
#include "scrub/tensor.hpp"

namespace scrub {

struct DenoiserConfig {
  int image_size = 64;
  int in_channels = 3;
  int base_width = 16;
  std::vector<int> channel_mult{1, 2, 4, 6};
  std::vector<int> attention_resolutions{16, 8};
  int heads = 1;
  bool masked_encoder_attention = false;  // ablation: let encoder attention see the mask

  int levels() const { return static_cast<int>(channel_mult.size()); }
  int channels(int level) const { return base_width * channel_mult[static_cast<std::size_t>(level)]; }
  int resolution(int level) const { return image_size >> level; }
  int time_base() const { return base_width * 4; }
  int time_dim() const { return base_width * 8; }

  bool attend_at(int level) const {
    for (int r : attention_resolutions) {
      if (r == resolution(level)) return true;
    }
    return false;
  }

  void validate() const {
    if (image_size < 8 || in_channels < 1 || base_width < 1 || heads < 1) {
      throw ConfigError("denoiser config has non-positive dimensions");
    }
    if (channel_mult.empty()) throw ConfigError("channel_mult must not be empty");
    for (int l = 0; l < levels(); ++l) {
      if (resolution(l) << l != image_size || resolution(l) < 2) {
        throw ConfigError("image size must halve cleanly at every stage");
      }
      if (channels(l) % heads != 0) throw ConfigError("channels must divide by head count");
    }
    if (attention_resolutions.empty()) {
      throw ConfigError("at least one attention resolution is required");
    }
    for (int r : attention_resolutions) {
      bool found = false;
      for (int l = 0; l < levels(); ++l) found = found || resolution(l) == r;
      if (!found) {
        throw ConfigError("attention resolution " + std::to_string(r) +
                          " is not produced by the stage layout");
      }
    }
  }

  /// Resolutions whose flattened mask a removal run needs.
  std::vector<int> mask_resolutions() const {
    std::vector<int> out;
    for (int r : attention_resolutions) {
      if (std::find(out.begin(), out.end(), r) == out.end()) out.push_back(r);
    }
    return out;
  }
};

namespace dn {

template <class S>
struct Param {
  std::string name;
  TensorT<S> value;
  TensorT<S> grad;
  TensorT<S> ms;  // running mean square for the adaptive step

  void init(std::string n, Shape shape) {
    name = std::move(n);
    value = TensorT<S>::zeros(shape);
    grad = TensorT<S>::zeros(shape);
    ms = TensorT<S>::zeros(shape);
  }

  void fill_normal(Rng& rng, double stddev) {
    for (std::size_t i = 0; i < value.numel(); ++i) {
      value[i] = static_cast<S>(rng.normal() * stddev);
    }
  }
};

template <class S>
using Registry = std::vector<Param<S>*>;

inline int norm_groups(int channels) {
  for (int g : {8, 4, 2}) {
    if (channels % g == 0) return g;
  }
  return 1;
}

template <class S>
struct Linear {
  Param<S> w, b;  // in x out, 1 x out

  void init(const std::string& prefix, int in, int out, Rng& rng) {
    w.init(prefix + ".w", {static_cast<std::size_t>(in), static_cast<std::size_t>(out)});
    b.init(prefix + ".b", {1, static_cast<std::size_t>(out)});
    w.fill_normal(rng, 1.0 / std::sqrt(static_cast<double>(in)));
  }
  void collect(Registry<S>& r) {
    r.push_back(&w);
    r.push_back(&b);
  }

  TensorT<S> forward(const TensorT<S>& x) const {
    TensorT<S> y = matmul(x, w.value);
    y.mat().rowwise() += b.value.mat().row(0);
    return y;
  }

  TensorT<S> backward(const TensorT<S>& x, const TensorT<S>& dy) {
    w.grad.mat().noalias() += x.mat().transpose() * dy.mat();
    b.grad.mat().row(0) += dy.mat().colwise().sum();
    TensorT<S> dx = TensorT<S>::zeros(x.shape());
    dx.mat().noalias() = dy.mat() * w.value.mat().transpose();
    return dx;
  }
};

template <class S>
struct SiLU {
  static TensorT<S> forward(const TensorT<S>& x) {
    TensorT<S> y = x;
    for (std::size_t i = 0; i < y.numel(); ++i) {
      const S s = static_cast<S>(1) / (static_cast<S>(1) + std::exp(-x[i]));
      y[i] = x[i] * s;
    }
    return y;
  }
  static TensorT<S> backward(const TensorT<S>& x, const TensorT<S>& dy) {
    TensorT<S> dx = dy;
    for (std::size_t i = 0; i < dx.numel(); ++i) {
      const S s = static_cast<S>(1) / (static_cast<S>(1) + std::exp(-x[i]));
      dx[i] = dy[i] * s * (static_cast<S>(1) + x[i] * (static_cast<S>(1) - s));
    }
    return dx;
  }
};

template <class S>
struct GroupNorm {
  Param<S> gamma, beta;
  int channels = 0, groups = 1;
  static constexpr double kEps = 1e-5;

  struct Stash {
    TensorT<S> xhat;
    std::vector<double> invstd;
  };

  void init(const std::string& prefix, int c) {
    channels = c;
    groups = norm_groups(c);
    gamma.init(prefix + ".g", {1, static_cast<std::size_t>(c)});
    beta.init(prefix + ".b", {1, static_cast<std::size_t>(c)});
    for (std::size_t i = 0; i < gamma.value.numel(); ++i) gamma.value[i] = 1;
  }
  void collect(Registry<S>& r) {
    r.push_back(&gamma);
    r.push_back(&beta);
  }

  TensorT<S> forward(const TensorT<S>& x, Stash* st) const {
    const std::size_t p = x.extent(0), c = x.extent(1);
    const std::size_t cg = c / static_cast<std::size_t>(groups);
    TensorT<S> y = TensorT<S>::zeros(x.shape());
    TensorT<S> xhat = TensorT<S>::zeros(x.shape());
    std::vector<double> invstd(static_cast<std::size_t>(groups));
    const S* xd = x.data();
    S* yd = y.data();
    S* xh = xhat.data();
    const S* gam = gamma.value.data();
    const S* bet = beta.value.data();
    for (int g = 0; g < groups; ++g) {
      const std::size_t c0 = static_cast<std::size_t>(g) * cg;
      double sum = 0, sum2 = 0;
      for (std::size_t i = 0; i < p; ++i) {
        const S* row = xd + i * c + c0;
        for (std::size_t j = 0; j < cg; ++j) {
          const double v = row[j];
          sum += v;
          sum2 += v * v;
        }
      }
      const double n = static_cast<double>(p * cg);
      const double mean = sum / n;
      const double var = std::max(0.0, sum2 / n - mean * mean);
      const double inv = 1.0 / std::sqrt(var + kEps);
      invstd[static_cast<std::size_t>(g)] = inv;
      const S meanS = static_cast<S>(mean);
      const S invS = static_cast<S>(inv);
      for (std::size_t i = 0; i < p; ++i) {
        const std::size_t base = i * c + c0;
        for (std::size_t j = 0; j < cg; ++j) {
          const S h = (xd[base + j] - meanS) * invS;
          xh[base + j] = h;
          yd[base + j] = gam[c0 + j] * h + bet[c0 + j];
        }
      }
    }
    if (st) {
      st->xhat = std::move(xhat);
      st->invstd = std::move(invstd);
    }
    return y;
  }

  TensorT<S> backward(const TensorT<S>& dy, const Stash& st) {
    const std::size_t p = dy.extent(0), c = dy.extent(1);
    const std::size_t cg = c / static_cast<std::size_t>(groups);
    TensorT<S> dx = TensorT<S>::zeros(dy.shape());
    const S* dyd = dy.data();
    const S* xh = st.xhat.data();
    const S* gam = gamma.value.data();
    S* dxd = dx.data();
    std::vector<double> dg(c, 0.0), db(c, 0.0);
    for (std::size_t i = 0; i < p; ++i) {
      const std::size_t base = i * c;
      for (std::size_t j = 0; j < c; ++j) {
        dg[j] += static_cast<double>(dyd[base + j]) * xh[base + j];
        db[j] += dyd[base + j];
      }
    }
    for (std::size_t j = 0; j < c; ++j) {
      gamma.grad[j] += static_cast<S>(dg[j]);
      beta.grad[j] += static_cast<S>(db[j]);
    }
    for (int g = 0; g < groups; ++g) {
      const std::size_t c0 = static_cast<std::size_t>(g) * cg;
      const double n = static_cast<double>(p * cg);
      double m1 = 0, m2 = 0;
      for (std::size_t i = 0; i < p; ++i) {
        const std::size_t base = i * c + c0;
        for (std::size_t j = 0; j < cg; ++j) {
          const double dxh = static_cast<double>(dyd[base + j]) * gam[c0 + j];
          m1 += dxh;
          m2 += dxh * xh[base + j];
        }
      }
      m1 /= n;
      m2 /= n;
      const S m1S = static_cast<S>(m1);
      const S m2S = static_cast<S>(m2);
      const S invS = static_cast<S>(st.invstd[static_cast<std::size_t>(g)]);
      for (std::size_t i = 0; i < p; ++i) {
        const std::size_t base = i * c + c0;
        for (std::size_t j = 0; j < cg; ++j) {
          const S dxh = dyd[base + j] * gam[c0 + j];
          dxd[base + j] = invS * (dxh - m1S - xh[base + j] * m2S);
        }
      }
    }
    return dx;
  }
};

/// 3x3 convolution with padding 1 over token-major features, via im2col.
template <class S>
struct Conv3x3 {
  Param<S> w, b;  // (9*cin) x cout, 1 x cout
  int cin = 0, cout = 0, stride = 1;

  struct Stash {
    TensorT<S> xcol;
    int h = 0, wdt = 0;
  };

  void init(const std::string& prefix, int in, int out, int s, Rng& rng, bool zero = false) {
    cin = in;
    cout = out;
    stride = s;
    w.init(prefix + ".w", {static_cast<std::size_t>(9 * in), static_cast<std::size_t>(out)});
    b.init(prefix + ".b", {1, static_cast<std::size_t>(out)});
    if (!zero) w.fill_normal(rng, 1.0 / std::sqrt(9.0 * in));
  }
  void collect(Registry<S>& r) {
    r.push_back(&w);
    r.push_back(&b);
  }

  TensorT<S> im2col(const TensorT<S>& x, int h, int wdt) const {
    const int oh = (h - 1) / stride + 1, ow = (wdt - 1) / stride + 1;
    TensorT<S> xc = TensorT<S>::zeros({static_cast<std::size_t>(oh) * static_cast<std::size_t>(ow),
                                       static_cast<std::size_t>(9 * cin)});
    const S* xd = x.data();
    S* out = xc.data();
    const auto ci = static_cast<std::size_t>(cin);
    const std::size_t row_len = 9 * ci;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        S* row = out +
                 (static_cast<std::size_t>(oy) * static_cast<std::size_t>(ow) +
                  static_cast<std::size_t>(ox)) *
                     row_len;
        for (int ky = 0; ky < 3; ++ky) {
          const int y = oy * stride + ky - 1;
          if (y < 0 || y >= h) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const int xx = ox * stride + kx - 1;
            if (xx < 0 || xx >= wdt) continue;
            const S* src = xd + (static_cast<std::size_t>(y) * static_cast<std::size_t>(wdt) +
                                 static_cast<std::size_t>(xx)) *
                                    ci;
            std::copy(src, src + ci, row + static_cast<std::size_t>(ky * 3 + kx) * ci);
          }
        }
      }
    }
    return xc;
  }

  TensorT<S> forward(const TensorT<S>& x, int h, int wdt, Stash* st) const {
    TensorT<S> xc = im2col(x, h, wdt);
    TensorT<S> y = matmul(xc, w.value);
    y.mat().rowwise() += b.value.mat().row(0);
    if (st) {
      st->xcol = std::move(xc);
      st->h = h;
      st->wdt = wdt;
    }
    return y;
  }

  TensorT<S> backward(const TensorT<S>& dy, const Stash& st) {
    w.grad.mat().noalias() += st.xcol.mat().transpose() * dy.mat();
    b.grad.mat().row(0) += dy.mat().colwise().sum();

    TensorT<S> dxc = TensorT<S>::zeros(st.xcol.shape());
    dxc.mat().noalias() = dy.mat() * w.value.mat().transpose();

    const int h = st.h, wdt = st.wdt;
    const int oh = (h - 1) / stride + 1, ow = (wdt - 1) / stride + 1;
    TensorT<S> dx = TensorT<S>::zeros({static_cast<std::size_t>(h) * static_cast<std::size_t>(wdt),
                                       static_cast<std::size_t>(cin)});
    const S* dcol = dxc.data();
    S* dxd = dx.data();
    const auto ci = static_cast<std::size_t>(cin);
    const std::size_t row_len = 9 * ci;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const S* row = dcol +
                       (static_cast<std::size_t>(oy) * static_cast<std::size_t>(ow) +
                        static_cast<std::size_t>(ox)) *
                           row_len;
        for (int ky = 0; ky < 3; ++ky) {
          const int y = oy * stride + ky - 1;
          if (y < 0 || y >= h) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const int xx = ox * stride + kx - 1;
            if (xx < 0 || xx >= wdt) continue;
            S* dst = dxd + (static_cast<std::size_t>(y) * static_cast<std::size_t>(wdt) +
                            static_cast<std::size_t>(xx)) *
                               ci;
            const S* src = row + static_cast<std::size_t>(ky * 3 + kx) * ci;
            for (std::size_t k = 0; k < ci; ++k) dst[k] += src[k];
          }
        }
      }
    }
    return dx;
  }
};

template <class S>
struct Conv1x1 {
  Param<S> w, b;

  void init(const std::string& prefix, int in, int out, Rng& rng) {
    w.init(prefix + ".w", {static_cast<std::size_t>(in), static_cast<std::size_t>(out)});
    b.init(prefix + ".b", {1, static_cast<std::size_t>(out)});
    w.fill_normal(rng, 1.0 / std::sqrt(static_cast<double>(in)));
  }
  void collect(Registry<S>& r) {
    r.push_back(&w);
    r.push_back(&b);
  }
  TensorT<S> forward(const TensorT<S>& x) const {
    TensorT<S> y = matmul(x, w.value);
    y.mat().rowwise() += b.value.mat().row(0);
    return y;
  }
  TensorT<S> backward(const TensorT<S>& x, const TensorT<S>& dy) {
    w.grad.mat().noalias() += x.mat().transpose() * dy.mat();
    b.grad.mat().row(0) += dy.mat().colwise().sum();
    TensorT<S> dx = TensorT<S>::zeros(x.shape());
    dx.mat().noalias() = dy.mat() * w.value.mat().transpose();
    return dx;
  }
};

/// Residual block: norm-silu-conv, add time conditioning, norm-silu-conv,
/// with a 1x1 projection on the skip when widths differ. The second conv
/// starts at zero so a fresh block is the identity.
template <class S>
struct ResBlock {
  GroupNorm<S> norm1, norm2;
  Conv3x3<S> conv1, conv2;
  Linear<S> time_proj;
  std::unique_ptr<Conv1x1<S>> skip;
  int cin = 0, cout = 0;

  struct Stash {
    TensorT<S> x, n1, n2, temb_act;
    typename GroupNorm<S>::Stash gn1, gn2;
    typename Conv3x3<S>::Stash cv1, cv2;
  };

  void init(const std::string& prefix, int in, int out, int time_dim, Rng& rng) {
    cin = in;
    cout = out;
    norm1.init(prefix + ".norm1", in);
    conv1.init(prefix + ".conv1", in, out, 1, rng);
    time_proj.init(prefix + ".temb", time_dim, out, rng);
    norm2.init(prefix + ".norm2", out);
    conv2.init(prefix + ".conv2", out, out, 1, rng, /*zero=*/true);
    if (in != out) {
      skip = std::make_unique<Conv1x1<S>>();
      skip->init(prefix + ".skip", in, out, rng);
    }
  }
  void collect(Registry<S>& r) {
    norm1.collect(r);
    conv1.collect(r);
    time_proj.collect(r);
    norm2.collect(r);
    conv2.collect(r);
    if (skip) skip->collect(r);
  }

  TensorT<S> forward(const TensorT<S>& x, int h, int w, const TensorT<S>& temb, Stash* st) const {
    typename GroupNorm<S>::Stash gn1s, gn2s;
    typename Conv3x3<S>::Stash cv1s, cv2s;
    TensorT<S> n1v = norm1.forward(x, st ? &gn1s : nullptr);
    TensorT<S> a1 = SiLU<S>::forward(n1v);
    TensorT<S> c1 = conv1.forward(a1, h, w, st ? &cv1s : nullptr);
    TensorT<S> temb_act = SiLU<S>::forward(temb);
    TensorT<S> tp = time_proj.forward(temb_act);
    c1.mat().rowwise() += tp.mat().row(0);
    TensorT<S> n2 = norm2.forward(c1, st ? &gn2s : nullptr);
    TensorT<S> a2 = SiLU<S>::forward(n2);
    TensorT<S> c2 = conv2.forward(a2, h, w, st ? &cv2s : nullptr);
    TensorT<S> out = skip ? skip->forward(x) : x;
    out.mat() += c2.mat();
    if (st) {
      st->x = x;
      st->n1 = std::move(n1v);
      st->n2 = std::move(n2);
      st->temb_act = std::move(temb_act);
      st->gn1 = std::move(gn1s);
      st->gn2 = std::move(gn2s);
      st->cv1 = std::move(cv1s);
      st->cv2 = std::move(cv2s);
    }
    return out;
  }

  TensorT<S> backward(const TensorT<S>& dy, const Stash& st, TensorT<S>& dtemb_act) {
    TensorT<S> da2 = conv2.backward(dy, st.cv2);
    TensorT<S> dn2 = SiLU<S>::backward(st.n2, da2);
    TensorT<S> dc1t = norm2.backward(dn2, st.gn2);

    TensorT<S> dtp = TensorT<S>::zeros({1, static_cast<std::size_t>(cout)});
    dtp.mat().row(0) = dc1t.mat().colwise().sum();
    dtemb_act.mat() += time_proj.backward(st.temb_act, dtp).mat();

    TensorT<S> da1 = conv1.backward(dc1t, st.cv1);
    TensorT<S> dn1 = SiLU<S>::backward(st.n1, da1);
    TensorT<S> dx = norm1.backward(dn1, st.gn1);

    if (skip) {
      dx.mat() += skip->backward(st.x, dy).mat();
    } else {
      dx.mat() += dy.mat();
    }
    return dx;
  }
};

/// Pre-norm residual self-attention. Mode dispatch and recording live here;
/// the attention math is the shared op-level code.
template <class S>
struct AttnBlock {
  GroupNorm<S> norm;
  Param<S> wq, wk, wv, wo, bq, bk, bv, bo;
  AttentionLayerParams<S> p;  // synced copy handed to the op-level functions
  std::string id;
  int resolution = 0;
  bool decoder = false;

  struct Stash {
    TensorT<S> xn, op;
    std::vector<TensorT<S>> head_maps;
    typename GroupNorm<S>::Stash gn;
  };

  void init(const std::string& prefix, int c, int heads, int res, bool is_decoder, Rng& rng) {
    id = prefix;
    resolution = res;
    decoder = is_decoder;
    norm.init(prefix + ".norm", c);
    const auto d = static_cast<std::size_t>(c);
    const double stddev = 1.0 / std::sqrt(static_cast<double>(c));
    wq.init(prefix + ".wq", {d, d});
    wk.init(prefix + ".wk", {d, d});
    wv.init(prefix + ".wv", {d, d});
    wo.init(prefix + ".wo", {d, d});  // zero: the block starts as the identity
    bq.init(prefix + ".bq", {1, d});
    bk.init(prefix + ".bk", {1, d});
    bv.init(prefix + ".bv", {1, d});
    bo.init(prefix + ".bo", {1, d});
    wq.fill_normal(rng, stddev);
    wk.fill_normal(rng, stddev);
    wv.fill_normal(rng, stddev);
    p.heads = heads;
    p.width = c;
    sync();
  }

  /// Refresh the op-facing view after any weight mutation.
  void sync() {
    p.wq = wq.value;
    p.wk = wk.value;
    p.wv = wv.value;
    p.wo = wo.value;
    p.bq = bq.value;
    p.bk = bk.value;
    p.bv = bv.value;
    p.bo = bo.value;
  }

  void collect(Registry<S>& r) {
    norm.collect(r);
    for (Param<S>* prm : {&wq, &wk, &wv, &wo, &bq, &bk, &bv, &bo}) r.push_back(prm);
  }

  TensorT<S> forward(const TensorT<S>& x, const AttentionMode& mode, const MaskTensor* flat,
                     int timestep, std::vector<AttentionRecord<S>>* records, Stash* st) const {
    typename GroupNorm<S>::Stash gns;
    TensorT<S> xn = norm.forward(x, st ? &gns : nullptr);

    TensorT<S> projected;
    if (mode.kind == AttentionMode::Kind::Standard) {
      if (st) {
        const auto qkv = detail::project_qkv(p, xn);
        const std::size_t tokens = xn.extent(0);
        TensorT<S> op = TensorT<S>::zeros({tokens, static_cast<std::size_t>(p.width)});
        st->head_maps.clear();
        for (int h = 0; h < p.heads; ++h) {
          TensorT<S> sim = detail::head_similarity(qkv, p.heads, h);
          TensorT<S> a = attention_map(sim);
          detail::head_apply(op, a, qkv, p.heads, h);
          st->head_maps.push_back(std::move(a));
        }
        projected = detail::project_out(p, op);
        st->op = std::move(op);
      } else {
        auto [y, rec] = standard_attention(p, xn);
        projected = std::move(y);
        if (records) {
          rec.layer_id = id;
          rec.timestep = timestep;
          records->push_back(std::move(rec));
        }
      }
    } else if (mode.kind == AttentionMode::Kind::Masked) {
      auto [y, rec] = masked_attention(p, xn, *flat);
      projected = std::move(y);
      if (records) {
        rec.layer_id = id;
        rec.timestep = timestep;
        records->push_back(std::move(rec));
      }
    } else {
      auto [y, rec_obj, rec_bg] = tempered_masked_attention(p, xn, *flat, mode.lambda);
      projected = std::move(y);
      if (records) {
        rec_obj.layer_id = id;
        rec_obj.timestep = timestep;
        rec_bg.layer_id = id;
        rec_bg.timestep = timestep;
        records->push_back(std::move(rec_obj));
        records->push_back(std::move(rec_bg));
      }
    }

    TensorT<S> out = x;
    out.mat() += projected.mat();
    if (st) {
      st->xn = std::move(xn);
      st->gn = std::move(gns);
    }
    return out;
  }

  TensorT<S> backward(const TensorT<S>& dy, const Stash& st) {
    const std::size_t tokens = st.xn.extent(0);
    const auto width = static_cast<std::size_t>(p.width);
    const int heads = p.heads;
    const std::size_t dh = width / static_cast<std::size_t>(heads);
    const S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));

    const auto qkv = detail::project_qkv(p, st.xn);

    wo.grad.mat().noalias() += st.op.mat().transpose() * dy.mat();
    bo.grad.mat().row(0) += dy.mat().colwise().sum();
    TensorT<S> dop = TensorT<S>::zeros({tokens, width});
    dop.mat().noalias() = dy.mat() * wo.value.mat().transpose();

    TensorT<S> dq = TensorT<S>::zeros({tokens, width});
    TensorT<S> dk = TensorT<S>::zeros({tokens, width});
    TensorT<S> dv = TensorT<S>::zeros({tokens, width});
    for (int h = 0; h < heads; ++h) {
      const auto off = static_cast<Eigen::Index>(dh * static_cast<std::size_t>(h));
      const auto cols = static_cast<Eigen::Index>(dh);
      const auto& a = st.head_maps[static_cast<std::size_t>(h)];

      MatrixR<S> da = dop.mat().middleCols(off, cols) * qkv.v.mat().middleCols(off, cols).transpose();
      dv.mat().middleCols(off, cols).noalias() = a.mat().transpose() * dop.mat().middleCols(off, cols);

      // Softmax backward: ds = a .* (da - rowsum(da .* a)).
      MatrixR<S> ds(da.rows(), da.cols());
      for (std::size_t i = 0; i < tokens; ++i) {
        double dot = 0;
        for (std::size_t j = 0; j < tokens; ++j) {
          dot += static_cast<double>(
                     da(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))) *
                 a.at2(i, j);
        }
        for (std::size_t j = 0; j < tokens; ++j) {
          ds(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
              a.at2(i, j) *
              (da(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) - static_cast<S>(dot));
        }
      }
      dq.mat().middleCols(off, cols).noalias() = ds * qkv.k.mat().middleCols(off, cols) * inv_sqrt;
      dk.mat().middleCols(off, cols).noalias() =
          ds.transpose() * qkv.q.mat().middleCols(off, cols) * inv_sqrt;
    }

    wq.grad.mat().noalias() += st.xn.mat().transpose() * dq.mat();
    wk.grad.mat().noalias() += st.xn.mat().transpose() * dk.mat();
    wv.grad.mat().noalias() += st.xn.mat().transpose() * dv.mat();
    bq.grad.mat().row(0) += dq.mat().colwise().sum();
    bk.grad.mat().row(0) += dk.mat().colwise().sum();
    bv.grad.mat().row(0) += dv.mat().colwise().sum();

    TensorT<S> dxn = TensorT<S>::zeros({tokens, width});
    dxn.mat().noalias() = dq.mat() * wq.value.mat().transpose();
    dxn.mat().noalias() += dk.mat() * wk.value.mat().transpose();
    dxn.mat().noalias() += dv.mat() * wv.value.mat().transpose();

    TensorT<S> dx = norm.backward(dxn, st.gn);
    dx.mat() += dy.mat();
    return dx;
  }
};

template <class S>
TensorT<S> upsample2(const TensorT<S>& x, int h, int w) {
  const std::size_t c = x.extent(1);
  TensorT<S> y =
      TensorT<S>::zeros({static_cast<std::size_t>(h) * static_cast<std::size_t>(w) * 4, c});
  for (int yy = 0; yy < 2 * h; ++yy) {
    for (int xx = 0; xx < 2 * w; ++xx) {
      const std::size_t dst =
          static_cast<std::size_t>(yy) * static_cast<std::size_t>(2 * w) + static_cast<std::size_t>(xx);
      const std::size_t src =
          static_cast<std::size_t>(yy / 2) * static_cast<std::size_t>(w) + static_cast<std::size_t>(xx / 2);
      for (std::size_t j = 0; j < c; ++j) y.at2(dst, j) = x.at2(src, j);
    }
  }
  return y;
}

template <class S>
TensorT<S> upsample2_backward(const TensorT<S>& dy, int h, int w) {
  const std::size_t c = dy.extent(1);
  TensorT<S> dx = TensorT<S>::zeros({static_cast<std::size_t>(h) * static_cast<std::size_t>(w), c});
  for (int yy = 0; yy < 2 * h; ++yy) {
    for (int xx = 0; xx < 2 * w; ++xx) {
      const std::size_t src =
          static_cast<std::size_t>(yy) * static_cast<std::size_t>(2 * w) + static_cast<std::size_t>(xx);
      const std::size_t dst =
          static_cast<std::size_t>(yy / 2) * static_cast<std::size_t>(w) + static_cast<std::size_t>(xx / 2);
      for (std::size_t j = 0; j < c; ++j) dx.at2(dst, j) += dy.at2(src, j);
    }
  }
  return dx;
}

}  // namespace dn

template <class S>
struct PredictResult {
  TensorT<S> eps;
  std::vector<AttentionRecord<S>> records;
};

/// Per-forward activation stash for the training path.
template <class S>
struct DenoiserStash {
  TensorT<S> sin_embed, t_h1, temb;
  typename dn::Conv3x3<S>::Stash stem;
  std::vector<typename dn::ResBlock<S>::Stash> enc_res;
  std::vector<typename dn::AttnBlock<S>::Stash> enc_attn;
  std::vector<typename dn::Conv3x3<S>::Stash> down;
  typename dn::ResBlock<S>::Stash mid1, mid2;
  typename dn::AttnBlock<S>::Stash mid_attn;
  std::vector<typename dn::ResBlock<S>::Stash> dec_res;
  std::vector<typename dn::AttnBlock<S>::Stash> dec_attn;
  std::vector<typename dn::Conv3x3<S>::Stash> up;
  TensorT<S> head_n;
  typename dn::GroupNorm<S>::Stash head_gn;
  typename dn::Conv3x3<S>::Stash head_conv;
};

template <class S>
class Denoiser {
 public:
  Denoiser(DenoiserConfig config, Rng init_rng) : cfg_(std::move(config)) {
    cfg_.validate();
    build(init_rng);
  }

  Denoiser(const Denoiser&) = delete;
  Denoiser& operator=(const Denoiser&) = delete;

  const DenoiserConfig& config() const { return cfg_; }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto* prm : registry_) n += prm->value.numel();
    return n;
  }

  dn::Registry<S>& params() { return registry_; }
  const dn::Registry<S>& params() const { return registry_; }

  /// Re-sync derived views; call after mutating parameter tensors directly.
  void after_weight_update() {
    for (auto* a : attn_blocks_) a->sync();
  }

  void zero_grad() {
    for (auto* prm : registry_) {
      auto& g = prm->grad;
      std::fill(g.values().begin(), g.values().end(), S{0});
    }
  }

  /// Predict the noise in z_t. A mask must be supplied exactly when the mode
  /// is not Standard; it must carry every attention resolution.
  PredictResult<S> predict(const TensorT<S>& z_t, int t, const AttentionMode& mode,
                           const RemovalMask* mask, bool record = false) const {
    PredictResult<S> out;
    out.eps = forward(z_t, t, mode, mask, record ? &out.records : nullptr, nullptr);
    return out;
  }

  TensorT<S> forward_training(const TensorT<S>& z_t, int t, DenoiserStash<S>& ws) const {
    return forward(z_t, t, AttentionMode::standard(), nullptr, nullptr, &ws);
  }

  void backward_training(const TensorT<S>& deps, const DenoiserStash<S>& ws);

  static double mse_loss(const TensorT<S>& pred, const TensorT<S>& target, TensorT<S>* grad) {
    if (!pred.same_shape(target)) throw ShapeError("loss shapes differ");
    double total = 0;
    if (grad) *grad = TensorT<S>::zeros(pred.shape());
    const double inv = 1.0 / static_cast<double>(pred.numel());
    for (std::size_t i = 0; i < pred.numel(); ++i) {
      const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
      total += d * d;
      if (grad) (*grad)[i] = static_cast<S>(2.0 * d * inv);
    }
    return total * inv;
  }

  // Token layout helpers: {C,H,W} <-> [H*W x C].
  static TensorT<S> to_tokens(const TensorT<S>& chw) {
    const std::size_t c = chw.extent(0), h = chw.extent(1), w = chw.extent(2);
    const std::size_t plane = h * w;
    TensorT<S> t = TensorT<S>::zeros({plane, c});
    for (std::size_t j = 0; j < c; ++j) {
      for (std::size_t pp = 0; pp < plane; ++pp) t.at2(pp, j) = chw[j * plane + pp];
    }
    return t;
  }
  static TensorT<S> from_tokens(const TensorT<S>& tokens, std::size_t h, std::size_t w) {
    const std::size_t c = tokens.extent(1), plane = h * w;
    TensorT<S> out = TensorT<S>::zeros({c, h, w});
    for (std::size_t j = 0; j < c; ++j) {
      for (std::size_t pp = 0; pp < plane; ++pp) out[j * plane + pp] = tokens.at2(pp, j);
    }
    return out;
  }

 private:
  void build(Rng& rng);

  TensorT<S> forward(const TensorT<S>& z_t, int t, const AttentionMode& mode,
                     const RemovalMask* mask, std::vector<AttentionRecord<S>>* records,
                     DenoiserStash<S>* ws) const;

  AttentionMode layer_mode(bool decoder_layer, const AttentionMode& mode) const {
    if (decoder_layer || cfg_.masked_encoder_attention) return mode;
    return AttentionMode::standard();
  }

  DenoiserConfig cfg_;
  dn::Linear<S> time_lin1_, time_lin2_;
  dn::Conv3x3<S> stem_;
  std::vector<dn::ResBlock<S>> enc_res_;
  std::vector<std::unique_ptr<dn::AttnBlock<S>>> enc_attn_;  // per level, may be null
  std::vector<dn::Conv3x3<S>> down_;
  dn::ResBlock<S> mid1_, mid2_;
  dn::AttnBlock<S> mid_attn_;
  std::vector<dn::ResBlock<S>> dec_res_;
  std::vector<std::unique_ptr<dn::AttnBlock<S>>> dec_attn_;
  std::vector<dn::Conv3x3<S>> up_;
  dn::GroupNorm<S> head_norm_;
  dn::Conv3x3<S> head_conv_;

  dn::Registry<S> registry_;
  std::vector<dn::AttnBlock<S>*> attn_blocks_;
};

template <class S>
void Denoiser<S>::build(Rng& rng) {
  const int levels = cfg_.levels();
  time_lin1_.init("time.lin1", cfg_.time_base(), cfg_.time_dim(), rng);
  time_lin2_.init("time.lin2", cfg_.time_dim(), cfg_.time_dim(), rng);
  stem_.init("stem", cfg_.in_channels, cfg_.channels(0), 1, rng);

  enc_res_.resize(static_cast<std::size_t>(levels));
  enc_attn_.resize(static_cast<std::size_t>(levels));
  dec_res_.resize(static_cast<std::size_t>(levels));
  dec_attn_.resize(static_cast<std::size_t>(levels));
  down_.resize(static_cast<std::size_t>(levels - 1));
  up_.resize(static_cast<std::size_t>(levels - 1));

  for (int l = 0; l < levels; ++l) {
    const auto li = static_cast<std::size_t>(l);
    const std::string tag = "n" + std::to_string(cfg_.resolution(l));
    enc_res_[li].init("enc" + std::to_string(l) + ".res", cfg_.channels(l), cfg_.channels(l),
                      cfg_.time_dim(), rng);
    if (cfg_.attend_at(l)) {
      enc_attn_[li] = std::make_unique<dn::AttnBlock<S>>();
      enc_attn_[li]->init("enc_" + tag, cfg_.channels(l), cfg_.heads, cfg_.resolution(l), false,
                          rng);
    }
    if (l + 1 < levels) {
      down_[li].init("down" + std::to_string(l), cfg_.channels(l), cfg_.channels(l + 1), 2, rng);
    }
  }

  const int cb = cfg_.channels(levels - 1);
  const std::string mid_tag = "n" + std::to_string(cfg_.resolution(levels - 1));
  mid1_.init("mid.res1", cb, cb, cfg_.time_dim(), rng);
  mid_attn_.init("mid_" + mid_tag, cb, cfg_.heads, cfg_.resolution(levels - 1), false, rng);
  mid2_.init("mid.res2", cb, cb, cfg_.time_dim(), rng);

  for (int l = levels - 1; l >= 0; --l) {
    const auto li = static_cast<std::size_t>(l);
    const std::string tag = "n" + std::to_string(cfg_.resolution(l));
    dec_res_[li].init("dec" + std::to_string(l) + ".res", 2 * cfg_.channels(l), cfg_.channels(l),
                      cfg_.time_dim(), rng);
    if (cfg_.attend_at(l)) {
      dec_attn_[li] = std::make_unique<dn::AttnBlock<S>>();
      dec_attn_[li]->init("dec_" + tag, cfg_.channels(l), cfg_.heads, cfg_.resolution(l), true,
                          rng);
    }
    if (l > 0) {
      up_[static_cast<std::size_t>(l - 1)].init("up" + std::to_string(l - 1), cfg_.channels(l),
                                                cfg_.channels(l - 1), 1, rng);
    }
  }

  head_norm_.init("head.norm", cfg_.channels(0));
  head_conv_.init("head.conv", cfg_.channels(0), cfg_.in_channels, 1, rng, /*zero=*/true);

  // Fixed registration order defines the optimizer and checkpoint layout.
  time_lin1_.collect(registry_);
  time_lin2_.collect(registry_);
  stem_.collect(registry_);
  for (int l = 0; l < levels; ++l) {
    const auto li = static_cast<std::size_t>(l);
    enc_res_[li].collect(registry_);
    if (enc_attn_[li]) {
      enc_attn_[li]->collect(registry_);
      attn_blocks_.push_back(enc_attn_[li].get());
    }
    if (l + 1 < levels) down_[li].collect(registry_);
  }
  mid1_.collect(registry_);
  mid_attn_.collect(registry_);
  attn_blocks_.push_back(&mid_attn_);
  mid2_.collect(registry_);
  for (int l = levels - 1; l >= 0; --l) {
    const auto li = static_cast<std::size_t>(l);
    dec_res_[li].collect(registry_);
    if (dec_attn_[li]) {
      dec_attn_[li]->collect(registry_);
      attn_blocks_.push_back(dec_attn_[li].get());
    }
    if (l > 0) up_[static_cast<std::size_t>(l - 1)].collect(registry_);
  }
  head_norm_.collect(registry_);
  head_conv_.collect(registry_);
}

template <class S>
TensorT<S> Denoiser<S>::forward(const TensorT<S>& z_t, int t, const AttentionMode& mode,
                                const RemovalMask* mask, std::vector<AttentionRecord<S>>* records,
                                DenoiserStash<S>* ws) const {
  if (mode.needs_mask() != (mask != nullptr)) {
    throw ConfigError(mode.needs_mask() ? "removal modes require a mask"
                                        : "a mask was supplied in standard mode");
  }
  if (ws && mode.kind != AttentionMode::Kind::Standard) {
    throw ConfigError("training runs in standard mode only");
  }
  const auto hw = static_cast<std::size_t>(cfg_.image_size);
  if (z_t.shape() != Shape{static_cast<std::size_t>(cfg_.in_channels), hw, hw}) {
    throw ShapeError("latent shape " + shape_to_string(z_t.shape()) +
                     " does not match the model configuration");
  }
  if (mask) {
    if (mask->base.shape() != Shape{hw, hw}) {
      throw ShapeError("mask resolution does not match the model");
    }
    for (int r : cfg_.mask_resolutions()) (void)mask->at(r);
  }

  const int levels = cfg_.levels();

  // Time conditioning.
  const int tb = cfg_.time_base();
  TensorT<S> sin_embed = TensorT<S>::zeros({1, static_cast<std::size_t>(tb)});
  const int half = tb / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
    sin_embed[static_cast<std::size_t>(i)] = static_cast<S>(std::cos(t * freq));
    sin_embed[static_cast<std::size_t>(i + half)] = static_cast<S>(std::sin(t * freq));
  }
  TensorT<S> t_h1 = time_lin1_.forward(sin_embed);
  TensorT<S> temb = time_lin2_.forward(dn::SiLU<S>::forward(t_h1));
  if (ws) {
    ws->sin_embed = sin_embed;
    ws->t_h1 = t_h1;
    ws->temb = temb;
    ws->enc_res.resize(static_cast<std::size_t>(levels));
    ws->enc_attn.resize(static_cast<std::size_t>(levels));
    ws->down.resize(static_cast<std::size_t>(levels - 1));
    ws->dec_res.resize(static_cast<std::size_t>(levels));
    ws->dec_attn.resize(static_cast<std::size_t>(levels));
    ws->up.resize(static_cast<std::size_t>(levels - 1));
  }

  auto flat_for = [&](int res) -> const MaskTensor* { return mask ? &mask->at(res) : nullptr; };

  // Encoder.
  TensorT<S> h = stem_.forward(to_tokens(z_t), cfg_.image_size, cfg_.image_size,
                               ws ? &ws->stem : nullptr);
  std::vector<TensorT<S>> skips;
  skips.reserve(static_cast<std::size_t>(levels));
  for (int l = 0; l < levels; ++l) {
    const auto li = static_cast<std::size_t>(l);
    const int res = cfg_.resolution(l);
    h = enc_res_[li].forward(h, res, res, temb, ws ? &ws->enc_res[li] : nullptr);
    if (enc_attn_[li]) {
      const AttentionMode m = layer_mode(false, mode);
      h = enc_attn_[li]->forward(h, m, m.needs_mask() ? flat_for(res) : nullptr, t, records,
                                 ws ? &ws->enc_attn[li] : nullptr);
    }
    skips.push_back(h);
    if (l + 1 < levels) {
      h = down_[li].forward(h, res, res, ws ? &ws->down[li] : nullptr);
    }
  }

  // Bottleneck.
  {
    const int res = cfg_.resolution(levels - 1);
    h = mid1_.forward(h, res, res, temb, ws ? &ws->mid1 : nullptr);
    const AttentionMode m = layer_mode(false, mode);
    h = mid_attn_.forward(h, m, m.needs_mask() ? flat_for(res) : nullptr, t, records,
                          ws ? &ws->mid_attn : nullptr);
    h = mid2_.forward(h, res, res, temb, ws ? &ws->mid2 : nullptr);
  }

  // Decoder.
  for (int l = levels - 1; l >= 0; --l) {
    const auto li = static_cast<std::size_t>(l);
    const int res = cfg_.resolution(l);
    const auto c = static_cast<std::size_t>(cfg_.channels(l));
    const std::size_t tokens = h.extent(0);

    TensorT<S> cat = TensorT<S>::zeros({tokens, 2 * c});
    cat.mat().leftCols(static_cast<Eigen::Index>(c)) = h.mat();
    cat.mat().rightCols(static_cast<Eigen::Index>(c)) = skips[li].mat();

    h = dec_res_[li].forward(cat, res, res, temb, ws ? &ws->dec_res[li] : nullptr);
    if (dec_attn_[li]) {
      const AttentionMode m = layer_mode(true, mode);
      h = dec_attn_[li]->forward(h, m, m.needs_mask() ? flat_for(res) : nullptr, t, records,
                                 ws ? &ws->dec_attn[li] : nullptr);
    }
    if (l > 0) {
      TensorT<S> upd = dn::upsample2(h, res, res);
      h = up_[static_cast<std::size_t>(l - 1)].forward(upd, 2 * res, 2 * res,
                                                       ws ? &ws->up[static_cast<std::size_t>(l - 1)]
                                                          : nullptr);
    }
  }

  TensorT<S> hn = head_norm_.forward(h, ws ? &ws->head_gn : nullptr);
  TensorT<S> ha = dn::SiLU<S>::forward(hn);
  TensorT<S> eps_tokens =
      head_conv_.forward(ha, cfg_.image_size, cfg_.image_size, ws ? &ws->head_conv : nullptr);
  if (ws) ws->head_n = std::move(hn);
  return from_tokens(eps_tokens, hw, hw);
}

template <class S>
void Denoiser<S>::backward_training(const TensorT<S>& deps, const DenoiserStash<S>& ws) {
  const int levels = cfg_.levels();
  TensorT<S> d = to_tokens(deps);
  TensorT<S> dtemb_act_sum = TensorT<S>::zeros({1, static_cast<std::size_t>(cfg_.time_dim())});
  // d(temb) accumulated across blocks; each block contributes through its own
  // SiLU(temb) stash, all of which saw the same temb.
  auto res_backward = [&](dn::ResBlock<S>& block, const typename dn::ResBlock<S>::Stash& st,
                          const TensorT<S>& dy) {
    TensorT<S> dtemb_act = TensorT<S>::zeros({1, static_cast<std::size_t>(cfg_.time_dim())});
    TensorT<S> dx = block.backward(dy, st, dtemb_act);
    dtemb_act_sum.mat() += dtemb_act.mat();
    return dx;
  };

  // Head.
  d = head_conv_.backward(d, ws.head_conv);
  d = dn::SiLU<S>::backward(ws.head_n, d);
  d = head_norm_.backward(d, ws.head_gn);

  // Decoder in reverse.
  std::vector<TensorT<S>> dskips(static_cast<std::size_t>(levels));
  for (int l = 0; l <= levels - 1; ++l) {
    const auto li = static_cast<std::size_t>(l);
    const int res = cfg_.resolution(l);
    const auto c = static_cast<std::size_t>(cfg_.channels(l));

    if (l > 0) {
      TensorT<S> dupd = up_[static_cast<std::size_t>(l - 1)].backward(
          d, ws.up[static_cast<std::size_t>(l - 1)]);
      d = dn::upsample2_backward(dupd, res, res);
    }
    if (dec_attn_[li]) d = dec_attn_[li]->backward(d, ws.dec_attn[li]);
    TensorT<S> dcat = res_backward(dec_res_[li], ws.dec_res[li], d);
    const std::size_t tokens = dcat.extent(0);
    TensorT<S> dh = TensorT<S>::zeros({tokens, c});
    TensorT<S> dskip = TensorT<S>::zeros({tokens, c});
    dh.mat() = dcat.mat().leftCols(static_cast<Eigen::Index>(c));
    dskip.mat() = dcat.mat().rightCols(static_cast<Eigen::Index>(c));
    dskips[li] = std::move(dskip);
    d = std::move(dh);
  }

  // Bottleneck.
  d = res_backward(mid2_, ws.mid2, d);
  d = mid_attn_.backward(d, ws.mid_attn);
  d = res_backward(mid1_, ws.mid1, d);

  // Encoder in reverse.
  for (int l = levels - 1; l >= 0; --l) {
    const auto li = static_cast<std::size_t>(l);
    if (l + 1 < levels) {
      d = down_[li].backward(d, ws.down[li]);
    }
    d.mat() += dskips[li].mat();
    if (enc_attn_[li]) d = enc_attn_[li]->backward(d, ws.enc_attn[li]);
    d = res_backward(enc_res_[li], ws.enc_res[li], d);
  }
  d = stem_.backward(d, ws.stem);

  // Time MLP: the blocks accumulated d(SiLU(temb)).
  TensorT<S> dtemb = dn::SiLU<S>::backward(ws.temb, dtemb_act_sum);
  TensorT<S> da1t = time_lin2_.backward(dn::SiLU<S>::forward(ws.t_h1), dtemb);
  TensorT<S> dh1 = dn::SiLU<S>::backward(ws.t_h1, da1t);
  (void)time_lin1_.backward(ws.sin_embed, dh1);
}

}  // namespace scrub
