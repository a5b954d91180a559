#include "scrub/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "scrub/colormap.hpp"
#include "scrub/errors.hpp"
#include "scrub/image_io.hpp"
#include "scrub/linalg.hpp"

namespace scrub {

Tensor average_attention(std::span<const AttentionRecord<float>> records,
                         const std::string& layer_id) {
  Tensor sum;
  std::size_t count = 0;
  for (const auto& rec : records) {
    if (rec.layer_id != layer_id) continue;
    if (count == 0) {
      sum = rec.attention;
    } else {
      if (!sum.same_shape(rec.attention)) {
        throw ShapeError("records for layer '" + layer_id + "' have mixed resolutions");
      }
      for (std::size_t i = 0; i < sum.numel(); ++i) sum[i] += rec.attention[i];
    }
    ++count;
  }
  if (count == 0) throw ValueError("no records for layer '" + layer_id + "'");
  const float inv = 1.0f / static_cast<float>(count);
  for (std::size_t i = 0; i < sum.numel(); ++i) sum[i] *= inv;
  return sum;
}

std::vector<int> token_clusters(const Tensor& avg, int k, Rng& rng) {
  if (k < 2) throw ConfigError("clustering needs k >= 2");
  if (avg.rank() != 2) throw ShapeError("token_clusters expects a square attention map");
  const std::size_t dims = std::min<std::size_t>(3, avg.extent(1));
  Tensor proj = pca_top(avg, dims);
  return kmeans(proj, static_cast<std::size_t>(k), rng);
}

Tensor top1_heatmap_map(const Tensor& attention) {
  if (attention.rank() != 2 || attention.extent(0) != attention.extent(1)) {
    throw ShapeError("attention map must be square");
  }
  const auto tokens = attention.extent(0);
  const auto n = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(tokens))));
  if (n * n != tokens) throw ShapeError("token count is not a square grid");

  const auto top = svd_top1(attention);
  Tensor grid = TensorT<float>::zeros({n, n});
  float lo = top.v[0], hi = top.v[0];
  for (std::size_t i = 0; i < tokens; ++i) {
    lo = std::min(lo, top.v[i]);
    hi = std::max(hi, top.v[i]);
  }
  if (hi - lo < 1e-12f) return grid;
  for (std::size_t i = 0; i < tokens; ++i) grid[i] = (top.v[i] - lo) / (hi - lo);
  return grid;
}

Tensor top1_heatmap(const AttentionRecord<float>& record) {
  return top1_heatmap_map(record.attention);
}

Tensor effective_attention(const AttentionRecord<float>& obj, const AttentionRecord<float>& bg,
                           const MaskTensor& flat) {
  if (obj.kind != AttentionKind::TemperedObj || bg.kind != AttentionKind::TemperedBg) {
    throw ValueError("effective_attention expects a tempered record pair");
  }
  if (!obj.attention.same_shape(bg.attention) || flat.numel() != obj.attention.extent(0)) {
    throw ShapeError("tempered records and mask disagree on token count");
  }
  Tensor out = bg.attention;
  const std::size_t tokens = flat.numel();
  for (std::size_t i = 0; i < tokens; ++i) {
    if (!flat[i]) continue;
    for (std::size_t j = 0; j < tokens; ++j) out.at2(i, j) = obj.attention.at2(i, j);
  }
  return out;
}

void export_heatmap(const Tensor& grid, const std::filesystem::path& path, int scale) {
  if (grid.rank() != 2) throw ShapeError("heatmap grid must be rank 2");
  if (scale < 1) throw ConfigError("heatmap scale must be positive");
  const auto& lut = heatmap_lut();
  const std::size_t h = grid.extent(0), w = grid.extent(1);
  const auto s = static_cast<std::size_t>(scale);
  Tensor img = Tensor::zeros({3, h * s, w * s});
  const std::size_t plane = h * s * w * s;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const float v = grid.at2(y, x);
      if (!(v >= 0.0f && v <= 1.0f)) throw ValueError("heatmap values must lie in [0, 1]");
      const auto idx = static_cast<std::size_t>(std::lround(v * 255.0f));
      const Rgb& c = lut[idx];
      for (std::size_t dy = 0; dy < s; ++dy) {
        for (std::size_t dx = 0; dx < s; ++dx) {
          const std::size_t p = (y * s + dy) * (w * s) + (x * s + dx);
          img[0 * plane + p] = static_cast<float>(c[0]) / 255.0f;
          img[1 * plane + p] = static_cast<float>(c[1]) / 255.0f;
          img[2 * plane + p] = static_cast<float>(c[2]) / 255.0f;
        }
      }
    }
  }
  write_png(img, path);
}

Tensor read_heatmap(const std::filesystem::path& path, int scale) {
  Tensor img = read_png(path);
  if (img.extent(0) != 3) throw IoError("heatmap PNG must be RGB");
  const auto s = static_cast<std::size_t>(scale);
  const std::size_t h = img.extent(1) / s, w = img.extent(2) / s;
  const std::size_t plane = img.extent(1) * img.extent(2);
  Tensor grid = Tensor::zeros({h, w});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t p = (y * s) * img.extent(2) + x * s;
      const auto r = static_cast<std::uint8_t>(std::lround(img[0 * plane + p] * 255.0f));
      const auto g = static_cast<std::uint8_t>(std::lround(img[1 * plane + p] * 255.0f));
      const auto b = static_cast<std::uint8_t>(std::lround(img[2 * plane + p] * 255.0f));
      const int idx = heatmap_lut_index(r, g, b);
      if (idx < 0) throw IoError("'" + path.string() + "' holds a pixel outside the color table");
      grid.at2(y, x) = static_cast<float>(idx) / 255.0f;
    }
  }
  return grid;
}

namespace {

struct StepMaps {
  int timestep;
  std::string mode;
  Tensor attention;
};

// One attention map per (layer, timestep): tempered pairs are blended, and a
// redirected record wins over the plain branch recorded alongside it.
std::vector<StepMaps> per_step_maps(const LoadedTrace& trace, const std::string& layer) {
  std::map<int, StepMaps> by_step;
  std::map<int, const AttentionRecord<float>*> pending_obj;
  for (const auto& rec : trace.trace.records) {
    if (rec.layer_id != layer) continue;
    switch (rec.kind) {
      case AttentionKind::Standard: {
        auto it = by_step.find(rec.timestep);
        if (it == by_step.end()) {
          by_step[rec.timestep] = {rec.timestep, "standard", rec.attention};
        }
        break;
      }
      case AttentionKind::Masked:
        by_step[rec.timestep] = {rec.timestep, "masked", rec.attention};
        break;
      case AttentionKind::TemperedObj:
        pending_obj[rec.timestep] = &rec;
        break;
      case AttentionKind::TemperedBg: {
        const auto it = pending_obj.find(rec.timestep);
        if (it == pending_obj.end()) {
          throw ValueError("tempered record pair is incomplete in the trace");
        }
        const auto tokens = rec.attention.extent(0);
        const auto n = static_cast<int>(std::lround(std::sqrt(static_cast<double>(tokens))));
        const auto flat_it = trace.mask_flat.find(n);
        if (flat_it == trace.mask_flat.end()) {
          throw ValueError("trace lacks the flattened mask for resolution " + std::to_string(n));
        }
        by_step[rec.timestep] = {rec.timestep, "tempered",
                                 effective_attention(*it->second, rec, flat_it->second)};
        break;
      }
    }
  }
  std::vector<StepMaps> out;
  out.reserve(by_step.size());
  for (auto& [t, maps] : by_step) out.push_back(std::move(maps));
  return out;
}

}  // namespace

AnalyzeSummary analyze_trace(const LoadedTrace& trace, const AnalyzeOptions& opts, Rng& rng) {
  AnalyzeSummary summary;
  for (const auto& rec : trace.trace.records) {
    if (std::find(summary.layers.begin(), summary.layers.end(), rec.layer_id) ==
        summary.layers.end()) {
      summary.layers.push_back(rec.layer_id);
    }
  }
  if (summary.layers.empty()) throw ValueError("trace holds no attention records");

  for (const std::string& layer : summary.layers) {
    const auto steps = per_step_maps(trace, layer);
    if (steps.empty()) continue;
    const auto dir = opts.out_dir / layer;
    std::filesystem::create_directories(dir);

    // Per-step rank-1 heatmaps.
    char name[64];
    for (const auto& sm : steps) {
      std::snprintf(name, sizeof(name), "%04d_%s.png", sm.timestep, sm.mode.c_str());
      export_heatmap(top1_heatmap_map(sm.attention), dir / name, opts.scale);
      ++summary.heatmaps;
    }

    // Time-averaged map -> cluster panel.
    Tensor avg = steps.front().attention;
    for (std::size_t i = 1; i < steps.size(); ++i) {
      for (std::size_t j = 0; j < avg.numel(); ++j) avg[j] += steps[i].attention[j];
    }
    for (std::size_t j = 0; j < avg.numel(); ++j) {
      avg[j] /= static_cast<float>(steps.size());
    }
    const auto labels = token_clusters(avg, opts.clusters, rng);
    const auto tokens = avg.extent(0);
    const auto n = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(tokens))));
    Tensor grid = Tensor::zeros({n, n});
    for (std::size_t i = 0; i < tokens; ++i) {
      grid[i] = static_cast<float>(labels[i]) / static_cast<float>(opts.clusters - 1);
    }
    export_heatmap(grid, dir / "clusters.png", opts.scale);
    ++summary.cluster_panels;
  }
  return summary;
}

}  // namespace scrub
