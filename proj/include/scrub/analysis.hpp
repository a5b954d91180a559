#pragma once

// Attention diagnostics: time-averaged maps clustered into token groups, and
// per-step rank-1 structure heatmaps. Figures land under
// {out}/{layer}/{timestep}_{mode}.png with a per-layer cluster panel.

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "scrub/attention.hpp"
#include "scrub/pipeline.hpp"
#include "scrub/tensor.hpp"

namespace scrub {

/// Arithmetic mean of the attention maps recorded for one layer. Records for
/// other layers are ignored; selected records must agree on resolution.
Tensor average_attention(std::span<const AttentionRecord<float>> records,
                         const std::string& layer_id);

/// Project the averaged map to three components and cluster the tokens.
std::vector<int> token_clusters(const Tensor& avg, int k, Rng& rng);

/// Right singular direction of the map's best rank-1 approximation, reshaped
/// to the token grid and min-max normalized into [0,1]. A constant map (no
/// rank-1 structure to show) comes back all zero.
Tensor top1_heatmap_map(const Tensor& attention);
Tensor top1_heatmap(const AttentionRecord<float>& record);

/// Row-blend of a tempered record pair: foreground rows from the tempered
/// branch, background rows from the plain masked branch.
Tensor effective_attention(const AttentionRecord<float>& obj, const AttentionRecord<float>& bg,
                           const MaskTensor& flat);

/// PNG of an N x N grid of [0,1] values through the fixed color table; each
/// cell becomes a scale x scale block.
void export_heatmap(const Tensor& grid, const std::filesystem::path& path, int scale = 1);

/// Inverse of export_heatmap; throws if any pixel is not a table color.
Tensor read_heatmap(const std::filesystem::path& path, int scale = 1);

struct AnalyzeOptions {
  std::filesystem::path out_dir;
  int clusters = 5;
  int scale = 4;
};

struct AnalyzeSummary {
  std::vector<std::string> layers;
  std::size_t heatmaps = 0;
  std::size_t cluster_panels = 0;
};

/// Emit the full figure set for a recorded removal run: per layer a cluster
/// panel of the time-averaged redirected attention, per step a rank-1
/// heatmap. Returns what was written.
AnalyzeSummary analyze_trace(const LoadedTrace& trace, const AnalyzeOptions& opts, Rng& rng);

}  // namespace scrub
