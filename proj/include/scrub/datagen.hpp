#pragma once

// Synthetic scenes with exact removal ground truth: a background with known
// pixels, one flat-colored shape composited on top, and the shape's exact
// pixel mask. Optionally a twin of the shape is baked into the background so
// look-alike content survives removal.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "scrub/tensor.hpp"

namespace scrub {

enum class ShapeKind : std::uint8_t { Disk, Rectangle, Triangle };
enum class BackgroundKind : std::uint8_t { Gradient, Blobs, Stripes };

const char* shape_kind_name(ShapeKind k);
const char* background_kind_name(BackgroundKind k);
ShapeKind shape_kind_from_name(const std::string& name);
BackgroundKind background_kind_from_name(const std::string& name);

struct SceneSpec {
  int size = 64;
  std::vector<ShapeKind> shapes{ShapeKind::Disk, ShapeKind::Rectangle, ShapeKind::Triangle};
  std::vector<BackgroundKind> backgrounds{BackgroundKind::Gradient, BackgroundKind::Blobs,
                                          BackgroundKind::Stripes};
  double min_coverage = 0.02;
  double max_coverage = 0.40;
  bool twin = false;   // bake a second copy of the shape into the background
  int twin_margin = 8; // minimum gap between shape and twin bounding boxes
};

struct ShapeDesc {
  ShapeKind kind = ShapeKind::Disk;
  BackgroundKind background = BackgroundKind::Gradient;
  int cx = 0, cy = 0;       // center
  int a = 0, b = 0;         // radius / half extents
  std::array<std::uint8_t, 3> color{0, 0, 0};
  bool has_twin = false;
  int twin_cx = 0, twin_cy = 0;
};

struct Scene {
  std::string name;
  Tensor composite;   // {3, H, W} in [0,1], on the 8-bit grid
  Tensor background;  // ground truth after perfect removal
  MaskTensor mask;    // {H, W}
  ShapeDesc shape;
  std::uint64_t seed = 0;
};

/// Exact pixel set of the shape described by (kind, center, a, b).
MaskTensor rasterize_shape(ShapeKind kind, int cx, int cy, int a, int b, int size);

/// Pixel set of the twin, empty if the scene has none.
MaskTensor twin_mask(const Scene& scene);

/// Deterministic given the stream state and spec. Throws ConfigError when no
/// placement satisfies the coverage bounds.
Scene gen_scene(Rng& rng, const SceneSpec& spec);

/// Enforces the scene invariants: composite equals background outside the
/// mask, the mask is exactly the descriptor's raster (and the composite is
/// the flat shape color inside it), and coverage lies inside the bounds.
void validate_scene(const Scene& scene, const SceneSpec& spec);

/// PNG triplets plus manifest.txt and a README describing the layout.
void write_corpus(const std::vector<Scene>& scenes, const std::filesystem::path& dir,
                  std::uint64_t corpus_seed, const SceneSpec& spec);

/// Reads scenes [first, first+count) of a corpus (count = 0 means through
/// the end), checking triplet completeness and that each scene's recorded
/// seed matches the stream derived from the corpus seed.
std::vector<Scene> read_corpus(const std::filesystem::path& dir, bool validate = true,
                               std::size_t first = 0, std::size_t count = 0);

/// Generate scenes [first, first+count) of a corpus without materializing the
/// rest; scene i always comes from rng.fork(i).
std::vector<Scene> gen_scenes(std::uint64_t corpus_seed, const SceneSpec& spec, std::size_t first,
                              std::size_t count);

/// Load just one image per scene ("composite" or "background"), index range
/// [first, first+count) clamped to the corpus size; count = 0 means all.
std::vector<Tensor> read_corpus_images(const std::filesystem::path& dir, const std::string& part,
                                       std::size_t first = 0, std::size_t count = 0);

/// Scene count recorded in a corpus manifest.
std::size_t corpus_size(const std::filesystem::path& dir);

}  // namespace scrub
