#include "scrub/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "scrub/errors.hpp"
#include "scrub/image_io.hpp"

namespace scrub {
namespace {

constexpr int kPlacementAttempts = 400;

struct RgbImage {
  int size = 0;
  std::vector<std::uint8_t> px;  // interleaved rgb

  std::uint8_t& at(int y, int x, int c) { return px[(static_cast<std::size_t>(y) * size + x) * 3 + c]; }
  std::uint8_t at(int y, int x, int c) const {
    return px[(static_cast<std::size_t>(y) * size + x) * 3 + c];
  }
};

std::array<std::uint8_t, 3> random_color(Rng& rng) {
  return {static_cast<std::uint8_t>(rng.uniform_index(256)),
          static_cast<std::uint8_t>(rng.uniform_index(256)),
          static_cast<std::uint8_t>(rng.uniform_index(256))};
}

RgbImage paint_gradient(Rng& rng, int size) {
  RgbImage img{size, std::vector<std::uint8_t>(static_cast<std::size_t>(size) * size * 3)};
  const auto c0 = random_color(rng), c1 = random_color(rng);
  const double theta = rng.uniform() * 2.0 * M_PI;
  const double dx = std::cos(theta), dy = std::sin(theta);
  double lo = 1e30, hi = -1e30;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double p = dx * x + dy * y;
      lo = std::min(lo, p);
      hi = std::max(hi, p);
    }
  }
  const double span = std::max(hi - lo, 1e-9);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double t = (dx * x + dy * y - lo) / span;
      for (int c = 0; c < 3; ++c) {
        img.at(y, x, c) = static_cast<std::uint8_t>(std::lround(c0[c] + t * (c1[c] - c0[c])));
      }
    }
  }
  return img;
}

// Coarse random grid, bilinearly upsampled: band-limited blotches.
RgbImage paint_blobs(Rng& rng, int size) {
  RgbImage img{size, std::vector<std::uint8_t>(static_cast<std::size_t>(size) * size * 3)};
  const int g = 4 + static_cast<int>(rng.uniform_index(3));
  std::vector<std::uint8_t> grid(static_cast<std::size_t>(g) * g * 3);
  for (auto& v : grid) v = static_cast<std::uint8_t>(rng.uniform_index(256));
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double u = static_cast<double>(x) * (g - 1) / (size - 1);
      const double v = static_cast<double>(y) * (g - 1) / (size - 1);
      const int u0 = std::min(static_cast<int>(u), g - 2);
      const int v0 = std::min(static_cast<int>(v), g - 2);
      const double fu = u - u0, fv = v - v0;
      for (int c = 0; c < 3; ++c) {
        auto cell = [&](int vy, int vx) {
          return static_cast<double>(grid[(static_cast<std::size_t>(vy) * g + vx) * 3 + c]);
        };
        const double val = (1 - fv) * ((1 - fu) * cell(v0, u0) + fu * cell(v0, u0 + 1)) +
                           fv * ((1 - fu) * cell(v0 + 1, u0) + fu * cell(v0 + 1, u0 + 1));
        img.at(y, x, c) = static_cast<std::uint8_t>(std::lround(val));
      }
    }
  }
  return img;
}

RgbImage paint_stripes(Rng& rng, int size) {
  RgbImage img{size, std::vector<std::uint8_t>(static_cast<std::size_t>(size) * size * 3)};
  const auto c0 = random_color(rng), c1 = random_color(rng);
  const double angles[] = {0, 30, 45, 60, 90, 120, 135, 150};
  const double theta = angles[rng.uniform_index(8)] * M_PI / 180.0;
  const double period = 6.0 + static_cast<double>(rng.uniform_index(11));
  const double offset = rng.uniform() * period;
  const double dx = std::cos(theta), dy = std::sin(theta);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double band = std::floor((dx * x + dy * y + offset) / period);
      const auto& c = (static_cast<std::int64_t>(band) % 2 + 2) % 2 == 0 ? c0 : c1;
      for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = c[ch];
    }
  }
  return img;
}

RgbImage paint_background(Rng& rng, BackgroundKind kind, int size) {
  switch (kind) {
    case BackgroundKind::Gradient: return paint_gradient(rng, size);
    case BackgroundKind::Blobs: return paint_blobs(rng, size);
    case BackgroundKind::Stripes: return paint_stripes(rng, size);
  }
  throw ConfigError("unknown background kind");
}

struct Bounds {
  int x0, y0, x1, y1;  // inclusive
};

Bounds shape_bounds(ShapeKind kind, int cx, int cy, int a, int b) {
  switch (kind) {
    case ShapeKind::Disk: return {cx - a, cy - a, cx + a, cy + a};
    case ShapeKind::Rectangle: return {cx - a, cy - b, cx + a, cy + b};
    case ShapeKind::Triangle: return {cx - a, cy - b, cx + a, cy + b};
  }
  throw ConfigError("unknown shape kind");
}

bool bounds_disjoint(const Bounds& p, const Bounds& q, int margin) {
  return p.x1 + margin < q.x0 || q.x1 + margin < p.x0 || p.y1 + margin < q.y0 ||
         q.y1 + margin < p.y0;
}

Tensor raw_to_tensor(const RgbImage& img) {
  const auto size = static_cast<std::size_t>(img.size);
  Tensor t = Tensor::zeros({3, size, size});
  const std::size_t plane = size * size;
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        t[c * plane + y * size + x] =
            static_cast<float>(img.at(static_cast<int>(y), static_cast<int>(x), static_cast<int>(c))) /
            255.0f;
      }
    }
  }
  return t;
}

double masked_contrast(const RgbImage& bg, const MaskTensor& mask,
                       const std::array<std::uint8_t, 3>& color) {
  double total = 0.0;
  std::size_t count = 0;
  for (int y = 0; y < bg.size; ++y) {
    for (int x = 0; x < bg.size; ++x) {
      if (!mask.at2(static_cast<std::size_t>(y), static_cast<std::size_t>(x))) continue;
      double d = 0.0;
      for (int c = 0; c < 3; ++c) d += std::abs(static_cast<double>(bg.at(y, x, c)) - color[c]);
      total += d / (3.0 * 255.0);
      ++count;
    }
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

void stamp(RgbImage& img, const MaskTensor& raster, const std::array<std::uint8_t, 3>& color) {
  for (int y = 0; y < img.size; ++y) {
    for (int x = 0; x < img.size; ++x) {
      if (raster.at2(static_cast<std::size_t>(y), static_cast<std::size_t>(x))) {
        for (int c = 0; c < 3; ++c) img.at(y, x, c) = color[c];
      }
    }
  }
}

}  // namespace

const char* shape_kind_name(ShapeKind k) {
  switch (k) {
    case ShapeKind::Disk: return "disk";
    case ShapeKind::Rectangle: return "rectangle";
    case ShapeKind::Triangle: return "triangle";
  }
  return "?";
}

const char* background_kind_name(BackgroundKind k) {
  switch (k) {
    case BackgroundKind::Gradient: return "gradient";
    case BackgroundKind::Blobs: return "blobs";
    case BackgroundKind::Stripes: return "stripes";
  }
  return "?";
}

ShapeKind shape_kind_from_name(const std::string& name) {
  if (name == "disk") return ShapeKind::Disk;
  if (name == "rectangle") return ShapeKind::Rectangle;
  if (name == "triangle") return ShapeKind::Triangle;
  throw ConfigError("unknown shape kind '" + name + "'");
}

BackgroundKind background_kind_from_name(const std::string& name) {
  if (name == "gradient") return BackgroundKind::Gradient;
  if (name == "blobs") return BackgroundKind::Blobs;
  if (name == "stripes") return BackgroundKind::Stripes;
  throw ConfigError("unknown background kind '" + name + "'");
}

MaskTensor rasterize_shape(ShapeKind kind, int cx, int cy, int a, int b, int size) {
  MaskTensor m = MaskTensor::zeros({static_cast<std::size_t>(size), static_cast<std::size_t>(size)});
  auto put = [&](int y, int x) {
    if (y >= 0 && y < size && x >= 0 && x < size) {
      m.at2(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = 1;
    }
  };
  switch (kind) {
    case ShapeKind::Disk:
      for (int y = cy - a; y <= cy + a; ++y) {
        for (int x = cx - a; x <= cx + a; ++x) {
          const std::int64_t dx = x - cx, dy = y - cy;
          if (dx * dx + dy * dy <= static_cast<std::int64_t>(a) * a) put(y, x);
        }
      }
      break;
    case ShapeKind::Rectangle:
      for (int y = cy - b; y <= cy + b; ++y) {
        for (int x = cx - a; x <= cx + a; ++x) put(y, x);
      }
      break;
    case ShapeKind::Triangle: {
      // Isoceles triangle, apex up; inclusion by integer half-plane tests.
      const std::int64_t v0x = cx, v0y = cy - b;
      const std::int64_t v1x = cx + a, v1y = cy + b;
      const std::int64_t v2x = cx - a, v2y = cy + b;
      auto edge = [](std::int64_t ax, std::int64_t ay, std::int64_t bx, std::int64_t by,
                     std::int64_t px, std::int64_t py) {
        return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
      };
      for (int y = cy - b; y <= cy + b; ++y) {
        for (int x = cx - a; x <= cx + a; ++x) {
          const bool inside = edge(v0x, v0y, v1x, v1y, x, y) >= 0 &&
                              edge(v1x, v1y, v2x, v2y, x, y) >= 0 &&
                              edge(v2x, v2y, v0x, v0y, x, y) >= 0;
          if (inside) put(y, x);
        }
      }
      break;
    }
  }
  return m;
}

MaskTensor twin_mask(const Scene& scene) {
  const int size = static_cast<int>(scene.mask.extent(0));
  if (!scene.shape.has_twin) {
    return MaskTensor::zeros({static_cast<std::size_t>(size), static_cast<std::size_t>(size)});
  }
  return rasterize_shape(scene.shape.kind, scene.shape.twin_cx, scene.shape.twin_cy, scene.shape.a,
                         scene.shape.b, size);
}

Scene gen_scene(Rng& rng, const SceneSpec& spec) {
  if (spec.size < 16) throw ConfigError("scene size must be at least 16");
  if (spec.shapes.empty() || spec.backgrounds.empty()) {
    throw ConfigError("scene spec needs at least one shape and one background kind");
  }

  Scene scene;
  scene.seed = rng.seed_state();

  const int size = spec.size;
  const double area = static_cast<double>(size) * size;
  const BackgroundKind bg_kind = spec.backgrounds[rng.uniform_index(spec.backgrounds.size())];
  RgbImage bg = paint_background(rng, bg_kind, size);

  for (int attempt = 0; attempt < kPlacementAttempts; ++attempt) {
    const ShapeKind kind = spec.shapes[rng.uniform_index(spec.shapes.size())];
    const int max_half = std::max(3, size * 2 / 5);
    const int a = 3 + static_cast<int>(rng.uniform_index(static_cast<std::size_t>(max_half - 2)));
    const int b = kind == ShapeKind::Disk
                      ? a
                      : 3 + static_cast<int>(rng.uniform_index(static_cast<std::size_t>(max_half - 2)));
    const int bw = kind == ShapeKind::Disk ? a : a;
    const int bh = kind == ShapeKind::Disk ? a : b;
    if (2 * bw + 2 >= size || 2 * bh + 2 >= size) continue;
    const int cx = bw + 1 + static_cast<int>(rng.uniform_index(static_cast<std::size_t>(size - 2 * bw - 2)));
    const int cy = bh + 1 + static_cast<int>(rng.uniform_index(static_cast<std::size_t>(size - 2 * bh - 2)));

    MaskTensor raster = rasterize_shape(kind, cx, cy, a, b, size);
    std::size_t pixels = 0;
    for (const auto v : raster.values()) pixels += v;
    const double coverage = static_cast<double>(pixels) / area;
    if (coverage < spec.min_coverage || coverage > spec.max_coverage) continue;

    const auto color = random_color(rng);
    if (masked_contrast(bg, raster, color) < 0.15) continue;

    ShapeDesc desc;
    desc.kind = kind;
    desc.background = bg_kind;
    desc.cx = cx;
    desc.cy = cy;
    desc.a = a;
    desc.b = b;
    desc.color = color;

    if (spec.twin) {
      const Bounds prim = shape_bounds(kind, cx, cy, a, b);
      bool placed = false;
      for (int twin_try = 0; twin_try < 50 && !placed; ++twin_try) {
        const int tx = bw + 1 + static_cast<int>(rng.uniform_index(static_cast<std::size_t>(size - 2 * bw - 2)));
        const int ty = bh + 1 + static_cast<int>(rng.uniform_index(static_cast<std::size_t>(size - 2 * bh - 2)));
        if (!bounds_disjoint(prim, shape_bounds(kind, tx, ty, a, b), spec.twin_margin)) continue;
        desc.has_twin = true;
        desc.twin_cx = tx;
        desc.twin_cy = ty;
        placed = true;
      }
      if (!placed) continue;
      stamp(bg, rasterize_shape(kind, desc.twin_cx, desc.twin_cy, a, b, size), color);
    }

    RgbImage comp = bg;
    stamp(comp, raster, color);

    scene.shape = desc;
    scene.mask = std::move(raster);
    scene.background = raw_to_tensor(bg);
    scene.composite = raw_to_tensor(comp);
    return scene;
  }
  throw ConfigError("no shape placement satisfies the coverage bounds");
}

void validate_scene(const Scene& scene, const SceneSpec& spec) {
  const std::size_t size = scene.mask.extent(0);
  if (scene.composite.shape() != Shape{3, size, size} ||
      scene.background.shape() != Shape{3, size, size}) {
    throw IntegrityError("scene '" + scene.name + "' tensors have inconsistent shapes");
  }

  const MaskTensor raster = rasterize_shape(scene.shape.kind, scene.shape.cx, scene.shape.cy,
                                            scene.shape.a, scene.shape.b, static_cast<int>(size));
  if (!(raster == scene.mask)) {
    throw IntegrityError("scene '" + scene.name + "' mask is not the shape raster");
  }

  const std::size_t plane = size * size;
  std::size_t pixels = 0;
  for (std::size_t i = 0; i < plane; ++i) {
    const bool fg = scene.mask[i] != 0;
    pixels += fg ? 1 : 0;
    for (std::size_t c = 0; c < 3; ++c) {
      const float comp = scene.composite[c * plane + i];
      if (fg) {
        const float expect = static_cast<float>(scene.shape.color[c]) / 255.0f;
        if (comp != expect) {
          throw IntegrityError("scene '" + scene.name + "' composite is not flat inside the mask");
        }
      } else if (comp != scene.background[c * plane + i]) {
        throw IntegrityError("scene '" + scene.name + "' differs from background outside the mask");
      }
    }
  }
  const double coverage = static_cast<double>(pixels) / static_cast<double>(plane);
  if (coverage < spec.min_coverage || coverage > spec.max_coverage) {
    throw IntegrityError("scene '" + scene.name + "' coverage outside bounds");
  }
}

namespace {

std::string scene_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "scene_%05zu", index);
  return buf;
}

void write_corpus_readme(const std::filesystem::path& dir) {
  std::ofstream os(dir / "README.md", std::ios::trunc);
  os << "# Scene corpus\n\n"
     << "Each scene is a PNG triplet plus one manifest entry block:\n\n"
     << "- `<name>_composite.png`  - background with one flat shape on top\n"
     << "- `<name>_background.png` - the same background without the shape\n"
     << "- `<name>_mask.png`       - exact pixel mask of the shape (255 = shape)\n\n"
     << "`manifest.txt` lists the corpus seed, the generator options and one\n"
     << "`<name>.*` block per scene (seed, shape kind, center, extents, color,\n"
     << "background family, optional twin center). Scene `i` is generated from\n"
     << "`fork(i)` of the corpus seed, so any prefix of the corpus can be\n"
     << "regenerated independently.\n";
}

}  // namespace

void write_corpus(const std::vector<Scene>& scenes, const std::filesystem::path& dir,
                  std::uint64_t corpus_seed, const SceneSpec& spec) {
  std::filesystem::create_directories(dir);

  std::ofstream manifest(dir / "manifest.txt", std::ios::trunc);
  if (!manifest) throw IoError("cannot write corpus manifest");
  manifest << "corpus_seed=" << corpus_seed << "\n";
  manifest << "count=" << scenes.size() << "\n";
  manifest << "size=" << spec.size << "\n";
  manifest << "min_coverage=" << spec.min_coverage << "\n";
  manifest << "max_coverage=" << spec.max_coverage << "\n";
  manifest << "twin=" << (spec.twin ? 1 : 0) << "\n";

  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const Scene& s = scenes[i];
    const std::string name = s.name.empty() ? scene_name(i) : s.name;
    write_png(s.composite, dir / (name + "_composite.png"));
    write_png(s.background, dir / (name + "_background.png"));
    write_mask_png(s.mask, dir / (name + "_mask.png"));

    manifest << name << ".seed=" << s.seed << "\n";
    manifest << name << ".kind=" << shape_kind_name(s.shape.kind) << "\n";
    manifest << name << ".background=" << background_kind_name(s.shape.background) << "\n";
    manifest << name << ".cx=" << s.shape.cx << "\n";
    manifest << name << ".cy=" << s.shape.cy << "\n";
    manifest << name << ".a=" << s.shape.a << "\n";
    manifest << name << ".b=" << s.shape.b << "\n";
    manifest << name << ".color=" << static_cast<int>(s.shape.color[0]) << ","
             << static_cast<int>(s.shape.color[1]) << "," << static_cast<int>(s.shape.color[2])
             << "\n";
    manifest << name << ".twin=" << (s.shape.has_twin ? 1 : 0) << "\n";
    if (s.shape.has_twin) {
      manifest << name << ".twin_cx=" << s.shape.twin_cx << "\n";
      manifest << name << ".twin_cy=" << s.shape.twin_cy << "\n";
    }
  }
  write_corpus_readme(dir);
}

std::vector<Scene> read_corpus(const std::filesystem::path& dir, bool validate,
                               std::size_t first, std::size_t count) {
  const auto manifest_path = dir / "manifest.txt";
  std::ifstream is(manifest_path);
  if (!is) throw CorpusError("corpus manifest '" + manifest_path.string() + "' is missing");

  std::vector<std::pair<std::string, std::string>> kv;
  std::string line;
  while (std::getline(is, line)) {
    const std::size_t eq = line.find('=');
    if (eq != std::string::npos) kv.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  auto lookup = [&](const std::string& key) -> const std::string* {
    for (const auto& e : kv) {
      if (e.first == key) return &e.second;
    }
    return nullptr;
  };
  auto require = [&](const std::string& key) -> const std::string& {
    const std::string* v = lookup(key);
    if (!v) throw CorpusError("corpus manifest lacks key '" + key + "'");
    return *v;
  };

  const auto corpus_seed = static_cast<std::uint64_t>(std::stoull(require("corpus_seed")));
  const auto total = static_cast<std::size_t>(std::stoull(require("count")));
  SceneSpec spec;
  spec.size = std::stoi(require("size"));
  spec.min_coverage = std::stod(require("min_coverage"));
  spec.max_coverage = std::stod(require("max_coverage"));
  spec.twin = require("twin") == "1";

  if (first > total) throw CorpusError("corpus slice starts past the end");
  const std::size_t last = count == 0 ? total : std::min(total, first + count);

  Rng parent(corpus_seed);
  std::vector<Scene> scenes;
  scenes.reserve(last - first);
  for (std::size_t i = first; i < last; ++i) {
    const std::string name = scene_name(i);
    Scene s;
    s.name = name;

    for (const char* part : {"composite", "background", "mask"}) {
      const auto path = dir / (name + "_" + part + ".png");
      if (!std::filesystem::exists(path)) {
        throw CorpusError("scene '" + name + "' is missing its " + part + " file");
      }
    }
    s.composite = read_png(dir / (name + "_composite.png"));
    s.background = read_png(dir / (name + "_background.png"));
    s.mask = read_mask_png(dir / (name + "_mask.png"));

    s.seed = static_cast<std::uint64_t>(std::stoull(require(name + ".seed")));
    if (s.seed != parent.fork(i).seed_state()) {
      throw IntegrityError("scene '" + name + "' seed does not match the corpus seed");
    }
    s.shape.kind = shape_kind_from_name(require(name + ".kind"));
    s.shape.background = background_kind_from_name(require(name + ".background"));
    s.shape.cx = std::stoi(require(name + ".cx"));
    s.shape.cy = std::stoi(require(name + ".cy"));
    s.shape.a = std::stoi(require(name + ".a"));
    s.shape.b = std::stoi(require(name + ".b"));
    const std::string& color = require(name + ".color");
    unsigned r, g, b;
    if (std::sscanf(color.c_str(), "%u,%u,%u", &r, &g, &b) != 3) {
      throw CorpusError("scene '" + name + "' has a malformed color entry");
    }
    s.shape.color = {static_cast<std::uint8_t>(r), static_cast<std::uint8_t>(g),
                     static_cast<std::uint8_t>(b)};
    s.shape.has_twin = require(name + ".twin") == "1";
    if (s.shape.has_twin) {
      s.shape.twin_cx = std::stoi(require(name + ".twin_cx"));
      s.shape.twin_cy = std::stoi(require(name + ".twin_cy"));
    }

    if (validate) validate_scene(s, spec);
    scenes.push_back(std::move(s));
  }
  return scenes;
}

std::vector<Scene> gen_scenes(std::uint64_t corpus_seed, const SceneSpec& spec, std::size_t first,
                              std::size_t count) {
  Rng parent(corpus_seed);
  std::vector<Scene> scenes;
  scenes.reserve(count);
  for (std::size_t i = first; i < first + count; ++i) {
    Rng child = parent.fork(i);
    Scene s = gen_scene(child, spec);
    s.name = scene_name(i);
    scenes.push_back(std::move(s));
  }
  return scenes;
}

std::size_t corpus_size(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.txt");
  if (!is) throw CorpusError("corpus manifest '" + (dir / "manifest.txt").string() + "' is missing");
  std::string line;
  while (std::getline(is, line)) {
    if (line.rfind("count=", 0) == 0) return std::stoull(line.substr(6));
  }
  throw CorpusError("corpus manifest lacks a count entry");
}

std::vector<Tensor> read_corpus_images(const std::filesystem::path& dir, const std::string& part,
                                       std::size_t first, std::size_t count) {
  const std::size_t total = corpus_size(dir);
  if (first > total) throw CorpusError("corpus slice starts past the end");
  const std::size_t last = count == 0 ? total : std::min(total, first + count);
  std::vector<Tensor> images;
  images.reserve(last - first);
  for (std::size_t i = first; i < last; ++i) {
    const auto path = dir / (scene_name(i) + "_" + part + ".png");
    if (!std::filesystem::exists(path)) {
      throw CorpusError("scene '" + scene_name(i) + "' is missing its " + part + " file");
    }
    images.push_back(read_png(path));
  }
  return images;
}

}  // namespace scrub
