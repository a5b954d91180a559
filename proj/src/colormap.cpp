#include "scrub/colormap.hpp"

#include <cmath>
#include <map>

namespace scrub {
namespace {

struct Anchor {
  double t;
  double r, g, b;
};

constexpr Anchor kAnchors[] = {
    {0.000, 68, 1, 84},   {0.125, 72, 40, 120},  {0.250, 62, 74, 137},
    {0.375, 49, 104, 142}, {0.500, 38, 130, 142}, {0.625, 31, 158, 137},
    {0.750, 53, 183, 121}, {0.875, 109, 205, 89}, {1.000, 253, 231, 37},
};

std::uint32_t pack(std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  return (static_cast<std::uint32_t>(r) << 16) | (static_cast<std::uint32_t>(g) << 8) | b;
}

std::array<Rgb, 256> build_lut() {
  std::array<Rgb, 256> lut{};
  std::map<std::uint32_t, int> used;
  for (int i = 0; i < 256; ++i) {
    const double t = i / 255.0;
    std::size_t seg = 0;
    while (seg + 2 < std::size(kAnchors) && t > kAnchors[seg + 1].t) ++seg;
    const Anchor& a = kAnchors[seg];
    const Anchor& b = kAnchors[seg + 1];
    const double f = (t - a.t) / (b.t - a.t);
    auto r8 = static_cast<std::uint8_t>(std::lround(a.r + f * (b.r - a.r)));
    auto g8 = static_cast<std::uint8_t>(std::lround(a.g + f * (b.g - a.g)));
    auto b8 = static_cast<std::uint8_t>(std::lround(a.b + f * (b.b - a.b)));
    // Nudge the blue channel until the triple is unique.
    while (used.count(pack(r8, g8, b8))) b8 = static_cast<std::uint8_t>(b8 + 1);
    used.emplace(pack(r8, g8, b8), i);
    lut[static_cast<std::size_t>(i)] = {r8, g8, b8};
  }
  return lut;
}

const std::map<std::uint32_t, int>& inverse() {
  static const std::map<std::uint32_t, int> map = [] {
    std::map<std::uint32_t, int> m;
    const auto& lut = heatmap_lut();
    for (int i = 0; i < 256; ++i) {
      m.emplace(pack(lut[static_cast<std::size_t>(i)][0], lut[static_cast<std::size_t>(i)][1],
                     lut[static_cast<std::size_t>(i)][2]),
                i);
    }
    return m;
  }();
  return map;
}

}  // namespace

const std::array<Rgb, 256>& heatmap_lut() {
  static const std::array<Rgb, 256> lut = build_lut();
  return lut;
}

int heatmap_lut_index(std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  const auto& inv = inverse();
  const auto it = inv.find(pack(r, g, b));
  return it == inv.end() ? -1 : it->second;
}

}  // namespace scrub
