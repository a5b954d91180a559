#pragma once

// Fixed 256-entry color table for heatmap export. Built once from anchor
// colors by linear interpolation plus a deterministic de-duplication pass,
// so every entry is distinct and the value -> color mapping inverts exactly.

#include <array>
#include <cstdint>

namespace scrub {

using Rgb = std::array<std::uint8_t, 3>;

const std::array<Rgb, 256>& heatmap_lut();

/// Exact inverse of the table; -1 when the color is not an entry.
int heatmap_lut_index(std::uint8_t r, std::uint8_t g, std::uint8_t b);

}  // namespace scrub
