#pragma once

// 8-bit PNG input/output. Images travel as {C, H, W} float tensors in
// [0, 1]; masks are {H, W} binary tensors (gray value > 127 reads as
// foreground). Written bytes are deterministic for identical pixels.

#include <filesystem>

#include "scrub/tensor.hpp"

namespace scrub {

Tensor read_png(const std::filesystem::path& path);
void write_png(const Tensor& image, const std::filesystem::path& path);

MaskTensor read_mask_png(const std::filesystem::path& path);
void write_mask_png(const MaskTensor& mask, const std::filesystem::path& path);

/// Round a [0,1] float image onto the 8-bit grid (k/255 values), the exact
/// values a PNG write/read cycle produces.
Tensor quantize_unit(const Tensor& image);

}  // namespace scrub
