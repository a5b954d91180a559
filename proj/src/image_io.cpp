#include "scrub/image_io.hpp"

#include <png.h>

#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <memory>
#include <vector>

#include "scrub/errors.hpp"

namespace scrub {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

std::uint8_t to_byte(float v) {
  const float clamped = std::min(1.0f, std::max(0.0f, v));
  return static_cast<std::uint8_t>(std::lround(clamped * 255.0f));
}

struct RawImage {
  std::size_t width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> pixels;  // interleaved rows
};

RawImage read_raw(const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.string().c_str(), "rb"));
  if (!fp) throw IoError("cannot open '" + path.string() + "'");

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("'" + path.string() + "' is not a readable PNG");
  }

  png_init_io(png, fp.get());
  png_read_info(png, info);

  const png_byte color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) {
    png_set_expand_gray_1_2_4_to_8(png);
  }
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  RawImage img;
  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  img.channels = png_get_channels(png, info);
  if (img.channels != 1 && img.channels != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("'" + path.string() + "' decodes to unsupported channel count");
  }

  img.pixels.resize(img.width * img.height * img.channels);
  std::vector<png_bytep> rows(img.height);
  for (std::size_t y = 0; y < img.height; ++y) {
    rows[y] = img.pixels.data() + y * img.width * img.channels;
  }
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

void write_raw(const RawImage& img, const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.string().c_str(), "wb"));
  if (!fp) throw IoError("cannot open '" + path.string() + "' for writing");

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("writing '" + path.string() + "' failed");
  }

  png_init_io(png, fp.get());
  png_set_compression_level(png, 6);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
               static_cast<png_uint_32>(img.height), 8,
               img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  std::vector<png_bytep> rows(img.height);
  for (std::size_t y = 0; y < img.height; ++y) {
    rows[y] = const_cast<png_bytep>(img.pixels.data() + y * img.width * img.channels);
  }
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

Tensor read_png(const std::filesystem::path& path) {
  const RawImage img = read_raw(path);
  Tensor out = Tensor::zeros({img.channels, img.height, img.width});
  const std::size_t plane = img.height * img.width;
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      for (std::size_t c = 0; c < img.channels; ++c) {
        out[c * plane + y * img.width + x] =
            static_cast<float>(img.pixels[(y * img.width + x) * img.channels + c]) / 255.0f;
      }
    }
  }
  return out;
}

void write_png(const Tensor& image, const std::filesystem::path& path) {
  if (image.rank() != 3 || (image.extent(0) != 1 && image.extent(0) != 3)) {
    throw ShapeError("write_png expects a {1|3, H, W} tensor, got " +
                     shape_to_string(image.shape()));
  }
  RawImage img;
  img.channels = image.extent(0);
  img.height = image.extent(1);
  img.width = image.extent(2);
  img.pixels.resize(img.width * img.height * img.channels);
  const std::size_t plane = img.height * img.width;
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      for (std::size_t c = 0; c < img.channels; ++c) {
        img.pixels[(y * img.width + x) * img.channels + c] =
            to_byte(image[c * plane + y * img.width + x]);
      }
    }
  }
  write_raw(img, path);
}

MaskTensor read_mask_png(const std::filesystem::path& path) {
  const RawImage img = read_raw(path);
  MaskTensor mask = MaskTensor::zeros({img.height, img.width});
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      // Multi-channel masks count as foreground when any channel clears the
      // threshold.
      std::uint8_t v = 0;
      for (std::size_t c = 0; c < img.channels; ++c) {
        v = std::max(v, img.pixels[(y * img.width + x) * img.channels + c]);
      }
      mask.at2(y, x) = v > 127 ? 1 : 0;
    }
  }
  return mask;
}

void write_mask_png(const MaskTensor& mask, const std::filesystem::path& path) {
  if (mask.rank() != 2) throw ShapeError("write_mask_png expects an {H, W} tensor");
  RawImage img;
  img.channels = 1;
  img.height = mask.extent(0);
  img.width = mask.extent(1);
  img.pixels.resize(img.width * img.height);
  for (std::size_t i = 0; i < mask.numel(); ++i) img.pixels[i] = mask[i] ? 255 : 0;
  write_raw(img, path);
}

Tensor quantize_unit(const Tensor& image) {
  Tensor out = image;
  for (std::size_t i = 0; i < out.numel(); ++i) {
    out[i] = static_cast<float>(to_byte(out[i])) / 255.0f;
  }
  return out;
}

}  // namespace scrub
