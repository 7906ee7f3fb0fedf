#include "gmln/slice.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>

#include "gmln/error.hpp"

namespace gmln {

namespace {

struct Plane {
  std::int64_t rows, cols;
  std::vector<std::int64_t> offsets;  // voxel offset per pixel, row-major
};

Plane plane(const Dims3& dims, char axis, std::int64_t index) {
  const auto [D, H, W] = dims;
  int a;
  switch (axis) {
    case 'd': a = 0; break;
    case 'h': a = 1; break;
    case 'w': a = 2; break;
    default: throw SpecError(std::string("slice axis must be d, h or w, got '") + axis + "'");
  }
  if (index < 0 || index >= dims[a])
    throw std::out_of_range("slice index " + std::to_string(index) + " outside [0, " + std::to_string(dims[a]) + ")");
  Plane p;
  p.rows = a == 0 ? H : D;
  p.cols = a == 2 ? H : W;
  p.offsets.reserve(static_cast<std::size_t>(p.rows * p.cols));
  for (std::int64_t r = 0; r < p.rows; ++r)
    for (std::int64_t c = 0; c < p.cols; ++c) {
      const std::int64_t d = a == 0 ? index : r;
      const std::int64_t h = a == 0 ? r : a == 1 ? index : c;
      const std::int64_t w = a == 2 ? index : c;
      p.offsets.push_back((d * H + h) * W + w);
    }
  return p;
}

}  // namespace

Image gray_slice(const Volume& volume, char axis, std::int64_t index) {
  if (volume.type != VoxelType::f32 || volume.channels != 1)
    throw SpecError("slices are drawn from single-channel float volumes");
  const auto p = plane(volume.dims, axis, index);
  // Window over the whole volume so neighbouring slices share a gray scale.
  const auto [lo, hi] = std::minmax_element(volume.f32.begin(), volume.f32.end());
  const double min = *lo, range = static_cast<double>(*hi) - *lo;
  Image img{static_cast<int>(p.cols), static_cast<int>(p.rows), 1, {}};
  img.pixels.reserve(p.offsets.size());
  for (auto off : p.offsets) {
    const double v = range > 0 ? (volume.f32[static_cast<std::size_t>(off)] - min) / range * 255.0 : 128.0;
    img.pixels.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0))));
  }
  return img;
}

Image overlay_slice(const Volume& volume, const Volume& labels, char axis, std::int64_t index) {
  if (labels.type != VoxelType::u8 || labels.dims != volume.dims)
    throw ShapeError("overlay labels must be a u8 volume with the image dims");
  const auto gray = gray_slice(volume, axis, index);
  const auto p = plane(volume.dims, axis, index);
  static constexpr std::array<std::array<double, 3>, 4> colors{{{0, 0, 0}, {255, 0, 0}, {0, 255, 0}, {255, 255, 0}}};
  constexpr double alpha = 0.4;
  Image img{gray.width, gray.height, 4, {}};
  img.pixels.reserve(gray.pixels.size() * 4);
  for (std::size_t i = 0; i < gray.pixels.size(); ++i) {
    const auto l = labels.u8[static_cast<std::size_t>(p.offsets[i])];
    for (int c = 0; c < 3; ++c) {
      const double g = gray.pixels[i];
      const double v = l == 0 || l > 3 ? g : (1 - alpha) * g + alpha * colors[l][c];
      img.pixels.push_back(static_cast<std::uint8_t>(std::lround(v)));
    }
    img.pixels.push_back(255);
  }
  return img;
}

std::string encode_png(const Image& image) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = image.channels == 4 ? PNG_FORMAT_RGBA : PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&png, nullptr, &size, 0, image.pixels.data(), 0, nullptr))
    throw StorageError(std::string("png: ") + png.message);
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&png, out.data(), &size, 0, image.pixels.data(), 0, nullptr))
    throw StorageError(std::string("png: ") + png.message);
  out.resize(size);
  return out;
}

Image decode_png(const std::string& bytes) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&png, bytes.data(), bytes.size()))
    throw FormatError(std::string("png: ") + png.message);
  const bool color = png.format & PNG_FORMAT_FLAG_COLOR;
  png.format = color ? PNG_FORMAT_RGBA : PNG_FORMAT_GRAY;
  Image img{static_cast<int>(png.width), static_cast<int>(png.height), color ? 4 : 1, {}};
  img.pixels.resize(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, img.pixels.data(), 0, nullptr))
    throw FormatError(std::string("png: ") + png.message);
  return img;
}

}  // namespace gmln
