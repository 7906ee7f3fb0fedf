#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gmln/volume.hpp"

namespace gmln {

/// Row-major 8-bit image, 1 (gray) or 4 (RGBA) channels.
struct Image {
  int width = 0, height = 0, channels = 1;
  std::vector<std::uint8_t> pixels;
};

/// 'd' gives an H x W image, 'h' gives D x W, 'w' gives D x H.
/// Throws SpecError for another axis and std::out_of_range for a bad index.
Image gray_slice(const Volume& volume, char axis, std::int64_t index);

/// Gray slice with label colors blended in at alpha 0.4: 1 red, 2 green, 3 yellow.
Image overlay_slice(const Volume& volume, const Volume& labels, char axis, std::int64_t index);

std::string encode_png(const Image& image);
Image decode_png(const std::string& bytes);

}  // namespace gmln
