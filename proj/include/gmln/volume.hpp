#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "gmln/kernels.hpp"

namespace gmln {

inline constexpr std::uint16_t kVolumeFormatVersion = 1;

enum class VoxelType : std::uint8_t { f32 = 0, u8 = 1 };

/// In-memory form of a "VSEG" file: (C, D, H, W), W fastest. Exactly one of the two
/// buffers is populated, according to `type`.
struct Volume {
  VoxelType type = VoxelType::f32;
  int channels = 1;
  Dims3 dims{1, 1, 1};
  std::vector<float> f32;
  std::vector<std::uint8_t> u8;

  std::int64_t voxels() const { return dims[0] * dims[1] * dims[2]; }
  std::int64_t elements() const { return channels * voxels(); }
  static Volume scalar(const Dims3& dims, std::vector<float> values);
  static Volume labels(const Dims3& dims, std::vector<std::uint8_t> values);
};

/// Header: magic "VSEG", u16 version, u8 voxel type, u8 channels, u32 x3 dims; then the
/// payload, all little-endian.
std::string encode_volume(const Volume& v);
Volume decode_volume(std::string_view bytes, const std::string& context = "volume");
void write_volume(const std::string& path, const Volume& v);
Volume read_volume(const std::string& path);

}  // namespace gmln
