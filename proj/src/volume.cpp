#include "gmln/volume.hpp"

#include "gmln/binio.hpp"

namespace gmln {

namespace {
constexpr std::string_view kMagic = "VSEG";
}

Volume Volume::scalar(const Dims3& dims, std::vector<float> values) {
  Volume v;
  v.type = VoxelType::f32;
  v.dims = dims;
  v.f32 = std::move(values);
  if (static_cast<std::int64_t>(v.f32.size()) != v.elements())
    throw ShapeError("volume: " + std::to_string(v.f32.size()) + " values for dims " +
                     to_string({dims[0], dims[1], dims[2]}));
  return v;
}

Volume Volume::labels(const Dims3& dims, std::vector<std::uint8_t> values) {
  Volume v;
  v.type = VoxelType::u8;
  v.dims = dims;
  v.u8 = std::move(values);
  if (static_cast<std::int64_t>(v.u8.size()) != v.elements())
    throw ShapeError("volume: " + std::to_string(v.u8.size()) + " labels for dims " +
                     to_string({dims[0], dims[1], dims[2]}));
  return v;
}

std::string encode_volume(const Volume& v) {
  if (v.channels < 1 || v.channels > 255) throw FormatError("volume: channel count out of range");
  for (auto d : v.dims)
    if (d < 1 || d > 0xffffffffLL) throw FormatError("volume: dimension out of range");
  const auto n = static_cast<std::size_t>(v.elements());
  if ((v.type == VoxelType::f32 ? v.f32.size() : v.u8.size()) != n)
    throw FormatError("volume: payload size does not match header dims");
  binio::Writer w;
  w.bytes(kMagic);
  w.u16(kVolumeFormatVersion);
  w.u8(static_cast<std::uint8_t>(v.type));
  w.u8(static_cast<std::uint8_t>(v.channels));
  for (auto d : v.dims) w.u32(static_cast<std::uint32_t>(d));
  if (v.type == VoxelType::f32)
    for (float x : v.f32) w.f32(x);
  else
    w.bytes(std::string_view(reinterpret_cast<const char*>(v.u8.data()), v.u8.size()));
  return w.take();
}

Volume decode_volume(std::string_view bytes, const std::string& context) {
  binio::Reader r(bytes, context);
  if (r.bytes(4) != kMagic) throw FormatError(context + ": bad magic at offset 0, not a VSEG file");
  const auto version = r.u16();
  if (version != kVolumeFormatVersion)
    throw FormatError(context + ": unsupported version " + std::to_string(version) + " at offset 4");
  const auto type = r.u8();
  if (type > 1) throw FormatError(context + ": unknown voxel type " + std::to_string(type) + " at offset 6");
  Volume v;
  v.type = static_cast<VoxelType>(type);
  v.channels = r.u8();
  if (v.channels == 0) throw FormatError(context + ": zero channels at offset 7");
  for (int a = 0; a < 3; ++a) {
    v.dims[a] = r.u32();
    if (v.dims[a] == 0)
      throw FormatError(context + ": zero dimension at offset " + std::to_string(8 + 4 * a));
  }
  const auto n = static_cast<std::size_t>(v.elements());
  const std::size_t width = v.type == VoxelType::f32 ? 4 : 1;
  if (r.remaining() != n * width)
    throw FormatError(context + ": payload at offset " + std::to_string(r.position()) + " has " +
                      std::to_string(r.remaining()) + " bytes, header implies " +
                      std::to_string(n * width));
  if (v.type == VoxelType::f32) {
    v.f32.resize(n);
    for (auto& x : v.f32) x = r.f32();
  } else {
    auto raw = r.bytes(n);
    v.u8.assign(raw.begin(), raw.end());
  }
  return v;
}

void write_volume(const std::string& path, const Volume& v) {
  binio::write_file_atomic(path, encode_volume(v));
}

Volume read_volume(const std::string& path) { return decode_volume(binio::read_file(path), path); }

}  // namespace gmln
