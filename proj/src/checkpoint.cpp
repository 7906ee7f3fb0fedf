#include "gmln/checkpoint.hpp"

#include <map>

#include "gmln/binio.hpp"
#include "gmln/model.hpp"

namespace gmln {

namespace {
constexpr std::string_view kMagic = "VCKP";
}

std::string encode_checkpoint(const CheckpointFile& file) {
  binio::Writer w;
  w.bytes(kMagic);
  w.u16(kCheckpointFormatVersion);
  w.u32(file.model_version);
  w.u32(static_cast<std::uint32_t>(file.entries.size()));
  for (const auto& e : file.entries) {
    if (e.name.size() > 0xffff) throw FormatError("entry name too long: " + e.name.substr(0, 40));
    w.u16(static_cast<std::uint16_t>(e.name.size()));
    w.bytes(e.name);
    w.u8(static_cast<std::uint8_t>(e.value.rank()));
    for (auto d : e.value.shape()) w.u32(static_cast<std::uint32_t>(d));
    dispatch(e.value.dtype(), [&]<class T>(T) {
      for (T v : e.value.data<T>()) w.f32(static_cast<float>(v));
    });
  }
  return w.take();
}

CheckpointFile decode_checkpoint(std::string_view bytes, const std::string& context) {
  binio::Reader r(bytes, context);
  if (r.bytes(4) != kMagic) throw FormatError(context + ": bad magic, not a VCKP file");
  const auto format = r.u16();
  if (format != kCheckpointFormatVersion)
    throw FormatError(context + ": unsupported format version " + std::to_string(format));
  CheckpointFile file;
  file.model_version = r.u32();
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor e;
    e.name = std::string(r.bytes(r.u16()));
    const int rank = r.u8();
    Shape shape;
    for (int a = 0; a < rank; ++a) {
      const auto d = r.u32();
      if (d == 0) throw FormatError(context + ": entry " + e.name + " has a zero dimension");
      shape.push_back(d);
    }
    const auto n = numel(shape);
    if (static_cast<std::uint64_t>(n) * 4 > r.remaining())
      throw FormatError(context + ": entry " + e.name + " payload truncated");
    std::vector<float> values(static_cast<std::size_t>(n));
    for (auto& v : values) v = r.f32();
    e.value = Tensor::from_vector(shape, std::move(values));
    file.entries.push_back(std::move(e));
  }
  if (r.remaining() != 0)
    throw FormatError(context + ": " + std::to_string(r.remaining()) + " trailing bytes");
  return file;
}

void write_checkpoint(const std::string& path, const CheckpointFile& file) {
  binio::write_file_atomic(path, encode_checkpoint(file));
}

CheckpointFile read_checkpoint(const std::string& path) {
  return decode_checkpoint(binio::read_file(path), path);
}

CheckpointFile snapshot(const GmlnModel& model) {
  CheckpointFile file;
  file.model_version = model.version();
  for (const auto& e : model.registry().entries()) file.entries.push_back({e.name, e.value});
  return file;
}

void restore(GmlnModel& model, const CheckpointFile& file) {
  std::map<std::string, const Tensor*> incoming;
  for (const auto& e : file.entries)
    if (!incoming.emplace(e.name, &e.value).second)
      throw FormatError("checkpoint repeats entry " + e.name);
  // Validate everything before mutating anything.
  for (const auto& p : model.registry().entries()) {
    auto it = incoming.find(p.name);
    if (it == incoming.end()) throw FormatError("checkpoint is missing entry " + p.name);
    if (it->second->shape() != p.value.shape())
      throw FormatError("checkpoint entry " + p.name + " has dims " + to_string(it->second->shape()) +
                        ", model expects " + to_string(p.value.shape()));
  }
  for (const auto& [name, t] : incoming)
    if (!model.registry().find(name)) throw FormatError("checkpoint has unknown entry " + name);
  for (const auto& p : model.registry().entries()) {
    Tensor dst = p.value;
    dst.copy_from(*incoming.at(p.name));
  }
  model.set_version(file.model_version);
}

void save_model(const GmlnModel& model, const std::string& path) {
  write_checkpoint(path, snapshot(model));
}

void load_model(GmlnModel& model, const std::string& path) { restore(model, read_checkpoint(path)); }

}  // namespace gmln
