#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gmln/tensor.hpp"

namespace gmln {

class GmlnModel;

inline constexpr std::uint16_t kCheckpointFormatVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor value;
};

/// "VCKP" container: magic, u16 format version, u32 model version, u32 entry count, then
/// per entry a u16-length UTF-8 name, u8 rank, u32 dims and float32 payload, all LE.
struct CheckpointFile {
  std::uint32_t model_version = 0;
  std::vector<NamedTensor> entries;
};

std::string encode_checkpoint(const CheckpointFile& file);
CheckpointFile decode_checkpoint(std::string_view bytes, const std::string& context = "checkpoint");
void write_checkpoint(const std::string& path, const CheckpointFile& file);
CheckpointFile read_checkpoint(const std::string& path);

/// Parameters and buffers in registry order, tagged with the model version.
CheckpointFile snapshot(const GmlnModel& model);
/// Copies every entry into the model. Unknown, missing, or differently shaped entries
/// throw FormatError and leave the model untouched.
void restore(GmlnModel& model, const CheckpointFile& file);

void save_model(const GmlnModel& model, const std::string& path);
void load_model(GmlnModel& model, const std::string& path);

}  // namespace gmln
