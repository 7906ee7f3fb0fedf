#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gmln/model.hpp"
#include "gmln/volume.hpp"

namespace gmln {

inline constexpr int kClasses = 4;  // 0 background, 1 NCR/NET, 2 ED, 3 ET

/// One case: four single-channel float32 modality volumes in (T1, T1ce, T2, FLAIR) order,
/// optional internal labels {0..3}, and a free-form provenance tag.
struct Study {
  std::string id;
  std::array<Volume, kModalities> modalities;
  std::optional<Volume> labels;
  std::string provenance;

  Dims3 dims() const { return modalities[0].dims; }
  /// Throws IngestionError on missing data, mismatched dims or out-of-range labels.
  void validate() const;
};

/// Index of a modality name ("T1", "T1ce", "T2", "FLAIR"); -1 if unknown.
int modality_index(std::string_view name);

/// Raw BraTS labels {0, 1, 2, 4} -> internal {0, 1, 2, 3}. Any other value throws DataError.
void remap_raw_labels(std::vector<std::uint8_t>& labels);

/// Writes `<dir>/<id>.json` plus one VSEG file per modality (and labels). Returns the
/// manifest path.
std::string save_study(const std::string& dir, const Study& study);
/// Manifest: {"id", "files": {modality: path}, "labels"?: path, "remap": bool,
/// "provenance"?}. Relative paths resolve against the manifest's directory.
Study load_study(const std::string& manifest_path);
/// Manifests in `dir`, sorted by file name.
std::vector<std::string> list_manifests(const std::string& dir);
std::vector<Study> load_dataset(const std::string& dir);

/// Stacks studies into a model input (B, 4, D, H, W).
Tensor batch_inputs(std::span<const Study* const> studies, DType dtype = DType::f32);
/// Concatenated labels (B * D * H * W); every study must carry labels.
std::vector<std::uint8_t> batch_labels(std::span<const Study* const> studies);

}  // namespace gmln
