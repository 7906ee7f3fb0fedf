#include "gmln/study.hpp"

#include <algorithm>
#include <filesystem>

#include "gmln/binio.hpp"
#include "json.hpp"

namespace gmln {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {
std::string dims_text(const Dims3& d) { return to_string({d[0], d[1], d[2]}); }
}  // namespace

int modality_index(std::string_view name) {
  for (int i = 0; i < kModalities; ++i)
    if (name == kModalityNames[i]) return i;
  return -1;
}

void Study::validate() const {
  for (int i = 0; i < kModalities; ++i) {
    const auto& m = modalities[i];
    if (m.type != VoxelType::f32 || m.channels != 1 || m.f32.empty())
      throw IngestionError("study " + id + ": modality " + kModalityNames[i] +
                           " must be a single-channel float32 volume");
    if (m.dims != modalities[0].dims)
      throw IngestionError("study " + id + ": modality " + kModalityNames[i] + " has dims " +
                           dims_text(m.dims) + " but T1 has " + dims_text(modalities[0].dims));
  }
  if (labels) {
    if (labels->type != VoxelType::u8 || labels->channels != 1)
      throw IngestionError("study " + id + ": labels must be a single-channel uint8 volume");
    if (labels->dims != dims())
      throw IngestionError("study " + id + ": labels have dims " + dims_text(labels->dims) +
                           " but modalities have " + dims_text(dims()));
    for (std::size_t i = 0; i < labels->u8.size(); ++i)
      if (labels->u8[i] >= kClasses)
        throw DataError("study " + id + ": label " + std::to_string(labels->u8[i]) +
                        " at voxel " + std::to_string(i) + " outside {0..3}");
  }
}

void remap_raw_labels(std::vector<std::uint8_t>& labels) {
  for (std::size_t i = 0; i < labels.size(); ++i) {
    switch (labels[i]) {
      case 0: case 1: case 2: break;
      case 4: labels[i] = 3; break;
      default:
        throw DataError("raw label " + std::to_string(labels[i]) + " at voxel " + std::to_string(i) +
                        " is not one of {0, 1, 2, 4}");
    }
  }
}

std::string save_study(const std::string& dir, const Study& study) {
  study.validate();
  fs::create_directories(dir);
  json manifest;
  manifest["id"] = study.id;
  for (int i = 0; i < kModalities; ++i) {
    const std::string file = study.id + "_" + kModalityNames[i] + ".vseg";
    write_volume((fs::path(dir) / file).string(), study.modalities[i]);
    manifest["files"][kModalityNames[i]] = file;
  }
  if (study.labels) {
    const std::string file = study.id + "_labels.vseg";
    write_volume((fs::path(dir) / file).string(), *study.labels);
    manifest["labels"] = file;
  }
  manifest["remap"] = false;
  if (!study.provenance.empty()) manifest["provenance"] = study.provenance;
  const auto path = (fs::path(dir) / (study.id + ".json")).string();
  binio::write_file_atomic(path, manifest.dump(2) + "\n");
  return path;
}

Study load_study(const std::string& manifest_path) {
  json m;
  try {
    m = json::parse(binio::read_file(manifest_path));
  } catch (const json::exception& e) {
    throw IngestionError(manifest_path + ": invalid manifest JSON: " + e.what());
  }
  if (!m.is_object() || !m.contains("id") || !m["id"].is_string())
    throw IngestionError(manifest_path + ": manifest needs a string \"id\"");
  const fs::path base = fs::path(manifest_path).parent_path();
  auto resolve = [&](const std::string& f) {
    fs::path p(f);
    return (p.is_absolute() ? p : base / p).string();
  };
  Study s;
  s.id = m["id"].get<std::string>();
  s.provenance = m.value("provenance", std::string("uploaded"));
  const json files = m.value("files", json::object());
  for (int i = 0; i < kModalities; ++i) {
    if (!files.contains(kModalityNames[i]) || !files[kModalityNames[i]].is_string())
      throw IngestionError(std::string("modality ") + kModalityNames[i] + " absent");
    s.modalities[i] = read_volume(resolve(files[kModalityNames[i]].get<std::string>()));
  }
  if (m.contains("labels") && !m["labels"].is_null()) {
    auto labels = read_volume(resolve(m["labels"].get<std::string>()));
    if (labels.type != VoxelType::u8) throw IngestionError(s.id + ": labels must be uint8");
    if (m.value("remap", false)) remap_raw_labels(labels.u8);
    s.labels = std::move(labels);
  }
  s.validate();
  return s;
}

std::vector<std::string> list_manifests(const std::string& dir) {
  std::vector<std::string> out;
  if (!fs::is_directory(dir)) throw IngestionError("not a directory: " + dir);
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".json") out.push_back(e.path().string());
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<Study> load_dataset(const std::string& dir) {
  std::vector<Study> out;
  for (const auto& m : list_manifests(dir)) out.push_back(load_study(m));
  return out;
}

Tensor batch_inputs(std::span<const Study* const> studies, DType dtype) {
  if (studies.empty()) throw ContractError("batch_inputs: empty batch");
  const auto d = studies[0]->dims();
  const std::int64_t V = d[0] * d[1] * d[2];
  const auto B = static_cast<std::int64_t>(studies.size());
  Tensor out({B, kModalities, d[0], d[1], d[2]}, dtype);
  dispatch(dtype, [&]<class T>(T) {
    auto o = out.mutable_data<T>();
    for (std::int64_t b = 0; b < B; ++b) {
      if (studies[b]->dims() != d)
        throw ShapeError("batch_inputs: study " + studies[b]->id + " dims differ within batch");
      for (int m = 0; m < kModalities; ++m) {
        const auto& src = studies[b]->modalities[m].f32;
        std::copy(src.begin(), src.end(), o.begin() + (b * kModalities + m) * V);
      }
    }
  });
  return out;
}

std::vector<std::uint8_t> batch_labels(std::span<const Study* const> studies) {
  std::vector<std::uint8_t> out;
  for (const auto* s : studies) {
    if (!s->labels) throw DataError("study " + s->id + " has no labels");
    out.insert(out.end(), s->labels->u8.begin(), s->labels->u8.end());
  }
  return out;
}

}  // namespace gmln
