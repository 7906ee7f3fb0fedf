#include "gmln/metrics.hpp"

#include <cmath>
#include <vector>

namespace gmln {

bool in_region(std::uint8_t label, Region region) {
  switch (region) {
    case Region::WT: return label >= 1 && label <= 3;
    case Region::TC: return label == 1 || label == 3;
    case Region::ET: return label == 3;
  }
  return false;
}

double dsc(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  if (pred.size() != gt.size())
    throw ShapeError("dsc: prediction has " + std::to_string(pred.size()) + " voxels, reference " +
                     std::to_string(gt.size()));
  std::int64_t x = 0, y = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] != 0, b = gt[i] != 0;
    x += a, y += b, both += a && b;
  }
  if (x + y == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(x + y);
}

DiceReport region_dice(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  if (pred.size() != gt.size())
    throw ShapeError("region_dice: prediction has " + std::to_string(pred.size()) +
                     " voxels, reference " + std::to_string(gt.size()));
  DiceReport rep;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] > 3 || gt[i] > 3)
      throw DataError("region_dice: label " + std::to_string(pred[i] > 3 ? pred[i] : gt[i]) +
                      " at voxel " + std::to_string(i) + " outside {0..3}");
    for (int r = 0; r < 3; ++r) {
      const bool a = in_region(pred[i], static_cast<Region>(r));
      const bool b = in_region(gt[i], static_cast<Region>(r));
      rep.regions[r].pred += a;
      rep.regions[r].gt += b;
      rep.regions[r].overlap += a && b;
    }
  }
  double sum = 0;
  for (auto& s : rep.regions) {
    s.dice = s.pred + s.gt == 0 ? 1.0 : 2.0 * static_cast<double>(s.overlap) / static_cast<double>(s.pred + s.gt);
    sum += s.dice;
  }
  rep.mean = sum / 3.0;
  return rep;
}

double checkerboard_phase_disparity(std::span<const double> v, const Dims3& dims, int s) {
  if (s < 1) throw SpecError("phase disparity: factor must be positive");
  for (int a = 0; a < 3; ++a)
    if (dims[a] % s != 0)
      throw ShapeError("phase disparity: axis " + std::to_string(a) + " size " +
                       std::to_string(dims[a]) + " not divisible by " + std::to_string(s));
  const std::int64_t n = dims[0] * dims[1] * dims[2];
  if (static_cast<std::int64_t>(v.size()) != n) throw ShapeError("phase disparity: buffer size mismatch");
  double mean = 0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(n);
  double var = 0;
  for (double x : v) var += (x - mean) * (x - mean);
  const double sd = std::sqrt(var / static_cast<double>(n));
  if (sd == 0.0) return 0.0;
  const int phases = s * s * s;
  std::vector<double> sums(phases, 0.0);
  std::vector<std::int64_t> counts(phases, 0);
  for (std::int64_t d = 0; d < dims[0]; ++d)
    for (std::int64_t h = 0; h < dims[1]; ++h)
      for (std::int64_t w = 0; w < dims[2]; ++w) {
        const int p = static_cast<int>(((d % s) * s + h % s) * s + w % s);
        sums[p] += v[(d * dims[1] + h) * dims[2] + w];
        ++counts[p];
      }
  double acc = 0;
  for (int p = 0; p < phases; ++p) acc += std::abs(sums[p] / static_cast<double>(counts[p]) - mean);
  return acc / phases / sd;
}

nlohmann::json dice_report_json(const std::string& study, const DiceReport& r,
                                std::uint32_t model_version) {
  nlohmann::json j;
  j["study"] = study;
  for (int i = 0; i < 3; ++i) j[kRegionNames[i]] = r.regions[i].dice;
  j["mean"] = r.mean;
  j["model_version"] = model_version;
  return j;
}

}  // namespace gmln
