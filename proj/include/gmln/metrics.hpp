#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>

#include "gmln/kernels.hpp"
#include "json.hpp"

namespace gmln {

enum class Region : int { WT = 0, TC = 1, ET = 2 };
inline constexpr std::array<const char*, 3> kRegionNames{"WT", "TC", "ET"};

/// Internal-label membership: WT = {1,2,3}, TC = {1,3}, ET = {3}.
bool in_region(std::uint8_t label, Region region);

/// 2|X n Y| / (|X| + |Y|) over nonzero entries; both empty gives 1.
double dsc(std::span<const std::uint8_t> pred_mask, std::span<const std::uint8_t> gt_mask);

struct RegionStats {
  double dice = 0.0;
  std::int64_t pred = 0, gt = 0, overlap = 0;
};

struct DiceReport {
  std::array<RegionStats, 3> regions;
  double mean = 0.0;
  double operator[](Region r) const { return regions[static_cast<int>(r)].dice; }
};

/// Labels must lie in {0..3}; otherwise DataError with the voxel index.
DiceReport region_dice(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);

/// Mean over the s^3 phase classes (d mod s, h mod s, w mod s) of |phase mean - mean|,
/// divided by the global standard deviation (0 when the volume is constant).
double checkerboard_phase_disparity(std::span<const double> volume, const Dims3& dims, int s);

/// {"study", "WT", "TC", "ET", "mean", "model_version"}.
nlohmann::json dice_report_json(const std::string& study, const DiceReport& r,
                                std::uint32_t model_version);

}  // namespace gmln
