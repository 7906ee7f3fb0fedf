#pragma once

#include <array>
#include <cstdint>

#include "gmln/study.hpp"

namespace gmln {

enum class Tissue : int { background = 0, brain, edema, core, enhancing };

/// Radii ranges are fractions: the brain relative to the volume half-size, each nested
/// shell relative to its enclosing shell, drawn per axis.
struct PhantomConfig {
  int size = 32;
  std::uint64_t seed = 0;
  double noise = 0.05;
  double gain = 1.0;
  std::array<double, 2> brain_radius{0.72, 0.86};
  std::array<double, 2> tumor_radius{0.38, 0.55};  // whole tumor, of the brain radius
  std::array<double, 2> core_radius{0.55, 0.75};   // tumor core, of the whole tumor
  std::array<double, 2> necrosis_radius{0.40, 0.62};  // necrotic centre, of the core
  /// intensity[tissue][modality], modalities in (T1, T1ce, T2, FLAIR) order.
  std::array<std::array<double, kModalities>, 5> intensity{{
      {0.1, 0.1, 0.1, 0.1},  // background
      {1.0, 1.0, 1.0, 1.0},  // brain
      {0.9, 1.0, 1.7, 1.8},  // edema
      {0.7, 0.4, 1.4, 1.2},  // necrotic / non-enhancing core
      {0.9, 1.9, 1.2, 1.3},  // enhancing rim
  }};

  /// Stand-in for a different scanner: intensity gain x1.15 and doubled noise.
  PhantomConfig shifted() const;
  /// Throws SpecError if shells cannot nest or intensities are not positive.
  void validate() const;
};

/// Deterministic in (config.seed, index). Id is "<prefix><seed>-<index>".
Study generate_phantom(const PhantomConfig& config, int index, const std::string& prefix = "ph");

}  // namespace gmln
