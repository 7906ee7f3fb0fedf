#pragma once

#include <span>
#include <string>
#include <vector>

#include "gmln/metrics.hpp"
#include "gmln/model.hpp"
#include "gmln/study.hpp"

namespace gmln {

/// Per-voxel argmax over the class axis of (B, C, D, H, W); B*D*H*W labels.
std::vector<std::uint8_t> argmax_labels(const Tensor& logits);

/// Eval-mode prediction for one study as a uint8 label volume.
Volume segment(const GmlnModel& model, const Study& study);

struct StudyScore {
  std::string study;
  DiceReport report;
};

struct Evaluation {
  std::vector<StudyScore> studies;
  double mean_dice = 0.0;  // mean over studies of the per-study WT/TC/ET mean
};

Evaluation evaluate(const GmlnModel& model, std::span<const Study* const> studies, int batch_size = 2);

}  // namespace gmln
