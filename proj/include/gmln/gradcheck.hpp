#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "gmln/autograd.hpp"

namespace gmln {

/// A deterministic scalar program over leaf values. It must build its result only
/// from `leaves` (or from tensors sharing their buffers, registered via tape.leaf).
using TensorProgram = std::function<Var(Tape& tape, const std::vector<Var>& leaves)>;

struct GradCheckOptions {
  double step = 1e-5;
  /// Coordinates probed per input tensor; larger tensors are sampled.
  std::int64_t max_coords_per_input = 48;
  std::uint64_t seed = 0;
  /// Coordinates where both gradients are below this magnitude count as agreeing zeros
  /// (parameters a later normalization or softmax makes inert). 0 disables.
  double zero_tolerance = 0.0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // "input i, coordinate j: analytic a vs numeric n"
  std::int64_t checked = 0;
  /// Coordinates whose +-h step changed a ReLU/LeakyReLU activation pattern.
  std::int64_t skipped_kinks = 0;
  /// Coordinates accepted under `zero_tolerance`.
  std::int64_t agreeing_zeros = 0;
};

/// Central differences (f(x+h) - f(x-h)) / 2h against reverse-mode gradients.
/// Error per coordinate is |a - n| / max(|a|, |n|, 1e-8). Inputs must be float64.
/// Inputs are perturbed in place and restored before returning.
GradCheckResult grad_check(const TensorProgram& fn, const std::vector<Tensor>& inputs,
                           const GradCheckOptions& options = {});

/// sum(out * R) for a fixed pseudo-random R in [-1, 1); a generic scalar probe.
Var probe_loss(const Var& out, std::uint64_t seed);

}  // namespace gmln
