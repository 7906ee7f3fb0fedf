#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "gmln/autograd.hpp"
#include "gmln/kernels.hpp"

/// Differentiable operations. Each op computes its result eagerly and, when any
/// input is tracked, records a backward function on that input's tape.
namespace gmln::ops {

// Convolution family.
Var conv3d(const Var& x, const Var& w, const std::optional<Var>& bias, const ConvSpec& spec);
Var conv_transpose3d(const Var& x, const Var& w, const std::optional<Var>& bias,
                     const ConvSpec& spec);
Var trilinear_upsample3d(const Var& x, const Vec3& factor);
Var avg_pool3d(const Var& x, int kernel = 3, int stride = 1, int padding = 1);
/// (B, C, D, H, W) -> (B, C): mean over all voxels.
Var global_avg_pool(const Var& x);

// Normalization.
Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta, double eps = 1e-5);

struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  Tensor tracked_batches;  // scalar count of stat updates
};
struct BatchNormResult {
  Var out;
  bool used_fallback_stats = false;  // eval mode before any statistics were recorded
};
/// Per-channel normalization of (B, C, ...). Train mode uses batch statistics and
/// updates `state` in place (unbiased variance for the running estimate).
BatchNormResult batch_norm(const Var& x, const Var& gamma, const Var& beta,
                           BatchNormState& state, bool training, double momentum = 0.1,
                           double eps = 1e-5);
/// Normalizes over the last axis.
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

// Dense algebra.
/// x (..., Fin), w (Fout, Fin), bias (Fout) -> (..., Fout).
Var linear(const Var& x, const Var& w, const std::optional<Var>& bias);
/// a (..., m, k) x b (..., k, n) with broadcast leading dims.
Var matmul(const Var& a, const Var& b);

// Pointwise.
Var relu(const Var& x);
Var leaky_relu(const Var& x, double slope = 0.01);
Var softmax(const Var& x, int axis);
Var log_softmax(const Var& x, int axis);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& x, double factor);
Var add_scalar(const Var& x, double value);
Var square(const Var& x);

// Reductions.
Var sum(const Var& x);
Var mean(const Var& x);
/// Sums over `axes`, keeping them as size-1 dims.
Var sum_axes(const Var& x, const std::vector<int>& axes);

// Data movement.
Var concat(const std::vector<Var>& xs, int axis);
Var reshape(const Var& x, Shape shape);
/// Broadcasts size-1 axes of x to `shape` by copying; gradient sums the copies.
Var expand(const Var& x, Shape shape);
Var permute(const Var& x, const std::vector<int>& order);
/// Slice [start, start + length) along `axis`.
Var narrow(const Var& x, int axis, std::int64_t start, std::int64_t length);

}  // namespace gmln::ops
