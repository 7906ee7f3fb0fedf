#include "gmln/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "gmln/ops.hpp"
#include "gmln/rng.hpp"

namespace gmln {

Tensor random_uniform(const Shape& shape, Rng& rng, double lo, double hi, DType dtype) {
  Tensor t(shape, dtype);
  dispatch(dtype, [&]<class T>(T) {
    for (auto& v : t.mutable_data<T>()) v = static_cast<T>(rng.uniform(lo, hi));
  });
  return t;
}

Tensor random_normal(const Shape& shape, Rng& rng, double stddev, DType dtype) {
  Tensor t(shape, dtype);
  dispatch(dtype, [&]<class T>(T) {
    for (auto& v : t.mutable_data<T>()) v = static_cast<T>(rng.normal(0.0, stddev));
  });
  return t;
}

Var probe_loss(const Var& out, std::uint64_t seed) {
  Rng rng(seed, "probe");
  Tensor r = random_uniform(out.shape(), rng, -1.0, 1.0, out.dtype());
  return ops::sum(ops::mul(out, constant(r)));
}

namespace {

struct Evaluation {
  double value;
  std::uint64_t digest;
};

Evaluation evaluate(const TensorProgram& fn, const std::vector<Tensor>& inputs) {
  KinkProbe probe;
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(inputs.size());
  for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
  const Var loss = fn(tape, leaves);
  if (loss.value.numel() != 1) throw ContractError("grad_check: program must return a scalar");
  return {loss.value.item(), probe.digest()};
}

}  // namespace

GradCheckResult grad_check(const TensorProgram& fn, const std::vector<Tensor>& inputs,
                           const GradCheckOptions& options) {
  for (const auto& t : inputs)
    if (t.dtype() != DType::f64) throw ContractError("grad_check: inputs must be float64");
  if (options.step <= 0) throw ContractError("grad_check: step must be positive");

  std::vector<Tensor> analytic;
  std::uint64_t base_digest = 0;
  {
    KinkProbe probe;
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
    const Var loss = fn(tape, leaves);
    base_digest = probe.digest();
    if (!std::isfinite(loss.value.item()))
      throw NumericError("grad_check: program value is not finite at the base point");
    tape.backward(loss);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      Tensor g = tape.grad(leaves[i]);
      analytic.push_back(g.defined() ? g : Tensor::zeros(inputs[i].shape(), DType::f64));
    }
  }

  GradCheckResult result;
  Rng rng(options.seed, "grad_check");
  const double h = options.step;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor x = inputs[i];
    auto xs = x.mutable_data<double>();
    const auto gs = analytic[i].data<double>();
    const auto n = static_cast<std::int64_t>(xs.size());
    std::vector<std::int64_t> coords(static_cast<std::size_t>(n));
    std::iota(coords.begin(), coords.end(), 0);
    if (n > options.max_coords_per_input) {
      std::shuffle(coords.begin(), coords.end(), rng.engine());
      coords.resize(static_cast<std::size_t>(options.max_coords_per_input));
      std::sort(coords.begin(), coords.end());
    }
    for (auto j : coords) {
      const double original = xs[j];
      xs[j] = original + h;
      const Evaluation plus = evaluate(fn, inputs);
      xs[j] = original - h;
      const Evaluation minus = evaluate(fn, inputs);
      xs[j] = original;
      if (!std::isfinite(plus.value) || !std::isfinite(minus.value)) {
        std::ostringstream os;
        os << "grad_check: non-finite value at input " << i << ", coordinate " << j;
        throw NumericError(os.str());
      }
      if (plus.digest != base_digest || minus.digest != base_digest) {
        ++result.skipped_kinks;
        continue;
      }
      const double numeric = (plus.value - minus.value) / (2 * h);
      const double a = gs[j];
      ++result.checked;
      if (std::abs(a) < options.zero_tolerance && std::abs(numeric) < options.zero_tolerance) {
        ++result.agreeing_zeros;
        continue;
      }
      const double err =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      if (err > result.max_rel_error || result.worst.empty()) {
        result.max_rel_error = std::max(err, result.max_rel_error);
        if (err >= result.max_rel_error) {
          std::ostringstream os;
          os << "input " << i << ", coordinate " << j << ": analytic " << a << " vs numeric "
             << numeric;
          result.worst = os.str();
        }
      }
    }
  }
  return result;
}

}  // namespace gmln
