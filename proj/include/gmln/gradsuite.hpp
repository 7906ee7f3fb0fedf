#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "gmln/gradcheck.hpp"

namespace gmln {

/// One named float64 gradient check, parameterized by seed.
struct GradCase {
  std::string name;
  std::function<GradCheckResult(std::uint64_t seed)> run;
};

/// Every differentiable op on small random inputs.
std::vector<GradCase> op_grad_cases();
/// M2AE, G2MCIM, transformer stage, VRUM (factors 2 and 4) and, optionally, the tiny
/// full model, each checked over inputs and parameters.
std::vector<GradCase> block_grad_cases(bool include_model = true);

struct GradSuiteRow {
  std::string name;
  double max_rel_error = 0.0;  // worst over seeds
  std::int64_t checked = 0;
  std::string worst;
  double seconds = 0.0;
};

std::vector<GradSuiteRow> run_grad_suite(const std::vector<GradCase>& cases, const std::vector<std::uint64_t>& seeds);

}  // namespace gmln
