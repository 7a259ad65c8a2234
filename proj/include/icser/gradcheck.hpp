#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace icser {

struct GradCheckReport {
  std::string name;
  double max_rel_err = 0.0;
  bool pass = false;
};

/// Finite-difference gradient suite over every differentiable op plus the
/// end-to-end toy speech LM, `points` random draws each. Threshold 1e-4.
std::vector<GradCheckReport> run_gradient_suite(int points, std::uint64_t seed);

bool gradient_suite_passes(const std::vector<GradCheckReport>& reports);

}  // namespace icser
