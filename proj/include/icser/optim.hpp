#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "icser/tensor.hpp"

namespace icser {

/// Per-parameter moment buffers for rectified Adam.
struct RAdamState {
  std::int64_t step = 0;
  std::vector<double> m;
  std::vector<double> v;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double learning_rate = 1e-3;
};

/// One rectified-Adam update in place. While the variance-rectification term
/// rho_t <= 4 the update falls back to the bias-corrected first moment alone;
/// afterwards the rectified adaptive step applies. Non-finite gradients
/// reject the whole update.
void radam_step(std::vector<double>& params, const std::vector<double>& grads,
                RAdamState& state);

/// Named-parameter optimizer wrapper; skips parameters frozen via
/// requires_grad=false and parameters that saw no gradient this step.
class RAdamOptimizer {
 public:
  RAdamOptimizer(std::vector<std::pair<std::string, Tensor>> params,
                 double learning_rate);

  void set_learning_rate(double lr);
  double learning_rate() const { return lr_; }

  void step();
  void zero_grad();

  const std::vector<std::pair<std::string, Tensor>>& params() const { return params_; }
  std::vector<RAdamState>& states() { return states_; }

 private:
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<RAdamState> states_;
  double lr_;
};

}  // namespace icser
