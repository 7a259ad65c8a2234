#include "icser/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace icser {

void radam_step(std::vector<double>& params, const std::vector<double>& grads,
                RAdamState& state) {
  if (params.size() != grads.size())
    throw std::invalid_argument("radam_step: parameter/gradient size mismatch");
  for (double g : grads)
    if (!std::isfinite(g))
      throw std::runtime_error("radam_step: non-finite gradient, update rejected");
  if (state.m.empty()) state.m.assign(params.size(), 0.0);
  if (state.v.empty()) state.v.assign(params.size(), 0.0);
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw std::invalid_argument("radam_step: moment buffers do not match parameter");

  const double b1 = state.beta1, b2 = state.beta2;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double b1t = std::pow(b1, t);
  const double b2t = std::pow(b2, t);
  const double rho_inf = 2.0 / (1.0 - b2) - 1.0;
  const double rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t);

  double rect = 0.0;
  const bool adaptive = rho_t > 4.0;
  if (adaptive)
    rect = std::sqrt(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) /
                     ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));

  for (size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
    state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
    const double mhat = state.m[i] / (1.0 - b1t);
    if (adaptive) {
      const double vhat = std::sqrt(state.v[i] / (1.0 - b2t));
      params[i] -= state.learning_rate * rect * mhat / (vhat + state.epsilon);
    } else {
      params[i] -= state.learning_rate * mhat;
    }
  }
}

RAdamOptimizer::RAdamOptimizer(std::vector<std::pair<std::string, Tensor>> params,
                               double learning_rate)
    : params_(std::move(params)), lr_(learning_rate) {
  states_.resize(params_.size());
  for (auto& s : states_) s.learning_rate = lr_;
}

void RAdamOptimizer::set_learning_rate(double lr) {
  lr_ = lr;
  for (auto& s : states_) s.learning_rate = lr;
}

void RAdamOptimizer::step() {
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i].second;
    if (!p.requires_grad() || !p.has_grad()) continue;
    radam_step(p.node()->data, p.node()->grad, states_[i]);
  }
}

void RAdamOptimizer::zero_grad() {
  for (auto& [name, p] : params_) p.zero_grad();
}

}  // namespace icser
