#include "gtta/optim.hpp"

#include <cmath>

#include "gtta/error.hpp"

namespace gtta {

void adam_step(std::span<Tensor> params, AdamState& state, double lr) {
  if (state.first_moment.empty()) {
    for (const Tensor& p : params) {
      state.first_moment.emplace_back(p.size(), 0.0);
      state.second_moment.emplace_back(p.size(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size()) {
    fail(Errc::ShapeMismatch, "adam_step: parameter list changed size");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) fail(Errc::MissingGradient, "adam_step: parameter " + std::to_string(i));
    if (state.first_moment[i].size() != params[i].size()) {
      fail(Errc::ShapeMismatch, "adam_step: moment buffer does not match parameter " + std::to_string(i));
    }
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].values_mut();
    auto g = params[i].grad_mut();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      w[j] -= lr * mhat / (std::sqrt(vhat) + state.eps);
      g[j] = 0.0;
    }
  }
}

void zero_grads(std::span<Tensor> params) {
  for (Tensor& p : params) p.zero_grad();
}

}  // namespace gtta
