#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "gtta/tensor.hpp"

namespace gtta {

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

/// One bias-corrected Adam update (no weight decay) over `params`, in order.
/// The state binds to the parameter list on first use; later calls must pass
/// the same list. Gradients are zeroed afterwards.
void adam_step(std::span<Tensor> params, AdamState& state, double lr);

void zero_grads(std::span<Tensor> params);

}  // namespace gtta
