#pragma once

#include <cstdint>
#include <functional>
#include <span>

#include "gtta/tensor.hpp"

namespace gtta {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
  std::size_t refined = 0;  // coordinates checked with a one-sided or shrunk stencil
  std::size_t skipped = 0;  // coordinates sitting on a kink at every step size
};

/// Compares tape gradients of the scalar `f` against central differences
/// (f(w+eps) - f(w-eps)) / 2eps for every coordinate of every parameter.
/// Error per coordinate is |a-b| / max(1e-12, |a|+|b|).
///
/// A stencil whose endpoints take different discrete branches than the base
/// point (see BranchLog) straddles a kink. The check then uses a one-sided
/// second-order stencil on a side that stays on the base piece, or failing
/// that divides the step by 10, down to 1e-9. Coordinates that never agree
/// are skipped and counted.
///
/// `f` must rebuild its graph from `params` on every call. Existing gradients
/// on the parameters are overwritten.
GradCheckResult grad_check(const std::function<Tensor()>& f, std::span<Tensor> params, double eps = 1e-5);

/// Same comparison on at most `per_param` coordinates of each parameter,
/// drawn without replacement from a generator seeded with `seed`. For models
/// too large to perturb coordinate by coordinate.
GradCheckResult grad_check_sampled(const std::function<Tensor()>& f, std::span<Tensor> params,
                                   std::size_t per_param, std::uint64_t seed, double eps = 1e-5);

}  // namespace gtta
