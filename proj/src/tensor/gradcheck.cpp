#include "gtta/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <iterator>
#include <numeric>
#include <random>
#include <utility>
#include <vector>

#include "gtta/error.hpp"

namespace gtta {

namespace {

constexpr double kMinStep = 1e-9;

std::pair<double, std::uint64_t> probe(const std::function<Tensor()>& f) {
  BranchLog log;
  const double v = f().item();
  return {v, log.value()};
}

// indices[pi] empty means every coordinate of params[pi].
GradCheckResult check_coords(const std::function<Tensor()>& f, std::span<Tensor> params,
                             const std::vector<std::vector<std::size_t>>& indices, double eps) {
  std::vector<std::vector<double>> analytic;
  for (Tensor& p : params) p.zero_grad();
  {
    Tape tape;
    backward(f());
  }
  for (Tensor& p : params) {
    if (p.has_grad()) {
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      analytic.emplace_back(p.size(), 0.0);
    }
    p.zero_grad();
  }

  const std::uint64_t base_branch = probe(f).second;
  GradCheckResult res;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto w = params[pi].values_mut();
    std::vector<std::size_t> coords = indices[pi];
    if (coords.empty()) {
      coords.resize(w.size());
      std::iota(coords.begin(), coords.end(), 0);
    }
    for (std::size_t j : coords) {
      const double saved = w[j];
      double h = eps;
      bool smooth = false, one_sided = false;
      double numeric = 0.0;
      auto at = [&](double offset) {
        w[j] = saved + offset;
        const auto r = probe(f);
        w[j] = saved;
        return r;
      };
      while (h >= kMinStep) {
        const auto up = at(h), down = at(-h);
        if (up.second == base_branch && down.second == base_branch) {
          numeric = (up.first - down.first) / (2.0 * h);
          smooth = true;
          break;
        }
        // One-sided second-order stencil on whichever side stays on the
        // base piece; same truncation order as the central difference.
        const double base = at(0.0).first;
        if (down.second == base_branch) {
          const auto down2 = at(-2.0 * h);
          if (down2.second == base_branch) {
            numeric = (3.0 * base - 4.0 * down.first + down2.first) / (2.0 * h);
            smooth = one_sided = true;
            break;
          }
        }
        if (up.second == base_branch) {
          const auto up2 = at(2.0 * h);
          if (up2.second == base_branch) {
            numeric = (-3.0 * base + 4.0 * up.first - up2.first) / (2.0 * h);
            smooth = one_sided = true;
            break;
          }
        }
        h /= 10.0;
      }
      if (!smooth) {
        ++res.skipped;
        continue;
      }
      if (h < eps || one_sided) ++res.refined;
      ++res.checked;
      const double a = analytic[pi][j];
      const double err = std::abs(a - numeric) / std::max(1e-12, std::abs(a) + std::abs(numeric));
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_param = pi;
        res.worst_index = j;
        res.analytic = a;
        res.numeric = numeric;
      }
    }
  }
  return res;
}

}  // namespace

GradCheckResult grad_check(const std::function<Tensor()>& f, std::span<Tensor> params, double eps) {
  return check_coords(f, params, std::vector<std::vector<std::size_t>>(params.size()), eps);
}

GradCheckResult grad_check_sampled(const std::function<Tensor()>& f, std::span<Tensor> params,
                                   std::size_t per_param, std::uint64_t seed, double eps) {
  if (per_param == 0) fail(Errc::DomainError, "grad_check_sampled: per_param must be positive");
  std::mt19937_64 rng(seed);
  std::vector<std::vector<std::size_t>> indices;
  for (const Tensor& p : params) {
    std::vector<std::size_t> all(p.size());
    std::iota(all.begin(), all.end(), 0);
    std::vector<std::size_t> pick;
    std::sample(all.begin(), all.end(), std::back_inserter(pick), std::min(per_param, all.size()), rng);
    indices.push_back(std::move(pick));
  }
  return check_coords(f, params, indices, eps);
}

}  // namespace gtta
