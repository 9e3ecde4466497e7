#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <limits>

#include "gtta/error.hpp"
#include "gtta/simd/kernels.hpp"
#include "gtta/tensor.hpp"

namespace gtta {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

namespace {

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (Tape::active() == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

Tensor emit(Shape shape, std::vector<double> value, bool track, detail::BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (track) Tape::active()->record(node, std::move(fn));
  return make_tensor(std::move(node));
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) fail(Errc::ShapeMismatch, std::string(op) + ": undefined input");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  if (a.shape() != b.shape()) {
    fail(Errc::ShapeMismatch, std::string(op) + ": " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

std::size_t resolve_axis(int axis, std::size_t rank) {
  const long r = static_cast<long>(rank);
  const long a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    fail(Errc::AxisOutOfRange, "axis " + std::to_string(axis) + " for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

// outer x len x inner decomposition around one axis.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit sp;
  for (std::size_t i = 0; i < axis; ++i) sp.outer *= s[i];
  sp.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) sp.inner *= s[i];
  return sp;
}

std::vector<double> transposed(const double* src, std::size_t rows, std::size_t cols) {
  std::vector<double> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = src[i * cols + j];
  return out;
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor unary_impl(Unary kind, const Tensor& x, double param) {
  require_defined(x, "unary");
  const auto xv = x.values();
  std::vector<double> y(xv.size());
  switch (kind) {
    case Unary::Relu:
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] > 0 ? xv[i] : 0.0;
      break;
    case Unary::LeakyRelu:
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] > 0 ? xv[i] : param * xv[i];
      break;
    case Unary::Elu:
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] > 0 ? xv[i] : param * std::expm1(xv[i]);
      break;
    case Unary::Sigmoid:
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = stable_sigmoid(xv[i]);
      break;
    case Unary::Exp:
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::exp(xv[i]);
      break;
    case Unary::Log:
      for (std::size_t i = 0; i < y.size(); ++i) {
        if (!(xv[i] > 0)) fail(Errc::DomainError, "log of a non-positive value");
        y[i] = std::log(xv[i]);
      }
      break;
  }
  if ((kind == Unary::Relu || kind == Unary::LeakyRelu || kind == Unary::Elu) && BranchLog::active()) {
    for (double v : xv) note_branch(v > 0 ? 1 : 0);
  }
  NodePtr xn = x.node_ptr();
  return emit(x.shape(), std::move(y), tracking({&x}), [xn, kind, param](Node& out) {
    if (!xn->requires_grad) return;
    auto& gx = xn->grad_buffer();
    const auto& g = out.grad;
    const auto& xv = xn->value;
    const auto& yv = out.value;
    for (std::size_t i = 0; i < g.size(); ++i) {
      double d = 0.0;
      switch (kind) {
        case Unary::Relu: d = xv[i] > 0 ? 1.0 : 0.0; break;
        case Unary::LeakyRelu: d = xv[i] > 0 ? 1.0 : param; break;
        case Unary::Elu: d = xv[i] > 0 ? 1.0 : yv[i] + param; break;
        case Unary::Sigmoid: d = yv[i] * (1.0 - yv[i]); break;
        case Unary::Exp: d = yv[i]; break;
        case Unary::Log: d = 1.0 / xv[i]; break;
      }
      gx[i] += g[i] * d;
    }
  });
}

}  // namespace

Tensor unary(Unary kind, const Tensor& x) {
  switch (kind) {
    case Unary::LeakyRelu: return unary_impl(kind, x, kLeakySlope);
    case Unary::Elu: return unary_impl(kind, x, 1.0);
    default: return unary_impl(kind, x, 0.0);
  }
}

Tensor relu(const Tensor& x) { return unary_impl(Unary::Relu, x, 0.0); }
Tensor leaky_relu(const Tensor& x, double slope) { return unary_impl(Unary::LeakyRelu, x, slope); }
Tensor elu(const Tensor& x, double alpha) { return unary_impl(Unary::Elu, x, alpha); }
Tensor sigmoid(const Tensor& x) { return unary_impl(Unary::Sigmoid, x, 0.0); }
Tensor exp(const Tensor& x) { return unary_impl(Unary::Exp, x, 0.0); }
Tensor log(const Tensor& x) { return unary_impl(Unary::Log, x, 0.0); }

Tensor binary(Binary kind, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "binary");
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> y(av.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    switch (kind) {
      case Binary::Add: y[i] = av[i] + bv[i]; break;
      case Binary::Sub: y[i] = av[i] - bv[i]; break;
      case Binary::Mul: y[i] = av[i] * bv[i]; break;
    }
  }
  NodePtr an = a.node_ptr(), bn = b.node_ptr();
  return emit(a.shape(), std::move(y), tracking({&a, &b}), [an, bn, kind](Node& out) {
    const auto& g = out.grad;
    if (an->requires_grad) {
      auto& ga = an->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += kind == Binary::Mul ? g[i] * bn->value[i] : g[i];
    }
    if (bn->requires_grad) {
      auto& gb = bn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        switch (kind) {
          case Binary::Add: gb[i] += g[i]; break;
          case Binary::Sub: gb[i] -= g[i]; break;
          case Binary::Mul: gb[i] += g[i] * an->value[i]; break;
        }
      }
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(Binary::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(Binary::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(Binary::Mul, a, b); }

Tensor scale(const Tensor& x, double factor) {
  require_defined(x, "scale");
  std::vector<double> y(x.values().begin(), x.values().end());
  for (double& v : y) v *= factor;
  NodePtr xn = x.node_ptr();
  return emit(x.shape(), std::move(y), tracking({&x}), [xn, factor](Node& out) {
    if (!xn->requires_grad) return;
    simd::active_kernels().axpy(factor, out.grad.data(), xn->grad_buffer().data(), out.grad.size());
  });
}

Tensor add_scalar(const Tensor& x, double offset) {
  require_defined(x, "add_scalar");
  std::vector<double> y(x.values().begin(), x.values().end());
  for (double& v : y) v += offset;
  NodePtr xn = x.node_ptr();
  return emit(x.shape(), std::move(y), tracking({&x}), [xn](Node& out) {
    if (!xn->requires_grad) return;
    simd::active_kernels().axpy(1.0, out.grad.data(), xn->grad_buffer().data(), out.grad.size());
  });
}

// --- linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    fail(Errc::ShapeMismatch, "matmul " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> c(m * n);
  simd::active_kernels().gemm(m, n, k, a.values().data(), k, b.values().data(), n, c.data(), n, false);
  NodePtr an = a.node_ptr(), bn = b.node_ptr();
  return emit({m, n}, std::move(c), tracking({&a, &b}), [an, bn, m, k, n](Node& out) {
    const auto& kern = simd::active_kernels();
    if (an->requires_grad) {
      kern.gemm_nt(m, k, n, out.grad.data(), n, bn->value.data(), n, an->grad_buffer().data(), k, true);
    }
    if (bn->requires_grad) {
      kern.gemm_tn(k, n, m, an->value.data(), k, out.grad.data(), n, bn->grad_buffer().data(), n, true);
    }
  });
}

Tensor batched_matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "batched_matmul");
  require_defined(b, "batched_matmul");
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    fail(Errc::ShapeMismatch, "batched_matmul " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const std::size_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<double> c(bs * m * n);
  const auto& kern = simd::active_kernels();
  for (std::size_t t = 0; t < bs; ++t) {
    kern.gemm(m, n, k, a.values().data() + t * m * k, k, b.values().data() + t * k * n, n,
              c.data() + t * m * n, n, false);
  }
  NodePtr an = a.node_ptr(), bn = b.node_ptr();
  return emit({bs, m, n}, std::move(c), tracking({&a, &b}), [an, bn, bs, m, k, n](Node& out) {
    const auto& kern = simd::active_kernels();
    for (std::size_t t = 0; t < bs; ++t) {
      const double* g = out.grad.data() + t * m * n;
      if (an->requires_grad) {
        kern.gemm_nt(m, k, n, g, n, bn->value.data() + t * k * n, n, an->grad_buffer().data() + t * m * k, k, true);
      }
      if (bn->requires_grad) {
        kern.gemm_tn(k, n, m, an->value.data() + t * m * k, k, g, n, bn->grad_buffer().data() + t * k * n, n, true);
      }
    }
  });
}

Tensor transpose(const Tensor& x) {
  require_defined(x, "transpose");
  if (x.rank() != 2 && x.rank() != 3) fail(Errc::ShapeMismatch, "transpose needs rank 2 or 3");
  const std::size_t bs = x.rank() == 3 ? x.dim(0) : 1;
  const std::size_t r = x.dim(x.rank() - 2), c = x.dim(x.rank() - 1);
  std::vector<double> y(x.size());
  for (std::size_t t = 0; t < bs; ++t) {
    const auto tt = transposed(x.values().data() + t * r * c, r, c);
    std::copy(tt.begin(), tt.end(), y.begin() + static_cast<std::ptrdiff_t>(t * r * c));
  }
  Shape s = x.shape();
  std::swap(s[s.size() - 1], s[s.size() - 2]);
  NodePtr xn = x.node_ptr();
  return emit(std::move(s), std::move(y), tracking({&x}), [xn, bs, r, c](Node& out) {
    if (!xn->requires_grad) return;
    auto& gx = xn->grad_buffer();
    for (std::size_t t = 0; t < bs; ++t) {
      const double* g = out.grad.data() + t * r * c;
      double* dst = gx.data() + t * r * c;
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) dst[i * c + j] += g[j * r + i];
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  if (numel(shape) != x.size()) {
    fail(Errc::ShapeMismatch, "reshape " + to_string(x.shape()) + " -> " + to_string(shape));
  }
  std::vector<double> y(x.values().begin(), x.values().end());
  NodePtr xn = x.node_ptr();
  return emit(std::move(shape), std::move(y), tracking({&x}), [xn](Node& out) {
    if (!xn->requires_grad) return;
    simd::active_kernels().axpy(1.0, out.grad.data(), xn->grad_buffer().data(), out.grad.size());
  });
}

Tensor add_broadcast(const Tensor& x, const Tensor& b) {
  require_defined(x, "add_broadcast");
  require_defined(b, "add_broadcast");
  const Shape& xs = x.shape();
  const Shape& bsh = b.shape();
  if (bsh.size() > xs.size() || !std::equal(bsh.rbegin(), bsh.rend(), xs.rbegin())) {
    fail(Errc::ShapeMismatch, "add_broadcast " + to_string(xs) + " + " + to_string(bsh));
  }
  const std::size_t inner = b.size();
  const std::size_t outer = x.size() / inner;
  std::vector<double> y(x.values().begin(), x.values().end());
  const auto bv = b.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) y[o * inner + i] += bv[i];
  NodePtr xn = x.node_ptr(), bn = b.node_ptr();
  return emit(xs, std::move(y), tracking({&x, &b}), [xn, bn, outer, inner](Node& out) {
    const auto& kern = simd::active_kernels();
    if (xn->requires_grad) kern.axpy(1.0, out.grad.data(), xn->grad_buffer().data(), out.grad.size());
    if (bn->requires_grad) {
      auto& gb = bn->grad_buffer();
      for (std::size_t o = 0; o < outer; ++o) kern.axpy(1.0, out.grad.data() + o * inner, gb.data(), inner);
    }
  });
}

Tensor expand(const Tensor& x, std::size_t axis, std::size_t count) {
  require_defined(x, "expand");
  const Shape& xs = x.shape();
  if (axis > xs.size()) fail(Errc::AxisOutOfRange, "expand axis " + std::to_string(axis));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= xs[i];
  for (std::size_t i = axis; i < xs.size(); ++i) inner *= xs[i];
  Shape s = xs;
  s.insert(s.begin() + static_cast<std::ptrdiff_t>(axis), count);
  std::vector<double> y(outer * count * inner);
  const auto xv = x.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t c = 0; c < count; ++c)
      std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(o * inner), inner,
                  y.begin() + static_cast<std::ptrdiff_t>((o * count + c) * inner));
  NodePtr xn = x.node_ptr();
  return emit(std::move(s), std::move(y), tracking({&x}), [xn, outer, count, inner](Node& out) {
    if (!xn->requires_grad) return;
    auto& gx = xn->grad_buffer();
    const auto& kern = simd::active_kernels();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t c = 0; c < count; ++c)
        kern.axpy(1.0, out.grad.data() + (o * count + c) * inner, gx.data() + o * inner, inner);
  });
}

Tensor scale_rows(const Tensor& x, const Tensor& s) {
  require_defined(x, "scale_rows");
  require_defined(s, "scale_rows");
  const Shape& xs = x.shape();
  const Shape& ss = s.shape();
  if (ss.size() > xs.size() || !std::equal(ss.begin(), ss.end(), xs.begin())) {
    fail(Errc::ShapeMismatch, "scale_rows " + to_string(xs) + " by " + to_string(ss));
  }
  const std::size_t rows = s.size();
  const std::size_t inner = x.size() / rows;
  std::vector<double> y(x.size());
  const auto xv = x.values();
  const auto sv = s.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < inner; ++i) y[r * inner + i] = xv[r * inner + i] * sv[r];
  NodePtr xn = x.node_ptr(), sn = s.node_ptr();
  return emit(xs, std::move(y), tracking({&x, &s}), [xn, sn, rows, inner](Node& out) {
    const auto& kern = simd::active_kernels();
    if (xn->requires_grad) {
      auto& gx = xn->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        kern.axpy(sn->value[r], out.grad.data() + r * inner, gx.data() + r * inner, inner);
    }
    if (sn->requires_grad) {
      auto& gs = sn->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        gs[r] += kern.dot(out.grad.data() + r * inner, xn->value.data() + r * inner, inner);
    }
  });
}

Tensor gather_rows(const Tensor& x, const std::vector<std::vector<std::size_t>>& indices) {
  require_defined(x, "gather_rows");
  if (x.rank() < 2 || indices.size() != x.dim(0)) {
    fail(Errc::ShapeMismatch, "gather_rows on " + to_string(x.shape()) + " with " +
                                  std::to_string(indices.size()) + " index lists");
  }
  const std::size_t bs = x.dim(0), n = x.dim(1);
  const std::size_t inner = x.size() / (bs * n);
  const std::size_t k = indices.empty() ? 0 : indices[0].size();
  for (const auto& row : indices) {
    if (row.size() != k) fail(Errc::ShapeMismatch, "gather_rows: ragged index lists");
    for (std::size_t i : row)
      if (i >= n) fail(Errc::IndexOutOfRange, "gather_rows index " + std::to_string(i));
  }
  for (const auto& row : indices)
    for (std::size_t i : row) note_branch(i);
  Shape s = x.shape();
  s[1] = k;
  std::vector<double> y(bs * k * inner);
  const auto xv = x.values();
  for (std::size_t b = 0; b < bs; ++b)
    for (std::size_t j = 0; j < k; ++j)
      std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((b * n + indices[b][j]) * inner), inner,
                  y.begin() + static_cast<std::ptrdiff_t>((b * k + j) * inner));
  NodePtr xn = x.node_ptr();
  return emit(std::move(s), std::move(y), tracking({&x}), [xn, indices, bs, n, k, inner](Node& out) {
    if (!xn->requires_grad) return;
    auto& gx = xn->grad_buffer();
    const auto& kern = simd::active_kernels();
    for (std::size_t b = 0; b < bs; ++b)
      for (std::size_t j = 0; j < k; ++j)
        kern.axpy(1.0, out.grad.data() + (b * k + j) * inner, gx.data() + (b * n + indices[b][j]) * inner,
                  inner);
  });
}

Tensor pairwise_sum(const Tensor& s, const Tensor& d) {
  require_same_shape(s, d, "pairwise_sum");
  if (s.rank() != 2) fail(Errc::ShapeMismatch, "pairwise_sum needs [B x N] inputs");
  const std::size_t bs = s.dim(0), n = s.dim(1);
  std::vector<double> y(bs * n * n);
  const auto sv = s.values();
  const auto dv = d.values();
  for (std::size_t b = 0; b < bs; ++b)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) y[(b * n + i) * n + j] = sv[b * n + i] + dv[b * n + j];
  NodePtr sn = s.node_ptr(), dn = d.node_ptr();
  return emit({bs, n, n}, std::move(y), tracking({&s, &d}), [sn, dn, bs, n](Node& out) {
    const auto& g = out.grad;
    if (sn->requires_grad) {
      auto& gs = sn->grad_buffer();
      for (std::size_t b = 0; b < bs; ++b)
        for (std::size_t i = 0; i < n; ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[(b * n + i) * n + j];
          gs[b * n + i] += acc;
        }
    }
    if (dn->requires_grad) {
      auto& gd = dn->grad_buffer();
      for (std::size_t b = 0; b < bs; ++b)
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < n; ++j) gd[b * n + j] += g[(b * n + i) * n + j];
    }
  });
}

// --- reductions -------------------------------------------------------------

Tensor reduce(Reduce kind, const Tensor& x, std::optional<int> axis) {
  require_defined(x, "reduce");
  AxisSplit sp;
  Shape out_shape;
  if (axis) {
    const std::size_t ax = resolve_axis(*axis, x.rank());
    sp = split_at(x.shape(), ax);
    out_shape = x.shape();
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  } else {
    sp.len = x.size();
  }
  if (sp.len == 0) fail(Errc::ShapeMismatch, "reduction over an empty axis");
  const auto xv = x.values();
  std::vector<double> y(sp.outer * sp.inner);
  std::vector<std::size_t> argmax;
  if (kind == Reduce::Max) argmax.resize(y.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.len * sp.inner + i;
      if (kind == Reduce::Max) {
        double acc = xv[base];
        std::size_t best = 0;
        for (std::size_t l = 1; l < sp.len; ++l) {
          const double v = xv[base + l * sp.inner];
          if (v > acc) {
            acc = v;
            best = l;
          }
        }
        y[o * sp.inner + i] = acc;
        argmax[o * sp.inner + i] = best;
        note_branch(best);
        continue;
      }
      // Extended accumulator so rounding in long sums stays below what
      // finite differences can resolve.
      long double acc = 0.0L;
      for (std::size_t l = 0; l < sp.len; ++l) acc += xv[base + l * sp.inner];
      if (kind == Reduce::Mean) acc /= static_cast<long double>(sp.len);
      y[o * sp.inner + i] = static_cast<double>(acc);
    }
  }
  NodePtr xn = x.node_ptr();
  return emit(std::move(out_shape), std::move(y), tracking({&x}),
              [xn, kind, sp, argmax = std::move(argmax)](Node& out) {
                if (!xn->requires_grad) return;
                auto& gx = xn->grad_buffer();
                const double w = kind == Reduce::Mean ? 1.0 / static_cast<double>(sp.len) : 1.0;
                for (std::size_t o = 0; o < sp.outer; ++o)
                  for (std::size_t i = 0; i < sp.inner; ++i) {
                    const double g = out.grad[o * sp.inner + i];
                    const std::size_t base = o * sp.len * sp.inner + i;
                    if (kind == Reduce::Max) {
                      gx[base + argmax[o * sp.inner + i] * sp.inner] += g;
                    } else {
                      for (std::size_t l = 0; l < sp.len; ++l) gx[base + l * sp.inner] += g * w;
                    }
                  }
              });
}

Tensor sum(const Tensor& x, std::optional<int> axis) { return reduce(Reduce::Sum, x, axis); }
Tensor mean(const Tensor& x, std::optional<int> axis) { return reduce(Reduce::Mean, x, axis); }
Tensor amax(const Tensor& x, std::optional<int> axis) { return reduce(Reduce::Max, x, axis); }

Tensor softmax(const Tensor& x, int axis) {
  require_defined(x, "softmax");
  const std::size_t ax = resolve_axis(axis, x.rank());
  const AxisSplit sp = split_at(x.shape(), ax);
  const auto xv = x.values();
  std::vector<double> y(x.size());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.len * sp.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < sp.len; ++l) mx = std::max(mx, xv[base + l * sp.inner]);
      double z = 0.0;
      for (std::size_t l = 0; l < sp.len; ++l) {
        const double e = std::exp(xv[base + l * sp.inner] - mx);
        y[base + l * sp.inner] = e;
        z += e;
      }
      for (std::size_t l = 0; l < sp.len; ++l) y[base + l * sp.inner] /= z;
    }
  NodePtr xn = x.node_ptr();
  return emit(x.shape(), std::move(y), tracking({&x}), [xn, sp](Node& out) {
    if (!xn->requires_grad) return;
    auto& gx = xn->grad_buffer();
    const auto& g = out.grad;
    const auto& yv = out.value;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.len * sp.inner + i;
        double gy = 0.0;
        for (std::size_t l = 0; l < sp.len; ++l) gy += g[base + l * sp.inner] * yv[base + l * sp.inner];
        for (std::size_t l = 0; l < sp.len; ++l) {
          const std::size_t at = base + l * sp.inner;
          gx[at] += yv[at] * (g[at] - gy);
        }
      }
  });
}

NormalizeResult l2_normalize_flagged(const Tensor& x, int axis, double eps) {
  require_defined(x, "l2_normalize");
  const std::size_t ax = resolve_axis(axis, x.rank());
  const AxisSplit sp = split_at(x.shape(), ax);
  const auto xv = x.values();
  std::vector<double> y(xv.begin(), xv.end());
  std::vector<double> norms(sp.outer * sp.inner);
  std::vector<bool> zero(sp.outer * sp.inner, false);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.len * sp.inner + i;
      double ss = 0.0;
      for (std::size_t l = 0; l < sp.len; ++l) ss += xv[base + l * sp.inner] * xv[base + l * sp.inner];
      const double nrm = std::sqrt(ss);
      norms[o * sp.inner + i] = nrm;
      note_branch(nrm < eps ? 1 : 0);
      if (nrm < eps) {
        zero[o * sp.inner + i] = true;
        continue;
      }
      for (std::size_t l = 0; l < sp.len; ++l) y[base + l * sp.inner] /= nrm;
    }
  NodePtr xn = x.node_ptr();
  Tensor out = emit(x.shape(), std::move(y), tracking({&x}), [xn, sp, norms, zero](Node& out) {
    if (!xn->requires_grad) return;
    auto& gx = xn->grad_buffer();
    const auto& g = out.grad;
    const auto& yv = out.value;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.len * sp.inner + i;
        if (zero[o * sp.inner + i]) {
          for (std::size_t l = 0; l < sp.len; ++l) gx[base + l * sp.inner] += g[base + l * sp.inner];
          continue;
        }
        double gy = 0.0;
        for (std::size_t l = 0; l < sp.len; ++l) gy += g[base + l * sp.inner] * yv[base + l * sp.inner];
        const double inv = 1.0 / norms[o * sp.inner + i];
        for (std::size_t l = 0; l < sp.len; ++l) {
          const std::size_t at = base + l * sp.inner;
          gx[at] += (g[at] - yv[at] * gy) * inv;
        }
      }
  });
  return {std::move(out), std::move(zero)};
}

Tensor l2_normalize(const Tensor& x, int axis, double eps) { return l2_normalize_flagged(x, axis, eps).out; }

// --- losses -----------------------------------------------------------------

void check_distribution_rows(std::span<const double> values, std::size_t rows, std::size_t cols, double tol,
                             const char* what) {
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double v = values[r * cols + c];
      if (!std::isfinite(v) || v < -tol) {
        fail(Errc::InvalidDistribution, std::string(what) + ": negative or non-finite entry in row " +
                                            std::to_string(r));
      }
      s += v;
    }
    if (std::abs(s - 1.0) > tol) {
      fail(Errc::InvalidDistribution, std::string(what) + ": row " + std::to_string(r) + " sums to " +
                                          std::to_string(s));
    }
  }
}

namespace {

void require_matrix(const Tensor& t, const char* op) {
  require_defined(t, op);
  if (t.rank() != 2) fail(Errc::ShapeMismatch, std::string(op) + " expects [B x K], got " + to_string(t.shape()));
}

// Row-wise softmax probabilities and log-sum-exp of a [B x K] logit matrix.
void softmax_rows(std::span<const double> x, std::size_t rows, std::size_t cols, std::vector<double>& prob,
                  std::vector<double>& lse) {
  prob.resize(rows * cols);
  lse.resize(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * cols;
    const double mx = *std::max_element(xr, xr + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      prob[r * cols + c] = std::exp(xr[c] - mx);
      z += prob[r * cols + c];
    }
    for (std::size_t c = 0; c < cols; ++c) prob[r * cols + c] /= z;
    lse[r] = mx + std::log(z);
  }
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_matrix(logits, "cross_entropy");
  const std::size_t bs = logits.dim(0), k = logits.dim(1);
  if (labels.size() != bs) fail(Errc::ShapeMismatch, "cross_entropy: label count != batch");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= k) fail(Errc::IndexOutOfRange, "label " + std::to_string(y));
  std::vector<double> prob, lse;
  softmax_rows(logits.values(), bs, k, prob, lse);
  double loss = 0.0;
  for (std::size_t b = 0; b < bs; ++b) loss += lse[b] - logits.values()[b * k + static_cast<std::size_t>(labels[b])];
  loss /= static_cast<double>(bs);
  NodePtr ln = logits.node_ptr();
  std::vector<int> lab(labels.begin(), labels.end());
  return emit({}, {loss}, tracking({&logits}), [ln, prob = std::move(prob), lab = std::move(lab), bs, k](Node& out) {
    if (!ln->requires_grad) return;
    auto& gx = ln->grad_buffer();
    const double g = out.grad[0] / static_cast<double>(bs);
    for (std::size_t b = 0; b < bs; ++b)
      for (std::size_t c = 0; c < k; ++c) {
        const double t = static_cast<std::size_t>(lab[b]) == c ? 1.0 : 0.0;
        gx[b * k + c] += g * (prob[b * k + c] - t);
      }
  });
}

Tensor cross_entropy(const Tensor& logits, const Tensor& target) {
  require_matrix(logits, "cross_entropy");
  require_same_shape(logits, target, "cross_entropy");
  const std::size_t bs = logits.dim(0), k = logits.dim(1);
  check_distribution_rows(target.values(), bs, k, 1e-9, "cross_entropy target");
  std::vector<double> prob, lse;
  softmax_rows(logits.values(), bs, k, prob, lse);
  std::vector<double> t(target.values().begin(), target.values().end());
  double loss = 0.0;
  for (std::size_t b = 0; b < bs; ++b)
    for (std::size_t c = 0; c < k; ++c) loss += t[b * k + c] * (lse[b] - logits.values()[b * k + c]);
  loss /= static_cast<double>(bs);
  NodePtr ln = logits.node_ptr();
  return emit({}, {loss}, tracking({&logits}), [ln, prob = std::move(prob), t = std::move(t), bs, k](Node& out) {
    if (!ln->requires_grad) return;
    auto& gx = ln->grad_buffer();
    const double g = out.grad[0] / static_cast<double>(bs);
    for (std::size_t b = 0; b < bs; ++b) {
      double mass = 0.0;
      for (std::size_t c = 0; c < k; ++c) mass += t[b * k + c];
      for (std::size_t c = 0; c < k; ++c) gx[b * k + c] += g * (prob[b * k + c] * mass - t[b * k + c]);
    }
  });
}

namespace {

// Clamp to [eps, 1] and renormalize one row; remembers which entries were
// clamped (their gradient is zero).
void clamp_row(const double* src, std::size_t k, double eps, double* dst, char* passed, double& total) {
  total = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    const double v = src[c];
    const double cl = std::clamp(v, eps, 1.0);
    passed[c] = (v > eps && v < 1.0) || v == 1.0 ? 1 : 0;
    dst[c] = cl;
    total += cl;
  }
  for (std::size_t c = 0; c < k; ++c) dst[c] /= total;
}

}  // namespace

Tensor kl_divergence(const Tensor& p, const Tensor& q, double eps) {
  require_matrix(p, "kl_divergence");
  require_same_shape(p, q, "kl_divergence");
  const std::size_t bs = p.dim(0), k = p.dim(1);
  check_distribution_rows(p.values(), bs, k, 1e-6, "kl_divergence p");
  check_distribution_rows(q.values(), bs, k, 1e-6, "kl_divergence q");
  std::vector<double> pn(bs * k), qn(bs * k), psum(bs), qsum(bs);
  std::vector<char> ppass(bs * k), qpass(bs * k);
  std::vector<double> kl(bs);
  for (std::size_t b = 0; b < bs; ++b) {
    clamp_row(p.values().data() + b * k, k, eps, pn.data() + b * k, ppass.data() + b * k, psum[b]);
    clamp_row(q.values().data() + b * k, k, eps, qn.data() + b * k, qpass.data() + b * k, qsum[b]);
    for (std::size_t c = 0; c < k; ++c) note_branch(ppass[b * k + c] * 2 + qpass[b * k + c]);
    double acc = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      const double pv = pn[b * k + c], qv = qn[b * k + c];
      acc += pv * (std::log(pv) - std::log(qv));
    }
    kl[b] = acc;
  }
  NodePtr pnode = p.node_ptr(), qnode = q.node_ptr();
  return emit({bs}, std::move(kl), tracking({&p, &q}),
              [pnode, qnode, pn = std::move(pn), qn = std::move(qn), psum = std::move(psum), qsum = std::move(qsum),
               ppass = std::move(ppass), qpass = std::move(qpass), bs, k](Node& out) {
                std::vector<double> a(k);
                for (std::size_t b = 0; b < bs; ++b) {
                  const double g = out.grad[b];
                  const double* P = pn.data() + b * k;
                  const double* Q = qn.data() + b * k;
                  if (pnode->requires_grad) {
                    auto& gp = pnode->grad_buffer();
                    double dotp = 0.0;
                    for (std::size_t c = 0; c < k; ++c) {
                      a[c] = std::log(P[c]) - std::log(Q[c]) + 1.0;
                      dotp += a[c] * P[c];
                    }
                    for (std::size_t c = 0; c < k; ++c)
                      if (ppass[b * k + c]) gp[b * k + c] += g * (a[c] - dotp) / psum[b];
                  }
                  if (qnode->requires_grad) {
                    auto& gq = qnode->grad_buffer();
                    double dotq = 0.0;
                    for (std::size_t c = 0; c < k; ++c) {
                      a[c] = -P[c] / Q[c];
                      dotq += a[c] * Q[c];
                    }
                    for (std::size_t c = 0; c < k; ++c)
                      if (qpass[b * k + c]) gq[b * k + c] += g * (a[c] - dotq) / qsum[b];
                  }
                }
              });
}

Tensor entropy(const Tensor& p) {
  require_matrix(p, "entropy");
  const std::size_t bs = p.dim(0), k = p.dim(1);
  check_distribution_rows(p.values(), bs, k, 1e-6, "entropy");
  const auto pv = p.values();
  std::vector<double> h(bs);
  for (std::size_t b = 0; b < bs; ++b) {
    double acc = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      const double v = pv[b * k + c];
      note_branch(v > 0 ? 1 : 0);
      if (v > 0) acc -= v * std::log(v);
    }
    h[b] = acc;
  }
  NodePtr pn = p.node_ptr();
  return emit({bs}, std::move(h), tracking({&p}), [pn, bs, k](Node& out) {
    if (!pn->requires_grad) return;
    auto& gp = pn->grad_buffer();
    for (std::size_t b = 0; b < bs; ++b)
      for (std::size_t c = 0; c < k; ++c) {
        const double v = pn->value[b * k + c];
        if (v > 0) gp[b * k + c] -= out.grad[b] * (std::log(v) + 1.0);
      }
  });
}

}  // namespace gtta
