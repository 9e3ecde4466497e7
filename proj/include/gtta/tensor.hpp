#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace gtta {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape) noexcept;
std::string to_string(const Shape& shape);

class Tape;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until something writes a gradient
  bool requires_grad = false;
  std::uint64_t tape_id = 0;
  std::size_t tape_index = 0;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

using BackwardFn = std::function<void(Node& out)>;

}  // namespace detail

/// Dense row-major double tensor with an optional gradient slot.
///
/// Copies are shallow: two `Tensor` handles may refer to the same storage,
/// which is what lets the tape route gradients back to parameters. Use
/// `clone()` for an independent copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;

  std::span<const double> values() const;
  // Writable view. Only meant for leaves (parameter init, optimizer steps).
  std::span<double> values_mut();
  double item() const;
  double at(std::size_t flat_index) const;

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> grad_mut();
  void zero_grad();

  // Constant copy of the values; never participates in backward.
  Tensor detach() const;
  // Independent leaf with the same values and requires_grad flag.
  Tensor clone() const;

  detail::Node* node() const noexcept { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const noexcept { return node_; }

 private:
  friend Tensor make_tensor(std::shared_ptr<detail::Node> node);
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  std::shared_ptr<detail::Node> node_;
};

Tensor make_tensor(std::shared_ptr<detail::Node> node);

/// Validating constructor: shape/value agreement and finiteness.
Tensor tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

/// Define-by-run recording of differentiable ops.
///
/// Constructing a Tape makes it the active tape of the current thread until it
/// is destroyed. Ops whose inputs require gradients are recorded only while a
/// tape is active; with no tape, every op runs in no-grad mode.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const noexcept { return entries_.size(); }
  std::uint64_t id() const noexcept { return id_; }

  static Tape* active() noexcept;

  void record(const std::shared_ptr<detail::Node>& out, detail::BackwardFn backward);
  bool owns(const detail::Node& node) const noexcept;

  // Runs the recorded backward functions once, newest first, starting at the
  // entry that produced `loss`, then releases the recorded graph.
  void run_backward(detail::Node& loss);

 private:
  struct Entry {
    std::shared_ptr<detail::Node> out;
    detail::BackwardFn backward;
  };

  std::vector<Entry> entries_;
  Tape* previous_;
  std::uint64_t id_;
};

/// Digest of the discrete branches ops take (activation kinks, argmax picks,
/// clamps, row selections) while an instance is in scope on this thread.
/// Two evaluations with equal digests lie on the same smooth piece.
class BranchLog {
 public:
  BranchLog();
  ~BranchLog();
  BranchLog(const BranchLog&) = delete;
  BranchLog& operator=(const BranchLog&) = delete;

  static BranchLog* active() noexcept;
  void note(std::uint64_t v) noexcept;
  std::uint64_t value() const noexcept { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
  BranchLog* previous_;
};

inline void note_branch(std::uint64_t v) noexcept {
  if (BranchLog* log = BranchLog::active()) log->note(v);
}

/// Populates grad for every requires_grad tensor reachable from `loss`.
/// Gradients accumulate into existing buffers.
void backward(const Tensor& loss);

// --- elementwise ----------------------------------------------------------

enum class Unary { Relu, LeakyRelu, Elu, Sigmoid, Exp, Log };
enum class Binary { Add, Sub, Mul };

inline constexpr double kLeakySlope = 0.2;

Tensor unary(Unary kind, const Tensor& x);
Tensor binary(Binary kind, const Tensor& a, const Tensor& b);

Tensor relu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double slope = kLeakySlope);
Tensor elu(const Tensor& x, double alpha = 1.0);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double offset);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(double c, const Tensor& x) { return scale(x, c); }

// --- linear algebra and layout ---------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
// [B x m x k] * [B x k x n] -> [B x m x n]
Tensor batched_matmul(const Tensor& a, const Tensor& b);
// Swaps the last two axes (rank 2 or 3).
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);

// `b`'s shape must equal a trailing suffix of `x`'s shape; b is repeated over
// the leading axes.
Tensor add_broadcast(const Tensor& x, const Tensor& b);
// Inserts a new axis at `axis` and repeats x `count` times along it.
Tensor expand(const Tensor& x, std::size_t axis, std::size_t count);
// x [B x N x ...], s [B x N]: every trailing block (b, n) multiplied by s[b, n].
Tensor scale_rows(const Tensor& x, const Tensor& s);
// x [B x N x ...] -> [B x k x ...] keeping rows indices[b] for batch b.
Tensor gather_rows(const Tensor& x, const std::vector<std::vector<std::size_t>>& indices);
// s, d [B x N] -> [B x N x N] with out[b, i, j] = s[b, i] + d[b, j].
Tensor pairwise_sum(const Tensor& s, const Tensor& d);

// --- reductions and normalizations -------------------------------------------

enum class Reduce { Sum, Mean, Max };

// Reduces over `axis` (removed from the shape), or over everything to a
// rank-0 tensor when axis is empty. Negative axes count from the back. Max
// routes its gradient to the first maximal element.
Tensor reduce(Reduce kind, const Tensor& x, std::optional<int> axis = std::nullopt);
Tensor sum(const Tensor& x, std::optional<int> axis = std::nullopt);
Tensor mean(const Tensor& x, std::optional<int> axis = std::nullopt);
Tensor amax(const Tensor& x, std::optional<int> axis = std::nullopt);

Tensor softmax(const Tensor& x, int axis);

struct NormalizeResult {
  Tensor out;
  std::vector<bool> zero_norm;  // per slice; such slices pass through unchanged
};

NormalizeResult l2_normalize_flagged(const Tensor& x, int axis, double eps = 1e-12);
Tensor l2_normalize(const Tensor& x, int axis, double eps = 1e-12);

// --- losses and divergences --------------------------------------------------

// Mean over the batch of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);
// Mean over the batch of -sum_k t_k log softmax(logits)_k; target is constant.
Tensor cross_entropy(const Tensor& logits, const Tensor& target);

inline constexpr double kKlClamp = 1e-4;

// Per-row KL(p || q) after clamping both rows to [eps, 1] and renormalizing.
Tensor kl_divergence(const Tensor& p, const Tensor& q, double eps = kKlClamp);
// Per-row Shannon entropy, 0 log 0 := 0.
Tensor entropy(const Tensor& p);

// Validates that every row of a [B x K] matrix sums to 1 within tol.
void check_distribution_rows(std::span<const double> values, std::size_t rows, std::size_t cols,
                             double tol, const char* what);

}  // namespace gtta
