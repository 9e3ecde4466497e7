#include "gtta/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>

#include "gtta/error.hpp"

namespace gtta {

std::string_view to_string(Errc code) noexcept {
  switch (code) {
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::NonFinite: return "NonFinite";
    case Errc::DomainError: return "DomainError";
    case Errc::AxisOutOfRange: return "AxisOutOfRange";
    case Errc::InvalidDistribution: return "InvalidDistribution";
    case Errc::IndexOutOfRange: return "IndexOutOfRange";
    case Errc::NotScalar: return "NotScalar";
    case Errc::DetachedTensor: return "DetachedTensor";
    case Errc::MissingGradient: return "MissingGradient";
    case Errc::EmptyDomain: return "EmptyDomain";
    case Errc::IoError: return "IoError";
    case Errc::BadMagic: return "BadMagic";
    case Errc::VersionMismatch: return "VersionMismatch";
    case Errc::BadK: return "BadK";
    case Errc::InvalidLambda: return "InvalidLambda";
    case Errc::ZeroWeightColumn: return "ZeroWeightColumn";
    case Errc::ZeroNormEmbedding: return "ZeroNormEmbedding";
    case Errc::EmptyBank: return "EmptyBank";
    case Errc::EmptyClass: return "EmptyClass";
    case Errc::EmptyNeighborSet: return "EmptyNeighborSet";
    case Errc::SingleClassSource: return "SingleClassSource";
    case Errc::EmptyEval: return "EmptyEval";
    case Errc::SingleClassEval: return "SingleClassEval";
    case Errc::UsageError: return "UsageError";
    case Errc::ConfigParseError: return "ConfigParseError";
  }
  return "Unknown";
}

std::size_t numel(const Shape& shape) noexcept {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

detail::Node& checked(const std::shared_ptr<detail::Node>& node) {
  if (!node) fail(Errc::ShapeMismatch, "use of an undefined tensor");
  return *node;
}

}  // namespace

Tensor make_tensor(std::shared_ptr<detail::Node> node) { return Tensor(std::move(node)); }

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto node = std::make_shared<detail::Node>();
  node->value.assign(numel(shape), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value) { return full({}, value); }

const Shape& Tensor::shape() const { return checked(node_).shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) fail(Errc::AxisOutOfRange, "axis " + std::to_string(axis) + " for shape " + to_string(s));
  return s[axis];
}

std::size_t Tensor::size() const { return checked(node_).value.size(); }

std::span<const double> Tensor::values() const { return checked(node_).value; }

std::span<double> Tensor::values_mut() { return checked(node_).value; }

double Tensor::item() const {
  const auto& v = checked(node_).value;
  if (v.size() != 1) fail(Errc::NotScalar, "item() on shape " + to_string(node_->shape));
  return v[0];
}

double Tensor::at(std::size_t flat_index) const {
  const auto& v = checked(node_).value;
  if (flat_index >= v.size()) fail(Errc::IndexOutOfRange, "flat index " + std::to_string(flat_index));
  return v[flat_index];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const { return checked(node_).grad; }

std::span<double> Tensor::grad_mut() { return checked(node_).grad_buffer(); }

void Tensor::zero_grad() {
  auto& n = checked(node_);
  std::fill(n.grad.begin(), n.grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  const auto& n = checked(node_);
  auto out = std::make_shared<detail::Node>();
  out->shape = n.shape;
  out->value = n.value;
  return Tensor(std::move(out));
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  t.node_->requires_grad = node_->requires_grad;
  return t;
}

Tensor tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  if (numel(shape) != values.size()) {
    fail(Errc::ShapeMismatch, "shape " + to_string(shape) + " needs " + std::to_string(numel(shape)) +
                                  " values, got " + std::to_string(values.size()));
  }
  for (double v : values) {
    if (!std::isfinite(v)) fail(Errc::NonFinite, "tensor() given a NaN/Inf value");
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return make_tensor(std::move(node));
}

// --- tape -------------------------------------------------------------------

namespace {
thread_local Tape* g_active_tape = nullptr;
std::atomic<std::uint64_t> g_next_tape_id{1};
}  // namespace

Tape::Tape() : previous_(g_active_tape), id_(g_next_tape_id.fetch_add(1)) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = previous_; }

Tape* Tape::active() noexcept { return g_active_tape; }

namespace {
thread_local BranchLog* g_active_log = nullptr;
}  // namespace

BranchLog::BranchLog() : previous_(g_active_log) { g_active_log = this; }

BranchLog::~BranchLog() { g_active_log = previous_; }

BranchLog* BranchLog::active() noexcept { return g_active_log; }

void BranchLog::note(std::uint64_t v) noexcept {
  for (int i = 0; i < 8; ++i) {
    h_ ^= (v >> (8 * i)) & 0xFF;
    h_ *= 0x100000001b3ULL;
  }
}

void Tape::record(const std::shared_ptr<detail::Node>& out, detail::BackwardFn backward) {
  out->requires_grad = true;
  out->tape_id = id_;
  out->tape_index = entries_.size();
  entries_.push_back(Entry{out, std::move(backward)});
}

bool Tape::owns(const detail::Node& node) const noexcept {
  return node.tape_id == id_ && node.tape_index < entries_.size() &&
         entries_[node.tape_index].out.get() == &node;
}

void Tape::run_backward(detail::Node& loss) {
  loss.grad_buffer()[0] += 1.0;
  for (std::size_t i = loss.tape_index + 1; i-- > 0;) {
    Entry& e = entries_[i];
    if (e.out->grad.empty()) continue;
    e.backward(*e.out);
  }
  entries_.clear();
}

void backward(const Tensor& loss) {
  if (!loss.defined()) fail(Errc::DetachedTensor, "backward on an undefined tensor");
  if (loss.size() != 1) fail(Errc::NotScalar, "backward needs a scalar loss, got " + to_string(loss.shape()));
  Tape* tape = Tape::active();
  if (tape == nullptr || !tape->owns(*loss.node())) {
    fail(Errc::DetachedTensor, "loss is not recorded on the active tape");
  }
  tape->run_backward(*loss.node());
}

}  // namespace gtta
