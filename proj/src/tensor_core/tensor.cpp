#include "infrayolo/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "infrayolo/error.hpp"

namespace infrayolo {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] <= 0) {
      fail(ErrorKind::Shape, "extent " + std::to_string(i) + " of " + shape_to_string(shape) +
                                 " is not positive");
    }
  }
  if (static_cast<std::int64_t>(data.size()) != shape_numel(shape)) {
    fail(ErrorKind::Shape, "data length " + std::to_string(data.size()) +
                               " does not match shape " + shape_to_string(shape));
  }
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, 0.0, requires_grad);
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
  return Tensor(shape, std::vector<double>(static_cast<std::size_t>(shape_numel(shape)), value),
                requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

Tensor Tensor::randn(const Shape& shape, std::mt19937_64& rng, double stddev, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> data(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& v : data) v = dist(rng);
  return Tensor(shape, std::move(data), requires_grad);
}

Tensor Tensor::uniform(const Shape& shape, std::mt19937_64& rng, double lo, double hi,
                       bool requires_grad) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> data(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& v : data) v = dist(rng);
  return Tensor(shape, std::move(data), requires_grad);
}

namespace {
const TensorImpl& checked(const std::shared_ptr<TensorImpl>& impl) {
  if (!impl) fail(ErrorKind::Argument, "use of undefined tensor");
  return *impl;
}
}  // namespace

const Shape& Tensor::shape() const { return checked(impl_).shape; }

std::int64_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    fail(ErrorKind::Shape, "axis " + std::to_string(axis) + " out of range for " +
                               shape_to_string(s));
  }
  return s[axis];
}

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(checked(impl_).data.size()); }

std::span<const double> Tensor::data() const { return checked(impl_).data; }

std::span<double> Tensor::mutable_data() const {
  checked(impl_);
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) fail(ErrorKind::Shape, "item() on tensor " + shape_to_string(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  checked(impl_);
  impl_->requires_grad = flag;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const { return checked(impl_).grad; }

std::span<double> Tensor::mutable_grad() const {
  checked(impl_);
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() const {
  if (impl_) impl_->grad.clear();
}

Tensor Tensor::clone() const {
  const auto& src = checked(impl_);
  Tensor out(src.shape, src.data, src.requires_grad);
  out.impl_->grad = src.grad;
  return out;
}

Tensor Tensor::detach() const {
  const auto& src = checked(impl_);
  return Tensor(src.shape, src.data, false);
}

// ---------------------------------------------------------------------------

Tape& Tape::current() {
  thread_local Tape tape;
  return tape;
}

void Tape::record(std::string op, const Tensor& output, BackwardFn fn) {
  nodes_.push_back(TapeNode{std::move(op), output, std::move(fn)});
}

void Tape::clear() { nodes_.clear(); }

void Tape::backward(const Tensor& loss) {
  if (!loss.defined()) fail(ErrorKind::Autograd, "backward on undefined tensor");
  if (loss.numel() != 1) {
    fail(ErrorKind::Autograd, "backward needs a scalar loss, got " + shape_to_string(loss.shape()));
  }
  if (nodes_.empty()) {
    fail(ErrorKind::Autograd, "backward with an empty tape (already consumed or nothing recorded)");
  }
  std::ptrdiff_t start = -1;
  for (std::ptrdiff_t i = static_cast<std::ptrdiff_t>(nodes_.size()) - 1; i >= 0; --i) {
    if (nodes_[static_cast<std::size_t>(i)].output.same_storage(loss)) {
      start = i;
      break;
    }
  }
  if (start < 0) fail(ErrorKind::Autograd, "loss is not connected to the tape");

  // Ops recorded during backward closures are never wanted.
  const bool was_enabled = enabled_;
  enabled_ = false;
  Tensor seed = loss;
  seed.mutable_grad()[0] += 1.0;
  for (std::ptrdiff_t i = start; i >= 0; --i) {
    auto& node = nodes_[static_cast<std::size_t>(i)];
    if (!node.output.has_grad()) continue;
    node.backward(node.output.grad());
  }
  enabled_ = was_enabled;
  nodes_.clear();
}

NoGradGuard::NoGradGuard() : previous_(Tape::current().enabled_) {
  Tape::current().enabled_ = false;
}

NoGradGuard::~NoGradGuard() { Tape::current().enabled_ = previous_; }

void backward(const Tensor& loss) { Tape::current().backward(loss); }

bool wants_grad(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::current().recording()) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t && t->defined() && t->requires_grad(); });
}

FlopCounter& FlopCounter::current() {
  thread_local FlopCounter counter;
  return counter;
}

FlopCounterScope::FlopCounterScope() : start_(FlopCounter::current().total_) {
  ++FlopCounter::current().depth_;
}

FlopCounterScope::~FlopCounterScope() { --FlopCounter::current().depth_; }

std::int64_t FlopCounterScope::total() const { return FlopCounter::current().total_ - start_; }

}  // namespace infrayolo
