#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace infrayolo {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
};

// Handle to a dense row-major array of doubles. Copies share storage; use
// clone() for a deep copy. Ops never mutate their inputs.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor randn(const Shape& shape, std::mt19937_64& rng, double stddev = 1.0,
                      bool requires_grad = false);
  static Tensor uniform(const Shape& shape, std::mt19937_64& rng, double lo, double hi,
                        bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::int64_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::int64_t numel() const;

  std::span<const double> data() const;
  // Handles share storage, so writing through a const handle is allowed.
  std::span<double> mutable_data() const;
  double item() const;
  double at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag);

  bool has_grad() const;
  std::span<const double> grad() const;
  // Allocates a zero gradient buffer on first use.
  std::span<double> mutable_grad() const;
  void zero_grad() const;

  Tensor clone() const;
  Tensor detach() const;

  const TensorImpl* impl() const noexcept { return impl_.get(); }
  bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Gradient w.r.t. an op output, handed to the backward closure.
using BackwardFn = std::function<void(std::span<const double> grad_out)>;

struct TapeNode {
  std::string op;
  Tensor output;
  BackwardFn backward;
};

// Append-only record of differentiable ops for the current thread. Append
// order is a topological order, so backward() walks it in reverse.
class Tape {
 public:
  static Tape& current();

  bool recording() const noexcept { return enabled_; }
  void record(std::string op, const Tensor& output, BackwardFn fn);
  std::size_t size() const noexcept { return nodes_.size(); }
  bool empty() const noexcept { return nodes_.empty(); }
  void clear();

  // Populates dLoss/dT for every tensor reachable from `loss`, then clears.
  void backward(const Tensor& loss);

 private:
  friend class NoGradGuard;
  std::vector<TapeNode> nodes_;
  bool enabled_ = true;
};

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

void backward(const Tensor& loss);

// True when any input needs a gradient and the tape is recording.
bool wants_grad(std::initializer_list<const Tensor*> inputs);

// Per-thread tally of floating-point operations executed by the kernels.
// Only active inside a FlopCounterScope; used to cross-check the static
// FLOPs accounting against what a forward pass actually does.
class FlopCounter {
 public:
  static FlopCounter& current();
  bool active() const noexcept { return depth_ > 0; }
  void add(std::int64_t flops) {
    if (depth_ > 0) total_ += flops;
  }
  std::int64_t total() const noexcept { return total_; }

 private:
  friend class FlopCounterScope;
  std::int64_t total_ = 0;
  int depth_ = 0;
};

class FlopCounterScope {
 public:
  FlopCounterScope();
  ~FlopCounterScope();
  std::int64_t total() const;

 private:
  std::int64_t start_;
};

}  // namespace infrayolo
