#pragma once

#include <vector>

#include "infrayolo/tensor.hpp"

namespace infrayolo {

struct SgdOptions {
  double momentum = 0.0;
  double weight_decay = 0.0;
  bool nesterov = false;
};

// SGD with heavy-ball momentum. A parameter registered with decay=false is
// exempt from weight decay (BN affine terms and biases).
class Sgd {
 public:
  explicit Sgd(SgdOptions options = {}) : options_(options) {}

  void add_param(const Tensor& param, bool decay = true);
  void add_params(const std::vector<Tensor>& params, bool decay = true);

  // Applies one update using the gradients already stored on the params.
  // Params without a gradient buffer are treated as having zero gradient.
  void step(double lr);
  void zero_grad();

  std::size_t size() const { return params_.size(); }
  const SgdOptions& options() const { return options_; }

 private:
  struct Slot {
    Tensor param;
    std::vector<double> velocity;
    bool decay;
  };
  SgdOptions options_;
  std::vector<Slot> params_;
};

// Free-function form for single-shot updates without persistent momentum.
void sgd_step(const std::vector<Tensor>& params, double lr, double weight_decay = 0.0);

}  // namespace infrayolo
