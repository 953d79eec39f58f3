#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "infrayolo/tensor.hpp"

namespace infrayolo {

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
  int dilation = 1;
};

// Effective spatial extent of a k-tap kernel with gaps of (dilation - 1).
constexpr int effective_kernel_extent(int kernel, int dilation) {
  return kernel + (kernel - 1) * (dilation - 1);
}

std::int64_t conv_output_extent(std::int64_t in, int kernel, const Conv2dOptions& opt);

// x [B,Cin,H,W], weight [Cout,Cin,k,k], bias [Cout] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              const Conv2dOptions& opt = {});

// x [B,1,L], weight [1,1,k] with odd k; zero padding (k-1)/2 keeps L.
Tensor conv1d(const Tensor& x, const Tensor& weight);

struct BatchNormState {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double eps = 1e-5;
  double momentum = 0.03;
};

// Batch statistics + running-average update in training mode, running
// statistics in eval mode. Running buffers are updated in place.
Tensor batch_norm(const Tensor& x, BatchNormState& bn, bool training);

Tensor adaptive_avg_pool(const Tensor& x);
Tensor upsample_nearest(const Tensor& x, int factor);

Tensor add(const Tensor& a, const Tensor& b);
Tensor add_n(const std::vector<Tensor>& terms);
Tensor sub(const Tensor& a, const Tensor& b);
// Same-rank broadcasting: every extent must match or be 1 on one side.
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
Tensor square(const Tensor& x);

Tensor sigmoid(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double slope);
Tensor log_softmax(const Tensor& x, int axis);

Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t length);
std::pair<Tensor, Tensor> split_halves(const Tensor& x, int axis);

Tensor reshape(const Tensor& x, const Shape& shape);
// Picks `indices` along `axis`.
Tensor index_select(const Tensor& x, int axis, const std::vector<std::int64_t>& indices);
// Inverse of index_select: places slices at `indices` of a zero tensor whose
// extent along `axis` is `extent`.
Tensor index_scatter(const Tensor& x, int axis, const std::vector<std::int64_t>& indices,
                     std::int64_t extent);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

}  // namespace infrayolo
