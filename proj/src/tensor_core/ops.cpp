#include "infrayolo/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "infrayolo/error.hpp"

namespace infrayolo {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMatrix = Eigen::Map<RowMatrix>;
using ConstMapMatrix = Eigen::Map<const RowMatrix>;

Tensor make_result(Shape shape, std::vector<double> data, bool grad) {
  return Tensor(std::move(shape), std::move(data), grad);
}

void accumulate(const Tensor& t, std::span<const double> g) {
  if (!t.requires_grad()) return;
  auto dst = t.mutable_grad();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
}

void require_rank(const Tensor& x, std::size_t rank, const char* op) {
  if (x.rank() != rank) {
    fail(ErrorKind::Shape, std::string(op) + ": expected rank " + std::to_string(rank) +
                               " input, got " + shape_to_string(x.shape()));
  }
}

int normalize_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    fail(ErrorKind::Shape, std::string(op) + ": axis out of range for rank " + std::to_string(r));
  }
  return axis;
}

// Splits a shape around `axis` into (outer, extent, inner) products.
struct AxisView {
  std::int64_t outer = 1;
  std::int64_t extent = 1;
  std::int64_t inner = 1;
};

AxisView axis_view(const Shape& shape, int axis) {
  AxisView v;
  for (int i = 0; i < axis; ++i) v.outer *= shape[static_cast<std::size_t>(i)];
  v.extent = shape[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

}  // namespace

std::int64_t conv_output_extent(std::int64_t in, int kernel, const Conv2dOptions& opt) {
  return (in + 2 * opt.padding - static_cast<std::int64_t>(opt.dilation) * (kernel - 1) - 1) /
             opt.stride +
         1;
}

// ---------------------------------------------------------------------------
// conv2d: im2col into [Cin*k*k, B*Ho*Wo] followed by one GEMM.

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const Conv2dOptions& opt) {
  require_rank(x, 4, "conv2d");
  require_rank(weight, 4, "conv2d weight");
  if (opt.stride < 1 || opt.dilation < 1 || opt.padding < 0) {
    fail(ErrorKind::Argument, "conv2d: stride and dilation must be >= 1, padding >= 0");
  }
  const auto B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto Cout = weight.dim(0);
  const int k = static_cast<int>(weight.dim(2));
  if (weight.dim(1) != Cin) {
    fail(ErrorKind::Shape, "conv2d: input channel dimension (dim 1) is " + std::to_string(Cin) +
                               " but weight expects " + std::to_string(weight.dim(1)));
  }
  if (weight.dim(3) != k) fail(ErrorKind::Shape, "conv2d: kernel must be square (dims 2,3)");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != Cout)) {
    fail(ErrorKind::Shape, "conv2d: bias length (dim 0) must equal Cout=" + std::to_string(Cout));
  }
  const auto Ho = conv_output_extent(H, k, opt);
  const auto Wo = conv_output_extent(W, k, opt);
  if (Ho < 1 || Wo < 1) {
    fail(ErrorKind::Shape, "conv2d: output height/width (dims 2,3) would be non-positive for input " +
                               shape_to_string(x.shape()));
  }

  const std::int64_t ckk = Cin * k * k;
  const std::int64_t plane = Ho * Wo;
  const std::int64_t cols = B * plane;
  auto col = std::make_shared<std::vector<double>>(static_cast<std::size_t>(ckk * cols), 0.0);
  const double* xd = x.data().data();
  for (std::int64_t c = 0; c < Cin; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        double* row = col->data() + ((c * k + ki) * k + kj) * cols;
        for (std::int64_t b = 0; b < B; ++b) {
          const double* xplane = xd + (b * Cin + c) * H * W;
          double* dst = row + b * plane;
          for (std::int64_t oh = 0; oh < Ho; ++oh) {
            const std::int64_t ih = oh * opt.stride - opt.padding + ki * opt.dilation;
            if (ih < 0 || ih >= H) continue;
            for (std::int64_t ow = 0; ow < Wo; ++ow) {
              const std::int64_t iw = ow * opt.stride - opt.padding + kj * opt.dilation;
              if (iw >= 0 && iw < W) dst[oh * Wo + ow] = xplane[ih * W + iw];
            }
          }
        }
      }
    }
  }

  std::vector<double> prod(static_cast<std::size_t>(Cout * cols));
  {
    ConstMapMatrix wm(weight.data().data(), Cout, ckk);
    ConstMapMatrix cm(col->data(), ckk, cols);
    MapMatrix pm(prod.data(), Cout, cols);
    pm.noalias() = wm * cm;
  }
  std::vector<double> out(static_cast<std::size_t>(B * Cout * plane));
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t co = 0; co < Cout; ++co) {
      const double* src = prod.data() + co * cols + b * plane;
      double* dst = out.data() + (b * Cout + co) * plane;
      const double bv = bias.defined() ? bias.data()[static_cast<std::size_t>(co)] : 0.0;
      for (std::int64_t i = 0; i < plane; ++i) dst[i] = src[i] + bv;
    }
  }
  auto& counter = FlopCounter::current();
  counter.add(2 * Cout * ckk * cols);
  if (bias.defined()) counter.add(Cout * cols);

  const bool grad = wants_grad({&x, &weight, &bias});
  Tensor result = make_result({B, Cout, Ho, Wo}, std::move(out), grad);
  if (!grad) return result;

  Tape::current().record(
      "conv2d", result,
      [x, weight, bias, col, opt, B, Cin, H, W, Cout, k, Ho, Wo](std::span<const double> g) mutable {
        const std::int64_t ckk = Cin * k * k;
        const std::int64_t plane = Ho * Wo;
        const std::int64_t cols = B * plane;
        std::vector<double> gm(static_cast<std::size_t>(Cout * cols));
        for (std::int64_t b = 0; b < B; ++b) {
          for (std::int64_t co = 0; co < Cout; ++co) {
            std::copy_n(g.data() + (b * Cout + co) * plane, plane, gm.data() + co * cols + b * plane);
          }
        }
        ConstMapMatrix gmat(gm.data(), Cout, cols);
        if (bias.requires_grad()) {
          auto db = bias.mutable_grad();
          for (std::int64_t co = 0; co < Cout; ++co) {
            const double* r = gm.data() + co * cols;
            double s = 0.0;
            for (std::int64_t i = 0; i < cols; ++i) s += r[i];
            db[static_cast<std::size_t>(co)] += s;
          }
        }
        if (weight.requires_grad()) {
          MapMatrix dw(weight.mutable_grad().data(), Cout, ckk);
          ConstMapMatrix cm(col->data(), ckk, cols);
          dw.noalias() += gmat * cm.transpose();
        }
        if (x.requires_grad()) {
          std::vector<double> dcol(static_cast<std::size_t>(ckk * cols));
          MapMatrix dc(dcol.data(), ckk, cols);
          ConstMapMatrix wm(weight.data().data(), Cout, ckk);
          dc.noalias() = wm.transpose() * gmat;
          double* dx = x.mutable_grad().data();
          for (std::int64_t c = 0; c < Cin; ++c) {
            for (int ki = 0; ki < k; ++ki) {
              for (int kj = 0; kj < k; ++kj) {
                const double* row = dcol.data() + ((c * k + ki) * k + kj) * cols;
                for (std::int64_t b = 0; b < B; ++b) {
                  double* xplane = dx + (b * Cin + c) * H * W;
                  const double* src = row + b * plane;
                  for (std::int64_t oh = 0; oh < Ho; ++oh) {
                    const std::int64_t ih = oh * opt.stride - opt.padding + ki * opt.dilation;
                    if (ih < 0 || ih >= H) continue;
                    for (std::int64_t ow = 0; ow < Wo; ++ow) {
                      const std::int64_t iw = ow * opt.stride - opt.padding + kj * opt.dilation;
                      if (iw >= 0 && iw < W) xplane[ih * W + iw] += src[oh * Wo + ow];
                    }
                  }
                }
              }
            }
          }
        }
        col.reset();
      });
  return result;
}

// ---------------------------------------------------------------------------

Tensor conv1d(const Tensor& x, const Tensor& weight) {
  require_rank(x, 3, "conv1d");
  require_rank(weight, 3, "conv1d weight");
  if (x.dim(1) != 1 || weight.dim(0) != 1 || weight.dim(1) != 1) {
    fail(ErrorKind::Shape, "conv1d: only single-channel [B,1,L] input with [1,1,k] weight is supported");
  }
  const int k = static_cast<int>(weight.dim(2));
  if (k % 2 == 0) fail(ErrorKind::Argument, "conv1d: kernel size must be odd, got " + std::to_string(k));
  const int pad = (k - 1) / 2;
  const auto B = x.dim(0), L = x.dim(2);
  const double* xd = x.data().data();
  const double* wd = weight.data().data();
  std::vector<double> out(static_cast<std::size_t>(B * L), 0.0);
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t i = 0; i < L; ++i) {
      double s = 0.0;
      for (int t = 0; t < k; ++t) {
        const std::int64_t j = i - pad + t;
        if (j >= 0 && j < L) s += wd[t] * xd[b * L + j];
      }
      out[static_cast<std::size_t>(b * L + i)] = s;
    }
  }
  FlopCounter::current().add(2 * k * B * L);
  const bool grad = wants_grad({&x, &weight});
  Tensor result = make_result({B, 1, L}, std::move(out), grad);
  if (!grad) return result;
  Tape::current().record("conv1d", result, [x, weight, k, pad, B, L](std::span<const double> g) mutable {
    const double* xd = x.data().data();
    const double* wd = weight.data().data();
    double* dx = x.requires_grad() ? x.mutable_grad().data() : nullptr;
    double* dw = weight.requires_grad() ? weight.mutable_grad().data() : nullptr;
    for (std::int64_t b = 0; b < B; ++b) {
      for (std::int64_t i = 0; i < L; ++i) {
        const double gi = g[static_cast<std::size_t>(b * L + i)];
        for (int t = 0; t < k; ++t) {
          const std::int64_t j = i - pad + t;
          if (j < 0 || j >= L) continue;
          if (dx) dx[b * L + j] += wd[t] * gi;
          if (dw) dw[t] += xd[b * L + j] * gi;
        }
      }
    }
  });
  return result;
}

// ---------------------------------------------------------------------------

Tensor batch_norm(const Tensor& x, BatchNormState& bn, bool training) {
  require_rank(x, 4, "batch_norm");
  const auto B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (bn.gamma.numel() != C || bn.beta.numel() != C || bn.running_mean.numel() != C ||
      bn.running_var.numel() != C) {
    fail(ErrorKind::Shape, "batch_norm: parameter length does not match channel dimension (dim 1) " +
                               std::to_string(C));
  }
  if (!(bn.eps > 0.0)) fail(ErrorKind::Argument, "batch_norm: eps must be positive");
  const std::int64_t n = B * HW;
  if (training && n == 0) fail(ErrorKind::Argument, "batch_norm: empty batch in training mode");

  const double* xd = x.data().data();
  const double* gd = bn.gamma.data().data();
  const double* bd = bn.beta.data().data();
  auto mean = std::make_shared<std::vector<double>>(static_cast<std::size_t>(C));
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(C));
  if (training) {
    auto rm = bn.running_mean.mutable_data();
    auto rv = bn.running_var.mutable_data();
    for (std::int64_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::int64_t b = 0; b < B; ++b) {
        const double* p = xd + (b * C + c) * HW;
        for (std::int64_t i = 0; i < HW; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(n);
      double v = 0.0;
      for (std::int64_t b = 0; b < B; ++b) {
        const double* p = xd + (b * C + c) * HW;
        for (std::int64_t i = 0; i < HW; ++i) v += (p[i] - mu) * (p[i] - mu);
      }
      v /= static_cast<double>(n);
      (*mean)[static_cast<std::size_t>(c)] = mu;
      (*inv_std)[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(v + bn.eps);
      const double unbiased = n > 1 ? v * static_cast<double>(n) / static_cast<double>(n - 1) : v;
      const auto ci = static_cast<std::size_t>(c);
      rm[ci] = (1.0 - bn.momentum) * rm[ci] + bn.momentum * mu;
      rv[ci] = (1.0 - bn.momentum) * rv[ci] + bn.momentum * unbiased;
    }
  } else {
    for (std::int64_t c = 0; c < C; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      (*mean)[ci] = bn.running_mean.data()[ci];
      (*inv_std)[ci] = 1.0 / std::sqrt(bn.running_var.data()[ci] + bn.eps);
    }
  }

  std::vector<double> out(static_cast<std::size_t>(x.numel()));
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t c = 0; c < C; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      const double mu = (*mean)[ci], is = (*inv_std)[ci], g = gd[c], be = bd[c];
      const double* p = xd + (b * C + c) * HW;
      double* o = out.data() + (b * C + c) * HW;
      for (std::int64_t i = 0; i < HW; ++i) o[i] = g * ((p[i] - mu) * is) + be;
    }
  }
  FlopCounter::current().add(2 * x.numel());

  const bool grad = wants_grad({&x, &bn.gamma, &bn.beta});
  Tensor result = make_result(x.shape(), std::move(out), grad);
  if (!grad) return result;
  Tensor gamma = bn.gamma, beta = bn.beta;
  Tape::current().record(
      "batch_norm", result,
      [x, gamma, beta, mean, inv_std, training, B, C, HW, n](std::span<const double> g) mutable {
        const double* xd = x.data().data();
        const double* gd = gamma.data().data();
        double* dx = x.requires_grad() ? x.mutable_grad().data() : nullptr;
        double* dgamma = gamma.requires_grad() ? gamma.mutable_grad().data() : nullptr;
        double* dbeta = beta.requires_grad() ? beta.mutable_grad().data() : nullptr;
        for (std::int64_t c = 0; c < C; ++c) {
          const auto ci = static_cast<std::size_t>(c);
          const double mu = (*mean)[ci], is = (*inv_std)[ci];
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::int64_t b = 0; b < B; ++b) {
            const double* p = xd + (b * C + c) * HW;
            const double* gp = g.data() + (b * C + c) * HW;
            for (std::int64_t i = 0; i < HW; ++i) {
              sum_g += gp[i];
              sum_gx += gp[i] * (p[i] - mu) * is;
            }
          }
          if (dgamma) dgamma[c] += sum_gx;
          if (dbeta) dbeta[c] += sum_g;
          if (!dx) continue;
          const double scale_c = gd[c] * is;
          for (std::int64_t b = 0; b < B; ++b) {
            const double* p = xd + (b * C + c) * HW;
            const double* gp = g.data() + (b * C + c) * HW;
            double* dp = dx + (b * C + c) * HW;
            if (training) {
              const double inv_n = 1.0 / static_cast<double>(n);
              for (std::int64_t i = 0; i < HW; ++i) {
                const double xhat = (p[i] - mu) * is;
                dp[i] += scale_c * (gp[i] - inv_n * sum_g - xhat * inv_n * sum_gx);
              }
            } else {
              for (std::int64_t i = 0; i < HW; ++i) dp[i] += scale_c * gp[i];
            }
          }
        }
      });
  return result;
}

// ---------------------------------------------------------------------------

Tensor adaptive_avg_pool(const Tensor& x) {
  require_rank(x, 4, "adaptive_avg_pool");
  const auto B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  std::vector<double> out(static_cast<std::size_t>(B * C));
  const double* xd = x.data().data();
  for (std::int64_t bc = 0; bc < B * C; ++bc) {
    double s = 0.0;
    for (std::int64_t i = 0; i < HW; ++i) s += xd[bc * HW + i];
    out[static_cast<std::size_t>(bc)] = s / static_cast<double>(HW);
  }
  FlopCounter::current().add(x.numel());
  const bool grad = wants_grad({&x});
  Tensor result = make_result({B, C, 1, 1}, std::move(out), grad);
  if (!grad) return result;
  Tape::current().record("adaptive_avg_pool", result, [x, B, C, HW](std::span<const double> g) mutable {
    double* dx = x.mutable_grad().data();
    const double inv = 1.0 / static_cast<double>(HW);
    for (std::int64_t bc = 0; bc < B * C; ++bc) {
      const double gv = g[static_cast<std::size_t>(bc)] * inv;
      for (std::int64_t i = 0; i < HW; ++i) dx[bc * HW + i] += gv;
    }
  });
  return result;
}

Tensor upsample_nearest(const Tensor& x, int factor) {
  require_rank(x, 4, "upsample_nearest");
  if (factor < 1) fail(ErrorKind::Argument, "upsample_nearest: factor must be >= 1");
  const auto B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto Ho = H * factor, Wo = W * factor;
  std::vector<double> out(static_cast<std::size_t>(B * C * Ho * Wo));
  const double* xd = x.data().data();
  for (std::int64_t bc = 0; bc < B * C; ++bc) {
    for (std::int64_t oh = 0; oh < Ho; ++oh) {
      for (std::int64_t ow = 0; ow < Wo; ++ow) {
        out[static_cast<std::size_t>((bc * Ho + oh) * Wo + ow)] = xd[(bc * H + oh / factor) * W + ow / factor];
      }
    }
  }
  const bool grad = wants_grad({&x});
  Tensor result = make_result({B, C, Ho, Wo}, std::move(out), grad);
  if (!grad) return result;
  Tape::current().record("upsample_nearest", result,
                         [x, factor, B, C, H, W, Ho, Wo](std::span<const double> g) mutable {
                           double* dx = x.mutable_grad().data();
                           for (std::int64_t bc = 0; bc < B * C; ++bc) {
                             for (std::int64_t oh = 0; oh < Ho; ++oh) {
                               for (std::int64_t ow = 0; ow < Wo; ++ow) {
                                 dx[(bc * H + oh / factor) * W + ow / factor] +=
                                     g[static_cast<std::size_t>((bc * Ho + oh) * Wo + ow)];
                               }
                             }
                           }
                         });
  return result;
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) { return add_n({a, b}); }

Tensor add_n(const std::vector<Tensor>& terms) {
  if (terms.empty()) fail(ErrorKind::Argument, "add_n: no operands");
  const Shape& shape = terms.front().shape();
  for (std::size_t i = 1; i < terms.size(); ++i) {
    if (terms[i].shape() != shape) {
      fail(ErrorKind::Shape, "add: operand " + std::to_string(i) + " has shape " +
                                 shape_to_string(terms[i].shape()) + ", expected " + shape_to_string(shape));
    }
  }
  std::vector<double> out(terms.front().data().begin(), terms.front().data().end());
  for (std::size_t i = 1; i < terms.size(); ++i) {
    auto d = terms[i].data();
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += d[j];
  }
  FlopCounter::current().add(static_cast<std::int64_t>(terms.size() - 1) * static_cast<std::int64_t>(out.size()));
  bool grad = false;
  for (const auto& t : terms) grad = grad || wants_grad({&t});
  Tensor result = make_result(shape, std::move(out), grad);
  if (!grad) return result;
  Tape::current().record("add", result, [terms](std::span<const double> g) mutable {
    for (auto& t : terms) accumulate(t, g);
  });
  return result;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    fail(ErrorKind::Shape, "sub: shapes " + shape_to_string(a.shape()) + " and " + shape_to_string(b.shape()));
  }
  std::vector<double> out(static_cast<std::size_t>(a.numel()));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  const bool grad = wants_grad({&a, &b});
  Tensor result = make_result(a.shape(), std::move(out), grad);
  if (!grad) return result;
  Tape::current().record("sub", result, [a, b](std::span<const double> g) mutable {
    accumulate(a, g);
    if (b.requires_grad()) {
      auto db = b.mutable_grad();
      for (std::size_t i = 0; i < db.size(); ++i) db[i] -= g[i];
    }
  });
  return result;
}

namespace {

std::vector<std::int64_t> strides_of(const Shape& s) {
  std::vector<std::int64_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Strides of `s` when broadcast to `out` (0 on broadcast axes).
std::vector<std::int64_t> broadcast_strides(const Shape& s, const Shape& out) {
  auto st = strides_of(s);
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == 1 && out[i] != 1) st[i] = 0;
  }
  return st;
}

template <typename Fn>
void for_each_broadcast(const Shape& out, const std::vector<std::int64_t>& sa,
                        const std::vector<std::int64_t>& sb, Fn&& fn) {
  const std::size_t rank = out.size();
  if (rank == 0) {
    fn(0, 0, 0);
    return;
  }
  std::vector<std::int64_t> idx(rank, 0);
  const std::int64_t total = shape_numel(out);
  std::int64_t ia = 0, ib = 0;
  const std::int64_t last = out[rank - 1];
  const std::int64_t la = sa[rank - 1], lb = sb[rank - 1];
  for (std::int64_t o = 0; o < total; o += last) {
    for (std::int64_t j = 0; j < last; ++j) fn(o + j, ia + j * la, ib + j * lb);
    // advance all but the innermost axis
    for (std::size_t ax = rank - 1; ax-- > 0;) {
      ++idx[ax];
      ia += sa[ax];
      ib += sb[ax];
      if (idx[ax] < out[ax]) break;
      ia -= sa[ax] * out[ax];
      ib -= sb[ax] * out[ax];
      idx[ax] = 0;
    }
  }
}

}  // namespace

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank()) {
    fail(ErrorKind::Shape, "mul: rank mismatch " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
  }
  Shape out_shape(a.rank());
  for (std::size_t i = 0; i < a.rank(); ++i) {
    const auto ea = a.shape()[i], eb = b.shape()[i];
    if (ea != eb && ea != 1 && eb != 1) {
      fail(ErrorKind::Shape, "mul: dimension " + std::to_string(i) + " not broadcastable (" +
                                 std::to_string(ea) + " vs " + std::to_string(eb) + ")");
    }
    out_shape[i] = std::max(ea, eb);
  }
  const auto sa = broadcast_strides(a.shape(), out_shape);
  const auto sb = broadcast_strides(b.shape(), out_shape);
  std::vector<double> out(static_cast<std::size_t>(shape_numel(out_shape)));
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  for_each_broadcast(out_shape, sa, sb, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
    out[static_cast<std::size_t>(o)] = ad[ia] * bd[ib];
  });
  FlopCounter::current().add(static_cast<std::int64_t>(out.size()));
  const bool grad = wants_grad({&a, &b});
  Tensor result = make_result(out_shape, std::move(out), grad);
  if (!grad) return result;
  Tape::current().record("mul", result, [a, b, out_shape, sa, sb](std::span<const double> g) mutable {
    const double* ad = a.data().data();
    const double* bd = b.data().data();
    double* da = a.requires_grad() ? a.mutable_grad().data() : nullptr;
    double* db = b.requires_grad() ? b.mutable_grad().data() : nullptr;
    for_each_broadcast(out_shape, sa, sb, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
      const double gv = g[static_cast<std::size_t>(o)];
      if (da) da[ia] += gv * bd[ib];
      if (db) db[ib] += gv * ad[ia];
    });
  });
  return result;
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  const bool grad = wants_grad({&x});
  Tensor result = make_result(x.shape(), std::move(out), grad);
  if (!grad) return result;
  Tape::current().record("scale", result, [x, factor](std::span<const double> g) mutable {
    auto dx = x.mutable_grad();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += factor * g[i];
  });
  return result;
}

Tensor add_scalar(const Tensor& x, double value) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v += value;
  const bool grad = wants_grad({&x});
  Tensor result = make_result(x.shape(), std::move(out), grad);
  if (!grad) return result;
  Tape::current().record("add_scalar", result, [x](std::span<const double> g) mutable { accumulate(x, g); });
  return result;
}

Tensor square(const Tensor& x) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= v;
  const bool grad = wants_grad({&x});
  Tensor result = make_result(x.shape(), std::move(out), grad);
  if (!grad) return result;
  Tape::current().record("square", result, [x](std::span<const double> g) mutable {
    auto dx = x.mutable_grad();
    auto xd = x.data();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += 2.0 * xd[i] * g[i];
  });
  return result;
}

Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(static_cast<std::size_t>(x.numel()));
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = xd[i];
    if (v >= 0) {
      out[i] = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      out[i] = e / (1.0 + e);
    }
  }
  FlopCounter::current().add(x.numel());
  const bool grad = wants_grad({&x});
  Tensor result = make_result(x.shape(), std::move(out), grad);
  if (!grad) return result;
  Tensor y = result.detach();
  Tape::current().record("sigmoid", result, [x, y](std::span<const double> g) mutable {
    auto dx = x.mutable_grad();
    auto yd = y.data();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i] * yd[i] * (1.0 - yd[i]);
  });
  return result;
}

Tensor leaky_relu(const Tensor& x, double slope) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) {
    if (v < 0) v *= slope;
  }
  FlopCounter::current().add(x.numel());
  const bool grad = wants_grad({&x});
  Tensor result = make_result(x.shape(), std::move(out), grad);
  if (!grad) return result;
  Tape::current().record("leaky_relu", result, [x, slope](std::span<const double> g) mutable {
    auto xd = x.data();
    auto dx = x.mutable_grad();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += xd[i] < 0 ? slope * g[i] : g[i];
  });
  return result;
}

Tensor log_softmax(const Tensor& x, int axis) {
  axis = normalize_axis(axis, x.rank(), "log_softmax");
  const auto v = axis_view(x.shape(), axis);
  std::vector<double> out(static_cast<std::size_t>(x.numel()));
  const double* xd = x.data().data();
  for (std::int64_t o = 0; o < v.outer; ++o) {
    for (std::int64_t in = 0; in < v.inner; ++in) {
      const std::int64_t base = o * v.extent * v.inner + in;
      double mx = xd[base];
      for (std::int64_t e = 1; e < v.extent; ++e) mx = std::max(mx, xd[base + e * v.inner]);
      double s = 0.0;
      for (std::int64_t e = 0; e < v.extent; ++e) s += std::exp(xd[base + e * v.inner] - mx);
      const double lse = mx + std::log(s);
      for (std::int64_t e = 0; e < v.extent; ++e) {
        out[static_cast<std::size_t>(base + e * v.inner)] = xd[base + e * v.inner] - lse;
      }
    }
  }
  const bool grad = wants_grad({&x});
  Tensor result = make_result(x.shape(), std::move(out), grad);
  if (!grad) return result;
  Tensor y = result.detach();
  Tape::current().record("log_softmax", result, [x, y, v](std::span<const double> g) mutable {
    auto yd = y.data();
    auto dx = x.mutable_grad();
    for (std::int64_t o = 0; o < v.outer; ++o) {
      for (std::int64_t in = 0; in < v.inner; ++in) {
        const std::int64_t base = o * v.extent * v.inner + in;
        double gs = 0.0;
        for (std::int64_t e = 0; e < v.extent; ++e) gs += g[static_cast<std::size_t>(base + e * v.inner)];
        for (std::int64_t e = 0; e < v.extent; ++e) {
          const auto i = static_cast<std::size_t>(base + e * v.inner);
          dx[i] += g[i] - std::exp(yd[i]) * gs;
        }
      }
    }
  });
  return result;
}

// ---------------------------------------------------------------------------
// Structural ops

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) fail(ErrorKind::Argument, "concat: no operands");
  const Shape& first = parts.front().shape();
  axis = normalize_axis(axis, first.size(), "concat");
  Shape out_shape = first;
  out_shape[static_cast<std::size_t>(axis)] = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Shape& s = parts[p].shape();
    if (s.size() != first.size()) fail(ErrorKind::Shape, "concat: rank mismatch in operand " + std::to_string(p));
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (static_cast<int>(d) != axis && s[d] != first[d]) {
        fail(ErrorKind::Shape, "concat: operand " + std::to_string(p) + " dimension " + std::to_string(d) +
                                   " is " + std::to_string(s[d]) + ", expected " + std::to_string(first[d]));
      }
    }
    out_shape[static_cast<std::size_t>(axis)] += s[static_cast<std::size_t>(axis)];
  }
  const auto ov = axis_view(out_shape, axis);
  std::vector<double> out(static_cast<std::size_t>(shape_numel(out_shape)));
  std::vector<std::int64_t> offsets;
  std::int64_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const auto pv = axis_view(p.shape(), axis);
    const double* pd = p.data().data();
    for (std::int64_t o = 0; o < pv.outer; ++o) {
      std::copy_n(pd + o * pv.extent * pv.inner, pv.extent * pv.inner,
                  out.data() + (o * ov.extent + offset) * ov.inner);
    }
    offset += pv.extent;
  }
  bool grad = false;
  for (const auto& p : parts) grad = grad || wants_grad({&p});
  Tensor result = make_result(out_shape, std::move(out), grad);
  if (!grad) return result;
  Tape::current().record("concat", result, [parts, offsets, ov, axis](std::span<const double> g) mutable {
    for (std::size_t i = 0; i < parts.size(); ++i) {
      auto& p = parts[i];
      if (!p.requires_grad()) continue;
      const auto pv = axis_view(p.shape(), axis);
      auto dp = p.mutable_grad();
      for (std::int64_t o = 0; o < pv.outer; ++o) {
        const double* src = g.data() + (o * ov.extent + offsets[i]) * ov.inner;
        double* dst = dp.data() + o * pv.extent * pv.inner;
        for (std::int64_t j = 0; j < pv.extent * pv.inner; ++j) dst[j] += src[j];
      }
    }
  });
  return result;
}

Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t length) {
  axis = normalize_axis(axis, x.rank(), "slice");
  const auto v = axis_view(x.shape(), axis);
  if (start < 0 || length < 1 || start + length > v.extent) {
    fail(ErrorKind::Shape, "slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                               ") outside dimension " + std::to_string(axis) + " of extent " +
                               std::to_string(v.extent));
  }
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = length;
  std::vector<double> out(static_cast<std::size_t>(shape_numel(out_shape)));
  const double* xd = x.data().data();
  for (std::int64_t o = 0; o < v.outer; ++o) {
    std::copy_n(xd + (o * v.extent + start) * v.inner, length * v.inner, out.data() + o * length * v.inner);
  }
  const bool grad = wants_grad({&x});
  Tensor result = make_result(out_shape, std::move(out), grad);
  if (!grad) return result;
  Tape::current().record("slice", result, [x, v, start, length](std::span<const double> g) mutable {
    auto dx = x.mutable_grad();
    for (std::int64_t o = 0; o < v.outer; ++o) {
      double* dst = dx.data() + (o * v.extent + start) * v.inner;
      const double* src = g.data() + o * length * v.inner;
      for (std::int64_t j = 0; j < length * v.inner; ++j) dst[j] += src[j];
    }
  });
  return result;
}

std::pair<Tensor, Tensor> split_halves(const Tensor& x, int axis) {
  axis = normalize_axis(axis, x.rank(), "split");
  const auto extent = x.dim(static_cast<std::size_t>(axis));
  if (extent % 2 != 0) {
    fail(ErrorKind::Shape, "split: dimension " + std::to_string(axis) + " has odd extent " + std::to_string(extent));
  }
  return {slice(x, axis, 0, extent / 2), slice(x, axis, extent / 2, extent / 2)};
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (shape_numel(shape) != x.numel()) {
    fail(ErrorKind::Shape, "reshape: " + shape_to_string(x.shape()) + " to " + shape_to_string(shape));
  }
  const bool grad = wants_grad({&x});
  Tensor result = make_result(shape, std::vector<double>(x.data().begin(), x.data().end()), grad);
  if (!grad) return result;
  Tape::current().record("reshape", result, [x](std::span<const double> g) mutable { accumulate(x, g); });
  return result;
}

Tensor index_select(const Tensor& x, int axis, const std::vector<std::int64_t>& indices) {
  axis = normalize_axis(axis, x.rank(), "index_select");
  const auto v = axis_view(x.shape(), axis);
  if (indices.empty()) fail(ErrorKind::Argument, "index_select: empty index list");
  for (auto i : indices) {
    if (i < 0 || i >= v.extent) fail(ErrorKind::Shape, "index_select: index " + std::to_string(i) + " out of range");
  }
  const auto n = static_cast<std::int64_t>(indices.size());
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = n;
  std::vector<double> out(static_cast<std::size_t>(shape_numel(out_shape)));
  const double* xd = x.data().data();
  for (std::int64_t o = 0; o < v.outer; ++o) {
    for (std::int64_t j = 0; j < n; ++j) {
      std::copy_n(xd + (o * v.extent + indices[static_cast<std::size_t>(j)]) * v.inner, v.inner,
                  out.data() + (o * n + j) * v.inner);
    }
  }
  const bool grad = wants_grad({&x});
  Tensor result = make_result(out_shape, std::move(out), grad);
  if (!grad) return result;
  Tape::current().record("index_select", result, [x, v, indices, n](std::span<const double> g) mutable {
    auto dx = x.mutable_grad();
    for (std::int64_t o = 0; o < v.outer; ++o) {
      for (std::int64_t j = 0; j < n; ++j) {
        double* dst = dx.data() + (o * v.extent + indices[static_cast<std::size_t>(j)]) * v.inner;
        const double* src = g.data() + (o * n + j) * v.inner;
        for (std::int64_t t = 0; t < v.inner; ++t) dst[t] += src[t];
      }
    }
  });
  return result;
}

Tensor index_scatter(const Tensor& x, int axis, const std::vector<std::int64_t>& indices, std::int64_t extent) {
  axis = normalize_axis(axis, x.rank(), "index_scatter");
  const auto v = axis_view(x.shape(), axis);
  const auto n = static_cast<std::int64_t>(indices.size());
  if (n != v.extent) fail(ErrorKind::Shape, "index_scatter: index count does not match dimension " + std::to_string(axis));
  for (auto i : indices) {
    if (i < 0 || i >= extent) fail(ErrorKind::Shape, "index_scatter: index " + std::to_string(i) + " out of range");
  }
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = extent;
  std::vector<double> out(static_cast<std::size_t>(shape_numel(out_shape)), 0.0);
  const double* xd = x.data().data();
  for (std::int64_t o = 0; o < v.outer; ++o) {
    for (std::int64_t j = 0; j < n; ++j) {
      std::copy_n(xd + (o * n + j) * v.inner, v.inner,
                  out.data() + (o * extent + indices[static_cast<std::size_t>(j)]) * v.inner);
    }
  }
  const bool grad = wants_grad({&x});
  Tensor result = make_result(out_shape, std::move(out), grad);
  if (!grad) return result;
  Tape::current().record("index_scatter", result, [x, v, indices, n, extent](std::span<const double> g) mutable {
    auto dx = x.mutable_grad();
    for (std::int64_t o = 0; o < v.outer; ++o) {
      for (std::int64_t j = 0; j < n; ++j) {
        const double* src = g.data() + (o * extent + indices[static_cast<std::size_t>(j)]) * v.inner;
        double* dst = dx.data() + (o * n + j) * v.inner;
        for (std::int64_t t = 0; t < v.inner; ++t) dst[t] += src[t];
      }
    }
  });
  return result;
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  const bool grad = wants_grad({&x});
  Tensor result = make_result({1}, {s}, grad);
  if (!grad) return result;
  Tape::current().record("sum", result, [x](std::span<const double> g) mutable {
    auto dx = x.mutable_grad();
    for (auto& d : dx) d += g[0];
  });
  return result;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

}  // namespace infrayolo
