#include "infrayolo/optim.hpp"

#include "infrayolo/error.hpp"

namespace infrayolo {

void Sgd::add_param(const Tensor& param, bool decay) {
  params_.push_back(Slot{param, std::vector<double>(static_cast<std::size_t>(param.numel()), 0.0), decay});
}

void Sgd::add_params(const std::vector<Tensor>& params, bool decay) {
  for (const auto& p : params) add_param(p, decay);
}

void Sgd::step(double lr) {
  if (!(lr > 0.0)) fail(ErrorKind::Argument, "sgd: learning rate must be positive, got " + std::to_string(lr));
  for (auto& slot : params_) {
    if (!slot.param.has_grad() && options_.momentum == 0.0) continue;
    auto w = slot.param.mutable_data();
    std::span<const double> g;
    if (slot.param.has_grad()) g = slot.param.grad();
    const double wd = slot.decay ? options_.weight_decay : 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      double d = (g.empty() ? 0.0 : g[i]) + wd * w[i];
      if (options_.momentum != 0.0) {
        slot.velocity[i] = options_.momentum * slot.velocity[i] + d;
        d = options_.nesterov ? d + options_.momentum * slot.velocity[i] : slot.velocity[i];
      }
      w[i] -= lr * d;
    }
  }
}

void Sgd::zero_grad() {
  for (auto& slot : params_) slot.param.zero_grad();
}

void sgd_step(const std::vector<Tensor>& params, double lr, double weight_decay) {
  Sgd opt(SgdOptions{0.0, weight_decay, false});
  opt.add_params(params);
  opt.step(lr);
}

}  // namespace infrayolo
