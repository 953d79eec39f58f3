#include "infrayolo/train.hpp"

#include "infrayolo/prune.hpp"

namespace infrayolo {

namespace {

bool ends_with(const std::string& s, const char* suffix) {
  const std::string t(suffix);
  return s.size() >= t.size() && s.compare(s.size() - t.size(), t.size(), t) == 0;
}

}  // namespace

Sgd make_sgd(const ModelGraph& graph, double momentum, double weight_decay) {
  Sgd opt(SgdOptions{momentum, weight_decay, false});
  for (const auto& p : graph.params()) {
    if (!p.trainable) continue;
    const bool decay = ends_with(p.name, ".weight");
    opt.add_param(p.value, decay);
  }
  return opt;
}

StepStats detection_step(ModelGraph& model, Sgd& opt, const Batch& batch, double lr, const LossWeights& weights,
                         double sparsity_lambda) {
  opt.zero_grad();
  const auto assignment = assign_targets(batch.labels, model.detector());
  auto heads = model.forward(batch.images, true);
  auto parts = detection_loss(heads, assignment, model.detector(), weights);
  backward(parts.total);
  if (sparsity_lambda > 0.0) apply_sparsity_penalty(model, sparsity_lambda);
  opt.step(lr);
  return StepStats{parts.total.item(), parts.box, parts.obj, parts.cls, 0.0, 0.0};
}

StepStats detection_loss_eval(ModelGraph& model, const Batch& batch, const LossWeights& weights) {
  NoGradGuard guard;
  const auto assignment = assign_targets(batch.labels, model.detector());
  auto heads = model.forward(batch.images, false);
  auto parts = detection_loss(heads, assignment, model.detector(), weights);
  return StepStats{parts.total.item(), parts.box, parts.obj, parts.cls, 0.0, 0.0};
}

}  // namespace infrayolo
