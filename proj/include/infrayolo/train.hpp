#pragma once

#include <vector>

#include "infrayolo/detect.hpp"
#include "infrayolo/graph.hpp"
#include "infrayolo/optim.hpp"

namespace infrayolo {

struct Batch {
  Tensor images;  // [B, C, H, W] in [0, 1]
  std::vector<std::vector<GroundTruth>> labels;
};

// SGD over the trainable parameters; BN affine terms and biases skip weight
// decay.
Sgd make_sgd(const ModelGraph& graph, double momentum, double weight_decay);

struct StepStats {
  double total = 0.0;
  double box = 0.0;
  double obj = 0.0;
  double cls = 0.0;
  double kd_cls = 0.0;
  double kd_box = 0.0;
};

// One supervised update: forward in training mode, detection loss,
// backward, optional BN sparsity penalty, optimizer step.
StepStats detection_step(ModelGraph& model, Sgd& opt, const Batch& batch, double lr, const LossWeights& weights = {},
                         double sparsity_lambda = 0.0);

// Detection loss without an update (eval-mode forward, no tape).
StepStats detection_loss_eval(ModelGraph& model, const Batch& batch, const LossWeights& weights = {});

}  // namespace infrayolo
