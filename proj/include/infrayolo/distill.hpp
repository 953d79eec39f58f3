#pragma once

#include <cstdint>

#include "infrayolo/train.hpp"

namespace infrayolo {

struct DistillConfig {
  double gamma_kd = 0.001;  // classification term weight; the KL sums over every anchor slot
  double beta_kd = 1.0;    // box term weight
  double temperature = 3.0;
  double margin = 0.1;
  bool pure = false;  // drop the ground-truth detection loss

  void validate() const;
};

// (1/M) * sum over rows of KL(teacher || student) on temperature-softened
// class distributions, times T^2. Inputs are [N, classes] logits; the
// teacher is treated as a constant.
Tensor kd_cls_loss(const Tensor& student, const Tensor& teacher, double temperature, std::int64_t batch);

// Per row of [N, 4] boxes: the student squared error against the target
// when it exceeds the teacher's squared error minus the margin, else 0.
// Summed over rows and divided by `batch`.
Tensor bounded_box_loss(const Tensor& student, const Tensor& teacher, const Tensor& target, double margin,
                        std::int64_t batch = 1);

// Class logits of every anchor slot of one head, [B*A*H*W, classes].
Tensor anchor_class_logits(const Tensor& head, const DetectorInfo& det, int head_index);

// Decoded normalized (cx, cy, w, h) at each positive slot, [P, 4],
// differentiable w.r.t. the heads.
Tensor positive_boxes(const std::vector<Tensor>& heads, const Assignment& assignment, const DetectorInfo& det);

// One student update against a frozen teacher. With both weights zero this
// is exactly detection_step().
StepStats distill_step(ModelGraph& student, ModelGraph& teacher, Sgd& opt, const Batch& batch, double lr,
                       const DistillConfig& cfg, const LossWeights& weights = {});

}  // namespace infrayolo
