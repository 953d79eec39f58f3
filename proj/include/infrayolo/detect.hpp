#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "infrayolo/graph.hpp"
#include "infrayolo/tensor.hpp"

namespace infrayolo {

// Centre/size box in image-normalized coordinates.
struct Box {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;

  double x1() const { return cx - 0.5 * w; }
  double y1() const { return cy - 0.5 * h; }
  double x2() const { return cx + 0.5 * w; }
  double y2() const { return cy + 0.5 * h; }
  double area() const { return w * h; }
};

struct GroundTruth {
  int cls = 0;
  Box box;
};

struct Detection {
  Box box;
  int cls = 0;
  double confidence = 0.0;
};

double iou(const Box& a, const Box& b);
// Throws on a zero-area box.
double giou(const Box& a, const Box& b);
// IoU of two boxes sharing a centre.
double shape_iou(double w1, double h1, double w2, double h2);

struct HeadLayout {
  int stride = 0;
  int grid_h = 0;
  int grid_w = 0;
};

// Heads at strides 8, 16, 32.
std::array<HeadLayout, 3> head_layouts(const DetectorInfo& det);

struct Target {
  int image = 0;
  int head = 0;
  int anchor = 0;
  int gy = 0;
  int gx = 0;
  int cls = 0;
  Box box;
};

// Positives plus, per head, a [B*A*Gh*Gw] mask of slots excluded from the
// objectness negatives.
struct Assignment {
  int batch = 0;
  std::vector<Target> positives;
  std::array<std::vector<std::uint8_t>, 3> ignore;
};

// Each ground truth goes to the anchor (over all heads) with the best shape
// IoU, at the cell containing its centre. Other anchors at that centre cell
// whose shape IoU exceeds ignore_iou are ignored rather than treated as
// negatives. When two boxes claim one slot the first keeps it.
Assignment assign_targets(const std::vector<std::vector<GroundTruth>>& gts, const DetectorInfo& det,
                          double ignore_iou = 0.5);

struct LossWeights {
  double box = 1.0;
  double obj = 1.0;
  double cls = 1.0;
  std::array<double, 3> obj_balance{1.0, 1.0, 1.0};
};

struct LossParts {
  Tensor total;  // scalar, differentiable w.r.t. the head outputs
  double box = 0.0;
  double obj = 0.0;
  double cls = 0.0;
};

// Sum over the batch of 1-GIoU on positives, BCE-with-logits objectness on
// positives and non-ignored negatives, BCE-with-logits classes on
// positives; each divided by the batch size.
LossParts detection_loss(const std::vector<Tensor>& heads, const Assignment& assignment, const DetectorInfo& det,
                         const LossWeights& weights = {});

// Slot decoding shared by the loss, inference and distillation.
Box decode_box(const double* t, int gx, int gy, const HeadLayout& layout, const Anchor& anchor,
               const DetectorInfo& det);

std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh);

// One detection list per image.
std::vector<std::vector<Detection>> decode_and_nms(const std::vector<Tensor>& heads, const DetectorInfo& det,
                                                   double conf_thresh, double iou_thresh);

struct ClassMetrics {
  int images = 0;     // images containing the class
  int instances = 0;  // ground-truth boxes
  std::optional<double> precision;
  std::optional<double> recall;
  std::optional<double> ap;
};

struct EvalResult {
  std::vector<ClassMetrics> per_class;
  ClassMetrics all;  // precision/recall/AP averaged over classes with ground truth
  double map() const { return all.ap.value_or(0.0); }
};

// VOC all-points AP at the given IoU over every detection; precision and
// recall use only detections with confidence >= conf_thresh.
EvalResult evaluate(const std::vector<std::vector<Detection>>& dets, const std::vector<std::vector<GroundTruth>>& gts,
                    int num_classes, double conf_thresh = 0.25, double iou_thresh = 0.5);

// Class | Images | Instances | Precision | Recall | mAP@0.5
std::string format_metrics_table(const EvalResult& result, const std::vector<std::string>& class_names);

std::vector<GroundTruth> read_labels(const std::string& path);
void write_labels(const std::string& path, const std::vector<GroundTruth>& labels);
std::string format_labels(const std::vector<GroundTruth>& labels);
std::vector<GroundTruth> parse_labels(const std::string& text);

}  // namespace infrayolo
