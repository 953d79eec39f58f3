#include "infrayolo/distill.hpp"

#include <cmath>

#include "infrayolo/error.hpp"

namespace infrayolo {

namespace {

void check_2d(const Tensor& a, const Tensor& b, const char* what) {
  if (a.rank() != 2 || a.shape() != b.shape()) {
    fail(ErrorKind::Shape, std::string(what) + ": shapes " + shape_to_string(a.shape()) + " and " +
                               shape_to_string(b.shape()) + " must be equal and 2-D");
  }
}

}  // namespace

void DistillConfig::validate() const {
  if (!(temperature > 0.0)) fail(ErrorKind::Config, "distill temperature must be positive");
  if (!(margin >= 0.0)) fail(ErrorKind::Config, "distill margin must be non-negative");
  if (!(gamma_kd >= 0.0) || !(beta_kd >= 0.0)) fail(ErrorKind::Config, "distill weights must be non-negative");
}

Tensor kd_cls_loss(const Tensor& student, const Tensor& teacher, double temperature, std::int64_t batch) {
  check_2d(student, teacher, "kd_cls_loss");
  if (!(temperature > 0.0)) fail(ErrorKind::Argument, "kd_cls_loss: temperature must be positive");
  if (batch < 1) fail(ErrorKind::Argument, "kd_cls_loss: batch must be positive");
  Tensor log_t;
  {
    NoGradGuard guard;
    log_t = log_softmax(scale(teacher.detach(), 1.0 / temperature), 1);
  }
  std::vector<double> p(log_t.data().begin(), log_t.data().end());
  for (auto& v : p) v = std::exp(v);
  Tensor prob_t(log_t.shape(), std::move(p));
  Tensor log_s = log_softmax(scale(student, 1.0 / temperature), 1);
  Tensor kl = sum(mul(prob_t, sub(log_t, log_s)));
  return scale(kl, temperature * temperature / static_cast<double>(batch));
}

Tensor bounded_box_loss(const Tensor& student, const Tensor& teacher, const Tensor& target, double margin,
                        std::int64_t batch) {
  check_2d(student, teacher, "bounded_box_loss");
  check_2d(student, target, "bounded_box_loss");
  if (batch < 1) fail(ErrorKind::Argument, "bounded_box_loss: batch must be positive");
  const auto rows = student.dim(0), cols = student.dim(1);
  Tensor diff = sub(student, target.detach());
  Tensor sq = mul(diff, diff);
  std::vector<double> gate(static_cast<std::size_t>(rows * cols), 0.0);
  for (std::int64_t r = 0; r < rows; ++r) {
    double es = 0.0, et = 0.0;
    for (std::int64_t c = 0; c < cols; ++c) {
      const auto i = static_cast<std::size_t>(r * cols + c);
      es += sq.data()[i];
      const double dt = teacher.data()[i] - target.data()[i];
      et += dt * dt;
    }
    if (es + margin > et) {
      for (std::int64_t c = 0; c < cols; ++c) gate[static_cast<std::size_t>(r * cols + c)] = 1.0;
    }
  }
  Tensor loss = sum(mul(sq, Tensor(student.shape(), std::move(gate))));
  return scale(loss, 1.0 / static_cast<double>(batch));
}

Tensor anchor_class_logits(const Tensor& head, const DetectorInfo& det, int head_index) {
  const auto layout = head_layouts(det)[static_cast<std::size_t>(head_index)];
  const int A = static_cast<int>(det.anchors.per_head());
  const int nc = det.num_classes;
  const int F = 5 + nc;
  const std::int64_t plane = static_cast<std::int64_t>(layout.grid_h) * layout.grid_w;
  if (head.rank() != 4 || head.dim(1) != A * F || head.dim(2) * head.dim(3) != plane) {
    fail(ErrorKind::Shape, "anchor_class_logits: head " + std::to_string(head_index) + " has shape " +
                               shape_to_string(head.shape()));
  }
  const auto B = head.dim(0);
  std::vector<std::int64_t> idx;
  idx.reserve(static_cast<std::size_t>(B * A * plane * nc));
  for (std::int64_t b = 0; b < B; ++b) {
    for (int a = 0; a < A; ++a) {
      for (std::int64_t p = 0; p < plane; ++p) {
        for (int c = 0; c < nc; ++c) idx.push_back((b * A * F + a * F + 5 + c) * plane + p);
      }
    }
  }
  Tensor flat = index_select(reshape(head, {head.numel()}), 0, idx);
  return reshape(flat, {B * A * plane, nc});
}

Tensor positive_boxes(const std::vector<Tensor>& heads, const Assignment& assignment, const DetectorInfo& det) {
  const auto layouts = head_layouts(det);
  const int A = static_cast<int>(det.anchors.per_head());
  const int F = 5 + det.num_classes;
  const auto P = static_cast<std::int64_t>(assignment.positives.size());
  if (P == 0) return Tensor::zeros({0, 4});
  // Gather the four box logits of every positive, in positive order.
  std::vector<Tensor> parts;
  std::vector<double> lin, quad, offset;
  for (const auto& t : assignment.positives) {
    const auto& L = layouts[static_cast<std::size_t>(t.head)];
    const std::int64_t plane = static_cast<std::int64_t>(L.grid_h) * L.grid_w;
    std::vector<std::int64_t> idx;
    for (int f = 0; f < 4; ++f) {
      idx.push_back((static_cast<std::int64_t>(t.image) * A * F + t.anchor * F + f) * plane +
                    static_cast<std::int64_t>(t.gy) * L.grid_w + t.gx);
    }
    const auto& h = heads[static_cast<std::size_t>(t.head)];
    parts.push_back(index_select(reshape(h, {h.numel()}), 0, idx));
    const auto& anchor = det.anchors.heads[static_cast<std::size_t>(t.head)][static_cast<std::size_t>(t.anchor)];
    // u = sigmoid(t) * [1,1,2,2] + [gx,gy,0,0]; box = lin*u + quad*u^2.
    lin.insert(lin.end(), {1.0 / L.grid_w, 1.0 / L.grid_h, 0.0, 0.0});
    quad.insert(quad.end(), {0.0, 0.0, anchor.w / det.input_width, anchor.h / det.input_height});
    offset.insert(offset.end(), {static_cast<double>(t.gx), static_cast<double>(t.gy), 0.0, 0.0});
  }
  Tensor logits = reshape(concat(parts, 0), {P, 4});
  std::vector<double> mult;
  for (std::int64_t i = 0; i < P; ++i) mult.insert(mult.end(), {1.0, 1.0, 2.0, 2.0});
  Tensor u = add(mul(sigmoid(logits), Tensor({P, 4}, std::move(mult))), Tensor({P, 4}, std::move(offset)));
  return mul(u, add(mul(u, Tensor({P, 4}, std::move(quad))), Tensor({P, 4}, std::move(lin))));
}

StepStats distill_step(ModelGraph& student, ModelGraph& teacher, Sgd& opt, const Batch& batch, double lr,
                       const DistillConfig& cfg, const LossWeights& weights) {
  cfg.validate();
  if (cfg.gamma_kd == 0.0 && cfg.beta_kd == 0.0 && !cfg.pure) {
    return detection_step(student, opt, batch, lr, weights);
  }
  const auto& det = student.detector();
  std::vector<Tensor> t_heads;
  {
    NoGradGuard guard;
    t_heads = teacher.forward(batch.images, false);
  }
  opt.zero_grad();
  const auto assignment = assign_targets(batch.labels, det);
  auto s_heads = student.forward(batch.images, true);
  if (s_heads.size() != t_heads.size()) fail(ErrorKind::Shape, "distill: teacher and student head counts differ");
  for (std::size_t h = 0; h < s_heads.size(); ++h) {
    if (s_heads[h].shape() != t_heads[h].shape()) {
      fail(ErrorKind::Shape, "distill: head " + std::to_string(h) + " shapes " +
                                 shape_to_string(s_heads[h].shape()) + " (student) and " +
                                 shape_to_string(t_heads[h].shape()) + " (teacher) differ");
    }
  }
  const auto M = batch.images.dim(0);
  StepStats stats;
  std::vector<Tensor> terms;
  if (!cfg.pure) {
    auto parts = detection_loss(s_heads, assignment, det, weights);
    stats.box = parts.box;
    stats.obj = parts.obj;
    stats.cls = parts.cls;
    terms.push_back(parts.total);
  }
  if (cfg.gamma_kd > 0.0) {
    std::vector<Tensor> kd;
    for (int h = 0; h < 3; ++h) {
      kd.push_back(kd_cls_loss(anchor_class_logits(s_heads[static_cast<std::size_t>(h)], det, h),
                               anchor_class_logits(t_heads[static_cast<std::size_t>(h)], det, h), cfg.temperature,
                               M));
    }
    Tensor l = add_n(kd);
    stats.kd_cls = l.item();
    terms.push_back(scale(l, cfg.gamma_kd));
  }
  if (cfg.beta_kd > 0.0 && !assignment.positives.empty()) {
    Tensor sb = positive_boxes(s_heads, assignment, det);
    Tensor tb = positive_boxes(t_heads, assignment, det);
    std::vector<double> gt;
    for (const auto& t : assignment.positives) gt.insert(gt.end(), {t.box.cx, t.box.cy, t.box.w, t.box.h});
    Tensor target(sb.shape(), std::move(gt));
    Tensor l = bounded_box_loss(sb, tb, target, cfg.margin, M);
    stats.kd_box = l.item();
    terms.push_back(scale(l, cfg.beta_kd));
  }
  if (terms.empty()) fail(ErrorKind::Config, "distill: pure mode with zero weights has no loss");
  Tensor total = terms.size() == 1 ? terms[0] : add_n(terms);
  stats.total = total.item();
  backward(total);
  opt.step(lr);
  return stats;
}

}  // namespace infrayolo
