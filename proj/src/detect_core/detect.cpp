#include "infrayolo/detect.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "infrayolo/error.hpp"

namespace infrayolo {

namespace {

double sigm(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Binary cross-entropy on a logit; gradient is sigmoid(z) - y.
double bce_logits(double z, double y) { return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z))); }

// GIoU of p against fixed t and its gradient w.r.t. (cx, cy, w, h) of p.
double giou_with_grad(const Box& p, const Box& t, double grad[4]) {
  const double px1 = p.x1(), px2 = p.x2(), py1 = p.y1(), py2 = p.y2();
  const double tx1 = t.x1(), tx2 = t.x2(), ty1 = t.y1(), ty2 = t.y2();
  const double iw = std::max(0.0, std::min(px2, tx2) - std::max(px1, tx1));
  const double ih = std::max(0.0, std::min(py2, ty2) - std::max(py1, ty1));
  const double I = iw * ih;
  const double U = p.area() + t.area() - I;
  const double cw = std::max(px2, tx2) - std::min(px1, tx1);
  const double ch = std::max(py2, ty2) - std::min(py1, ty1);
  const double C = cw * ch;
  const double g = I / U + U / C - 1.0;

  const double gI = 1.0 / U + I / (U * U) - 1.0 / C;
  const double gA = -I / (U * U) + 1.0 / C;
  const double gC = -U / (C * C);
  const double diw_x1 = (iw > 0 && px1 > tx1) ? -1.0 : 0.0;
  const double diw_x2 = (iw > 0 && px2 < tx2) ? 1.0 : 0.0;
  const double dih_y1 = (ih > 0 && py1 > ty1) ? -1.0 : 0.0;
  const double dih_y2 = (ih > 0 && py2 < ty2) ? 1.0 : 0.0;
  const double dcw_x1 = px1 < tx1 ? -1.0 : 0.0;
  const double dcw_x2 = px2 > tx2 ? 1.0 : 0.0;
  const double dch_y1 = py1 < ty1 ? -1.0 : 0.0;
  const double dch_y2 = py2 > ty2 ? 1.0 : 0.0;
  const double gx1 = gI * ih * diw_x1 + gC * ch * dcw_x1;
  const double gx2 = gI * ih * diw_x2 + gC * ch * dcw_x2;
  const double gy1 = gI * iw * dih_y1 + gC * cw * dch_y1;
  const double gy2 = gI * iw * dih_y2 + gC * cw * dch_y2;
  grad[0] = gx1 + gx2;
  grad[1] = gy1 + gy2;
  grad[2] = 0.5 * (gx2 - gx1) + gA * p.h;
  grad[3] = 0.5 * (gy2 - gy1) + gA * p.w;
  return g;
}

std::int64_t check_heads(const std::vector<Tensor>& heads, const DetectorInfo& det) {
  if (heads.size() != 3) fail(ErrorKind::Shape, "expected three head outputs, got " + std::to_string(heads.size()));
  const auto layouts = head_layouts(det);
  const auto fields = static_cast<std::int64_t>(det.anchors.per_head()) * (5 + det.num_classes);
  const auto batch = heads[0].dim(0);
  for (std::size_t h = 0; h < 3; ++h) {
    const Shape want{batch, fields, layouts[h].grid_h, layouts[h].grid_w};
    if (heads[h].shape() != want) {
      fail(ErrorKind::Shape, "head " + std::to_string(h) + " has shape " + shape_to_string(heads[h].shape()) +
                                 ", expected " + shape_to_string(want));
    }
  }
  return batch;
}

std::string fmt_opt(const std::optional<double>& v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3f", *v);
  return buf;
}

}  // namespace

double iou(const Box& a, const Box& b) {
  const double iw = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1()));
  const double ih = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1()));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

double giou(const Box& a, const Box& b) {
  if (!(a.w > 0 && a.h > 0 && b.w > 0 && b.h > 0)) fail(ErrorKind::Argument, "giou: degenerate box");
  double unused[4];
  return giou_with_grad(a, b, unused);
}

double shape_iou(double w1, double h1, double w2, double h2) {
  const double inter = std::min(w1, w2) * std::min(h1, h2);
  return inter / (w1 * h1 + w2 * h2 - inter);
}

std::array<HeadLayout, 3> head_layouts(const DetectorInfo& det) {
  std::array<HeadLayout, 3> out;
  for (int h = 0; h < 3; ++h) {
    const int s = 8 << h;
    out[static_cast<std::size_t>(h)] = {s, det.input_height / s, det.input_width / s};
  }
  return out;
}

Assignment assign_targets(const std::vector<std::vector<GroundTruth>>& gts, const DetectorInfo& det,
                          double ignore_iou) {
  const auto layouts = head_layouts(det);
  const int A = static_cast<int>(det.anchors.per_head());
  Assignment as;
  as.batch = static_cast<int>(gts.size());
  std::array<std::vector<std::uint8_t>, 3> taken;
  for (std::size_t h = 0; h < 3; ++h) {
    as.ignore[h].assign(static_cast<std::size_t>(as.batch * A * layouts[h].grid_h * layouts[h].grid_w), 0);
    taken[h].assign(as.ignore[h].size(), 0);
  }
  for (int b = 0; b < as.batch; ++b) {
    for (const auto& gt : gts[static_cast<std::size_t>(b)]) {
      const double gw = gt.box.w * det.input_width, gh = gt.box.h * det.input_height;
      int best_h = 0, best_a = 0;
      double best = -1.0;
      for (int h = 0; h < 3; ++h) {
        for (int a = 0; a < A; ++a) {
          const auto& an = det.anchors.heads[static_cast<std::size_t>(h)][static_cast<std::size_t>(a)];
          const double v = shape_iou(gw, gh, an.w, an.h);
          if (v > best) {
            best = v;
            best_h = h;
            best_a = a;
          }
        }
      }
      for (int h = 0; h < 3; ++h) {
        const auto hi = static_cast<std::size_t>(h);
        const auto& L = layouts[hi];
        const int gx = std::clamp(static_cast<int>(std::floor(gt.box.cx * L.grid_w)), 0, L.grid_w - 1);
        const int gy = std::clamp(static_cast<int>(std::floor(gt.box.cy * L.grid_h)), 0, L.grid_h - 1);
        for (int a = 0; a < A; ++a) {
          const auto slot = static_cast<std::size_t>(((b * A + a) * L.grid_h + gy) * L.grid_w + gx);
          if (h == best_h && a == best_a) {
            if (!taken[hi][slot]) {
              taken[hi][slot] = 1;
              as.positives.push_back({b, h, a, gy, gx, gt.cls, gt.box});
            }
          } else {
            const auto& an = det.anchors.heads[hi][static_cast<std::size_t>(a)];
            if (shape_iou(gw, gh, an.w, an.h) > ignore_iou) as.ignore[hi][slot] = 1;
          }
        }
      }
    }
  }
  return as;
}

Box decode_box(const double* t, int gx, int gy, const HeadLayout& layout, const Anchor& anchor,
               const DetectorInfo& det) {
  Box b;
  b.cx = (sigm(t[0]) + gx) / layout.grid_w;
  b.cy = (sigm(t[1]) + gy) / layout.grid_h;
  const double sw = 2.0 * sigm(t[2]), sh = 2.0 * sigm(t[3]);
  b.w = anchor.w * sw * sw / det.input_width;
  b.h = anchor.h * sh * sh / det.input_height;
  return b;
}

LossParts detection_loss(const std::vector<Tensor>& heads, const Assignment& assignment, const DetectorInfo& det,
                         const LossWeights& weights) {
  const auto B = check_heads(heads, det);
  if (B != assignment.batch) fail(ErrorKind::Shape, "detection_loss: assignment batch does not match predictions");
  for (const auto& h : heads) {
    for (double v : h.data()) {
      if (!std::isfinite(v)) fail(ErrorKind::Numeric, "detection_loss: non-finite value in predictions");
    }
  }
  const auto layouts = head_layouts(det);
  const int A = static_cast<int>(det.anchors.per_head());
  const int F = 5 + det.num_classes;
  const double inv_b = 1.0 / static_cast<double>(B);
  const bool grad = wants_grad({&heads[0], &heads[1], &heads[2]});

  std::array<std::shared_ptr<std::vector<double>>, 3> g;
  std::array<std::vector<std::uint8_t>, 3> positive;
  for (std::size_t h = 0; h < 3; ++h) {
    g[h] = std::make_shared<std::vector<double>>(grad ? static_cast<std::size_t>(heads[h].numel()) : 0, 0.0);
    positive[h].assign(assignment.ignore[h].size(), 0);
  }
  auto index = [&](int h, int b, int a, int f, int gy, int gx) {
    const auto& L = layouts[static_cast<std::size_t>(h)];
    return static_cast<std::size_t>(((static_cast<std::int64_t>(b) * A * F + a * F + f) * L.grid_h + gy) * L.grid_w +
                                    gx);
  };

  LossParts parts;
  for (const auto& t : assignment.positives) {
    const auto hi = static_cast<std::size_t>(t.head);
    const auto& L = layouts[hi];
    positive[hi][static_cast<std::size_t>(((t.image * A + t.anchor) * L.grid_h + t.gy) * L.grid_w + t.gx)] = 1;
    const double* d = heads[hi].data().data();
    double raw[4];
    for (int f = 0; f < 4; ++f) raw[f] = d[index(t.head, t.image, t.anchor, f, t.gy, t.gx)];
    const auto& an = det.anchors.heads[hi][static_cast<std::size_t>(t.anchor)];
    const Box p = decode_box(raw, t.gx, t.gy, L, an, det);
    double dg[4];
    const double gi = giou_with_grad(p, t.box, dg);
    parts.box += (1.0 - gi) * inv_b;
    for (int c = 0; c < det.num_classes; ++c) {
      const auto i = index(t.head, t.image, t.anchor, 5 + c, t.gy, t.gx);
      const double y = c == t.cls ? 1.0 : 0.0;
      parts.cls += bce_logits(d[i], y) * inv_b;
      if (grad) (*g[hi])[i] += weights.cls * inv_b * (sigm(d[i]) - y);
    }
    if (grad) {
      const double s = -weights.box * inv_b;
      const double sx = sigm(raw[0]), sy = sigm(raw[1]), sw = sigm(raw[2]), sh = sigm(raw[3]);
      const double dcx = sx * (1 - sx) / L.grid_w;
      const double dcy = sy * (1 - sy) / L.grid_h;
      const double dw = 8.0 * an.w * sw * sw * (1 - sw) / det.input_width;
      const double dh = 8.0 * an.h * sh * sh * (1 - sh) / det.input_height;
      auto& gh = *g[hi];
      gh[index(t.head, t.image, t.anchor, 0, t.gy, t.gx)] += s * dg[0] * dcx;
      gh[index(t.head, t.image, t.anchor, 1, t.gy, t.gx)] += s * dg[1] * dcy;
      gh[index(t.head, t.image, t.anchor, 2, t.gy, t.gx)] += s * dg[2] * dw;
      gh[index(t.head, t.image, t.anchor, 3, t.gy, t.gx)] += s * dg[3] * dh;
    }
  }
  for (int h = 0; h < 3; ++h) {
    const auto hi = static_cast<std::size_t>(h);
    const auto& L = layouts[hi];
    const double* d = heads[hi].data().data();
    const double bal = weights.obj_balance[hi];
    for (int b = 0; b < B; ++b)
      for (int a = 0; a < A; ++a)
        for (int gy = 0; gy < L.grid_h; ++gy)
          for (int gx = 0; gx < L.grid_w; ++gx) {
            const auto slot = static_cast<std::size_t>(((b * A + a) * L.grid_h + gy) * L.grid_w + gx);
            const bool pos = positive[hi][slot] != 0;
            if (!pos && assignment.ignore[hi][slot]) continue;
            const auto i = index(h, b, a, 4, gy, gx);
            const double y = pos ? 1.0 : 0.0;
            parts.obj += bal * bce_logits(d[i], y) * inv_b;
            if (grad) (*g[hi])[i] += weights.obj * bal * inv_b * (sigm(d[i]) - y);
          }
  }
  const double total = weights.box * parts.box + weights.obj * parts.obj + weights.cls * parts.cls;
  parts.total = Tensor({1}, {total}, grad);
  if (grad) {
    std::array<Tensor, 3> hs{heads[0], heads[1], heads[2]};
    Tape::current().record("detection_loss", parts.total, [hs, g](std::span<const double> go) {
      for (std::size_t h = 0; h < 3; ++h) {
        if (!hs[h].requires_grad()) continue;
        auto dst = hs[h].mutable_grad();
        const auto& src = *g[h];
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += go[0] * src[i];
      }
    });
  }
  return parts;
}

std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].confidence > dets[b].confidence; });
  std::vector<Detection> kept;
  std::vector<bool> removed(dets.size(), false);
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const auto i = order[oi];
    if (removed[i]) continue;
    kept.push_back(dets[i]);
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const auto j = order[oj];
      if (!removed[j] && dets[j].cls == dets[i].cls && iou(dets[i].box, dets[j].box) > iou_thresh) removed[j] = true;
    }
  }
  return kept;
}

std::vector<std::vector<Detection>> decode_and_nms(const std::vector<Tensor>& heads, const DetectorInfo& det,
                                                   double conf_thresh, double iou_thresh) {
  if (!(conf_thresh > 0 && conf_thresh < 1) || !(iou_thresh > 0 && iou_thresh < 1)) {
    fail(ErrorKind::Argument, "decode_and_nms: thresholds must lie in (0,1)");
  }
  const auto B = check_heads(heads, det);
  const auto layouts = head_layouts(det);
  const int A = static_cast<int>(det.anchors.per_head());
  const int F = 5 + det.num_classes;
  std::vector<std::vector<Detection>> out(static_cast<std::size_t>(B));
  for (std::int64_t b = 0; b < B; ++b) {
    std::vector<Detection> cand;
    for (std::size_t h = 0; h < 3; ++h) {
      const auto& L = layouts[h];
      const double* d = heads[h].data().data();
      const std::int64_t plane = static_cast<std::int64_t>(L.grid_h) * L.grid_w;
      for (int a = 0; a < A; ++a) {
        const double* base = d + (b * A * F + a * F) * plane;
        for (int gy = 0; gy < L.grid_h; ++gy)
          for (int gx = 0; gx < L.grid_w; ++gx) {
            const std::int64_t p = gy * L.grid_w + gx;
            const double obj = sigm(base[4 * plane + p]);
            if (obj < conf_thresh) continue;
            int best_c = 0;
            double best = -1e300;
            for (int c = 0; c < det.num_classes; ++c) {
              const double z = base[(5 + c) * plane + p];
              if (z > best) {
                best = z;
                best_c = c;
              }
            }
            const double conf = obj * sigm(best);
            if (conf < conf_thresh) continue;
            double raw[4];
            for (int f = 0; f < 4; ++f) raw[f] = base[f * plane + p];
            cand.push_back({decode_box(raw, gx, gy, L, det.anchors.heads[h][static_cast<std::size_t>(a)], det), best_c,
                            conf});
          }
      }
    }
    out[static_cast<std::size_t>(b)] = nms(std::move(cand), iou_thresh);
  }
  return out;
}

EvalResult evaluate(const std::vector<std::vector<Detection>>& dets, const std::vector<std::vector<GroundTruth>>& gts,
                    int num_classes, double conf_thresh, double iou_thresh) {
  if (dets.size() != gts.size()) fail(ErrorKind::Argument, "evaluate: detection and ground-truth image counts differ");
  EvalResult res;
  res.per_class.resize(static_cast<std::size_t>(num_classes));
  res.all.images = static_cast<int>(gts.size());

  struct Item {
    double conf;
    std::size_t image;
    Box box;
  };
  for (int c = 0; c < num_classes; ++c) {
    auto& m = res.per_class[static_cast<std::size_t>(c)];
    std::vector<std::vector<Box>> truth(gts.size());
    for (std::size_t i = 0; i < gts.size(); ++i) {
      for (const auto& g : gts[i]) {
        if (g.cls == c) truth[i].push_back(g.box);
      }
      if (!truth[i].empty()) ++m.images;
      m.instances += static_cast<int>(truth[i].size());
    }
    res.all.instances += m.instances;
    std::vector<Item> items;
    for (std::size_t i = 0; i < dets.size(); ++i) {
      for (const auto& d : dets[i]) {
        if (d.cls == c) items.push_back({d.confidence, i, d.box});
      }
    }
    // Ordering depends only on content, so equal-confidence ties resolve the
    // same way however the input lists are arranged.
    std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) {
      if (a.conf != b.conf) return a.conf > b.conf;
      if (a.image != b.image) return a.image < b.image;
      if (a.box.cx != b.box.cx) return a.box.cx < b.box.cx;
      if (a.box.cy != b.box.cy) return a.box.cy < b.box.cy;
      if (a.box.w != b.box.w) return a.box.w < b.box.w;
      return a.box.h < b.box.h;
    });
    std::vector<std::vector<bool>> used(gts.size());
    for (std::size_t i = 0; i < gts.size(); ++i) used[i].assign(truth[i].size(), false);
    std::vector<int> tp(items.size(), 0);
    int tp_at = 0, n_at = 0;
    for (std::size_t k = 0; k < items.size(); ++k) {
      const auto& it = items[k];
      double best = -1.0;
      std::size_t best_j = 0;
      for (std::size_t j = 0; j < truth[it.image].size(); ++j) {
        const double v = iou(it.box, truth[it.image][j]);
        if (v > best) {
          best = v;
          best_j = j;
        }
      }
      if (best >= iou_thresh && !used[it.image][best_j]) {
        used[it.image][best_j] = true;
        tp[k] = 1;
      }
      if (it.conf >= conf_thresh) {
        ++n_at;
        tp_at += tp[k];
      }
    }
    if (m.instances == 0) continue;
    m.recall = static_cast<double>(tp_at) / m.instances;
    m.precision = n_at > 0 ? static_cast<double>(tp_at) / n_at : 0.0;

    // All-points interpolation: precision envelope integrated over recall.
    std::vector<double> rec{0.0}, prec{0.0};
    int ctp = 0;
    for (std::size_t k = 0; k < items.size(); ++k) {
      ctp += tp[k];
      rec.push_back(static_cast<double>(ctp) / m.instances);
      prec.push_back(static_cast<double>(ctp) / static_cast<double>(k + 1));
    }
    rec.push_back(1.0);
    prec.push_back(0.0);
    for (std::size_t i = prec.size() - 1; i > 0; --i) prec[i - 1] = std::max(prec[i - 1], prec[i]);
    double ap = 0.0;
    for (std::size_t i = 1; i < rec.size(); ++i) ap += (rec[i] - rec[i - 1]) * prec[i];
    m.ap = ap;
  }
  double sp = 0, sr = 0, sa = 0;
  int n = 0;
  for (const auto& m : res.per_class) {
    if (!m.ap) continue;
    sp += *m.precision;
    sr += *m.recall;
    sa += *m.ap;
    ++n;
  }
  if (n > 0) {
    res.all.precision = sp / n;
    res.all.recall = sr / n;
    res.all.ap = sa / n;
  }
  return res;
}

std::string format_metrics_table(const EvalResult& result, const std::vector<std::string>& class_names) {
  std::ostringstream o;
  char line[160];
  std::snprintf(line, sizeof(line), "%-10s %8s %10s %10s %8s %8s\n", "Class", "Images", "Instances", "Precision",
                "Recall", "mAP@0.5");
  o << line;
  auto row = [&](const std::string& name, const ClassMetrics& m) {
    std::snprintf(line, sizeof(line), "%-10s %8d %10d %10s %8s %8s\n", name.c_str(), m.images, m.instances,
                  fmt_opt(m.precision).c_str(), fmt_opt(m.recall).c_str(), fmt_opt(m.ap).c_str());
    o << line;
  };
  row("all", result.all);
  for (std::size_t c = 0; c < result.per_class.size(); ++c) {
    row(c < class_names.size() ? class_names[c] : std::to_string(c), result.per_class[c]);
  }
  return o.str();
}

std::string format_labels(const std::vector<GroundTruth>& labels) {
  std::string out;
  char buf[32];
  for (const auto& l : labels) {
    out += std::to_string(l.cls);
    for (double v : {l.box.cx, l.box.cy, l.box.w, l.box.h}) {
      out += ' ';
      auto r = std::to_chars(buf, buf + sizeof(buf), v);
      out.append(buf, r.ptr);
    }
    out += '\n';
  }
  return out;
}

std::vector<GroundTruth> parse_labels(const std::string& text) {
  std::vector<GroundTruth> out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    GroundTruth g;
    if (!(ls >> g.cls >> g.box.cx >> g.box.cy >> g.box.w >> g.box.h) || g.cls < 0 || !(g.box.w > 0) ||
        !(g.box.h > 0)) {
      fail(ErrorKind::Io, "malformed label on line " + std::to_string(lineno) + ": '" + line + "'");
    }
    out.push_back(g);
  }
  return out;
}

std::vector<GroundTruth> read_labels(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open label file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_labels(ss.str());
}

void write_labels(const std::string& path, const std::vector<GroundTruth>& labels) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Io, "cannot write label file '" + path + "'");
  out << format_labels(labels);
}

}  // namespace infrayolo
