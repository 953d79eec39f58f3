#include <cmath>
#include <random>

#include "doctest.h"
#include "infrayolo/builders.hpp"
#include "infrayolo/distill.hpp"
#include "infrayolo/error.hpp"
#include "infrayolo/prune.hpp"
#include "testing.hpp"

using namespace infrayolo;
using infrayolo::testing::grad_check;
using infrayolo::testing::rand_tensor;

namespace {

std::vector<double> softmax_row(const double* z, int n, double T) {
  double mx = z[0] / T;
  for (int i = 1; i < n; ++i) mx = std::max(mx, z[i] / T);
  std::vector<double> p(static_cast<std::size_t>(n));
  double s = 0;
  for (int i = 0; i < n; ++i) s += p[static_cast<std::size_t>(i)] = std::exp(z[i] / T - mx);
  for (auto& v : p) v /= s;
  return p;
}

// Direct evaluation: (T^2 / M) * sum_rows sum_c pt * (log pt - log ps).
double kd_oracle(const Tensor& s, const Tensor& t, double T, std::int64_t M) {
  const auto n = s.dim(0), c = s.dim(1);
  double total = 0;
  for (std::int64_t r = 0; r < n; ++r) {
    auto ps = softmax_row(s.data().data() + r * c, static_cast<int>(c), T);
    auto pt = softmax_row(t.data().data() + r * c, static_cast<int>(c), T);
    for (std::size_t k = 0; k < ps.size(); ++k) total += pt[k] * (std::log(pt[k]) - std::log(ps[k]));
  }
  return total * T * T / static_cast<double>(M);
}

Tensor row(std::vector<double> v) {
  const auto n = static_cast<std::int64_t>(v.size());
  return Tensor({1, n}, std::move(v), true);
}

Batch toy_batch(int B, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Batch batch;
  batch.images = Tensor::uniform({B, 1, 96, 96}, rng, 0, 0.2);
  std::uniform_real_distribution<double> pos(0.15, 0.85), size(0.04, 0.3);
  auto img = batch.images.mutable_data();
  for (int b = 0; b < B; ++b) {
    std::vector<GroundTruth> gts;
    for (int k = 0; k < 3; ++k) {
      GroundTruth g;
      g.cls = k % 2;
      g.box = Box{pos(rng), pos(rng), size(rng), size(rng)};
      gts.push_back(g);
      // Paint a bright rectangle so the labels are learnable.
      for (int y = 0; y < 96; ++y) {
        for (int x = 0; x < 96; ++x) {
          const double fx = (x + 0.5) / 96, fy = (y + 0.5) / 96;
          if (std::abs(fx - g.box.cx) < g.box.w / 2 && std::abs(fy - g.box.cy) < g.box.h / 2) {
            img[static_cast<std::size_t>((b * 96 + y) * 96 + x)] = 0.6 + 0.3 * g.cls;
          }
        }
      }
    }
    batch.labels.push_back(gts);
  }
  return batch;
}

bool params_equal(const ModelGraph& a, const ModelGraph& b) {
  if (a.params().size() != b.params().size()) return false;
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    const auto& x = a.params()[i].value;
    const auto& y = b.params()[i].value;
    if (x.shape() != y.shape() || !std::equal(x.data().begin(), x.data().end(), y.data().begin())) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("kd classification loss") {
  std::mt19937_64 rng(1);
  Tensor s = Tensor::uniform({7, 3}, rng, -1, 1, true);
  CHECK(std::abs(kd_cls_loss(s, s.detach(), 3.0, 2).item()) < 1e-12);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor a = Tensor::randn({9, 4}, rng, 2.0, true);
    Tensor b = Tensor::randn({9, 4}, rng, 2.0);
    const double T = 0.5 + trial * 0.7;
    const double v = kd_cls_loss(a, b, T, 3).item();
    CHECK(v >= 0.0);
    CHECK(v == doctest::Approx(kd_oracle(a, b, T, 3)).epsilon(1e-10));
  }
  CHECK_THROWS_AS(kd_cls_loss(s, rand_tensor({7, 2}, rng), 3.0, 1), Error);
  CHECK_THROWS_AS(kd_cls_loss(s, s.detach(), 0.0, 1), Error);
  CHECK_THROWS_AS(kd_cls_loss(s, s.detach(), -1.0, 1), Error);

  Tensor t = Tensor::randn({7, 3}, rng);
  for (double T : {1.0, 3.0, 8.0}) {
    auto gc = grad_check([&](const std::vector<Tensor>& in) { return kd_cls_loss(in[0], t, T, 2); }, {s});
    CHECK(gc.max_rel_err < 1e-4);
  }
  // The teacher receives no gradient.
  Tensor tg = Tensor::randn({7, 3}, rng, 1.0, true);
  backward(kd_cls_loss(s, tg, 3.0, 1));
  CHECK_FALSE(tg.has_grad());
}

TEST_CASE("kd gradient stays bounded as temperature grows") {
  std::mt19937_64 rng(2);
  Tensor t = Tensor::randn({50, 2}, rng, 1.5);
  Tensor s0 = Tensor::randn({50, 2}, rng, 1.5);
  std::vector<double> norms;
  for (double T : {1.0, 2.0, 5.0, 10.0, 20.0}) {
    Tensor s = s0.clone();
    s.set_requires_grad(true);
    backward(kd_cls_loss(s, t, T, 1));
    double n2 = 0;
    for (double g : s.grad()) n2 += g * g;
    norms.push_back(std::sqrt(n2));
    // Analytic gradient: T * (softmax(s/T) - softmax(t/T)) / M.
    for (std::int64_t r = 0; r < 50; ++r) {
      auto ps = softmax_row(s0.data().data() + r * 2, 2, T);
      auto pt = softmax_row(t.data().data() + r * 2, 2, T);
      for (int c = 0; c < 2; ++c) {
        CHECK(s.grad()[static_cast<std::size_t>(r * 2 + c)] ==
              doctest::Approx(T * (ps[static_cast<std::size_t>(c)] - pt[static_cast<std::size_t>(c)])).epsilon(1e-9));
      }
    }
  }
  const double mx = *std::max_element(norms.begin(), norms.end());
  const double mn = *std::min_element(norms.begin(), norms.end());
  MESSAGE("grad norms over T: " << norms[0] << " .. " << norms.back());
  CHECK(mx / mn < 3.0);
  // Large-T limit: (d - mean(d)) / (M * classes), d = s - t per row.
  double lim2 = 0;
  for (std::int64_t r = 0; r < 50; ++r) {
    const double d0 = s0.data()[static_cast<std::size_t>(r * 2)] - t.data()[static_cast<std::size_t>(r * 2)];
    const double d1 = s0.data()[static_cast<std::size_t>(r * 2 + 1)] - t.data()[static_cast<std::size_t>(r * 2 + 1)];
    const double m = (d0 + d1) / 2;
    lim2 += ((d0 - m) / 2) * ((d0 - m) / 2) + ((d1 - m) / 2) * ((d1 - m) / 2);
  }
  CHECK(norms.back() == doctest::Approx(std::sqrt(lim2)).epsilon(0.05));
}

TEST_CASE("teacher-bounded box loss") {
  const Tensor p = row({0, 0, 0, 0});
  CHECK(bounded_box_loss(row({0, 0, 0, 0}), row({1, 1, 0, 0}), p, 0.1).item() == 0.0);
  // ||s-p||^2 = 1, ||t-p||^2 = 3, m = 1: 1 + 1 < 3.
  CHECK(bounded_box_loss(row({1, 0, 0, 0}), row({1, 1, 1, 0}), p, 1.0).item() == 0.0);
  // ||s-p||^2 = 3, ||t-p||^2 = 1, m = 1.
  CHECK(bounded_box_loss(row({1, 1, 1, 0}), row({1, 0, 0, 0}), p, 1.0).item() == doctest::Approx(3.0).epsilon(1e-15));

  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor s = Tensor::randn({1, 4}, rng), t = Tensor::randn({1, 4}, rng), g = Tensor::randn({1, 4}, rng);
    double es = 0, et = 0;
    for (int c = 0; c < 4; ++c) {
      es += std::pow(s.at(static_cast<std::size_t>(c)) - g.at(static_cast<std::size_t>(c)), 2);
      et += std::pow(t.at(static_cast<std::size_t>(c)) - g.at(static_cast<std::size_t>(c)), 2);
    }
    const double v = bounded_box_loss(s, t, g, 0.1).item();
    CHECK((v == 0.0 || v == doctest::Approx(es).epsilon(1e-14)));
    CHECK((v != 0.0) == (es + 0.1 > et));
  }
  Tensor s = Tensor::uniform({6, 4}, rng, -1, 1, true), t = Tensor::randn({6, 4}, rng, 0.3), g = Tensor::randn({6, 4}, rng, 0.3);
  auto gc = grad_check([&](const std::vector<Tensor>& in) { return bounded_box_loss(in[0], t, g, 0.1, 2); }, {s});
  CHECK(gc.max_rel_err < 1e-4);
  CHECK_THROWS_AS(bounded_box_loss(s, rand_tensor({5, 4}, rng), g, 0.1), Error);
}

TEST_CASE("anchor gathers match the head layout") {
  auto model = build_infra_yolo(ModelConfig::toy(), 4);
  const auto& det = model.detector();
  std::mt19937_64 rng(4);
  Tensor x = Tensor::uniform({2, 1, 96, 96}, rng, 0, 1);
  auto heads = model.forward(x, false);
  const int F = 5 + det.num_classes;
  for (int h = 0; h < 3; ++h) {
    const auto& head = heads[static_cast<std::size_t>(h)];
    Tensor cls = anchor_class_logits(head, det, h);
    const auto G = head.dim(2) * head.dim(3);
    CHECK(cls.shape() == Shape{2 * 3 * G, det.num_classes});
    // Row (b, a, p), column c.
    const std::int64_t b = 1, a = 2, p = G - 1;
    for (int c = 0; c < det.num_classes; ++c) {
      CHECK(cls.at(static_cast<std::size_t>(((b * 3 + a) * G + p) * det.num_classes + c)) ==
            head.at(static_cast<std::size_t>((b * 3 * F + a * F + 5 + c) * G + p)));
    }
  }
  auto batch = toy_batch(2, 5);
  const auto assignment = assign_targets(batch.labels, det);
  REQUIRE(!assignment.positives.empty());
  Tensor boxes = positive_boxes(heads, assignment, det);
  const auto layouts = head_layouts(det);
  for (std::size_t i = 0; i < assignment.positives.size(); ++i) {
    const auto& t = assignment.positives[i];
    const auto& head = heads[static_cast<std::size_t>(t.head)];
    const auto& L = layouts[static_cast<std::size_t>(t.head)];
    const std::int64_t G = static_cast<std::int64_t>(L.grid_h) * L.grid_w;
    double raw[5 + 2];
    for (int f = 0; f < F; ++f) {
      raw[f] = head.at(static_cast<std::size_t>((t.image * 3 * F + t.anchor * F + f) * G + t.gy * L.grid_w + t.gx));
    }
    Box ref = decode_box(raw, t.gx, t.gy, L, det.anchors.heads[static_cast<std::size_t>(t.head)][static_cast<std::size_t>(t.anchor)], det);
    CHECK(boxes.at(i * 4 + 0) == doctest::Approx(ref.cx).epsilon(1e-12));
    CHECK(boxes.at(i * 4 + 1) == doctest::Approx(ref.cy).epsilon(1e-12));
    CHECK(boxes.at(i * 4 + 2) == doctest::Approx(ref.w).epsilon(1e-12));
    CHECK(boxes.at(i * 4 + 3) == doctest::Approx(ref.h).epsilon(1e-12));
  }
}

TEST_CASE("distill step contracts") {
  auto teacher = build_infra_yolo(ModelConfig::toy(), 6);
  const auto teacher_copy = teacher.clone();
  auto batch = toy_batch(2, 7);

  SUBCASE("zero weights equal plain fine-tuning") {
    auto a = teacher.clone(), b = teacher.clone();
    auto oa = make_sgd(a, 0.9, 5e-4), ob = make_sgd(b, 0.9, 5e-4);
    DistillConfig cfg;
    cfg.gamma_kd = cfg.beta_kd = 0.0;
    for (int i = 0; i < 3; ++i) {
      detection_step(a, oa, batch, 1e-3);
      distill_step(b, teacher, ob, batch, 1e-3, cfg);
    }
    CHECK(params_equal(a, b));
  }
  SUBCASE("student copy has zero classification distillation") {
    auto s = teacher.clone();
    auto opt = make_sgd(s, 0.9, 5e-4);
    // Eval-mode teacher vs training-mode student differ only through BN
    // statistics; align them by using running statistics equal to the batch's.
    DistillConfig cfg;
    cfg.pure = true;
    cfg.beta_kd = 0.0;
    {
      NoGradGuard guard;
      auto ht = teacher.forward(batch.images, false);
      auto hs = s.forward(batch.images, false);
      double v = 0;
      for (int h = 0; h < 3; ++h) {
        v += kd_cls_loss(anchor_class_logits(hs[static_cast<std::size_t>(h)], s.detector(), h),
                         anchor_class_logits(ht[static_cast<std::size_t>(h)], s.detector(), h), cfg.temperature, 2)
                 .item();
      }
      CHECK(std::abs(v) < 1e-12);
    }
    auto st = distill_step(s, teacher, opt, batch, 1e-3, cfg);
    CHECK(st.kd_cls >= 0.0);
    CHECK(st.box == 0.0);
  }
  SUBCASE("teacher is never modified") {
    auto s = apply_prune(teacher, make_plan(teacher, 0.5, 2), WeightPolicy::Inherit);
    auto opt = make_sgd(s, 0.9, 5e-4);
    for (int i = 0; i < 4; ++i) {
      auto st = distill_step(s, teacher, opt, batch, 1e-3, DistillConfig{});
      CHECK(std::isfinite(st.total));
      CHECK(st.kd_cls > 0.0);
    }
    CHECK(params_equal(teacher, teacher_copy));
    for (const auto& p : teacher.params()) CHECK_FALSE(p.value.has_grad());
  }
  SUBCASE("incompatible heads") {
    auto cfg3 = ModelConfig::toy();
    cfg3.num_classes = 3;
    auto other = build_infra_yolo(cfg3, 1);
    auto s = teacher.clone();
    auto opt = make_sgd(s, 0.9, 0);
    CHECK_THROWS_AS(distill_step(s, other, opt, batch, 1e-3, DistillConfig{}), Error);
    DistillConfig bad;
    bad.temperature = 0;
    CHECK_THROWS_AS(distill_step(s, teacher, opt, batch, 1e-3, bad), Error);
  }
}

TEST_CASE("distillation reduces the combined loss") {
  // Best of up to five seeds: mean of the last ten steps below the first ten.
  bool improved = false;
  for (std::uint64_t seed = 1; seed <= 5 && !improved; ++seed) {
    auto teacher = build_infra_yolo(ModelConfig::toy(), 100 + seed);
    auto student = apply_prune(teacher, make_plan(teacher, 0.5, 2), WeightPolicy::Reinitialize, seed);
    auto opt = make_sgd(student, 0.9, 5e-4);
    auto batch = toy_batch(2, 200 + seed);
    std::vector<double> losses;
    for (int i = 0; i < 100; ++i) losses.push_back(distill_step(student, teacher, opt, batch, 2e-3, DistillConfig{}).total);
    double first = 0, last = 0;
    for (int i = 0; i < 10; ++i) {
      first += losses[static_cast<std::size_t>(i)];
      last += losses[static_cast<std::size_t>(90 + i)];
    }
    MESSAGE("seed " << seed << ": " << first / 10 << " -> " << last / 10);
    improved = last < first;
  }
  CHECK(improved);
}
