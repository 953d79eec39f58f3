#include <doctest.h>

#include <cmath>
#include <cstring>
#include <sstream>

#include "infrayolo/accounting.hpp"
#include "infrayolo/builders.hpp"
#include "infrayolo/error.hpp"
#include "infrayolo/model_io.hpp"
#include "testing.hpp"

using namespace infrayolo;
using infrayolo::testing::max_abs_diff;

namespace {

std::int64_t cbl_params(std::int64_t cin, std::int64_t cout, std::int64_t k) { return k * k * cin * cout + 2 * cout; }

std::int64_t msam_params(std::int64_t c) {
  const auto r = c / 16, h = r / 2;
  return c * r + r + 2 * (9 * h * h + h) + r + 1 + 3;
}

std::int64_t closed_form_params(const ModelConfig& c) {
  const std::int64_t n = c.neck_width;
  const std::int64_t out = static_cast<std::int64_t>(c.anchors.per_head()) * (5 + c.num_classes);
  std::int64_t total = cbl_params(c.in_channels, c.stem_width, 3) + cbl_params(c.stem_width, c.pre_width, 3);
  std::int64_t prev = c.pre_width;
  for (int l = 0; l < 3; ++l) {
    const std::int64_t w = c.widths[l];
    total += cbl_params(prev, w, 3);
    const std::int64_t unit = cbl_params(w, w / 2, 1) + cbl_params(w / 2, w, 3) + (c.attention ? msam_params(w) : 0);
    total += c.depths[l] * unit;
    prev = w;
  }
  total += cbl_params(c.widths[0], n, 1) + cbl_params(c.widths[1], n, 1) + cbl_params(c.widths[2], n, 1);
  total += 3 * cbl_params(n, n, 3) + cbl_params(3 * n, n, 1);
  total += 2 * cbl_params(n, n, 3);
  total += 3 * (cbl_params(n, n, 3) + n * out + out);
  return total;
}

Tensor eval_cbl(const ModelGraph& g, const std::string& name, const Tensor& x, int pad, int dil) {
  Tensor y = infrayolo::testing::conv2d_loops(x, g.param(name + ".conv.weight"), Tensor(), 1, pad, dil);
  const auto C = y.dim(1), HW = y.dim(2) * y.dim(3);
  auto d = y.mutable_data();
  for (std::int64_t b = 0; b < y.dim(0); ++b)
    for (std::int64_t c = 0; c < C; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      const double gm = g.param(name + ".bn.gamma").at(ci), be = g.param(name + ".bn.beta").at(ci);
      const double mu = g.param(name + ".bn.running_mean").at(ci), var = g.param(name + ".bn.running_var").at(ci);
      for (std::int64_t i = 0; i < HW; ++i) {
        double& v = d[static_cast<std::size_t>((b * C + c) * HW + i)];
        v = gm * (v - mu) / std::sqrt(var + 1e-5) + be;
        v = v > 0 ? v : 0.1 * v;
      }
    }
  return y;
}

void randomize_bn(ModelGraph& g, std::mt19937_64& rng) {
  for (auto& p : g.mutable_params()) {
    const auto& n = p.name;
    auto ends = [&](const char* s) { return n.size() >= std::strlen(s) && n.compare(n.size() - std::strlen(s), std::strlen(s), s) == 0; };
    if (ends(".gamma") || ends(".beta") || ends(".running_mean")) {
      for (auto& v : p.value.mutable_data()) v = std::uniform_real_distribution<double>(-1, 1)(rng);
    } else if (ends(".running_var")) {
      for (auto& v : p.value.mutable_data()) v = std::uniform_real_distribution<double>(0.5, 2)(rng);
    }
  }
}

}  // namespace

TEST_CASE("msam") {
  std::mt19937_64 rng(1);
  auto g = build_msam(32);
  Tensor x = Tensor::uniform({2, 32, 8, 8}, rng, -2, 2);
  Tensor y = g.forward(x, false)[0];
  CHECK(y.shape() == Shape{2, 32, 8, 8});
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    CHECK(std::abs(y.at(static_cast<std::size_t>(i))) <= std::abs(x.at(static_cast<std::size_t>(i))));
  }
  CHECK_THROWS_AS(build_msam(16), Error);
  CHECK_THROWS_AS(build_msam(48), Error);

  // Composite gradient: input and every internal weight, 20 random coordinates each.
  std::vector<std::string> names;
  std::vector<Tensor> inputs{Tensor::uniform({2, 32, 6, 6}, rng, -1, 1)};
  for (const auto& p : g.params()) {
    names.push_back(p.name);
    inputs.push_back(p.value);
  }
  auto r = infrayolo::testing::grad_check(
      [&](const std::vector<Tensor>& in) {
        for (std::size_t i = 0; i < names.size(); ++i) g.set_param(names[i], in[i + 1]);
        return g.forward(in[0], false)[0];
      },
      inputs, 3, 1e-5, 20);
  std::size_t expected = 0;
  for (const auto& t : inputs) expected += std::min<std::size_t>(20, static_cast<std::size_t>(t.numel()));
  CHECK(r.checked == expected);
  CHECK(r.max_rel_err < 1e-4);
}

TEST_CASE("resunit") {
  std::mt19937_64 rng(2);
  CHECK_THROWS_AS(build_resunit(33, false), Error);
  for (bool attention : {false, true}) {
    auto g = build_resunit(32, attention);
    Tensor x = Tensor::uniform({2, 32, 5, 5}, rng, -1, 1);
    CHECK(g.forward(x, true)[0].shape() == x.shape());

    auto z = g.clone();
    for (auto& v : z.param("res.cv2.conv.weight").mutable_data()) v = 0.0;
    CHECK(max_abs_diff(z.forward(x, true)[0], x) == 0.0);

    Tensor xi = x.clone();
    xi.set_requires_grad(true);
    backward(sum(square(g.forward(xi, true)[0])));
    auto nonzero = [](const Tensor& t) {
      for (double v : t.grad()) if (v != 0.0) return true;
      return false;
    };
    CHECK(nonzero(xi));
    CHECK(nonzero(g.param("res.cv1.conv.weight")));
    CHECK(nonzero(g.param("res.cv2.conv.weight")));
  }
}

TEST_CASE("ffa matches per-branch oracle") {
  std::mt19937_64 rng(3);
  auto g = build_ffa(6);
  randomize_bn(g, rng);
  Tensor x = Tensor::uniform({2, 6, 9, 7}, rng, -1, 1);
  Tensor y = g.forward(x, false)[0];
  CHECK(y.shape() == x.shape());
  CHECK(g.node("ffa.d3.conv").padding == 3);
  CHECK(effective_kernel_extent(g.node("ffa.d3.conv").kernel, g.node("ffa.d3.conv").dilation) == 7);
  std::vector<Tensor> branches;
  for (int d = 1; d <= 3; ++d) branches.push_back(eval_cbl(g, "ffa.d" + std::to_string(d), x, d, d));
  Tensor ref = eval_cbl(g, "ffa.fuse", concat(branches, 1), 0, 1);
  CHECK(max_abs_diff(y, ref) < 1e-12);
}

TEST_CASE("ffafpm pyramid") {
  std::mt19937_64 rng(4);
  const std::array<int, 3> taps{8, 12, 16};
  auto g = build_ffafpm(taps, 6, false);
  std::map<std::string, Tensor> zeros{{"tap0", Tensor::zeros({1, 8, 16, 16})},
                                      {"tap1", Tensor::zeros({1, 12, 8, 8})},
                                      {"tap2", Tensor::zeros({1, 16, 4, 4})}};
  auto out = g.run(zeros, false);
  for (const auto& [k, v] : out) {
    for (double d : v.data()) CHECK(d == 0.0);
  }
  CHECK(out.at(g.outputs()[0]).shape() == Shape{1, 6, 16, 16});
  CHECK(out.at(g.outputs()[1]).shape() == Shape{1, 6, 8, 8});
  CHECK(out.at(g.outputs()[2]).shape() == Shape{1, 6, 4, 4});

  auto probe = [&](ModelGraph& m) {
    std::map<std::string, Tensor> feeds{{"tap0", Tensor::uniform({1, 8, 16, 16}, rng, -1, 1)},
                                        {"tap1", Tensor::uniform({1, 12, 8, 8}, rng, -1, 1)},
                                        {"tap2", Tensor::uniform({1, 16, 4, 4}, rng, -1, 1)}};
    auto base = m.run(feeds, false);
    auto bumped = feeds;
    bumped["tap0"] = add_scalar(feeds["tap0"], 0.5);
    auto moved = m.run(bumped, false);
    std::vector<bool> changed;
    for (const auto& o : m.outputs()) changed.push_back(max_abs_diff(base.at(o), moved.at(o)) > 1e-9);
    return changed;
  };
  auto withbn = build_ffafpm(taps, 6, true);
  CHECK(probe(withbn) == std::vector<bool>{true, true, true});
  auto fpn = build_fpn_baseline(taps, 6);
  CHECK(probe(fpn) == std::vector<bool>{true, false, false});
}

TEST_CASE("toy detector graph") {
  auto cfg = ModelConfig::toy();
  auto g = build_infra_yolo(cfg, 5);
  CHECK(g.outputs().size() == 3);
  std::mt19937_64 rng(5);
  Tensor x = Tensor::uniform({2, 1, 96, 96}, rng, 0, 1);
  auto outs = g.forward(x, false);
  const int fields = 3 * (5 + cfg.num_classes);
  CHECK(outs[0].shape() == Shape{2, fields, 12, 12});
  CHECK(outs[1].shape() == Shape{2, fields, 6, 6});
  CHECK(outs[2].shape() == Shape{2, fields, 3, 3});
  for (const auto& o : outs)
    for (double v : o.data()) CHECK(std::isfinite(v));
  CHECK(count_params(g) == closed_form_params(cfg));

  auto deep = cfg;
  deep.depths = {2, 1, 3};
  deep.num_classes = 3;
  CHECK(count_params(build_infra_yolo(deep)) == closed_form_params(deep));
  auto plain = deep;
  plain.attention = false;
  CHECK(count_params(build_infra_yolo(plain)) == closed_form_params(plain));

  auto bad = cfg;
  bad.widths = {48, 128, 256};
  CHECK_THROWS_AS(build_infra_yolo(bad), Error);

  for (const auto& n : g.nodes()) {
    if (n.kind != NodeKind::Conv2d) continue;
    if (n.name.find(".cv2.conv") != std::string::npos) CHECK(n.role == ConvRole::PreMsam);
    if (n.name == "neck.pre_ffa.conv") CHECK(n.role == ConvRole::PreFfa);
    if (n.name.rfind(".out") == n.name.size() - 4) CHECK(n.role == ConvRole::HeadOutput);
  }
}

TEST_CASE("graph validation") {
  SUBCASE("dangling input") {
    ModelGraph g;
    GraphBuilder b(g);
    b.input("x", 4);
    b.activation("a", "nowhere", 4);
    CHECK_THROWS_AS(g.validate(), Error);
  }
  SUBCASE("cycle") {
    ModelGraph g;
    GraphBuilder b(g);
    b.input("x", 4);
    b.add("a", {"x", "b"}, 4);
    b.activation("b", "a", 4);
    CHECK_THROWS_AS(g.validate(), Error);
  }
  SUBCASE("channel mismatch") {
    ModelGraph g;
    GraphBuilder b(g);
    b.input("x", 4);
    b.conv("c", "x", 3, 8, 1, 1, 1, false, ConvRole::Prunable);
    CHECK_THROWS_AS(g.validate(), Error);
  }
  SUBCASE("duplicate name") {
    ModelGraph g;
    GraphBuilder b(g);
    b.input("x", 4);
    CHECK_THROWS_AS(b.input("x", 4), Error);
  }
}

TEST_CASE("flops accounting") {
  ModelGraph g;
  GraphBuilder b(g);
  b.conv("c", b.input("x", 1), 1, 1, 1, 1, 1, false, ConvRole::Prunable);
  g.outputs() = {"c"};
  CHECK(count_flops(g, 4, 4) == 32);

  auto instrumented = [](ModelGraph& m, std::int64_t h, std::int64_t w) {
    std::mt19937_64 rng(6);
    Tensor x = Tensor::uniform({1, m.node(m.input_names()[0]).channels_out, h, w}, rng, 0, 1);
    NoGradGuard ng;
    FlopCounterScope scope;
    m.forward(x, false);
    return scope.total();
  };
  auto toy = build_infra_yolo(ModelConfig::toy());
  CHECK(count_flops(toy, 96, 96) == instrumented(toy, 96, 96));
  auto base = build_infra_yolo(ModelConfig::yolov3_baseline());
  CHECK(count_flops(base, 64, 96) == instrumented(base, 64, 96));

  auto small = ModelConfig::toy();
  auto wide = small;
  wide.in_channels *= 2;
  wide.stem_width *= 2;
  wide.pre_width *= 2;
  for (auto& w : wide.widths) w *= 2;
  wide.neck_width *= 2;
  const auto gs = build_infra_yolo(small), gw = build_infra_yolo(wide);
  auto split_conv = [](const ModelGraph& m) {
    std::int64_t inner = 0, head = 0;
    for (const auto& f : flops_by_node(m, 96, 96)) {
      if (f.kind != NodeKind::Conv2d) continue;
      (m.node(f.node).role == ConvRole::HeadOutput ? head : inner) += f.flops;
    }
    return std::pair{inner, head};
  };
  auto [si, sh] = split_conv(gs);
  auto [wi, wh] = split_conv(gw);
  CHECK(wi == 4 * si);
  CHECK(si + sh == count_conv_flops(gs, 96, 96));
}

TEST_CASE("model file round trip") {
  auto g = build_infra_yolo(ModelConfig::toy(), 9);
  std::mt19937_64 rng(9);
  randomize_bn(g, rng);
  std::stringstream a;
  save_model(g, a);
  const std::string first = a.str();
  std::stringstream in(first);
  auto loaded = load_model(in);
  std::stringstream b;
  save_model(loaded, b);
  CHECK(first == b.str());
  CHECK(topology_text(g) == topology_text(loaded));
  CHECK(count_params(loaded) == count_params(g));

  Tensor x = Tensor::uniform({1, 1, 96, 96}, rng, 0, 1);
  auto o1 = g.forward(x, false), o2 = loaded.forward(x, false);
  for (int i = 0; i < 3; ++i) CHECK(max_abs_diff(o1[i], o2[i]) < 1e-3);

  std::stringstream truncated(first.substr(0, first.size() - 10));
  CHECK_THROWS_AS(load_model(truncated), Error);
}
