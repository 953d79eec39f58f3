#include "infrayolo/builders.hpp"

#include <cmath>

#include "infrayolo/error.hpp"

namespace infrayolo {

AnchorSet default_anchors() {
  AnchorSet a;
  // IoU k-means over the desk generator's box shapes.
  a.heads[0] = {{6, 14}, {14, 7}, {9, 21}};
  a.heads[1] = {{22, 11}, {13, 30}, {36, 18}};
  a.heads[2] = {{18, 42}, {60, 30}, {29, 66}};
  return a;
}

ModelConfig ModelConfig::toy() {
  ModelConfig c;
  c.anchors = default_anchors();
  return c;
}

ModelConfig ModelConfig::darknet53() {
  ModelConfig c;
  c.input_height = 416;
  c.input_width = 416;
  c.stem_width = 32;
  c.pre_width = 128;
  c.widths = {256, 512, 1024};
  c.depths = {8, 8, 4};
  c.neck_width = 256;
  c.anchors.heads[0] = {{10, 13}, {16, 30}, {33, 23}};
  c.anchors.heads[1] = {{30, 61}, {62, 45}, {59, 119}};
  c.anchors.heads[2] = {{116, 90}, {156, 198}, {373, 326}};
  return c;
}

ModelConfig ModelConfig::yolov3_baseline() {
  ModelConfig c = toy();
  c.attention = false;
  c.neck = NeckKind::Yolov3Fpn;
  return c;
}

void ModelConfig::validate() const {
  auto bad = [](const std::string& what) { fail(ErrorKind::Config, what); };
  if (in_channels < 1) bad("in_channels must be >= 1");
  if (input_height % 32 != 0 || input_width % 32 != 0 || input_height < 32 || input_width < 32) {
    bad("input size must be a positive multiple of 32");
  }
  if (stem_width < 1 || pre_width < 1 || neck_width < 2 || neck_width % 2 != 0) bad("invalid stem/pre/neck width");
  for (int l = 0; l < 3; ++l) {
    if (widths[l] < 2 || widths[l] % 2 != 0) bad("backbone widths must be even");
    if (attention && depths[l] > 0 && (widths[l] < 32 || widths[l] % 32 != 0)) {
      bad("attention requires backbone widths >= 32 and divisible by 32, got " + std::to_string(widths[l]));
    }
    if (depths[l] < 0) bad("depths must be >= 0");
  }
  if (num_classes < 1) bad("num_classes must be >= 1");
  const auto per = anchors.heads[0].size();
  if (per == 0) bad("anchor set is empty");
  for (const auto& h : anchors.heads) {
    if (h.size() != per) bad("every head needs the same number of anchors");
    for (const auto& a : h) {
      if (!(a.w > 0 && a.h > 0)) bad("anchor extents must be positive");
    }
  }
}

// ---------------------------------------------------------------------------

void GraphBuilder::tag_last(const std::string& tag) { graph_.mutable_nodes().back().tags.push_back(tag); }

std::string GraphBuilder::input(const std::string& name, int channels) {
  LayerNode n;
  n.name = name;
  n.kind = NodeKind::Input;
  n.channels_in = n.channels_out = channels;
  graph_.add_node(n);
  return name;
}

std::string GraphBuilder::conv(const std::string& name, const std::string& input, int cin, int cout, int kernel,
                               int stride, int dilation, bool bias, ConvRole role) {
  LayerNode n;
  n.name = name;
  n.kind = NodeKind::Conv2d;
  n.inputs = {input};
  n.channels_in = cin;
  n.channels_out = cout;
  n.kernel = kernel;
  n.stride = stride;
  n.dilation = dilation;
  n.padding = dilation * (kernel - 1) / 2;
  n.bias = bias;
  n.role = role;
  graph_.add_node(n);
  graph_.add_param(weight_name(name), Tensor::zeros({cout, cin, kernel, kernel}));
  if (bias) graph_.add_param(bias_name(name), Tensor::zeros({cout}));
  return name;
}

std::string GraphBuilder::batch_norm(const std::string& name, const std::string& input, int channels) {
  LayerNode n;
  n.name = name;
  n.kind = NodeKind::BatchNorm;
  n.inputs = {input};
  n.channels_in = n.channels_out = channels;
  graph_.add_node(n);
  graph_.add_param(gamma_name(name), Tensor::full({channels}, 1.0));
  graph_.add_param(beta_name(name), Tensor::zeros({channels}));
  graph_.add_param(running_mean_name(name), Tensor::zeros({channels}), false);
  graph_.add_param(running_var_name(name), Tensor::full({channels}, 1.0), false);
  return name;
}

std::string GraphBuilder::activation(const std::string& name, const std::string& input, int channels) {
  LayerNode n;
  n.name = name;
  n.kind = NodeKind::Activation;
  n.inputs = {input};
  n.channels_in = n.channels_out = channels;
  n.slope = 0.1;
  graph_.add_node(n);
  return name;
}

std::string GraphBuilder::cbl(const std::string& name, const std::string& input, int cin, int cout, int kernel,
                              int stride, int dilation, ConvRole role, bool use_bn) {
  auto c = conv(name + ".conv", input, cin, cout, kernel, stride, dilation, false, role);
  if (use_bn) c = batch_norm(name + ".bn", c, cout);
  return activation(name + ".act", c, cout);
}

std::string GraphBuilder::upsample(const std::string& name, const std::string& input, int channels, int factor) {
  LayerNode n;
  n.name = name;
  n.kind = NodeKind::Upsample;
  n.inputs = {input};
  n.channels_in = n.channels_out = channels;
  n.factor = factor;
  graph_.add_node(n);
  return name;
}

std::string GraphBuilder::add(const std::string& name, const std::vector<std::string>& inputs, int channels) {
  LayerNode n;
  n.name = name;
  n.kind = NodeKind::Add;
  n.inputs = inputs;
  n.channels_in = n.channels_out = channels;
  graph_.add_node(n);
  return name;
}

std::string GraphBuilder::concat(const std::string& name, const std::vector<std::string>& inputs, int channels) {
  LayerNode n;
  n.name = name;
  n.kind = NodeKind::Concat;
  n.inputs = inputs;
  n.channels_out = channels;
  graph_.add_node(n);
  return name;
}

std::string GraphBuilder::msam(const std::string& name, const std::string& input, int channels) {
  if (channels < 32 || channels % 32 != 0) {
    fail(ErrorKind::Config, "msam '" + name + "' needs C >= 32 and divisible by 32, got " + std::to_string(channels));
  }
  const int r = channels / 16;
  LayerNode n;
  n.name = name;
  n.kind = NodeKind::Msam;
  n.inputs = {input};
  n.channels_in = n.channels_out = channels;
  n.reduced = r;
  graph_.add_node(n);
  graph_.add_param(name + ".conv1.weight", Tensor::zeros({r, channels, 1, 1}));
  graph_.add_param(name + ".conv1.bias", Tensor::zeros({r}));
  graph_.add_param(name + ".conv2.weight", Tensor::zeros({r / 2, r / 2, 3, 3}));
  graph_.add_param(name + ".conv2.bias", Tensor::zeros({r / 2}));
  graph_.add_param(name + ".conv3.weight", Tensor::zeros({r / 2, r / 2, 3, 3}));
  graph_.add_param(name + ".conv3.bias", Tensor::zeros({r / 2}));
  graph_.add_param(name + ".conv4.weight", Tensor::zeros({1, r, 1, 1}));
  graph_.add_param(name + ".conv4.bias", Tensor::zeros({1}));
  graph_.add_param(name + ".conv5.weight", Tensor::zeros({1, 1, 3}));
  return name;
}

std::string GraphBuilder::resunit(const std::string& name, const std::string& input, int channels, bool attention,
                                  int level) {
  if (channels % 2 != 0) fail(ErrorKind::Config, "resunit '" + name + "' needs an even channel count");
  const auto first = graph_.nodes().size();
  auto h = cbl(name + ".cv1", input, channels, channels / 2, 1, 1, 1, ConvRole::Prunable);
  h = cbl(name + ".cv2", h, channels / 2, channels, 3, 1, 1, attention ? ConvRole::PreMsam : ConvRole::Prunable);
  if (attention) h = msam(name + ".msam", h, channels);
  auto out = add(name + ".add", {input, h}, channels);
  for (auto i = first; i < graph_.nodes().size(); ++i) {
    auto& n = graph_.mutable_nodes()[i];
    n.level = level;
    n.tags.push_back("resunit");
  }
  return out;
}

std::string GraphBuilder::ffa(const std::string& name, const std::string& input, int channels, bool use_bn) {
  if (channels < 3) fail(ErrorKind::Config, "ffa '" + name + "' needs at least 3 channels");
  const auto first = graph_.nodes().size();
  std::vector<std::string> branches;
  for (int d = 1; d <= 3; ++d) {
    branches.push_back(cbl(name + ".d" + std::to_string(d), input, channels, channels, 3, 1, d, ConvRole::Prunable, use_bn));
  }
  auto cat = concat(name + ".cat", branches, 3 * channels);
  auto out = cbl(name + ".fuse", cat, 3 * channels, channels, 1, 1, 1, ConvRole::Prunable, use_bn);
  for (auto i = first; i < graph_.nodes().size(); ++i) graph_.mutable_nodes()[i].tags.push_back("ffa");
  return out;
}

std::array<std::string, 3> GraphBuilder::ffafpm(const std::string& name, const std::array<std::string, 3>& taps,
                                                const std::array<int, 3>& tap_channels, int neck_width, bool use_bn) {
  const int n = neck_width;
  const auto in0 = cbl(name + ".align0", taps[0], tap_channels[0], n, 1, 1, 1, ConvRole::Prunable, use_bn);
  const auto in1 = cbl(name + ".align1", taps[1], tap_channels[1], n, 1, 1, 1, ConvRole::Prunable, use_bn);
  const auto pre = cbl(name + ".pre_ffa", taps[2], tap_channels[2], n, 1, 1, 1, ConvRole::PreFfa, use_bn);
  const auto in2 = ffa(name + ".ffa", pre, n, use_bn);

  // Top-down. The deepest level has a single input, so its intermediate node
  // is elided; the shallowest level's intermediate and output coincide.
  const auto mid1 = add(name + ".mid1", {in1, upsample(name + ".up2", in2, n, 2)}, n);
  const auto out0 = add(name + ".out0", {in0, upsample(name + ".up1", mid1, n, 2)}, n);
  // Bottom-up with the cross-scale skip from each level's input.
  const auto down0 = cbl(name + ".down0", out0, n, n, 3, 2, 1, ConvRole::Prunable, use_bn);
  const auto out1 = add(name + ".out1", {in1, mid1, down0}, n);
  const auto down1 = cbl(name + ".down1", out1, n, n, 3, 2, 1, ConvRole::Prunable, use_bn);
  const auto out2 = add(name + ".out2", {in2, down1}, n);
  return {out0, out1, out2};
}

std::array<std::string, 3> GraphBuilder::fpn_baseline(const std::string& name, const std::array<std::string, 3>& taps,
                                                      const std::array<int, 3>& tap_channels, int neck_width) {
  const int n = neck_width;
  const auto p2 = cbl(name + ".lat2", taps[2], tap_channels[2], n, 1, 1, 1, ConvRole::Prunable);
  const auto c1 = concat(name + ".cat1", {taps[1], upsample(name + ".up2", p2, n, 2)}, tap_channels[1] + n);
  const auto p1 = cbl(name + ".lat1", c1, tap_channels[1] + n, n, 1, 1, 1, ConvRole::Prunable);
  const auto c0 = concat(name + ".cat0", {taps[0], upsample(name + ".up1", p1, n, 2)}, tap_channels[0] + n);
  const auto p0 = cbl(name + ".lat0", c0, tap_channels[0] + n, n, 1, 1, 1, ConvRole::Prunable);
  return {p0, p1, p2};
}

// ---------------------------------------------------------------------------

void initialize_parameters(ModelGraph& graph, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto uniform_fill = [&](Tensor& t, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : t.mutable_data()) v = dist(rng);
  };
  auto fan_in_bound = [](const Tensor& w) {
    const auto& s = w.shape();
    std::int64_t fan_in = 1;
    for (std::size_t i = 1; i < s.size(); ++i) fan_in *= s[i];
    return 1.0 / std::sqrt(static_cast<double>(fan_in));
  };
  const int fields = 5 + graph.detector().num_classes;
  for (const auto& n : graph.nodes()) {
    switch (n.kind) {
      case NodeKind::Conv2d: {
        auto& w = graph.param(weight_name(n.name));
        if (n.role == ConvRole::HeadOutput) {
          std::normal_distribution<double> dist(0.0, 0.01);
          for (auto& v : w.mutable_data()) v = dist(rng);
        } else {
          uniform_fill(w, fan_in_bound(w));
        }
        if (n.bias) {
          auto& b = graph.param(bias_name(n.name));
          if (n.role == ConvRole::HeadOutput && fields > 5) {
            auto bd = b.mutable_data();
            for (std::size_t i = 0; i < bd.size(); ++i) bd[i] = (i % static_cast<std::size_t>(fields)) == 4 ? -4.5 : 0.0;
          } else {
            uniform_fill(b, fan_in_bound(w));
          }
        }
        break;
      }
      case NodeKind::BatchNorm: {
        for (auto& v : graph.param(gamma_name(n.name)).mutable_data()) v = 1.0;
        for (auto& v : graph.param(beta_name(n.name)).mutable_data()) v = 0.0;
        for (auto& v : graph.param(running_mean_name(n.name)).mutable_data()) v = 0.0;
        for (auto& v : graph.param(running_var_name(n.name)).mutable_data()) v = 1.0;
        break;
      }
      case NodeKind::Msam: {
        for (const char* c : {"conv1", "conv2", "conv3", "conv4"}) {
          auto& w = graph.param(n.name + "." + c + ".weight");
          const double bound = fan_in_bound(w);
          uniform_fill(w, bound);
          uniform_fill(graph.param(n.name + "." + c + ".bias"), bound);
        }
        uniform_fill(graph.param(n.name + ".conv5.weight"), 1.0 / std::sqrt(3.0));
        break;
      }
      default:
        break;
    }
  }
}

namespace {

ModelGraph finish(ModelGraph g, std::vector<std::string> outputs, std::uint64_t seed) {
  g.outputs() = std::move(outputs);
  initialize_parameters(g, seed);
  g.validate();
  return g;
}

}  // namespace

ModelGraph build_msam(int channels, std::uint64_t seed) {
  ModelGraph g;
  GraphBuilder b(g);
  auto out = b.msam("msam", b.input("x", channels), channels);
  return finish(std::move(g), {out}, seed);
}

ModelGraph build_resunit(int channels, bool attention, std::uint64_t seed) {
  ModelGraph g;
  GraphBuilder b(g);
  auto out = b.resunit("res", b.input("x", channels), channels, attention, 0);
  return finish(std::move(g), {out}, seed);
}

ModelGraph build_ffa(int channels, std::uint64_t seed) {
  ModelGraph g;
  GraphBuilder b(g);
  auto out = b.ffa("ffa", b.input("x", channels), channels);
  return finish(std::move(g), {out}, seed);
}

ModelGraph build_ffafpm(const std::array<int, 3>& tap_channels, int neck_width, bool use_bn, std::uint64_t seed) {
  ModelGraph g;
  GraphBuilder b(g);
  std::array<std::string, 3> taps;
  for (int i = 0; i < 3; ++i) taps[i] = b.input("tap" + std::to_string(i), tap_channels[i]);
  auto outs = b.ffafpm("neck", taps, tap_channels, neck_width, use_bn);
  return finish(std::move(g), {outs.begin(), outs.end()}, seed);
}

ModelGraph build_fpn_baseline(const std::array<int, 3>& tap_channels, int neck_width, std::uint64_t seed) {
  ModelGraph g;
  GraphBuilder b(g);
  std::array<std::string, 3> taps;
  for (int i = 0; i < 3; ++i) taps[i] = b.input("tap" + std::to_string(i), tap_channels[i]);
  auto outs = b.fpn_baseline("neck", taps, tap_channels, neck_width);
  return finish(std::move(g), {outs.begin(), outs.end()}, seed);
}

ModelGraph build_infra_yolo(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelGraph g;
  g.detector() = DetectorInfo{config.num_classes, config.input_height, config.input_width, config.anchors};
  GraphBuilder b(g);
  auto x = b.input("image", config.in_channels);
  x = b.cbl("stem", x, config.in_channels, config.stem_width, 3, 2, 1, ConvRole::Prunable);
  x = b.cbl("down0", x, config.stem_width, config.pre_width, 3, 2, 1, ConvRole::Prunable);
  int prev = config.pre_width;
  std::array<std::string, 3> taps;
  for (int l = 0; l < 3; ++l) {
    const int w = config.widths[l];
    const auto prefix = "backbone.l" + std::to_string(l);
    x = b.cbl(prefix + ".down", x, prev, w, 3, 2, 1, ConvRole::Prunable);
    for (int d = 0; d < config.depths[l]; ++d) {
      x = b.resunit(prefix + ".res" + std::to_string(d), x, w, config.attention, l);
    }
    taps[l] = x;
    prev = w;
  }
  const auto necks = config.neck == NeckKind::Ffafpm
                         ? b.ffafpm("neck", taps, config.widths, config.neck_width)
                         : b.fpn_baseline("neck", taps, config.widths, config.neck_width);
  const int out_channels = static_cast<int>(config.anchors.per_head()) * (5 + config.num_classes);
  std::vector<std::string> heads;
  for (int h = 0; h < 3; ++h) {
    const auto prefix = "head" + std::to_string(h);
    auto y = b.cbl(prefix + ".conv", necks[h], config.neck_width, config.neck_width, 3, 1, 1, ConvRole::Prunable);
    heads.push_back(b.conv(prefix + ".out", y, config.neck_width, out_channels, 1, 1, 1, true, ConvRole::HeadOutput));
  }
  g.outputs() = heads;
  initialize_parameters(g, seed);
  g.validate_detector();
  return g;
}

}  // namespace infrayolo
