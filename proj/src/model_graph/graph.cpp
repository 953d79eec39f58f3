#include "infrayolo/graph.hpp"

#include <algorithm>
#include <deque>
#include <set>

#include "infrayolo/error.hpp"

namespace infrayolo {

const char* to_string(NodeKind kind) {
  switch (kind) {
    case NodeKind::Input: return "input";
    case NodeKind::Conv2d: return "conv2d";
    case NodeKind::BatchNorm: return "bn";
    case NodeKind::Activation: return "activation";
    case NodeKind::Upsample: return "upsample";
    case NodeKind::Concat: return "concat";
    case NodeKind::Add: return "add";
    case NodeKind::Msam: return "msam";
  }
  return "?";
}

const char* to_string(ConvRole role) {
  switch (role) {
    case ConvRole::Prunable: return "prunable";
    case ConvRole::PreMsam: return "pre_msam";
    case ConvRole::PreFfa: return "pre_ffa";
    case ConvRole::HeadOutput: return "head_output";
  }
  return "?";
}

NodeKind node_kind_from_string(const std::string& s) {
  for (auto k : {NodeKind::Input, NodeKind::Conv2d, NodeKind::BatchNorm, NodeKind::Activation,
                 NodeKind::Upsample, NodeKind::Concat, NodeKind::Add, NodeKind::Msam}) {
    if (s == to_string(k)) return k;
  }
  fail(ErrorKind::Io, "unknown node kind '" + s + "'");
}

ConvRole conv_role_from_string(const std::string& s) {
  for (auto r : {ConvRole::Prunable, ConvRole::PreMsam, ConvRole::PreFfa, ConvRole::HeadOutput}) {
    if (s == to_string(r)) return r;
  }
  fail(ErrorKind::Io, "unknown conv role '" + s + "'");
}

bool LayerNode::has_tag(const std::string& tag) const {
  return std::find(tags.begin(), tags.end(), tag) != tags.end();
}

std::string weight_name(const std::string& node) { return node + ".weight"; }
std::string bias_name(const std::string& node) { return node + ".bias"; }
std::string gamma_name(const std::string& node) { return node + ".gamma"; }
std::string beta_name(const std::string& node) { return node + ".beta"; }
std::string running_mean_name(const std::string& node) { return node + ".running_mean"; }
std::string running_var_name(const std::string& node) { return node + ".running_var"; }

// ---------------------------------------------------------------------------

void ModelGraph::add_node(LayerNode node) {
  if (node_index_.count(node.name)) fail(ErrorKind::Graph, "duplicate node name '" + node.name + "'");
  node_index_[node.name] = nodes_.size();
  nodes_.push_back(std::move(node));
}

void ModelGraph::add_param(const std::string& name, Tensor value, bool trainable) {
  if (param_index_.count(name)) fail(ErrorKind::Graph, "duplicate parameter '" + name + "'");
  value.set_requires_grad(trainable);
  param_index_[name] = params_.size();
  params_.push_back(NamedParam{name, std::move(value), trainable});
}

const LayerNode& ModelGraph::node(const std::string& name) const {
  auto it = node_index_.find(name);
  if (it == node_index_.end()) fail(ErrorKind::Graph, "no node named '" + name + "'");
  return nodes_[it->second];
}

LayerNode& ModelGraph::mutable_node(const std::string& name) {
  auto it = node_index_.find(name);
  if (it == node_index_.end()) fail(ErrorKind::Graph, "no node named '" + name + "'");
  return nodes_[it->second];
}

bool ModelGraph::has_node(const std::string& name) const { return node_index_.count(name) > 0; }

std::vector<std::string> ModelGraph::consumers(const std::string& name) const {
  std::vector<std::string> out;
  for (const auto& n : nodes_) {
    if (std::find(n.inputs.begin(), n.inputs.end(), name) != n.inputs.end()) out.push_back(n.name);
  }
  return out;
}

bool ModelGraph::has_param(const std::string& name) const { return param_index_.count(name) > 0; }

const Tensor& ModelGraph::param(const std::string& name) const {
  auto it = param_index_.find(name);
  if (it == param_index_.end()) fail(ErrorKind::Graph, "no parameter named '" + name + "'");
  return params_[it->second].value;
}

Tensor& ModelGraph::param(const std::string& name) {
  auto it = param_index_.find(name);
  if (it == param_index_.end()) fail(ErrorKind::Graph, "no parameter named '" + name + "'");
  return params_[it->second].value;
}

void ModelGraph::set_param(const std::string& name, Tensor value) {
  auto it = param_index_.find(name);
  if (it == param_index_.end()) fail(ErrorKind::Graph, "no parameter named '" + name + "'");
  auto& slot = params_[it->second];
  value.set_requires_grad(slot.trainable);
  slot.value = std::move(value);
}

std::vector<Tensor> ModelGraph::trainable_parameters() const {
  std::vector<Tensor> out;
  for (const auto& p : params_) {
    if (p.trainable) out.push_back(p.value);
  }
  return out;
}

std::vector<std::string> ModelGraph::input_names() const {
  std::vector<std::string> out;
  for (const auto& n : nodes_) {
    if (n.kind == NodeKind::Input) out.push_back(n.name);
  }
  return out;
}

std::vector<std::size_t> ModelGraph::topological_order() const {
  std::vector<int> indegree(nodes_.size(), 0);
  std::vector<std::vector<std::size_t>> users(nodes_.size());
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    for (const auto& in : nodes_[i].inputs) {
      auto it = node_index_.find(in);
      if (it == node_index_.end()) {
        fail(ErrorKind::Graph, "node '" + nodes_[i].name + "' has dangling input '" + in + "'");
      }
      users[it->second].push_back(i);
      ++indegree[i];
    }
  }
  // Kahn's algorithm; ties resolved by declaration order.
  std::set<std::size_t> ready;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (indegree[i] == 0) ready.insert(i);
  }
  std::vector<std::size_t> order;
  while (!ready.empty()) {
    const auto i = *ready.begin();
    ready.erase(ready.begin());
    order.push_back(i);
    for (auto u : users[i]) {
      if (--indegree[u] == 0) ready.insert(u);
    }
  }
  if (order.size() != nodes_.size()) {
    std::string stuck;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (indegree[i] > 0) stuck += (stuck.empty() ? "" : ", ") + nodes_[i].name;
    }
    fail(ErrorKind::Graph, "graph contains a cycle through: " + stuck);
  }
  return order;
}

namespace {

void expect_param_shape(const ModelGraph& g, const std::string& name, const Shape& shape) {
  if (!g.has_param(name)) fail(ErrorKind::Graph, "missing parameter '" + name + "'");
  if (g.param(name).shape() != shape) {
    fail(ErrorKind::Graph, "parameter '" + name + "' has shape " + shape_to_string(g.param(name).shape()) +
                               ", expected " + shape_to_string(shape));
  }
}

}  // namespace

void ModelGraph::validate() const {
  const auto order = topological_order();
  std::vector<int> channels(nodes_.size(), 0);
  for (auto i : order) {
    const auto& n = nodes_[i];
    std::vector<int> in_ch;
    for (const auto& in : n.inputs) in_ch.push_back(channels[node_index_.at(in)]);
    auto require_inputs = [&](std::size_t count) {
      if (n.inputs.size() != count) {
        fail(ErrorKind::Graph, "node '" + n.name + "' expects " + std::to_string(count) + " input(s), has " +
                                   std::to_string(n.inputs.size()));
      }
    };
    auto require_channels = [&](int have, int want) {
      if (have != want) {
        fail(ErrorKind::Graph, "channel mismatch at '" + n.name + "': input carries " + std::to_string(have) +
                                   " channels, node expects " + std::to_string(want));
      }
    };
    switch (n.kind) {
      case NodeKind::Input:
        require_inputs(0);
        if (n.channels_out < 1) fail(ErrorKind::Graph, "input '" + n.name + "' has no channels");
        break;
      case NodeKind::Conv2d:
        require_inputs(1);
        require_channels(in_ch[0], n.channels_in);
        if (n.kernel < 1 || n.stride < 1 || n.dilation < 1 || n.channels_out < 1) {
          fail(ErrorKind::Graph, "conv '" + n.name + "' has invalid hyperparameters");
        }
        expect_param_shape(*this, weight_name(n.name), {n.channels_out, n.channels_in, n.kernel, n.kernel});
        if (n.bias) expect_param_shape(*this, bias_name(n.name), {n.channels_out});
        break;
      case NodeKind::BatchNorm:
        require_inputs(1);
        require_channels(in_ch[0], n.channels_in);
        for (const auto& p : {gamma_name(n.name), beta_name(n.name), running_mean_name(n.name),
                              running_var_name(n.name)}) {
          expect_param_shape(*this, p, {n.channels_in});
        }
        break;
      case NodeKind::Activation:
      case NodeKind::Upsample:
        require_inputs(1);
        require_channels(in_ch[0], n.channels_in);
        if (n.kind == NodeKind::Upsample && n.factor < 1) {
          fail(ErrorKind::Graph, "upsample '" + n.name + "' has factor < 1");
        }
        break;
      case NodeKind::Msam: {
        require_inputs(1);
        require_channels(in_ch[0], n.channels_in);
        const int r = n.reduced;
        if (r < 2 || r % 2 != 0) fail(ErrorKind::Graph, "msam '" + n.name + "' has invalid reduced width");
        const int span = n.channel_positions.empty() ? n.channels_in : n.channel_span;
        if (!n.channel_positions.empty()) {
          if (static_cast<int>(n.channel_positions.size()) != n.channels_in) {
            fail(ErrorKind::Graph, "msam '" + n.name + "' channel positions do not match channel count");
          }
          for (std::size_t j = 0; j < n.channel_positions.size(); ++j) {
            const int p = n.channel_positions[j];
            if (p < 0 || p >= span || (j > 0 && p <= n.channel_positions[j - 1])) {
              fail(ErrorKind::Graph, "msam '" + n.name + "' has unordered or out-of-range channel positions");
            }
          }
        }
        expect_param_shape(*this, n.name + ".conv1.weight", {r, n.channels_in, 1, 1});
        expect_param_shape(*this, n.name + ".conv1.bias", {r});
        expect_param_shape(*this, n.name + ".conv2.weight", {r / 2, r / 2, 3, 3});
        expect_param_shape(*this, n.name + ".conv2.bias", {r / 2});
        expect_param_shape(*this, n.name + ".conv3.weight", {r / 2, r / 2, 3, 3});
        expect_param_shape(*this, n.name + ".conv3.bias", {r / 2});
        expect_param_shape(*this, n.name + ".conv4.weight", {1, r, 1, 1});
        expect_param_shape(*this, n.name + ".conv4.bias", {1});
        expect_param_shape(*this, n.name + ".conv5.weight", {1, 1, 3});
        break;
      }
      case NodeKind::Add:
        if (n.inputs.size() < 2) fail(ErrorKind::Graph, "add '" + n.name + "' needs at least two inputs");
        for (auto c : in_ch) require_channels(c, n.channels_out);
        break;
      case NodeKind::Concat: {
        if (n.inputs.empty()) fail(ErrorKind::Graph, "concat '" + n.name + "' has no inputs");
        int total = 0;
        for (auto c : in_ch) total += c;
        require_channels(total, n.channels_out);
        break;
      }
    }
    channels[i] = n.channels_out;
    if (n.kind != NodeKind::Conv2d && n.kind != NodeKind::Input && n.kind != NodeKind::Add &&
        n.kind != NodeKind::Concat && n.channels_out != n.channels_in) {
      fail(ErrorKind::Graph, "node '" + n.name + "' must preserve its channel count");
    }
  }
  for (const auto& out : outputs_) {
    if (!has_node(out)) fail(ErrorKind::Graph, "output '" + out + "' is not a node");
  }
}

void ModelGraph::validate_detector() const {
  validate();
  if (outputs_.size() != 3) {
    fail(ErrorKind::Graph, "detector must have exactly three prediction branches, has " +
                               std::to_string(outputs_.size()));
  }
  const auto fields = 5 + detector_.num_classes;
  for (std::size_t h = 0; h < 3; ++h) {
    const auto& n = node(outputs_[h]);
    const auto expected = static_cast<int>(detector_.anchors.heads[h].size()) * fields;
    if (n.channels_out != expected) {
      fail(ErrorKind::Graph, "head '" + n.name + "' emits " + std::to_string(n.channels_out) +
                                 " channels, expected " + std::to_string(expected));
    }
  }
}

// ---------------------------------------------------------------------------

BatchNormState ModelGraph::bn_state(const std::string& bn_node) const {
  BatchNormState s;
  s.gamma = param(gamma_name(bn_node));
  s.beta = param(beta_name(bn_node));
  s.running_mean = param(running_mean_name(bn_node));
  s.running_var = param(running_var_name(bn_node));
  return s;
}

Tensor ModelGraph::run_msam(const LayerNode& n, const Tensor& x) {
  const auto B = x.dim(0), C = x.dim(1);
  // Channel attention: global pool, then a 1-D conv across the channel axis.
  Tensor att1 = reshape(adaptive_avg_pool(x), {B, 1, C});
  if (!n.channel_positions.empty()) {
    std::vector<std::int64_t> pos(n.channel_positions.begin(), n.channel_positions.end());
    att1 = index_scatter(att1, 2, pos, n.channel_span);
    att1 = conv1d(att1, param(n.name + ".conv5.weight"));
    att1 = index_select(att1, 2, pos);
  } else {
    att1 = conv1d(att1, param(n.name + ".conv5.weight"));
  }
  att1 = reshape(att1, {B, C, 1, 1});

  // Spatial attention: reduce, split, two dilated stacks, fuse to one map.
  Tensor att2 = conv2d(x, param(n.name + ".conv1.weight"), param(n.name + ".conv1.bias"));
  auto [near, far] = split_halves(att2, 1);
  const Tensor& w2 = param(n.name + ".conv2.weight");
  const Tensor& b2 = param(n.name + ".conv2.bias");
  const Tensor& w3 = param(n.name + ".conv3.weight");
  const Tensor& b3 = param(n.name + ".conv3.bias");
  near = conv2d(conv2d(near, w2, b2, {1, 1, 1}), w2, b2, {1, 1, 1});
  far = conv2d(conv2d(far, w3, b3, {1, 4, 4}), w3, b3, {1, 4, 4});
  att2 = conv2d(concat({near, far}, 1), param(n.name + ".conv4.weight"), param(n.name + ".conv4.bias"));

  return mul(x, sigmoid(mul(att1, att2)));
}

std::map<std::string, Tensor> ModelGraph::run(const std::map<std::string, Tensor>& feeds, bool training,
                                              bool keep_all) {
  const auto order = topological_order();
  std::vector<Tensor> values(nodes_.size());
  // Drop intermediates once their last consumer ran.
  std::vector<int> remaining(nodes_.size(), 0);
  for (const auto& n : nodes_) {
    for (const auto& in : n.inputs) ++remaining[node_index_.at(in)];
  }
  std::set<std::string> wanted(outputs_.begin(), outputs_.end());

  for (auto i : order) {
    const auto& n = nodes_[i];
    auto in = [&](std::size_t j) -> const Tensor& { return values[node_index_.at(n.inputs[j])]; };
    Tensor out;
    switch (n.kind) {
      case NodeKind::Input: {
        auto it = feeds.find(n.name);
        if (it == feeds.end()) fail(ErrorKind::Graph, "no feed for input '" + n.name + "'");
        if (it->second.rank() != 4 || it->second.dim(1) != n.channels_out) {
          fail(ErrorKind::Shape, "input '" + n.name + "' expects [B," + std::to_string(n.channels_out) +
                                     ",H,W], got " + shape_to_string(it->second.shape()));
        }
        out = it->second;
        break;
      }
      case NodeKind::Conv2d:
        out = conv2d(in(0), param(weight_name(n.name)), n.bias ? param(bias_name(n.name)) : Tensor(),
                     {n.stride, n.padding, n.dilation});
        break;
      case NodeKind::BatchNorm: {
        auto st = bn_state(n.name);
        out = batch_norm(in(0), st, training);
        break;
      }
      case NodeKind::Activation:
        out = leaky_relu(in(0), n.slope);
        break;
      case NodeKind::Upsample:
        out = upsample_nearest(in(0), n.factor);
        break;
      case NodeKind::Concat: {
        std::vector<Tensor> parts;
        for (std::size_t j = 0; j < n.inputs.size(); ++j) parts.push_back(in(j));
        out = concat(parts, 1);
        break;
      }
      case NodeKind::Add: {
        std::vector<Tensor> terms;
        for (std::size_t j = 0; j < n.inputs.size(); ++j) terms.push_back(in(j));
        out = add_n(terms);
        break;
      }
      case NodeKind::Msam:
        out = run_msam(n, in(0));
        break;
    }
    values[i] = std::move(out);
    if (!keep_all) {
      for (const auto& name : n.inputs) {
        const auto j = node_index_.at(name);
        if (--remaining[j] == 0 && !wanted.count(name)) values[j] = Tensor();
      }
    }
  }
  std::map<std::string, Tensor> result;
  if (keep_all) {
    for (std::size_t i = 0; i < nodes_.size(); ++i) result[nodes_[i].name] = values[i];
  } else {
    for (const auto& o : outputs_) result[o] = values[node_index_.at(o)];
  }
  return result;
}

std::vector<Tensor> ModelGraph::forward(const Tensor& input, bool training) {
  const auto inputs = input_names();
  if (inputs.size() != 1) fail(ErrorKind::Graph, "forward() needs a single-input graph");
  auto values = run({{inputs.front(), input}}, training);
  std::vector<Tensor> out;
  for (const auto& o : outputs_) out.push_back(values.at(o));
  return out;
}

std::map<std::string, NodeShape> ModelGraph::infer_shapes(const std::map<std::string, NodeShape>& input_shapes) const {
  validate();
  std::map<std::string, NodeShape> shapes;
  for (auto i : topological_order()) {
    const auto& n = nodes_[i];
    NodeShape s;
    switch (n.kind) {
      case NodeKind::Input: {
        auto it = input_shapes.find(n.name);
        if (it == input_shapes.end()) fail(ErrorKind::Shape, "no static shape for input '" + n.name + "'");
        s = it->second;
        s.channels = n.channels_out;
        break;
      }
      case NodeKind::Conv2d: {
        const auto& src = shapes.at(n.inputs[0]);
        Conv2dOptions opt{n.stride, n.padding, n.dilation};
        s = {n.channels_out, conv_output_extent(src.height, n.kernel, opt), conv_output_extent(src.width, n.kernel, opt)};
        if (s.height < 1 || s.width < 1) fail(ErrorKind::Shape, "conv '" + n.name + "' output collapses to zero size");
        break;
      }
      case NodeKind::Upsample: {
        const auto& src = shapes.at(n.inputs[0]);
        s = {src.channels, src.height * n.factor, src.width * n.factor};
        break;
      }
      case NodeKind::Add:
      case NodeKind::Concat: {
        s = shapes.at(n.inputs[0]);
        for (const auto& in : n.inputs) {
          const auto& o = shapes.at(in);
          if (o.height != s.height || o.width != s.width) {
            fail(ErrorKind::Shape, "spatial mismatch at '" + n.name + "': " + std::to_string(o.height) + "x" +
                                       std::to_string(o.width) + " vs " + std::to_string(s.height) + "x" +
                                       std::to_string(s.width));
          }
        }
        s.channels = n.channels_out;
        break;
      }
      default:
        s = shapes.at(n.inputs[0]);
        break;
    }
    shapes[n.name] = s;
  }
  return shapes;
}

std::map<std::string, NodeShape> ModelGraph::infer_shapes(std::int64_t height, std::int64_t width) const {
  std::map<std::string, NodeShape> in;
  for (const auto& name : input_names()) in[name] = {0, height, width};
  return infer_shapes(in);
}

ModelGraph ModelGraph::clone() const {
  ModelGraph g;
  g.nodes_ = nodes_;
  g.node_index_ = node_index_;
  g.outputs_ = outputs_;
  g.detector_ = detector_;
  g.param_index_ = param_index_;
  g.params_.reserve(params_.size());
  for (const auto& p : params_) {
    Tensor v = p.value.detach().clone();
    v.set_requires_grad(p.trainable);
    g.params_.push_back(NamedParam{p.name, v, p.trainable});
  }
  return g;
}

std::optional<std::string> bn_after_conv(const ModelGraph& graph, const std::string& conv) {
  for (const auto& c : graph.consumers(conv)) {
    if (graph.node(c).kind == NodeKind::BatchNorm) return c;
  }
  return std::nullopt;
}

}  // namespace infrayolo
