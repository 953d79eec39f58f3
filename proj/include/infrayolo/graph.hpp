#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "infrayolo/ops.hpp"
#include "infrayolo/tensor.hpp"

namespace infrayolo {

enum class NodeKind { Input, Conv2d, BatchNorm, Activation, Upsample, Concat, Add, Msam };

// Prunability class of a conv2d node. Every conv carries exactly one.
enum class ConvRole { Prunable, PreMsam, PreFfa, HeadOutput };

const char* to_string(NodeKind kind);
const char* to_string(ConvRole role);
NodeKind node_kind_from_string(const std::string& s);
ConvRole conv_role_from_string(const std::string& s);

struct LayerNode {
  std::string name;
  NodeKind kind = NodeKind::Input;
  std::vector<std::string> inputs;

  int channels_in = 0;
  int channels_out = 0;
  int kernel = 1;
  int stride = 1;
  int padding = 0;
  int dilation = 1;
  bool bias = false;
  double slope = 0.1;  // leaky ReLU
  int factor = 1;      // upsample

  // Multi-scale attention: internal reduced width (C/16), plus the original
  // channel layout seen by the 1-D channel convolution. An empty position
  // list means channel i sits at position i.
  int reduced = 0;
  int channel_span = 0;
  std::vector<int> channel_positions;

  ConvRole role = ConvRole::Prunable;
  int level = -1;  // backbone level of a ResUnit member, -1 elsewhere
  std::vector<std::string> tags;

  bool has_tag(const std::string& tag) const;
};

struct Anchor {
  double w = 0.0;
  double h = 0.0;
};

// Per-head (w,h) priors in pixels, heads ordered by stride 8, 16, 32.
struct AnchorSet {
  std::array<std::vector<Anchor>, 3> heads;
  std::size_t per_head() const { return heads[0].size(); }
};

struct DetectorInfo {
  int num_classes = 0;
  int input_height = 0;
  int input_width = 0;
  AnchorSet anchors;
};

struct NamedParam {
  std::string name;
  Tensor value;
  bool trainable = true;
};

// Static per-node output extents (batch excluded).
struct NodeShape {
  std::int64_t channels = 0;
  std::int64_t height = 0;
  std::int64_t width = 0;
};

class ModelGraph {
 public:
  void add_node(LayerNode node);
  void add_param(const std::string& name, Tensor value, bool trainable = true);

  const std::vector<LayerNode>& nodes() const { return nodes_; }
  std::vector<LayerNode>& mutable_nodes() { return nodes_; }
  const LayerNode& node(const std::string& name) const;
  LayerNode& mutable_node(const std::string& name);
  bool has_node(const std::string& name) const;
  // Nodes that list `name` among their inputs.
  std::vector<std::string> consumers(const std::string& name) const;

  const std::vector<NamedParam>& params() const { return params_; }
  std::vector<NamedParam>& mutable_params() { return params_; }
  bool has_param(const std::string& name) const;
  const Tensor& param(const std::string& name) const;
  Tensor& param(const std::string& name);
  void set_param(const std::string& name, Tensor value);
  std::vector<Tensor> trainable_parameters() const;

  std::vector<std::string>& outputs() { return outputs_; }
  const std::vector<std::string>& outputs() const { return outputs_; }
  std::vector<std::string> input_names() const;

  DetectorInfo& detector() { return detector_; }
  const DetectorInfo& detector() const { return detector_; }

  // Rejects duplicate names, dangling inputs, cycles, channel mismatches and
  // parameter shapes that disagree with the node hyperparameters.
  void validate() const;
  // Detector contract on top of validate(): three head outputs.
  void validate_detector() const;
  std::vector<std::size_t> topological_order() const;

  // Executes the graph. Every Input node must be fed. Returns output tensors
  // keyed by node name; with keep_all every intermediate is returned.
  std::map<std::string, Tensor> run(const std::map<std::string, Tensor>& feeds, bool training,
                                    bool keep_all = false);
  // Single-input convenience; returns outputs in outputs() order.
  std::vector<Tensor> forward(const Tensor& input, bool training);

  std::map<std::string, NodeShape> infer_shapes(const std::map<std::string, NodeShape>& input_shapes) const;
  std::map<std::string, NodeShape> infer_shapes(std::int64_t height, std::int64_t width) const;

  BatchNormState bn_state(const std::string& bn_node) const;

  // Deep copy: parameters and buffers are independent of the source.
  ModelGraph clone() const;

 private:
  Tensor run_msam(const LayerNode& node, const Tensor& x);

  std::vector<LayerNode> nodes_;
  std::unordered_map<std::string, std::size_t> node_index_;
  std::vector<NamedParam> params_;
  std::unordered_map<std::string, std::size_t> param_index_;
  std::vector<std::string> outputs_;
  DetectorInfo detector_;
};

// Parameter names derived from a node name.
std::string weight_name(const std::string& node);
std::string bias_name(const std::string& node);
std::string gamma_name(const std::string& node);
std::string beta_name(const std::string& node);
std::string running_mean_name(const std::string& node);
std::string running_var_name(const std::string& node);

// The BN node directly consuming a conv, if any.
std::optional<std::string> bn_after_conv(const ModelGraph& graph, const std::string& conv);

}  // namespace infrayolo
