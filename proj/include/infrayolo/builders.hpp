#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>

#include "infrayolo/graph.hpp"

namespace infrayolo {

enum class NeckKind { Ffafpm, Yolov3Fpn };

struct ModelConfig {
  int in_channels = 1;
  int input_height = 96;
  int input_width = 96;
  int stem_width = 16;
  int pre_width = 32;
  std::array<int, 3> widths{64, 128, 256};
  std::array<int, 3> depths{1, 1, 1};
  int neck_width = 64;
  int num_classes = 2;
  bool attention = true;
  NeckKind neck = NeckKind::Ffafpm;
  AnchorSet anchors;

  static ModelConfig toy();
  // Darknet53-style widths; too heavy for desk runs, kept for fidelity.
  static ModelConfig darknet53();
  // Same backbone with the plain top-down concat neck.
  static ModelConfig yolov3_baseline();

  void validate() const;
};

AnchorSet default_anchors();

// Appends nodes + zero-shaped parameters to a graph. Call
// initialize_parameters() once the graph is complete.
class GraphBuilder {
 public:
  explicit GraphBuilder(ModelGraph& graph) : graph_(graph) {}

  std::string input(const std::string& name, int channels);
  std::string conv(const std::string& name, const std::string& input, int cin, int cout, int kernel, int stride,
                   int dilation, bool bias, ConvRole role);
  std::string batch_norm(const std::string& name, const std::string& input, int channels);
  std::string activation(const std::string& name, const std::string& input, int channels);
  // conv + BN + leaky ReLU; with use_bn=false the conv carries no bias and
  // no BN is inserted.
  std::string cbl(const std::string& name, const std::string& input, int cin, int cout, int kernel, int stride,
                  int dilation, ConvRole role, bool use_bn = true);
  std::string upsample(const std::string& name, const std::string& input, int channels, int factor);
  std::string add(const std::string& name, const std::vector<std::string>& inputs, int channels);
  std::string concat(const std::string& name, const std::vector<std::string>& inputs, int channels);

  std::string msam(const std::string& name, const std::string& input, int channels);
  std::string resunit(const std::string& name, const std::string& input, int channels, bool attention, int level);
  std::string ffa(const std::string& name, const std::string& input, int channels, bool use_bn = true);
  // Taps ordered shallow to deep. Returns neck outputs at the same strides.
  std::array<std::string, 3> ffafpm(const std::string& name, const std::array<std::string, 3>& taps,
                                    const std::array<int, 3>& tap_channels, int neck_width, bool use_bn = true);
  std::array<std::string, 3> fpn_baseline(const std::string& name, const std::array<std::string, 3>& taps,
                                          const std::array<int, 3>& tap_channels, int neck_width);

  ModelGraph& graph() { return graph_; }

 private:
  void tag_last(const std::string& tag);
  ModelGraph& graph_;
};

// Fresh random initialization of every parameter (also used to re-initialize
// pruned graphs). Head output biases start at a low objectness prior.
void initialize_parameters(ModelGraph& graph, std::uint64_t seed);

ModelGraph build_msam(int channels, std::uint64_t seed = 1);
ModelGraph build_resunit(int channels, bool attention, std::uint64_t seed = 1);
ModelGraph build_ffa(int channels, std::uint64_t seed = 1);
// Inputs "tap0" (shallowest) .. "tap2"; outputs at the tap strides.
ModelGraph build_ffafpm(const std::array<int, 3>& tap_channels, int neck_width, bool use_bn = true,
                        std::uint64_t seed = 1);
ModelGraph build_fpn_baseline(const std::array<int, 3>& tap_channels, int neck_width, std::uint64_t seed = 1);
ModelGraph build_infra_yolo(const ModelConfig& config, std::uint64_t seed = 1);

}  // namespace infrayolo
