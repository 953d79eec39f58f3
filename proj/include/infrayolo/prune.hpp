#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "infrayolo/graph.hpp"

namespace infrayolo {

// Scheme 1 keeps every conv feeding an attention module or the fusion block
// and can inherit weights; scheme 2 only keeps the conv feeding the fusion
// block and retrains from a fresh initialization.
double max_prune_ratio(int scheme);
void check_scheme(int scheme);

// Adds lambda * sign(gamma) to the gamma gradient of every BN whose conv may
// be pruned (the BN feeding the fusion block is skipped). Call between
// backward() and the optimizer step.
void apply_sparsity_penalty(ModelGraph& graph, double lambda);

// BN layers the penalty applies to.
std::vector<std::string> sparsity_bn_layers(const ModelGraph& graph);

struct LayerSelection {
  // Convs followed by BN, in graph order.
  std::vector<std::string> convs;
  std::vector<std::string> bns;
  // Excluded by role under the scheme, or tied through a residual add to an
  // excluded conv or a graph input.
  std::vector<bool> excluded;
  // Convs whose outputs meet in an add share one group id and one mask.
  std::vector<int> group;

  std::vector<std::string> prunable() const;
};

LayerSelection select_layers(const ModelGraph& graph, int scheme);

// |gamma| at sorted index floor(len * ratio) over all prunable channels.
// Rejects ratios outside [0, 1) or beyond the scheme maximum, naming the
// layers that would be emptied.
double compute_threshold(const ModelGraph& graph, double ratio, int scheme);

struct LayerMask {
  std::string conv;
  std::string bn;
  std::vector<std::uint8_t> keep;
  bool excluded = false;
  int group = -1;

  int kept() const;
};

struct PrunePlan {
  int scheme = 2;
  double ratio = 0.0;
  double threshold = 0.0;
  std::vector<LayerMask> layers;

  const LayerMask* find(const std::string& conv) const;
};

// Channels with |gamma| <= threshold are dropped from prunable layers. A
// layer that would lose everything keeps its largest-|gamma| channel; masks
// within one add group are merged by union.
PrunePlan build_masks(const ModelGraph& graph, double threshold, int scheme);
PrunePlan make_plan(const ModelGraph& graph, double ratio, int scheme);

enum class WeightPolicy { Default, Inherit, Reinitialize };

// New graph with the dropped channels physically removed. Default inherits
// weights under scheme 1 and re-initializes under scheme 2.
ModelGraph apply_prune(const ModelGraph& graph, const PrunePlan& plan, WeightPolicy policy = WeightPolicy::Default,
                       std::uint64_t seed = 1);

// Per-layer kept/total channels plus scheme, ratio and threshold.
std::string format_plan_report(const PrunePlan& plan);

// Parameters (conv weights and BN affine terms) of the named convs.
std::int64_t count_layer_params(const ModelGraph& graph, const std::vector<std::string>& convs);

}  // namespace infrayolo
