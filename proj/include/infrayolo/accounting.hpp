#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "infrayolo/graph.hpp"

namespace infrayolo {

// Trainable parameter count (running statistics excluded).
std::int64_t count_params(const ModelGraph& graph);

struct NodeFlops {
  std::string node;
  NodeKind kind;
  std::int64_t flops = 0;
};

// Static FLOPs for a batch of one at the given input resolution. A conv
// costs 2*k*k*Cin*Cout*H'*W' (+ H'*W'*Cout for a bias); BN costs 2 per
// element, activations and sigmoid 1, an n-way add n-1, pooling 1 per input
// element. Upsample and concat are free.
std::vector<NodeFlops> flops_by_node(const ModelGraph& graph, std::int64_t height, std::int64_t width);
std::int64_t count_flops(const ModelGraph& graph, std::int64_t height, std::int64_t width);
// Same accounting restricted to conv2d nodes (MSAM internals excluded).
std::int64_t count_conv_flops(const ModelGraph& graph, std::int64_t height, std::int64_t width);

}  // namespace infrayolo
