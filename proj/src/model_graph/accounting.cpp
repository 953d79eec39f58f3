#include "infrayolo/accounting.hpp"

namespace infrayolo {

std::int64_t count_params(const ModelGraph& graph) {
  std::int64_t total = 0;
  for (const auto& p : graph.params()) {
    if (p.trainable) total += p.value.numel();
  }
  return total;
}

namespace {

std::int64_t conv_cost(std::int64_t k, std::int64_t cin, std::int64_t cout, std::int64_t plane, bool bias) {
  return 2 * k * k * cin * cout * plane + (bias ? cout * plane : 0);
}

}  // namespace

std::vector<NodeFlops> flops_by_node(const ModelGraph& graph, std::int64_t height, std::int64_t width) {
  const auto shapes = graph.infer_shapes(height, width);
  std::vector<NodeFlops> out;
  for (auto i : graph.topological_order()) {
    const auto& n = graph.nodes()[i];
    const auto& s = shapes.at(n.name);
    const std::int64_t plane = s.height * s.width;
    const std::int64_t elems = s.channels * plane;
    std::int64_t f = 0;
    switch (n.kind) {
      case NodeKind::Conv2d:
        f = conv_cost(n.kernel, n.channels_in, n.channels_out, plane, n.bias);
        break;
      case NodeKind::BatchNorm:
        f = 2 * elems;
        break;
      case NodeKind::Activation:
        f = elems;
        break;
      case NodeKind::Add:
        f = static_cast<std::int64_t>(n.inputs.size() - 1) * elems;
        break;
      case NodeKind::Msam: {
        const std::int64_t c = n.channels_in, r = n.reduced;
        const std::int64_t span = n.channel_positions.empty() ? c : n.channel_span;
        f += elems;                                       // pooling
        f += 2 * 3 * span;                                // channel conv
        f += conv_cost(1, c, r, plane, true);             // reduce
        f += 4 * conv_cost(3, r / 2, r / 2, plane, true); // two dilated stacks, two taps each
        f += conv_cost(1, r, 1, plane, true);             // fuse to one map
        f += 3 * elems;                                   // att1*att2, sigmoid, x*gate
        break;
      }
      default:
        break;
    }
    out.push_back(NodeFlops{n.name, n.kind, f});
  }
  return out;
}

std::int64_t count_flops(const ModelGraph& graph, std::int64_t height, std::int64_t width) {
  std::int64_t total = 0;
  for (const auto& nf : flops_by_node(graph, height, width)) total += nf.flops;
  return total;
}

std::int64_t count_conv_flops(const ModelGraph& graph, std::int64_t height, std::int64_t width) {
  std::int64_t total = 0;
  for (const auto& nf : flops_by_node(graph, height, width)) {
    if (nf.kind == NodeKind::Conv2d) total += nf.flops;
  }
  return total;
}

}  // namespace infrayolo
