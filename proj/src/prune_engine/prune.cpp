#include "infrayolo/prune.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>

#include "infrayolo/builders.hpp"
#include "infrayolo/error.hpp"

namespace infrayolo {

namespace {

bool role_excluded(ConvRole role, int scheme) {
  if (role == ConvRole::PreFfa || role == ConvRole::HeadOutput) return true;
  return scheme == 1 && role == ConvRole::PreMsam;
}

int find_root(std::vector<int>& parent, int i) {
  while (parent[static_cast<std::size_t>(i)] != i) {
    parent[static_cast<std::size_t>(i)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(i)])];
    i = parent[static_cast<std::size_t>(i)];
  }
  return i;
}

std::vector<double> abs_gamma(const ModelGraph& graph, const std::string& bn) {
  std::vector<double> out;
  for (double v : graph.param(gamma_name(bn)).data()) out.push_back(std::abs(v));
  return out;
}

// Rows and input-channel columns of a [Cout, Cin, ...] tensor.
Tensor select_channels(const Tensor& t, const std::vector<int>& rows, const std::vector<int>& cols) {
  const auto& s = t.shape();
  const std::int64_t cin = s.size() > 1 ? s[1] : 1;
  std::int64_t inner = 1;
  for (std::size_t i = 2; i < s.size(); ++i) inner *= s[i];
  Shape ns = s;
  ns[0] = static_cast<std::int64_t>(rows.size());
  if (s.size() > 1) ns[1] = static_cast<std::int64_t>(cols.size());
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(shape_numel(ns)));
  const double* d = t.data().data();
  for (int r : rows) {
    if (s.size() == 1) {
      out.push_back(d[r]);
      continue;
    }
    for (int c : cols) {
      const double* src = d + (static_cast<std::int64_t>(r) * cin + c) * inner;
      out.insert(out.end(), src, src + inner);
    }
  }
  return Tensor(ns, std::move(out));
}

std::vector<int> iota_vec(int n) {
  std::vector<int> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), 0);
  return v;
}

}  // namespace

double max_prune_ratio(int scheme) {
  check_scheme(scheme);
  return scheme == 1 ? 0.795 : 0.937;
}

void check_scheme(int scheme) {
  if (scheme != 1 && scheme != 2) fail(ErrorKind::Config, "pruning scheme must be 1 or 2, got " + std::to_string(scheme));
}

std::vector<std::string> sparsity_bn_layers(const ModelGraph& graph) {
  std::vector<std::string> out;
  for (const auto& n : graph.nodes()) {
    if (n.kind != NodeKind::BatchNorm) continue;
    const auto& src = graph.node(n.inputs[0]);
    if (src.kind == NodeKind::Conv2d && src.role == ConvRole::PreFfa) continue;
    out.push_back(n.name);
  }
  return out;
}

void apply_sparsity_penalty(ModelGraph& graph, double lambda) {
  if (!(lambda > 0.0)) fail(ErrorKind::Config, "sparsity penalty must be positive");
  const auto layers = sparsity_bn_layers(graph);
  bool any_grad = false;
  for (const auto& bn : layers) any_grad |= graph.param(gamma_name(bn)).has_grad();
  if (!any_grad) fail(ErrorKind::Autograd, "apply_sparsity_penalty: no gradients present; call backward() first");
  for (const auto& bn : layers) {
    const auto& gamma = graph.param(gamma_name(bn));
    auto g = gamma.mutable_grad();
    auto d = gamma.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (d[i] > 0) g[i] += lambda;
      else if (d[i] < 0) g[i] -= lambda;
    }
  }
}

std::vector<std::string> LayerSelection::prunable() const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < convs.size(); ++i) {
    if (!excluded[i]) out.push_back(convs[i]);
  }
  return out;
}

LayerSelection select_layers(const ModelGraph& graph, int scheme) {
  check_scheme(scheme);
  LayerSelection sel;
  std::map<std::string, int> index;
  for (const auto& n : graph.nodes()) {
    if (n.kind != NodeKind::Conv2d) continue;
    auto bn = bn_after_conv(graph, n.name);
    if (!bn) continue;
    index[n.name] = static_cast<int>(sel.convs.size());
    sel.convs.push_back(n.name);
    sel.bns.push_back(*bn);
  }
  const int L = static_cast<int>(sel.convs.size());
  std::vector<int> parent(static_cast<std::size_t>(L));
  std::iota(parent.begin(), parent.end(), 0);
  std::vector<bool> pinned(static_cast<std::size_t>(L), false);

  // Convs whose channels flow unchanged into `name`; `pinned` is set when a
  // graph input, concat or BN-less conv also feeds it.
  std::function<void(const std::string&, std::vector<int>&, bool&)> sources =
      [&](const std::string& name, std::vector<int>& out, bool& pin) {
        const auto& n = graph.node(name);
        switch (n.kind) {
          case NodeKind::Conv2d: {
            auto it = index.find(name);
            if (it == index.end()) pin = true;
            else out.push_back(it->second);
            break;
          }
          case NodeKind::BatchNorm:
          case NodeKind::Activation:
          case NodeKind::Upsample:
          case NodeKind::Msam:
            sources(n.inputs[0], out, pin);
            break;
          case NodeKind::Add:
            for (const auto& in : n.inputs) sources(in, out, pin);
            break;
          case NodeKind::Input:
          case NodeKind::Concat:
            pin = true;
            break;
        }
      };
  for (const auto& n : graph.nodes()) {
    if (n.kind != NodeKind::Add) continue;
    std::vector<int> members;
    bool pin = false;
    sources(n.name, members, pin);
    for (std::size_t i = 1; i < members.size(); ++i) {
      const int a = find_root(parent, members[0]), b = find_root(parent, members[i]);
      if (a != b) parent[static_cast<std::size_t>(b)] = a;
    }
    if (pin) {
      for (int m : members) pinned[static_cast<std::size_t>(m)] = true;
    }
  }
  std::map<int, int> group_id;
  std::map<int, bool> group_excluded;
  for (int i = 0; i < L; ++i) {
    const int root = find_root(parent, i);
    if (!group_id.count(root)) group_id[root] = static_cast<int>(group_id.size());
    const bool ex = pinned[static_cast<std::size_t>(i)] ||
                    role_excluded(graph.node(sel.convs[static_cast<std::size_t>(i)]).role, scheme);
    group_excluded[root] = group_excluded[root] || ex;
  }
  for (int i = 0; i < L; ++i) {
    const int root = find_root(parent, i);
    sel.group.push_back(group_id[root]);
    sel.excluded.push_back(group_excluded[root]);
  }
  return sel;
}

double compute_threshold(const ModelGraph& graph, double ratio, int scheme) {
  check_scheme(scheme);
  if (!(ratio >= 0.0 && ratio < 1.0)) fail(ErrorKind::Config, "pruning ratio must lie in [0, 1)");
  const auto sel = select_layers(graph, scheme);
  std::vector<double> all;
  for (std::size_t i = 0; i < sel.convs.size(); ++i) {
    if (sel.excluded[i]) continue;
    const auto g = abs_gamma(graph, sel.bns[i]);
    all.insert(all.end(), g.begin(), g.end());
  }
  if (all.empty()) fail(ErrorKind::Graph, "no prunable layers under scheme " + std::to_string(scheme));
  std::sort(all.begin(), all.end());
  const auto idx = static_cast<std::size_t>(std::floor(static_cast<double>(all.size()) * ratio));
  const double thr = all[std::min(idx, all.size() - 1)];
  if (ratio > max_prune_ratio(scheme)) {
    std::string emptied;
    for (std::size_t i = 0; i < sel.convs.size(); ++i) {
      if (sel.excluded[i]) continue;
      const auto g = abs_gamma(graph, sel.bns[i]);
      if (*std::max_element(g.begin(), g.end()) <= thr) emptied += (emptied.empty() ? "" : ", ") + sel.convs[i];
    }
    char buf[160];
    std::snprintf(buf, sizeof(buf), "pruning ratio %.4g exceeds the scheme %d maximum %.3f", ratio, scheme,
                  max_prune_ratio(scheme));
    fail(ErrorKind::Config, std::string(buf) + (emptied.empty() ? "" : "; layers emptied: " + emptied));
  }
  return thr;
}

int LayerMask::kept() const { return static_cast<int>(std::count(keep.begin(), keep.end(), 1)); }

const LayerMask* PrunePlan::find(const std::string& conv) const {
  for (const auto& l : layers) {
    if (l.conv == conv) return &l;
  }
  return nullptr;
}

PrunePlan build_masks(const ModelGraph& graph, double threshold, int scheme) {
  const auto sel = select_layers(graph, scheme);
  PrunePlan plan;
  plan.scheme = scheme;
  plan.threshold = threshold;
  for (std::size_t i = 0; i < sel.convs.size(); ++i) {
    LayerMask m;
    m.conv = sel.convs[i];
    m.bn = sel.bns[i];
    m.excluded = sel.excluded[i];
    m.group = sel.group[i];
    const auto g = abs_gamma(graph, m.bn);
    m.keep.assign(g.size(), 1);
    if (!m.excluded) {
      for (std::size_t c = 0; c < g.size(); ++c) m.keep[c] = g[c] > threshold ? 1 : 0;
      if (m.kept() == 0) {
        m.keep[static_cast<std::size_t>(std::max_element(g.begin(), g.end()) - g.begin())] = 1;
      }
    }
    plan.layers.push_back(std::move(m));
  }
  // Union within add groups.
  std::map<int, std::vector<std::uint8_t>> merged;
  for (const auto& m : plan.layers) {
    auto& u = merged[m.group];
    if (u.empty()) u.assign(m.keep.size(), 0);
    for (std::size_t c = 0; c < m.keep.size(); ++c) u[c] |= m.keep[c];
  }
  for (auto& m : plan.layers) m.keep = merged[m.group];
  return plan;
}

PrunePlan make_plan(const ModelGraph& graph, double ratio, int scheme) {
  const double thr = compute_threshold(graph, ratio, scheme);
  auto plan = build_masks(graph, thr, scheme);
  plan.ratio = ratio;
  return plan;
}

ModelGraph apply_prune(const ModelGraph& graph, const PrunePlan& plan, WeightPolicy policy, std::uint64_t seed) {
  check_scheme(plan.scheme);
  graph.validate();
  std::map<std::string, const LayerMask*> masks;
  for (const auto& l : plan.layers) {
    if (!graph.has_node(l.conv) || graph.node(l.conv).kind != NodeKind::Conv2d) {
      fail(ErrorKind::Graph, "plan refers to unknown conv '" + l.conv + "'");
    }
    if (static_cast<int>(l.keep.size()) != graph.node(l.conv).channels_out) {
      fail(ErrorKind::Graph, "plan mask for '" + l.conv + "' has the wrong channel count");
    }
    if (l.kept() == 0) fail(ErrorKind::Graph, "plan empties layer '" + l.conv + "'");
    masks[l.conv] = &l;
  }

  ModelGraph out;
  out.detector() = graph.detector();
  out.outputs() = graph.outputs();
  std::map<std::string, std::vector<int>> kept;
  std::map<std::string, Tensor> new_params;
  const auto order = graph.topological_order();
  std::vector<LayerNode> nodes = graph.nodes();
  for (auto i : order) {
    auto& n = nodes[i];
    const auto in_kept = [&](std::size_t j) -> const std::vector<int>& { return kept.at(n.inputs[j]); };
    switch (n.kind) {
      case NodeKind::Input:
        kept[n.name] = iota_vec(n.channels_out);
        break;
      case NodeKind::Conv2d: {
        const auto& cols = in_kept(0);
        std::vector<int> rows;
        auto it = masks.find(n.name);
        if (it != masks.end()) {
          for (std::size_t c = 0; c < it->second->keep.size(); ++c) {
            if (it->second->keep[c]) rows.push_back(static_cast<int>(c));
          }
        } else {
          rows = iota_vec(n.channels_out);
        }
        new_params[weight_name(n.name)] = select_channels(graph.param(weight_name(n.name)), rows, cols);
        if (n.bias) new_params[bias_name(n.name)] = select_channels(graph.param(bias_name(n.name)), rows, {});
        n.channels_in = static_cast<int>(cols.size());
        n.channels_out = static_cast<int>(rows.size());
        kept[n.name] = rows;
        break;
      }
      case NodeKind::BatchNorm: {
        const auto& k = in_kept(0);
        for (const auto& p : {gamma_name(n.name), beta_name(n.name), running_mean_name(n.name),
                              running_var_name(n.name)}) {
          new_params[p] = select_channels(graph.param(p), k, {});
        }
        n.channels_in = n.channels_out = static_cast<int>(k.size());
        kept[n.name] = k;
        break;
      }
      case NodeKind::Activation:
      case NodeKind::Upsample: {
        const auto& k = in_kept(0);
        n.channels_in = n.channels_out = static_cast<int>(k.size());
        kept[n.name] = k;
        break;
      }
      case NodeKind::Msam: {
        const auto& k = in_kept(0);
        const int C = n.channels_in;
        if (static_cast<int>(k.size()) != C) {
          std::vector<int> positions;
          for (int c : k) {
            positions.push_back(n.channel_positions.empty() ? c : n.channel_positions[static_cast<std::size_t>(c)]);
          }
          if (n.channel_positions.empty()) n.channel_span = C;
          n.channel_positions = positions;
        }
        const auto r = iota_vec(n.reduced);
        new_params[n.name + ".conv1.weight"] = select_channels(graph.param(n.name + ".conv1.weight"), r, k);
        n.channels_in = n.channels_out = static_cast<int>(k.size());
        kept[n.name] = k;
        break;
      }
      case NodeKind::Add: {
        const auto& k = in_kept(0);
        for (std::size_t j = 1; j < n.inputs.size(); ++j) {
          if (in_kept(j) != k) {
            fail(ErrorKind::Graph, "plan keeps different channels on the inputs of add '" + n.name + "'");
          }
        }
        n.channels_in = n.channels_out = static_cast<int>(k.size());
        kept[n.name] = k;
        break;
      }
      case NodeKind::Concat: {
        std::vector<int> k;
        int offset = 0;
        for (std::size_t j = 0; j < n.inputs.size(); ++j) {
          for (int c : in_kept(j)) k.push_back(offset + c);
          offset += graph.node(n.inputs[j]).channels_out;
        }
        n.channels_out = static_cast<int>(k.size());
        kept[n.name] = k;
        break;
      }
    }
  }
  for (auto& n : nodes) out.add_node(std::move(n));
  for (const auto& p : graph.params()) {
    auto it = new_params.find(p.name);
    out.add_param(p.name, it != new_params.end() ? it->second : p.value.clone(), p.trainable);
  }
  const bool reinit = policy == WeightPolicy::Reinitialize || (policy == WeightPolicy::Default && plan.scheme == 2);
  if (reinit) initialize_parameters(out, seed);
  out.validate();
  return out;
}

std::string format_plan_report(const PrunePlan& plan) {
  std::ostringstream o;
  char buf[256];
  std::snprintf(buf, sizeof(buf), "scheme %d  ratio %.4f  threshold %.6g\n", plan.scheme, plan.ratio, plan.threshold);
  o << buf;
  int kept = 0, total = 0;
  for (const auto& l : plan.layers) {
    std::snprintf(buf, sizeof(buf), "%-40s %5d / %-5d group %-3d%s\n", l.conv.c_str(), l.kept(),
                  static_cast<int>(l.keep.size()), l.group, l.excluded ? "  excluded" : "");
    o << buf;
    kept += l.kept();
    total += static_cast<int>(l.keep.size());
  }
  std::snprintf(buf, sizeof(buf), "total channels kept %d / %d\n", kept, total);
  o << buf;
  return o.str();
}

std::int64_t count_layer_params(const ModelGraph& graph, const std::vector<std::string>& convs) {
  std::int64_t n = 0;
  for (const auto& c : convs) {
    n += graph.param(weight_name(c)).numel();
    if (graph.node(c).bias) n += graph.param(bias_name(c)).numel();
    if (auto bn = bn_after_conv(graph, c)) {
      n += graph.param(gamma_name(*bn)).numel() + graph.param(beta_name(*bn)).numel();
    }
  }
  return n;
}

}  // namespace infrayolo
