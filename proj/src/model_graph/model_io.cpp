#include "infrayolo/model_io.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

#include "infrayolo/error.hpp"

namespace infrayolo {

namespace {

static_assert(std::endian::native == std::endian::little, "model files assume a little-endian host");

std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) fail(ErrorKind::Io, "bad number '" + s + "'");
  return v;
}

int parse_int(const std::string& s) {
  int v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) fail(ErrorKind::Io, "bad integer '" + s + "'");
  return v;
}

template <typename T, typename Fn>
std::string join(const std::vector<T>& items, Fn&& fn) {
  if (items.empty()) return "-";
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += ',';
    out += fn(items[i]);
  }
  return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  if (s == "-") return out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  return out;
}

void check_token(const std::string& s) {
  if (s.empty() || s.find_first_of(" \t\n,=") != std::string::npos) {
    fail(ErrorKind::Io, "name '" + s + "' cannot be serialized");
  }
}

std::string node_line(const LayerNode& n) {
  check_token(n.name);
  for (const auto& i : n.inputs) check_token(i);
  for (const auto& t : n.tags) check_token(t);
  std::ostringstream o;
  o << "node " << n.name << " kind=" << to_string(n.kind)
    << " inputs=" << join(n.inputs, [](const std::string& s) { return s; }) << " cin=" << n.channels_in
    << " cout=" << n.channels_out << " k=" << n.kernel << " s=" << n.stride << " p=" << n.padding
    << " d=" << n.dilation << " bias=" << (n.bias ? 1 : 0) << " slope=" << fmt_double(n.slope)
    << " factor=" << n.factor << " role=" << to_string(n.role) << " level=" << n.level << " reduced=" << n.reduced
    << " span=" << n.channel_span
    << " positions=" << join(n.channel_positions, [](int v) { return std::to_string(v); })
    << " tags=" << join(n.tags, [](const std::string& s) { return s; });
  return o.str();
}

LayerNode parse_node(const std::string& line) {
  std::istringstream in(line);
  std::string word;
  LayerNode n;
  in >> word >> n.name;
  while (in >> word) {
    const auto eq = word.find('=');
    if (eq == std::string::npos) fail(ErrorKind::Io, "malformed node field '" + word + "'");
    const auto key = word.substr(0, eq);
    const auto val = word.substr(eq + 1);
    if (key == "kind") n.kind = node_kind_from_string(val);
    else if (key == "inputs") n.inputs = split(val, ',');
    else if (key == "cin") n.channels_in = parse_int(val);
    else if (key == "cout") n.channels_out = parse_int(val);
    else if (key == "k") n.kernel = parse_int(val);
    else if (key == "s") n.stride = parse_int(val);
    else if (key == "p") n.padding = parse_int(val);
    else if (key == "d") n.dilation = parse_int(val);
    else if (key == "bias") n.bias = parse_int(val) != 0;
    else if (key == "slope") n.slope = parse_double(val);
    else if (key == "factor") n.factor = parse_int(val);
    else if (key == "role") n.role = conv_role_from_string(val);
    else if (key == "level") n.level = parse_int(val);
    else if (key == "reduced") n.reduced = parse_int(val);
    else if (key == "span") n.channel_span = parse_int(val);
    else if (key == "positions") {
      for (const auto& p : split(val, ',')) n.channel_positions.push_back(parse_int(p));
    } else if (key == "tags") n.tags = split(val, ',');
    else fail(ErrorKind::Io, "unknown node field '" + key + "'");
  }
  return n;
}

std::string anchors_text(const AnchorSet& a) {
  std::ostringstream o;
  o << "anchors";
  for (std::size_t h = 0; h < 3; ++h) {
    o << ' ' << join(a.heads[h], [](const Anchor& x) { return fmt_double(x.w) + "x" + fmt_double(x.h); });
  }
  return o.str();
}

}  // namespace

std::string topology_text(const ModelGraph& graph) {
  std::ostringstream o;
  const auto& d = graph.detector();
  o << "detector classes=" << d.num_classes << " input=" << d.input_height << "x" << d.input_width << "\n";
  o << anchors_text(d.anchors) << "\n";
  for (const auto& n : graph.nodes()) o << node_line(n) << "\n";
  o << "outputs " << join(graph.outputs(), [](const std::string& s) { return s; }) << "\n";
  return o.str();
}

void save_model(const ModelGraph& graph, std::ostream& out) {
  out << "INFRAYOLO-MODEL\n";
  out << "version " << kModelFormatVersion << "\n";
  out << topology_text(graph);
  for (const auto& p : graph.params()) {
    check_token(p.name);
    out << "param " << p.name << ' ' << (p.trainable ? 1 : 0) << ' '
        << join(p.value.shape(), [](std::int64_t v) { return std::to_string(v); }) << "\n";
  }
  out << "data\n";
  std::vector<float> buf;
  for (const auto& p : graph.params()) {
    buf.resize(static_cast<std::size_t>(p.value.numel()));
    auto d = p.value.data();
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(d[i]);
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!out) fail(ErrorKind::Io, "failed writing model");
}

void save_model(const ModelGraph& graph, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::Io, "cannot open '" + path + "' for writing");
  save_model(graph, out);
}

ModelGraph load_model(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "INFRAYOLO-MODEL") fail(ErrorKind::Io, "not a model file");
  if (!std::getline(in, line) || line != "version " + std::to_string(kModelFormatVersion)) {
    fail(ErrorKind::Io, "unsupported model format version: '" + line + "'");
  }
  ModelGraph g;
  struct PendingParam {
    std::string name;
    bool trainable;
    Shape shape;
  };
  std::vector<PendingParam> pending;
  bool saw_data = false;
  while (std::getline(in, line)) {
    if (line == "data") {
      saw_data = true;
      break;
    }
    std::istringstream ls(line);
    std::string head;
    ls >> head;
    if (head == "detector") {
      std::string f;
      while (ls >> f) {
        const auto eq = f.find('=');
        const auto key = f.substr(0, eq), val = f.substr(eq + 1);
        if (key == "classes") g.detector().num_classes = parse_int(val);
        else if (key == "input") {
          const auto x = val.find('x');
          g.detector().input_height = parse_int(val.substr(0, x));
          g.detector().input_width = parse_int(val.substr(x + 1));
        }
      }
    } else if (head == "anchors") {
      for (std::size_t h = 0; h < 3; ++h) {
        std::string f;
        ls >> f;
        for (const auto& a : split(f, ',')) {
          const auto x = a.find('x');
          g.detector().anchors.heads[h].push_back({parse_double(a.substr(0, x)), parse_double(a.substr(x + 1))});
        }
      }
    } else if (head == "node") {
      g.add_node(parse_node(line));
    } else if (head == "outputs") {
      std::string f;
      ls >> f;
      g.outputs() = split(f, ',');
    } else if (head == "param") {
      PendingParam p;
      int trainable = 0;
      std::string dims;
      ls >> p.name >> trainable >> dims;
      p.trainable = trainable != 0;
      for (const auto& d : split(dims, ',')) p.shape.push_back(parse_int(d));
      pending.push_back(std::move(p));
    } else {
      fail(ErrorKind::Io, "unexpected header line '" + line + "'");
    }
  }
  if (!saw_data) fail(ErrorKind::Io, "model file has no data section");
  std::vector<float> buf;
  for (const auto& p : pending) {
    buf.resize(static_cast<std::size_t>(shape_numel(p.shape)));
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!in) fail(ErrorKind::Io, "truncated data for parameter '" + p.name + "'");
    g.add_param(p.name, Tensor(p.shape, std::vector<double>(buf.begin(), buf.end())), p.trainable);
  }
  g.validate();
  return g;
}

ModelGraph load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open model '" + path + "'");
  return load_model(in);
}

}  // namespace infrayolo
