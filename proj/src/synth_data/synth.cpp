#include "infrayolo/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "infrayolo/error.hpp"

namespace infrayolo {

namespace {

std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

struct PixelBox {
  double x1, y1, x2, y2;
  double w() const { return x2 - x1; }
  double h() const { return y2 - y1; }
};

double overlap_iou(const PixelBox& a, const PixelBox& b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  return inter / (a.w() * a.h() + b.w() * b.h() - inter);
}

}  // namespace

int area_bin(double area_px) {
  if (area_px < kSmallArea) return 0;
  if (area_px <= kLargeArea) return 1;
  return 2;
}

SceneSpec SceneSpec::desk() { return SceneSpec{}; }

SceneSpec SceneSpec::fidelity() {
  SceneSpec s;
  s.height = 360;
  s.width = 480;
  s.size_fractions = {0.856, 0.134, 0.010};
  s.min_area = 16.0;
  s.max_objects = 10;
  return s;
}

void SceneSpec::validate() const {
  if (height < 8 || width < 8) fail(ErrorKind::Config, "scene: image must be at least 8x8");
  double total = 0;
  for (double f : size_fractions) {
    if (f < 0) fail(ErrorKind::Config, "scene: negative size fraction");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) fail(ErrorKind::Config, "scene: size fractions must sum to 1");
  if (!(person_fraction >= 0 && person_fraction <= 1)) fail(ErrorKind::Config, "scene: person fraction outside [0,1]");
  if (min_objects < 1 || max_objects < min_objects) fail(ErrorKind::Config, "scene: bad object count range");
  if (!(min_area >= 9.0 && min_area < kSmallArea)) fail(ErrorKind::Config, "scene: min_area must lie in [9, 1024)");
  if (!(noise >= 0) || !(min_peak >= 3 * noise) || !(max_peak >= min_peak)) {
    fail(ErrorKind::Config, "scene: target peak must be at least 3 noise sigmas");
  }
  // Largest box the frame can hold, with 1 px margin on each side.
  const double frame = static_cast<double>(height - 2) * (width - 2);
  if (size_fractions[1] > 0 && frame < kSmallArea) {
    fail(ErrorKind::Config, "scene: medium boxes do not fit a " + std::to_string(width) + "x" +
                                std::to_string(height) + " image");
  }
  if (size_fractions[2] > 0 && frame <= kLargeArea) {
    fail(ErrorKind::Config, "scene: large boxes (> 96x96) do not fit a " + std::to_string(width) + "x" +
                                std::to_string(height) + " image");
  }
}

Sample generate_sample(const SceneSpec& spec, std::int64_t index) {
  spec.validate();
  auto rng = stream_rng(spec.seed, static_cast<std::uint64_t>(index));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int H = spec.height, W = spec.width;
  const double frame = static_cast<double>(H - 2) * (W - 2);

  const double base = 0.15 + 0.15 * unit(rng);
  const double sx = spec.gradient * (2 * unit(rng) - 1), sy = spec.gradient * (2 * unit(rng) - 1);
  std::vector<double> img(static_cast<std::size_t>(H) * W);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      img[static_cast<std::size_t>(y) * W + x] = base + sx * ((x + 0.5) / W - 0.5) + sy * ((y + 0.5) / H - 0.5);
    }
  }

  std::discrete_distribution<int> bin_dist(spec.size_fractions.begin(), spec.size_fractions.end());
  const int count = std::uniform_int_distribution<int>(spec.min_objects, spec.max_objects)(rng);
  Sample sample;
  std::vector<PixelBox> placed;
  for (int k = 0; k < count; ++k) {
    const bool person = unit(rng) < spec.person_fraction;
    const int bin = bin_dist(rng);
    double lo = bin == 0 ? spec.min_area : bin == 1 ? kSmallArea : std::nextafter(kLargeArea, 1e300);
    double hi = bin == 0 ? std::nextafter(kSmallArea, 0.0) : bin == 1 ? kLargeArea : frame;
    // Keep medium boxes small enough that several fit one frame.
    hi = std::min(hi, std::max(lo, 0.35 * frame));
    double w = 0, h = 0;
    bool fits = false;
    for (int attempt = 0; attempt < 200 && !fits; ++attempt) {
      const double area = std::exp(std::log(lo) + (std::log(hi) - std::log(lo)) * unit(rng));
      const double aspect = person ? 0.3 + 0.3 * unit(rng) : 1.5 + 1.0 * unit(rng);
      w = std::sqrt(area * aspect);
      h = area / w;
      fits = w <= W - 2 && h <= H - 2 && area >= lo && area <= hi;
    }
    if (!fits) fail(ErrorKind::Config, "scene: cannot place a size-bin " + std::to_string(bin) + " box");
    PixelBox box{};
    for (int attempt = 0; attempt < 50; ++attempt) {
      const double cx = 1 + w / 2 + (W - 2 - w) * unit(rng);
      const double cy = 1 + h / 2 + (H - 2 - h) * unit(rng);
      box = PixelBox{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
      bool clear = true;
      for (const auto& p : placed) clear = clear && overlap_iou(box, p) < 0.05;
      if (clear) break;
    }
    placed.push_back(box);

    const double peak = spec.min_peak + (spec.max_peak - spec.min_peak) * unit(rng);
    const double cx = (box.x1 + box.x2) / 2, cy = (box.y1 + box.y2) / 2;
    const int x0 = std::max(0, static_cast<int>(std::floor(box.x1))), x1 = std::min(W, static_cast<int>(std::ceil(box.x2)));
    const int y0 = std::max(0, static_cast<int>(std::floor(box.y1))), y1 = std::min(H, static_cast<int>(std::ceil(box.y2)));
    for (int y = y0; y < y1; ++y) {
      for (int x = x0; x < x1; ++x) {
        const double u = (x + 0.5 - cx) / (w / 2), v = (y + 0.5 - cy) / (h / 2);
        const double r2 = u * u + v * v;
        if (r2 > 1.0) continue;
        double val = peak * std::exp(-1.5 * r2 * r2);
        // Cars get a cooler band across the middle, people a warmer head.
        if (!person) val *= 1.0 - 0.35 * std::exp(-(v * v) / 0.09);
        else if (v < -0.5) val *= 1.15;
        auto& px = img[static_cast<std::size_t>(y) * W + x];
        px = std::max(px, base + val);
      }
    }
    GroundTruth gt;
    gt.cls = person ? 0 : 1;
    gt.box = Box{cx / W, cy / H, w / W, h / H};
    sample.labels.push_back(gt);
  }

  std::normal_distribution<double> noise(0.0, spec.noise);
  sample.image.height = H;
  sample.image.width = W;
  sample.image.pixels.resize(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) sample.image.pixels[i] = to_byte(img[i] + noise(rng));
  return sample;
}

std::vector<Sample> generate_dataset(const SceneSpec& spec, std::int64_t count) {
  if (count < 1) fail(ErrorKind::Argument, "generate_dataset: need at least one image");
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) out.push_back(generate_sample(spec, i));
  return out;
}

std::array<double, 3> size_histogram(const std::vector<Sample>& samples) {
  std::array<double, 3> h{0, 0, 0};
  double n = 0;
  for (const auto& s : samples) {
    for (const auto& g : s.labels) {
      h[static_cast<std::size_t>(area_bin(g.box.w * s.image.width * g.box.h * s.image.height))] += 1;
      n += 1;
    }
  }
  if (n > 0) {
    for (auto& v : h) v /= n;
  }
  return h;
}

void write_pgm(const std::filesystem::path& path, const Image& image) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::Io, "cannot write " + path.string());
  f << "P5\n" << image.width << " " << image.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!f) fail(ErrorKind::Io, "short write to " + path.string());
}

Image read_pgm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::Io, "cannot open " + path.string());
  auto token = [&]() {
    std::string t;
    char c;
    while (f.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(f, skip);
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        if (!t.empty()) break;
      } else {
        t += c;
      }
    }
    return t;
  };
  if (token() != "P5") fail(ErrorKind::Io, path.string() + ": not a binary PGM");
  Image img;
  int maxval = 0;
  try {
    img.width = std::stoi(token());
    img.height = std::stoi(token());
    maxval = std::stoi(token());
  } catch (const std::exception&) {
    fail(ErrorKind::Io, path.string() + ": malformed PGM header");
  }
  if (img.width < 1 || img.height < 1 || maxval != 255) fail(ErrorKind::Io, path.string() + ": unsupported PGM");
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
  f.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (f.gcount() != static_cast<std::streamsize>(img.pixels.size())) fail(ErrorKind::Io, path.string() + ": truncated");
  return img;
}

std::filesystem::path write_dataset(const std::filesystem::path& dir, const SceneSpec& spec, std::int64_t count) {
  spec.validate();
  if (count < 1) fail(ErrorKind::Argument, "write_dataset: need at least one image");
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "labels");
  std::vector<std::int64_t> order(static_cast<std::size_t>(count));
  std::iota(order.begin(), order.end(), 0);
  auto rng = stream_rng(spec.seed, 0xA11CE5ULL << 20);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::int64_t>(std::llround(0.8 * static_cast<double>(count)));
  std::vector<std::string> split(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) split[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = i < n_train ? "train" : "test";

  const auto manifest = dir / "manifest.txt";
  std::ofstream m(manifest);
  if (!m) fail(ErrorKind::Io, "cannot write " + manifest.string());
  m << "# infrayolo dataset " << spec.width << "x" << spec.height << " seed " << spec.seed << " count " << count
    << "\n";
  for (std::int64_t i = 0; i < count; ++i) {
    char stem[32];
    std::snprintf(stem, sizeof(stem), "%06lld", static_cast<long long>(i));
    const auto sample = generate_sample(spec, i);
    const std::string img = std::string("images/") + stem + ".pgm", lab = std::string("labels/") + stem + ".txt";
    write_pgm(dir / img, sample.image);
    write_labels((dir / lab).string(), sample.labels);
    m << split[static_cast<std::size_t>(i)] << " " << img << " " << lab << "\n";
  }
  if (!m) fail(ErrorKind::Io, "short write to " + manifest.string());
  return manifest;
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& manifest) {
  std::ifstream f(manifest);
  if (!f) fail(ErrorKind::Io, "cannot open manifest " + manifest.string());
  std::vector<ManifestEntry> out;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream is(line);
    ManifestEntry e;
    if (!(is >> e.split >> e.image >> e.labels) || (e.split != "train" && e.split != "test")) {
      fail(ErrorKind::Io, manifest.string() + ":" + std::to_string(lineno) + ": malformed manifest line");
    }
    out.push_back(e);
  }
  return out;
}

std::vector<Sample> load_split(const std::filesystem::path& manifest, const std::string& split) {
  if (split != "train" && split != "test" && split != "all") {
    fail(ErrorKind::Argument, "unknown split '" + split + "'");
  }
  const auto base = manifest.parent_path();
  std::vector<Sample> out;
  for (const auto& e : read_manifest(manifest)) {
    if (split != "all" && e.split != split) continue;
    Sample s;
    s.image = read_pgm(base / e.image);
    s.labels = read_labels((base / e.labels).string());
    out.push_back(std::move(s));
  }
  return out;
}

MosaicResult mosaic_at(const std::vector<Sample>& inputs, int split_x, int split_y) {
  if (inputs.size() != 4) {
    fail(ErrorKind::Argument, "mosaic needs four inputs, got " + std::to_string(inputs.size()));
  }
  const int H = inputs[0].image.height, W = inputs[0].image.width;
  for (const auto& s : inputs) {
    if (s.image.height != H || s.image.width != W) fail(ErrorKind::Argument, "mosaic inputs differ in size");
  }
  if (split_x < 1 || split_x >= W || split_y < 1 || split_y >= H) fail(ErrorKind::Argument, "mosaic centre outside image");
  MosaicResult r;
  r.split_x = split_x;
  r.split_y = split_y;
  auto& out = r.sample;
  out.image.height = H;
  out.image.width = W;
  out.image.pixels.assign(static_cast<std::size_t>(H) * W, 0);
  for (int k = 0; k < 4; ++k) {
    const bool right = k % 2 == 1, bottom = k >= 2;
    const int qx0 = right ? split_x : 0, qx1 = right ? W : split_x;
    const int qy0 = bottom ? split_y : 0, qy1 = bottom ? H : split_y;
    const int dx = right ? split_x : split_x - W, dy = bottom ? split_y : split_y - H;
    const auto& src = inputs[static_cast<std::size_t>(k)];
    for (int y = qy0; y < qy1; ++y) {
      for (int x = qx0; x < qx1; ++x) {
        out.image.pixels[static_cast<std::size_t>(y) * W + x] = src.image.at(y - dy, x - dx);
      }
    }
    for (const auto& g : src.labels) {
      const double x1 = std::max<double>(qx0, g.box.x1() * W + dx), x2 = std::min<double>(qx1, g.box.x2() * W + dx);
      const double y1 = std::max<double>(qy0, g.box.y1() * H + dy), y2 = std::min<double>(qy1, g.box.y2() * H + dy);
      if (x2 - x1 < 2.0 || y2 - y1 < 2.0) continue;
      GroundTruth t;
      t.cls = g.cls;
      t.box = Box{(x1 + x2) / (2.0 * W), (y1 + y2) / (2.0 * H), (x2 - x1) / W, (y2 - y1) / H};
      out.labels.push_back(t);
    }
  }
  return r;
}

MosaicResult mosaic(const std::vector<Sample>& inputs, std::uint64_t seed) {
  if (inputs.size() != 4) {
    fail(ErrorKind::Argument, "mosaic needs four inputs, got " + std::to_string(inputs.size()));
  }
  std::mt19937_64 rng(seed);
  const int H = inputs[0].image.height, W = inputs[0].image.width;
  const int sx = std::uniform_int_distribution<int>(std::max(1, W / 4), std::max(1, 3 * W / 4))(rng);
  const int sy = std::uniform_int_distribution<int>(std::max(1, H / 4), std::max(1, 3 * H / 4))(rng);
  return mosaic_at(inputs, sx, sy);
}

void photometric_jitter(Image& image, std::uint64_t seed, double brightness, double contrast, double noise) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const double b = brightness * u(rng), c = 1.0 + contrast * u(rng);
  double mean = 0;
  for (auto p : image.pixels) mean += p;
  mean /= 255.0 * static_cast<double>(std::max<std::size_t>(1, image.pixels.size()));
  std::normal_distribution<double> n(0.0, noise > 0 ? noise : 1.0);
  for (auto& p : image.pixels) {
    const double v = (p / 255.0 - mean) * c + mean + b + (noise > 0 ? n(rng) : 0.0);
    p = to_byte(v);
  }
}

void flip_horizontal(Sample& sample) {
  auto& img = sample.image;
  for (int y = 0; y < img.height; ++y) {
    auto row = img.pixels.begin() + static_cast<std::ptrdiff_t>(y) * img.width;
    std::reverse(row, row + img.width);
  }
  for (auto& g : sample.labels) g.box.cx = 1.0 - g.box.cx;
}

Batch make_batch(const std::vector<const Sample*>& samples) {
  if (samples.empty()) fail(ErrorKind::Argument, "make_batch: no samples");
  const int H = samples[0]->image.height, W = samples[0]->image.width;
  std::vector<double> data;
  data.reserve(samples.size() * static_cast<std::size_t>(H) * W);
  Batch b;
  for (const auto* s : samples) {
    if (s->image.height != H || s->image.width != W) fail(ErrorKind::Shape, "make_batch: image sizes differ");
    for (auto p : s->image.pixels) data.push_back(p / 255.0);
    b.labels.push_back(s->labels);
  }
  b.images = Tensor({static_cast<std::int64_t>(samples.size()), 1, H, W}, std::move(data));
  return b;
}

}  // namespace infrayolo
