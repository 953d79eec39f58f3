#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "infrayolo/detect.hpp"
#include "infrayolo/train.hpp"

namespace infrayolo {

struct Image {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;  // row-major, single channel

  std::uint8_t at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
};

struct Sample {
  Image image;
  std::vector<GroundTruth> labels;  // normalized boxes
};

// Area bins in pixels: small < 32^2 <= medium <= 96^2 < large.
constexpr double kSmallArea = 32.0 * 32.0;
constexpr double kLargeArea = 96.0 * 96.0;
int area_bin(double area_px);

struct SceneSpec {
  int height = 96;
  int width = 96;
  std::uint64_t seed = 1;
  double person_fraction = 0.66;  // elongated blobs; the rest are wide "cars"
  std::array<double, 3> size_fractions{0.866, 0.134, 0.0};
  double min_area = 64.0;  // pixels
  int min_objects = 1;
  int max_objects = 4;
  double noise = 0.03;  // background noise sigma, intensity in [0, 1]
  double min_peak = 0.25;
  double max_peak = 0.5;
  double gradient = 0.1;  // max background slope across the image

  // 96x96 desk scale; the large bin cannot hold a box inside the frame.
  static SceneSpec desk();
  // 480x360 with the full three-bin mix.
  static SceneSpec fidelity();
  void validate() const;
};

Sample generate_sample(const SceneSpec& spec, std::int64_t index);
std::vector<Sample> generate_dataset(const SceneSpec& spec, std::int64_t count);

// Realized small/medium/large fractions over every label.
std::array<double, 3> size_histogram(const std::vector<Sample>& samples);

void write_pgm(const std::filesystem::path& path, const Image& image);
Image read_pgm(const std::filesystem::path& path);

struct ManifestEntry {
  std::string split;  // "train" or "test"
  std::string image;  // relative to the manifest directory
  std::string labels;
};

// Writes images/NNNNNN.pgm, labels/NNNNNN.txt and manifest.txt under `dir`
// with a seeded 0.8/0.2 train/test split. Returns the manifest path.
std::filesystem::path write_dataset(const std::filesystem::path& dir, const SceneSpec& spec, std::int64_t count);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& manifest);
// Samples of one split ("train", "test" or "all").
std::vector<Sample> load_split(const std::filesystem::path& manifest, const std::string& split);

struct MosaicResult {
  Sample sample;
  int split_x = 0;
  int split_y = 0;
};

// 2x2 splice around a random centre. Quadrant k shows the corner of input k
// nearest the centre; boxes are shifted, clipped to their quadrant and
// dropped when narrower or shorter than 2 px.
MosaicResult mosaic(const std::vector<Sample>& inputs, std::uint64_t seed);
// Same with an explicit centre.
MosaicResult mosaic_at(const std::vector<Sample>& inputs, int split_x, int split_y);

// Brightness, contrast and additive noise jitter.
void photometric_jitter(Image& image, std::uint64_t seed, double brightness = 0.08, double contrast = 0.2,
                        double noise = 0.02);

// Left-right mirror of pixels and boxes.
void flip_horizontal(Sample& sample);

// Stacks samples into a [B, 1, H, W] batch scaled to [0, 1].
Batch make_batch(const std::vector<const Sample*>& samples);

}  // namespace infrayolo
