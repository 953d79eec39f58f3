#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "infrayolo/detect.hpp"
#include "infrayolo/distill.hpp"
#include "infrayolo/graph.hpp"
#include "infrayolo/prune.hpp"
#include "infrayolo/synth.hpp"

namespace infrayolo {

extern const char* const kToolVersion;

struct LrSchedule {
  enum class Mode { Cosine, Step };
  Mode mode = Mode::Cosine;
  double initial = 0.01;
  double final_lr = 0.0005;  // cosine end point
  int warmup_epochs = 0;
  double warmup_factor = 0.1;  // lr multiplier at the first warmup epoch
  // Step mode: multiply by gamma at the first fraction, gamma^2 at the second.
  std::array<double, 2> step_at{0.7, 0.9};
  double step_gamma = 0.01;

  double at(int epoch, int epochs) const;
  void validate() const;

  static LrSchedule train_default();
  static LrSchedule sparsify_default();
};

struct AugmentOptions {
  double mosaic = 0.5;
  double flip = 0.5;
  bool jitter = true;
};

struct EvalOptions {
  double conf = 0.001;      // detections kept for the PR curve
  double nms_iou = 0.45;
  double pr_conf = 0.25;    // operating point for precision / recall
  double match_iou = 0.5;
  int batch = 16;
};

struct TrainOptions {
  int epochs = 60;
  int batch = 16;
  LrSchedule lr;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  AugmentOptions augment;
  LossWeights loss;
  std::uint64_t seed = 1;
  double sparsity_lambda = 0.0;  // > 0 adds the BN L1 penalty
  DistillConfig distill;          // used when a teacher is supplied
  int eval_every = 1;             // 0: evaluate only after the last epoch
  EvalOptions eval;
};

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  StepStats loss;  // means over the epoch's steps
  bool evaluated = false;
  double precision = 0.0;
  double recall = 0.0;
  double map = 0.0;
  double near_zero_gamma = 0.0;  // fraction of |gamma| < 1e-3
  double seconds = 0.0;
};

using EpochCallback = std::function<void(const EpochLog&)>;

// Mini-batch SGD over `train`. With a teacher the steps are distillation
// steps; with sparsity_lambda > 0 the BN penalty is applied. Non-finite
// losses abort with the epoch and step in the message.
std::vector<EpochLog> train_model(ModelGraph& model, const std::vector<Sample>& train,
                                  const std::vector<Sample>* test, const TrainOptions& options,
                                  ModelGraph* teacher = nullptr, const EpochCallback& on_epoch = {});

std::vector<std::vector<Detection>> predict(ModelGraph& model, const std::vector<Sample>& samples,
                                            const EvalOptions& options = {});
EvalResult evaluate_model(ModelGraph& model, const std::vector<Sample>& samples, const EvalOptions& options = {});

// Every |gamma| of the BN layers the sparsity penalty touches.
std::vector<double> sparsity_gammas(const ModelGraph& model);
double near_zero_fraction(const ModelGraph& model, double eps = 1e-3);
// log10 |gamma| histogram rows: lower edge, upper edge, count.
std::string gamma_histogram_csv(const ModelGraph& model);

std::string epoch_csv(const std::vector<EpochLog>& log);

// Median wall-clock milliseconds of a single-image eval forward.
double forward_latency_ms(ModelGraph& model, int repeats = 5);

struct CurvePoint {
  int scheme = 2;
  double ratio = 0.0;
  std::int64_t params = 0;
  std::int64_t flops = 0;
  double prunable_reduction = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double map = 0.0;
  double latency_ms = 0.0;
};

struct CurveOptions {
  int scheme = 2;
  std::vector<double> ratios;
  WeightPolicy policy = WeightPolicy::Default;
  TrainOptions finetune;
  bool distill = false;
};

// Prune at each ratio, fine-tune, evaluate. Ratios are visited in order.
std::vector<CurvePoint> prune_curve(const ModelGraph& model, const std::vector<Sample>& train,
                                    const std::vector<Sample>& test, const CurveOptions& options,
                                    const std::function<void(const CurvePoint&)>& on_point = {});
std::string curve_csv(const std::vector<CurvePoint>& points);

// Default ratio grid: 0.1..0.9 for scheme 2, 0.1..0.7 plus 0.79 for scheme 1.
std::vector<double> default_ratio_grid(int scheme);

// Spearman rank correlation (average ranks for ties).
double spearman(const std::vector<double>& a, const std::vector<double>& b);

// Git blob hash: sha1("blob <size>\0" + content), lowercase hex.
std::string git_blob_sha1(const std::string& content);
std::string file_git_sha1(const std::filesystem::path& path);

// Per-node params and FLOPs as text.
std::string flops_table(const ModelGraph& model, std::int64_t height, std::int64_t width);

}  // namespace infrayolo
