#include "infrayolo/pipeline.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>

#include "infrayolo/accounting.hpp"
#include "infrayolo/error.hpp"

namespace infrayolo {

const char* const kToolVersion = "infrayolo 0.1.0";

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9E3779B97F4A7C15ULL + b + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

void accumulate_stats(StepStats& acc, const StepStats& s) {
  acc.total += s.total;
  acc.box += s.box;
  acc.obj += s.obj;
  acc.cls += s.cls;
  acc.kd_cls += s.kd_cls;
  acc.kd_box += s.kd_box;
}

}  // namespace

double LrSchedule::at(int epoch, int epochs) const {
  if (epochs < 1) fail(ErrorKind::Config, "lr schedule: epochs must be positive");
  double lr = initial;
  if (mode == Mode::Cosine) {
    const double t = epochs > 1 ? static_cast<double>(epoch) / (epochs - 1) : 1.0;
    lr = final_lr + 0.5 * (initial - final_lr) * (1.0 + std::cos(M_PI * std::clamp(t, 0.0, 1.0)));
  } else {
    const double t = static_cast<double>(epoch) / epochs;
    if (t >= step_at[1]) lr = initial * step_gamma * step_gamma;
    else if (t >= step_at[0]) lr = initial * step_gamma;
  }
  if (epoch < warmup_epochs) {
    const double f = warmup_factor + (1.0 - warmup_factor) * static_cast<double>(epoch) / warmup_epochs;
    lr *= f;
  }
  return lr;
}

void LrSchedule::validate() const {
  if (!(initial > 0) || !(final_lr > 0)) fail(ErrorKind::Config, "learning rates must be positive");
  if (warmup_epochs < 0 || !(warmup_factor > 0 && warmup_factor <= 1)) fail(ErrorKind::Config, "bad warmup settings");
  if (!(step_gamma > 0 && step_gamma <= 1) || !(step_at[0] <= step_at[1])) fail(ErrorKind::Config, "bad step settings");
}

LrSchedule LrSchedule::train_default() { return LrSchedule{}; }

LrSchedule LrSchedule::sparsify_default() {
  LrSchedule s;
  s.mode = Mode::Step;
  s.initial = 0.002;
  s.warmup_epochs = 6;
  return s;
}

std::vector<EpochLog> train_model(ModelGraph& model, const std::vector<Sample>& train,
                                  const std::vector<Sample>* test, const TrainOptions& options,
                                  ModelGraph* teacher, const EpochCallback& on_epoch) {
  if (train.empty()) fail(ErrorKind::Argument, "train_model: empty training set");
  if (options.epochs < 1 || options.batch < 1) fail(ErrorKind::Config, "train_model: epochs and batch must be positive");
  options.lr.validate();
  if (options.sparsity_lambda < 0) fail(ErrorKind::Config, "sparsity lambda must be non-negative");
  if (teacher) options.distill.validate();
  auto opt = make_sgd(model, options.momentum, options.weight_decay);
  std::vector<EpochLog> log;
  const auto n = train.size();
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(mix(options.seed, static_cast<std::uint64_t>(epoch)));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const double lr = options.lr.at(epoch, options.epochs);
    EpochLog entry;
    entry.epoch = epoch;
    entry.lr = lr;
    int steps = 0;
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(options.batch)) {
      const auto end = std::min(n, start + static_cast<std::size_t>(options.batch));
      std::vector<Sample> augmented;
      augmented.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) {
        Sample s;
        if (unit(rng) < options.augment.mosaic) {
          std::vector<Sample> four{train[order[i]], train[pick(rng)], train[pick(rng)], train[pick(rng)]};
          s = mosaic(four, rng()).sample;
        } else {
          s = train[order[i]];
        }
        if (unit(rng) < options.augment.flip) flip_horizontal(s);
        if (options.augment.jitter) photometric_jitter(s.image, rng());
        augmented.push_back(std::move(s));
      }
      std::vector<const Sample*> ptrs;
      for (const auto& s : augmented) ptrs.push_back(&s);
      const auto batch = make_batch(ptrs);
      StepStats st;
      try {
        st = teacher ? distill_step(model, *teacher, opt, batch, lr, options.distill, options.loss)
                     : detection_step(model, opt, batch, lr, options.loss, options.sparsity_lambda);
      } catch (const Error& e) {
        fail(e.kind(), "epoch " + std::to_string(epoch) + " step " + std::to_string(steps) + ": " + e.what());
      }
      if (!std::isfinite(st.total)) {
        fail(ErrorKind::Numeric, "non-finite loss at epoch " + std::to_string(epoch) + " step " +
                                     std::to_string(steps) + " (box " + std::to_string(st.box) + ", obj " +
                                     std::to_string(st.obj) + ", cls " + std::to_string(st.cls) + ")");
      }
      accumulate_stats(entry.loss, st);
      ++steps;
    }
    const double inv = 1.0 / steps;
    entry.loss.total *= inv;
    entry.loss.box *= inv;
    entry.loss.obj *= inv;
    entry.loss.cls *= inv;
    entry.loss.kd_cls *= inv;
    entry.loss.kd_box *= inv;
    const bool last = epoch + 1 == options.epochs;
    if (test && !test->empty() &&
        (last || (options.eval_every > 0 && (epoch + 1) % options.eval_every == 0))) {
      const auto r = evaluate_model(model, *test, options.eval);
      entry.evaluated = true;
      entry.precision = r.all.precision.value_or(0.0);
      entry.recall = r.all.recall.value_or(0.0);
      entry.map = r.map();
    }
    entry.near_zero_gamma = near_zero_fraction(model);
    entry.seconds = seconds_since(t0);
    log.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }
  return log;
}

std::vector<std::vector<Detection>> predict(ModelGraph& model, const std::vector<Sample>& samples,
                                            const EvalOptions& options) {
  NoGradGuard guard;
  std::vector<std::vector<Detection>> out;
  const auto bs = static_cast<std::size_t>(std::max(1, options.batch));
  for (std::size_t start = 0; start < samples.size(); start += bs) {
    std::vector<const Sample*> ptrs;
    for (std::size_t i = start; i < std::min(samples.size(), start + bs); ++i) ptrs.push_back(&samples[i]);
    const auto batch = make_batch(ptrs);
    const auto heads = model.forward(batch.images, false);
    for (auto& d : decode_and_nms(heads, model.detector(), options.conf, options.nms_iou)) out.push_back(std::move(d));
  }
  return out;
}

EvalResult evaluate_model(ModelGraph& model, const std::vector<Sample>& samples, const EvalOptions& options) {
  const auto dets = predict(model, samples, options);
  std::vector<std::vector<GroundTruth>> gts;
  for (const auto& s : samples) gts.push_back(s.labels);
  return evaluate(dets, gts, model.detector().num_classes, options.pr_conf, options.match_iou);
}

std::vector<double> sparsity_gammas(const ModelGraph& model) {
  std::vector<double> out;
  for (const auto& bn : sparsity_bn_layers(model)) {
    for (double v : model.param(gamma_name(bn)).data()) out.push_back(std::abs(v));
  }
  return out;
}

double near_zero_fraction(const ModelGraph& model, double eps) {
  const auto g = sparsity_gammas(model);
  if (g.empty()) return 0.0;
  return static_cast<double>(std::count_if(g.begin(), g.end(), [&](double v) { return v < eps; })) /
         static_cast<double>(g.size());
}

std::string gamma_histogram_csv(const ModelGraph& model) {
  // Decades from 1e-6 to 1e1, with an underflow bin for anything smaller.
  std::map<int, int> bins;
  for (double v : sparsity_gammas(model)) {
    int b = v <= 0 ? -7 : static_cast<int>(std::floor(std::log10(v)));
    bins[std::clamp(b, -7, 1)] += 1;
  }
  std::ostringstream o;
  o << "lower,upper,count\n";
  for (int b = -7; b <= 1; ++b) {
    const double lo = b == -7 ? 0.0 : std::pow(10.0, b);
    o << lo << "," << std::pow(10.0, b + 1) << "," << bins[b] << "\n";
  }
  return o.str();
}

std::string epoch_csv(const std::vector<EpochLog>& log) {
  std::ostringstream o;
  o << "epoch,lr,loss,box,obj,cls,kd_cls,kd_box,precision,recall,map50,near_zero_gamma,seconds\n";
  char buf[512];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof(buf), "%d,%.8g,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%s,%s,%s,%.6f,%.2f\n", e.epoch, e.lr,
                  e.loss.total, e.loss.box, e.loss.obj, e.loss.cls, e.loss.kd_cls, e.loss.kd_box,
                  e.evaluated ? std::to_string(e.precision).c_str() : "",
                  e.evaluated ? std::to_string(e.recall).c_str() : "", e.evaluated ? std::to_string(e.map).c_str() : "",
                  e.near_zero_gamma, e.seconds);
    o << buf;
  }
  return o.str();
}

double forward_latency_ms(ModelGraph& model, int repeats) {
  NoGradGuard guard;
  const auto& det = model.detector();
  Tensor x = Tensor::full({1, model.node(model.input_names().front()).channels_out, det.input_height, det.input_width}, 0.5);
  model.forward(x, false);
  std::vector<double> t;
  for (int i = 0; i < std::max(1, repeats); ++i) {
    const auto t0 = Clock::now();
    model.forward(x, false);
    t.push_back(seconds_since(t0) * 1000.0);
  }
  std::sort(t.begin(), t.end());
  return t[t.size() / 2];
}

std::vector<double> default_ratio_grid(int scheme) {
  check_scheme(scheme);
  if (scheme == 2) return {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  return {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.79};
}

std::vector<CurvePoint> prune_curve(const ModelGraph& model, const std::vector<Sample>& train,
                                    const std::vector<Sample>& test, const CurveOptions& options,
                                    const std::function<void(const CurvePoint&)>& on_point) {
  check_scheme(options.scheme);
  const auto& det = model.detector();
  const auto prunable = select_layers(model, options.scheme).prunable();
  const double base = static_cast<double>(count_layer_params(model, prunable));
  ModelGraph teacher = model.clone();
  std::vector<CurvePoint> out;
  for (double g : options.ratios) {
    const auto plan = make_plan(model, g, options.scheme);
    auto pruned = apply_prune(model, plan, options.policy, mix(options.finetune.seed, static_cast<std::uint64_t>(g * 1000)));
    if (options.finetune.epochs > 0) {
      train_model(pruned, train, nullptr, options.finetune, options.distill ? &teacher : nullptr);
    }
    const auto r = evaluate_model(pruned, test, options.finetune.eval);
    CurvePoint p;
    p.scheme = options.scheme;
    p.ratio = g;
    p.params = count_params(pruned);
    p.flops = count_flops(pruned, det.input_height, det.input_width);
    p.prunable_reduction = 1.0 - static_cast<double>(count_layer_params(pruned, prunable)) / base;
    p.precision = r.all.precision.value_or(0.0);
    p.recall = r.all.recall.value_or(0.0);
    p.map = r.map();
    p.latency_ms = forward_latency_ms(pruned);
    out.push_back(p);
    if (on_point) on_point(p);
  }
  return out;
}

std::string curve_csv(const std::vector<CurvePoint>& points) {
  std::ostringstream o;
  o << "scheme,g,params,flops,prunable_reduction,precision,recall,map50,latency_ms\n";
  char buf[256];
  for (const auto& p : points) {
    std::snprintf(buf, sizeof(buf), "%d,%.4f,%lld,%lld,%.6f,%.6f,%.6f,%.6f,%.3f\n", p.scheme, p.ratio,
                  static_cast<long long>(p.params), static_cast<long long>(p.flops), p.prunable_reduction,
                  p.precision, p.recall, p.map, p.latency_ms);
    o << buf;
  }
  return o.str();
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) fail(ErrorKind::Argument, "spearman: need two equal-length series");
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j) + 1.0;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / ra.size();
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / rb.size();
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0 || sbb == 0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

std::string git_blob_sha1(const std::string& content) {
  const std::string header = "blob " + std::to_string(content.size()) + std::string(1, '\0');
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha1(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), header.data(), header.size()) != 1 ||
      EVP_DigestUpdate(ctx.get(), content.data(), content.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), md, &len) != 1) {
    fail(ErrorKind::Io, "sha1 digest failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    const unsigned char c = md[i];
    out += hex[c >> 4];
    out += hex[c & 15];
  }
  return out;
}

std::string file_git_sha1(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::Io, "cannot open " + path.string());
  std::ostringstream s;
  s << f.rdbuf();
  return git_blob_sha1(s.str());
}

std::string flops_table(const ModelGraph& model, std::int64_t height, std::int64_t width) {
  std::ostringstream o;
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%-44s %-10s %14s %12s\n", "node", "kind", "flops", "params");
  o << buf;
  std::map<std::string, std::int64_t> params;
  for (const auto& p : model.params()) {
    if (!p.trainable) continue;
    const auto dot = p.name.rfind('.');
    auto owner = p.name.substr(0, dot);
    // MSAM internals belong to the attention node.
    if (!model.has_node(owner)) owner = owner.substr(0, owner.rfind('.'));
    params[owner] += p.value.numel();
  }
  for (const auto& nf : flops_by_node(model, height, width)) {
    std::snprintf(buf, sizeof(buf), "%-44s %-10s %14lld %12lld\n", nf.node.c_str(), to_string(nf.kind),
                  static_cast<long long>(nf.flops), static_cast<long long>(params[nf.node]));
    o << buf;
  }
  std::snprintf(buf, sizeof(buf), "%-44s %-10s %14lld %12lld\n", "total", "", static_cast<long long>(count_flops(model, height, width)),
                static_cast<long long>(count_params(model)));
  o << buf;
  return o.str();
}

}  // namespace infrayolo
