#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "infrayolo/pipeline.hpp"

namespace infrayolo {

// Everything a CLI invocation can set; written verbatim into metadata.json.
struct RunConfig {
  std::string command;
  std::string preset = "toy";  // toy | baseline
  std::string data;            // dataset manifest
  std::string model;           // input model file
  std::string teacher;         // distillation teacher
  std::string out = "run";
  TrainOptions train;
  double lambda = 0.004;
  double ratio = 0.5;
  int scheme = 2;
  std::string policy = "default";  // default | inherit | reinit
  std::string split = "test";
  std::vector<double> ratios;
  int finetune_epochs = 5;
  bool curve_distill = false;
  std::int64_t count = 500;
  std::string scene = "desk";  // desk | fidelity
  int height = 0;
  int width = 0;
};

// Environment variable read for the worker thread count.
inline constexpr const char* kThreadsEnv = "INFRAYOLO_THREADS";

// Parses argv and runs one command. Diagnostics go to `err` as a single
// JSON object; returns the process exit code.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

// Runs an already-parsed configuration, writing artifacts under cfg.out.
void run_command(const RunConfig& cfg, std::ostream& out);

}  // namespace infrayolo
