#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "doctest.h"
#include "infrayolo/cli.hpp"
#include "infrayolo/error.hpp"
#include "infrayolo/model_io.hpp"
#include "infrayolo/pipeline.hpp"

using namespace infrayolo;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "infrayolo");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

json metadata(const fs::path& dir) {
  std::ifstream in(dir / "metadata.json");
  return json::parse(in);
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("infrayolo_cli_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("lr schedules") {
  const auto c = LrSchedule::train_default();
  CHECK(c.at(0, 10) == doctest::Approx(0.01).epsilon(1e-12));
  CHECK(c.at(9, 10) == doctest::Approx(0.0005).epsilon(1e-12));
  for (int e = 1; e < 10; ++e) CHECK(c.at(e, 10) < c.at(e - 1, 10));

  const auto s = LrSchedule::sparsify_default();
  CHECK(s.at(0, 100) == doctest::Approx(0.0002).epsilon(1e-12));
  CHECK(s.at(6, 100) == doctest::Approx(0.002).epsilon(1e-12));
  CHECK(s.at(69, 100) == doctest::Approx(0.002).epsilon(1e-12));
  CHECK(s.at(70, 100) == doctest::Approx(0.00002).epsilon(1e-12));
  CHECK(s.at(90, 100) == doctest::Approx(0.0000002).epsilon(1e-12));
  CHECK_THROWS_AS(s.at(0, 0), Error);
  LrSchedule bad;
  bad.initial = -1;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("spearman and ratio grids") {
  CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
  CHECK(spearman({1, 2, 3, 4}, {4, 3, 2, 1}) == doctest::Approx(-1.0));
  // Ties take average ranks: ranks (1.5, 1.5, 3) vs (1, 2, 3).
  CHECK(spearman({5, 5, 7}, {1, 2, 3}) == doctest::Approx(std::sqrt(0.75)));
  CHECK_THROWS_AS(spearman({1}, {1}), Error);
  const auto g2 = default_ratio_grid(2), g1 = default_ratio_grid(1);
  CHECK(g2.size() == 9);
  CHECK(g2.back() == doctest::Approx(0.9));
  CHECK(g1.back() == doctest::Approx(0.79));
}

TEST_CASE("git blob hash") {
  // `printf 'hello\n' | git hash-object --stdin`
  CHECK(git_blob_sha1("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");
  CHECK(git_blob_sha1("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
}

TEST_CASE("cli exit codes and diagnostics") {
  CHECK(cli({}).code == 2);
  CHECK(cli({"bogus"}).code == 2);
  CHECK(cli({"--help"}).code == 0);
  CHECK(cli({"train", "--epochs", "abc"}).code == 2);

  const auto dir = scratch("errors");
  auto r = cli({"eval", "--out", dir.string(), "--model", (dir / "missing.iym").string(), "--data",
                (dir / "missing.txt").string()});
  CHECK(r.code == 1);
  const auto e = json::parse(r.err);
  CHECK(e["error"]["command"] == "eval");
  CHECK(e["error"]["kind"].is_string());
  CHECK(e["error"]["message"].get<std::string>().find("missing") != std::string::npos);

  r = cli({"train", "--out", dir.string()});
  CHECK(r.code == 1);
  CHECK(json::parse(r.err)["error"]["message"].get<std::string>().find("--data") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("cli round trip") {
  const auto dir = scratch("round_trip");
  REQUIRE(cli({"gen-data", "--out", (dir / "data").string(), "--count", "20", "--seed", "3"}).code == 0);
  const auto manifest = (dir / "data" / "manifest.txt").string();
  REQUIRE(fs::exists(manifest));
  auto meta = metadata(dir / "data");
  CHECK(meta["tool_version"] == kToolVersion);
  CHECK(meta["seed"] == 3);
  CHECK(meta["dataset_manifest_sha1"] == file_git_sha1(manifest));

  auto r = cli({"train", "--out", (dir / "train").string(), "--data", manifest, "--epochs", "1", "--batch", "4"});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("mAP@0.5") != std::string::npos);
  for (const auto* f : {"model.iym", "train_log.csv", "metrics.txt", "metadata.json"}) CHECK(fs::exists(dir / "train" / f));
  const auto model = (dir / "train" / "model.iym").string();

  r = cli({"prune", "--out", (dir / "prune").string(), "--model", model, "--ratio", "0.5", "--scheme", "2"});
  REQUIRE(r.code == 0);
  meta = metadata(dir / "prune");
  CHECK(meta["input_model_sha1"] == file_git_sha1(model));
  CHECK(meta["results"]["params_after"].get<double>() < meta["results"]["params_before"].get<double>());
  CHECK(fs::exists(dir / "prune" / "prune_report.txt"));

  r = cli({"prune", "--out", (dir / "bad").string(), "--model", model, "--ratio", "0.9", "--scheme", "1"});
  CHECK(r.code == 1);
  CHECK(json::parse(r.err)["error"]["message"].get<std::string>().find("0.795") != std::string::npos);

  r = cli({"flops", "--out", (dir / "flops").string(), "--model", (dir / "prune" / "model.iym").string()});
  REQUIRE(r.code == 0);
  CHECK(metadata(dir / "flops")["results"]["flops"].get<std::int64_t>() > 0);

  // Evaluating the same model twice gives the same table.
  r = cli({"eval", "--out", (dir / "eval").string(), "--model", model, "--data", manifest});
  REQUIRE(r.code == 0);
  const auto again = cli({"eval", "--out", (dir / "eval2").string(), "--model", model, "--data", manifest});
  CHECK(again.out == r.out);
  fs::remove_all(dir);
}

TEST_CASE("training is deterministic for a seed") {
  const auto dir = scratch("determinism");
  REQUIRE(cli({"gen-data", "--out", (dir / "data").string(), "--count", "12"}).code == 0);
  const auto manifest = (dir / "data" / "manifest.txt").string();
  for (const auto* run : {"a", "b"}) {
    REQUIRE(cli({"train", "--out", (dir / run).string(), "--data", manifest, "--epochs", "1", "--batch", "4",
                 "--seed", "9"})
                .code == 0);
  }
  CHECK(file_git_sha1(dir / "a" / "model.iym") == file_git_sha1(dir / "b" / "model.iym"));
  fs::remove_all(dir);
}
