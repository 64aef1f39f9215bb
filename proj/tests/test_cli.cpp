#include "helpers.hpp"
#include "mimo/checkpoint.hpp"
#include "mimo/cli.hpp"
#include "mimo/data_io.hpp"
#include "mimo/error.hpp"
#include "mimo/raster_io.hpp"

#include <doctest.h>

#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>
#include <sstream>

using namespace mimo;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::istringstream in(read_file(p));
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  return lines;
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> cells;
  std::stringstream in(s);
  for (std::string c; std::getline(in, c, ',');) cells.push_back(c);
  return cells;
}

const char* kTinyConfig = R"({
  "model_kind": "mimo",
  "arch": {"in_channels": 2, "base_channels": 4, "depth": 1, "num_subnetworks": 2, "seed": 3},
  "train": {"epochs": 2, "batch_size": 4, "learning_rate": 0.001, "seed": 3}
})";

// A small dataset and a trained tiny run, shared by the tests below.
struct Fixture {
  testing::TempDir tmp{"cli"};
  fs::path data = tmp / "data";
  fs::path config = tmp / "cfg.json";
  fs::path run = tmp / "run";

  Fixture() {
    REQUIRE(run_cli({"gen-data", "--out", data.string(), "--n", "8", "--size", "16", "--seed", "7",
                     "--ood-shift", "0.5"})
                .code == 0);
    std::ofstream(config) << kTinyConfig;
    const auto r = run_cli({"train", "--config", config.string(), "--data", data.string(), "--run",
                            run.string()});
    REQUIRE(r.code == 0);
  }
};

}  // namespace

TEST_CASE("usage errors exit with 2") {
  CHECK(run_cli({}).code == 2);
  CHECK(run_cli({"gen-data", "--n", "4"}).code == 2);  // missing --out
  CHECK(run_cli({"no-such-command"}).code == 2);
  CHECK(run_cli({"train", "--data", "x"}).code == 2);
  testing::TempDir tmp("usage");
  CHECK(run_cli({"gen-data", "--out", (tmp / "d").string(), "--size", "30"}).code == 2);
  CHECK(run_cli({"gen-data", "--out", (tmp / "d").string(), "--n", "0"}).code == 2);
}

TEST_CASE("config files are strict") {
  CHECK_THROWS_AS(cli::parse_run_config(R"({"arch": {"base_channels": 8, "colour": 1}})"), ConfigError);
  CHECK_THROWS_AS(cli::parse_run_config(R"({"trian": {}})"), ConfigError);
  CHECK_THROWS_AS(cli::parse_run_config(R"({"arch": {"base_channels": "eight"}})"), ConfigError);
  CHECK_THROWS_AS(cli::parse_run_config("{"), ConfigError);
  const auto cfg = cli::parse_run_config(R"({"train": {"sync": {"enabled": false}}})");
  CHECK_FALSE(cfg.train.sync.enabled);
  CHECK(cfg.train.learning_rate == 1e-4);
  // Round trip through the echoed form.
  const auto back = cli::parse_run_config(cli::to_json_text(cfg));
  CHECK(cli::to_json_text(back) == cli::to_json_text(cfg));

  testing::TempDir tmp("strict");
  REQUIRE(run_cli({"gen-data", "--out", (tmp / "d").string(), "--n", "2", "--size", "16"}).code == 0);
  std::ofstream(tmp / "bad.json") << R"({"arch": {"unknown_key": 1}})";
  const auto r = run_cli({"train", "--config", (tmp / "bad.json").string(), "--data",
                          (tmp / "d").string(), "--run", (tmp / "run").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("unknown_key") != std::string::npos);
}

TEST_CASE("gen-data is reproducible and writes the OOD split") {
  testing::TempDir tmp("gen");
  for (const char* d : {"a", "b"})
    REQUIRE(run_cli({"gen-data", "--out", (tmp / d).string(), "--seed", "7", "--n", "8", "--size", "64",
                     "--ood-shift", "0.5"})
                .code == 0);
  for (const char* f : {"manifest.json", "inputs/000007.bin", "targets/000003.bin", "ood/targets/000000.bin"})
    CHECK(read_file(tmp / "a" / f) == read_file(tmp / "b" / f));
  const json id = json::parse(read_file(tmp / "a/manifest.json"));
  const json ood = json::parse(read_file(tmp / "a/ood/manifest.json"));
  CHECK(id.at("kind") == "id");
  CHECK(ood.at("kind") == "ood");
}

TEST_CASE("train, eval, attack and report") {
  Fixture f;

  SUBCASE("run directory layout") {
    CHECK(fs::exists(f.run / "config.json"));
    for (const char* c : {"epoch_001", "epoch_002", "final"})
      CHECK(fs::exists(f.run / "checkpoints" / c / "manifest.json"));
    const auto log = lines_of(f.run / "logs/train.csv");
    CHECK(log.front() == "step,epoch,nll_0,nll_1,weight_0,weight_1,total_loss,learning_rate");
    CHECK(log.size() == 1u + 2u * 2u);
    CHECK(cli::parse_run_config(read_file(f.run / "config.json")).arch.base_channels == 4);
  }

  SUBCASE("same seed reproduces the checkpoint hash") {
    REQUIRE(run_cli({"train", "--config", f.config.string(), "--data", f.data.string(), "--run",
                     (f.tmp / "again").string()})
                .code == 0);
    CHECK(checkpoint_hash(f.run / "checkpoints/final") == checkpoint_hash(f.tmp / "again/checkpoints/final"));
    REQUIRE(run_cli({"train", "--config", f.config.string(), "--data", f.data.string(), "--run",
                     (f.tmp / "other").string(), "--seed", "99"})
                .code == 0);
    CHECK(checkpoint_hash(f.run / "checkpoints/final") != checkpoint_hash(f.tmp / "other/checkpoints/final"));
  }

  SUBCASE("--sync off logs unit weights") {
    REQUIRE(run_cli({"train", "--config", f.config.string(), "--data", f.data.string(), "--run",
                     (f.tmp / "nosync").string(), "--sync", "off"})
                .code == 0);
    const auto log = lines_of(f.tmp / "nosync/logs/train.csv");
    for (std::size_t k = 1; k < log.size(); ++k) {
      const auto cells = split(log[k]);
      CHECK(std::stod(cells[4]) == 1.0);
      CHECK(std::stod(cells[5]) == 1.0);
    }
  }

  SUBCASE("eval writes fixed metrics keys and honours --levels") {
    REQUIRE(run_cli({"eval", "--run", f.run.string(), "--data", f.data.string()}).code == 0);
    REQUIRE(run_cli({"eval", "--run", f.run.string(), "--data", (f.data / "ood").string()}).code == 0);
    const json id = json::parse(read_file(f.run / "reports/id/metrics.json"));
    for (const char* k : {"mae", "rmse", "nll", "ece", "checkpoint_hash", "param_count", "mean_epistemic_entropy"})
      CHECK(id.contains(k));
    CHECK(id.at("checkpoint_hash") == checkpoint_hash(f.run / "checkpoints/final"));
    CHECK(fs::exists(f.run / "reports/ood/entropy_hist.csv"));
    CHECK(lines_of(f.run / "reports/id/calibration.csv").size() == 20u);
    REQUIRE(run_cli({"eval", "--run", f.run.string(), "--data", f.data.string(), "--tag", "lv", "--levels",
                     "0.1,0.5,0.9"})
                .code == 0);
    CHECK(lines_of(f.run / "reports/lv/calibration.csv").size() == 4u);
    CHECK(run_cli({"eval", "--run", f.run.string(), "--data", f.data.string(), "--levels", "0.5,1.5"}).code == 2);
    CHECK(run_cli({"eval", "--run", f.run.string(), "--data", f.data.string(), "--baseline", "ensemble"}).code == 2);
  }

  SUBCASE("missing checkpoint is a runtime failure") {
    const auto r = run_cli({"eval", "--run", (f.tmp / "nowhere").string(), "--data", f.data.string()});
    CHECK(r.code == 1);
    CHECK(r.err.find("checkpoint") != std::string::npos);
  }

  SUBCASE("attack sweeps") {
    REQUIRE(run_cli({"eval", "--run", f.run.string(), "--data", f.data.string()}).code == 0);
    REQUIRE(run_cli({"attack", "--run", f.run.string(), "--data", f.data.string(), "--eps", "0,0.02,0.04"}).code == 0);
    for (const char* d : {"eps_0", "eps_0.02", "eps_0.04"}) CHECK(fs::exists(f.run / "reports/attack" / d / "metrics.json"));
    const json plain = json::parse(read_file(f.run / "reports/id/metrics.json"));
    const json zero = json::parse(read_file(f.run / "reports/attack/eps_0/metrics.json"));
    for (const char* k : {"mae", "rmse", "nll", "ece", "mean_epistemic_entropy"}) CHECK(plain.at(k) == zero.at(k));
    for (const char* csv : {"calibration.csv", "sparsification.csv", "entropy_hist.csv", "image_entropy.csv"}) {
      const auto lines = lines_of(f.run / "reports/attack/eps_0.02" / csv);
      CHECK(lines.front().rfind("epsilon,", 0) == 0);
      for (std::size_t k = 1; k < lines.size(); ++k) CHECK(lines[k].rfind("0.02,", 0) == 0);
    }
    CHECK(lines_of(f.run / "reports/attack/attack.csv").size() == 4u);
    CHECK(run_cli({"attack", "--run", f.run.string(), "--data", f.data.string(), "--eps", "-0.1"}).code == 2);
  }

  SUBCASE("report merges runs sorted by model and m") {
    testing::TempDir tmp2("cli2");
    std::ofstream(tmp2 / "one.json") << R"({"arch": {"in_channels": 2, "base_channels": 4, "depth": 1,
      "num_subnetworks": 1}, "train": {"epochs": 1, "batch_size": 4}})";
    const fs::path single = tmp2 / "single";
    REQUIRE(run_cli({"train", "--config", (tmp2 / "one.json").string(), "--data", f.data.string(), "--run",
                     single.string()})
                .code == 0);
    for (const fs::path& r : {f.run, single})
      REQUIRE(run_cli({"eval", "--run", r.string(), "--data", f.data.string()}).code == 0);
    const fs::path table = tmp2 / "table.csv";
    REQUIRE(run_cli({"report", "--run", f.run.string(), single.string(), "--out", table.string()}).code == 0);
    const auto lines = lines_of(table);
    REQUIRE(lines.size() == 3u);
    CHECK(lines[0] == "run,dataset,model,m,params,mae,rmse,nll,ece");
    const auto first = split(lines[1]);
    const auto second = split(lines[2]);
    CHECK(first[3] == "1");
    CHECK(second[3] == "2");
    const Checkpoint ck = load_checkpoint(f.run / "checkpoints/final");
    CHECK(std::stoul(second[4]) == param_count(ck.models[0]));
    const auto one = run_cli({"report", "--run", single.string()});
    CHECK(one.code == 0);
    CHECK(std::count(one.out.begin(), one.out.end(), '\n') == 2);
  }
}

TEST_CASE("training divergence exits with 1 and names the step") {
  testing::TempDir tmp("diverge");
  SynthTaskConfig task;
  task.height = task.width = 16;
  Dataset ds = generate_samples(task, 4);
  ds.samples[1].target.values()[0] = std::numeric_limits<float>::quiet_NaN();
  write_dataset(tmp / "data", ds);
  std::ofstream(tmp / "cfg.json") << kTinyConfig;
  const auto r = run_cli({"train", "--config", (tmp / "cfg.json").string(), "--data", (tmp / "data").string(),
                          "--run", (tmp / "run").string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("step") != std::string::npos);
  CHECK(fs::exists(tmp / "run/checkpoints/diagnostic/manifest.json"));
}

TEST_CASE("baseline runs") {
  testing::TempDir tmp("baselines");
  REQUIRE(run_cli({"gen-data", "--out", (tmp / "d").string(), "--n", "4", "--size", "16"}).code == 0);
  std::ofstream(tmp / "ens.json") << R"({"model_kind": "ensemble",
    "arch": {"in_channels": 2, "base_channels": 4, "depth": 1, "num_subnetworks": 1},
    "train": {"epochs": 1, "batch_size": 4}, "ensemble": {"size": 2, "seeds": [4, 9]}})";
  std::ofstream(tmp / "drop.json") << R"({"model_kind": "dropout",
    "arch": {"in_channels": 2, "base_channels": 4, "depth": 1, "num_subnetworks": 1, "dropout": 0.1},
    "train": {"epochs": 1, "batch_size": 4}, "dropout": {"p": 0.1, "samples": 3}})";
  for (const char* kind : {"ens", "drop"}) {
    const fs::path run = tmp / kind;
    REQUIRE(run_cli({"train", "--config", (tmp / (std::string(kind) + ".json")).string(), "--data",
                     (tmp / "d").string(), "--run", run.string()})
                .code == 0);
    REQUIRE(run_cli({"eval", "--run", run.string(), "--data", (tmp / "d").string()}).code == 0);
  }
  CHECK(fs::exists(tmp / "ens/checkpoints/member_1/epoch_001/manifest.json"));
  CHECK(fs::exists(tmp / "ens/logs/train_member_0.csv"));
  const json ens = json::parse(read_file(tmp / "ens/reports/id/metrics.json"));
  CHECK(ens.at("model_kind") == "ensemble");
  CHECK(ens.at("m") == 2);
  const json drop = json::parse(read_file(tmp / "drop/reports/id/metrics.json"));
  CHECK(drop.at("model_kind") == "dropout");
  CHECK(drop.at("m") == 3);
  CHECK(run_cli({"eval", "--run", (tmp / "drop").string(), "--data", (tmp / "d").string(), "--baseline",
                 "dropout", "--samples", "2", "--tag", "t2"})
            .code == 0);
}
