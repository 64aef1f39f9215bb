#include "helpers.hpp"
#include "mimo/checkpoint.hpp"
#include "mimo/error.hpp"

#include <doctest.h>

#include <fstream>
#include <nlohmann/json.hpp>

using namespace mimo;
namespace fs = std::filesystem;

namespace {

ArchConfig tiny(std::uint64_t seed = 3, int m = 2) {
  ArchConfig cfg;
  cfg.in_channels = 2;
  cfg.base_channels = 4;
  cfg.depth = 1;
  cfg.num_subnetworks = m;
  cfg.seed = seed;
  return cfg;
}

void check_same_parameters(const MimoModel& a, const MimoModel& b) {
  const auto pa = a.parameters();
  const auto pb = b.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i]->name == pb[i]->name);
    CHECK(pa[i]->shape == pb[i]->shape);
    CHECK(pa[i]->value == pb[i]->value);
  }
}

}  // namespace

TEST_CASE("checkpoint round trip is bitwise and keeps the architecture") {
  testing::TempDir tmp("ckpt");
  ArchConfig cfg = tiny();
  cfg.activation = Activation::leaky_relu;
  cfg.dropout = 0.2;
  const MimoModel model = build_model(cfg);
  save_checkpoint(tmp / "c", CheckpointInfo{ModelKind::dropout, 4, 40, false}, model);
  const Checkpoint ck = load_checkpoint(tmp / "c");
  CHECK(ck.info.kind == ModelKind::dropout);
  CHECK(ck.info.epoch == 4);
  CHECK(ck.info.step == 40);
  CHECK_FALSE(ck.info.diagnostic);
  REQUIRE(ck.models.size() == 1u);
  const ArchConfig& back = ck.models[0].config();
  CHECK(back.base_channels == 4);
  CHECK(back.num_subnetworks == 2);
  CHECK(back.activation == Activation::leaky_relu);
  CHECK(back.dropout == 0.2);
  check_same_parameters(model, ck.models[0]);

  // Forward passes agree bit for bit.
  Rng rng(1);
  const RasterTensor x = testing::random_raster(2, 8, 8, rng);
  const RasterTensor xs[] = {x, x};
  const auto a = forward(model, xs);
  const auto b = forward(ck.models[0], xs);
  CHECK(a[1].f2 == b[1].f2);
}

TEST_CASE("ensemble checkpoints hold every member") {
  testing::TempDir tmp("ens");
  const MimoModel m0 = build_model(tiny(1, 1));
  const MimoModel m1 = build_model(tiny(2, 1));
  const MimoModel* members[] = {&m0, &m1};
  save_checkpoint(tmp.path(), CheckpointInfo{ModelKind::ensemble, 1, 2, false}, members);
  const Checkpoint ck = load_checkpoint(tmp.path());
  REQUIRE(ck.models.size() == 2u);
  check_same_parameters(m0, ck.models[0]);
  check_same_parameters(m1, ck.models[1]);
  std::ifstream in(tmp / "manifest.json");
  const auto doc = nlohmann::json::parse(in);
  CHECK(doc.at("tensors").at(0).at("name").get<std::string>().rfind("member.0.", 0) == 0);
}

TEST_CASE("tensor blobs are raw float32 with the shape in the manifest") {
  testing::TempDir tmp("blob");
  const MimoModel model = build_model(tiny());
  save_checkpoint(tmp.path(), CheckpointInfo{}, model);
  std::ifstream in(tmp / "manifest.json");
  const auto doc = nlohmann::json::parse(in);
  const auto params = model.parameters();
  REQUIRE(doc.at("tensors").size() == params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = doc.at("tensors").at(i);
    CHECK(t.at("name").get<std::string>() == params[i]->name);
    CHECK(t.at("shape").get<std::vector<int>>() == params[i]->shape);
    CHECK(fs::file_size(tmp / t.at("file").get<std::string>()) == params[i]->size() * 4);
  }
}

TEST_CASE("checkpoint hash tracks content") {
  testing::TempDir tmp("hash");
  MimoModel model = build_model(tiny());
  save_checkpoint(tmp / "a", CheckpointInfo{}, model);
  save_checkpoint(tmp / "b", CheckpointInfo{}, model);
  const std::string ha = checkpoint_hash(tmp / "a");
  CHECK(ha.size() == 64u);
  CHECK(ha == checkpoint_hash(tmp / "b"));
  model.parameters().back()->value[0] += 1e-6f;
  save_checkpoint(tmp / "c", CheckpointInfo{}, model);
  CHECK(ha != checkpoint_hash(tmp / "c"));
}

TEST_CASE("damaged checkpoints are rejected") {
  testing::TempDir tmp("bad");
  save_checkpoint(tmp.path(), CheckpointInfo{}, build_model(tiny()));
  std::ifstream in(tmp / "manifest.json");
  const auto doc = nlohmann::json::parse(in);
  const fs::path blob = tmp / doc.at("tensors").at(0).at("file").get<std::string>();
  SUBCASE("truncated tensor") {
    fs::resize_file(blob, fs::file_size(blob) - 4);
    CHECK_THROWS_AS(load_checkpoint(tmp.path()), IoError);
  }
  SUBCASE("missing tensor") {
    fs::remove(blob);
    CHECK_THROWS_AS(load_checkpoint(tmp.path()), IoError);
  }
  SUBCASE("missing directory") { CHECK_THROWS_AS(load_checkpoint(tmp / "nope"), IoError); }
}
