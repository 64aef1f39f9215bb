#include "mimo/checkpoint.hpp"
#include "mimo/error.hpp"
#include "mimo/raster_io.hpp"

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include <fstream>
#include <memory>

namespace mimo {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::mimo: return "mimo";
    case ModelKind::dropout: return "dropout";
    case ModelKind::ensemble: return "ensemble";
  }
  return "mimo";
}

ModelKind model_kind_from_string(const std::string& s) {
  if (s == "mimo") return ModelKind::mimo;
  if (s == "dropout") return ModelKind::dropout;
  if (s == "ensemble") return ModelKind::ensemble;
  throw ConfigError("unknown model kind '" + s + "'");
}

namespace {

json arch_json(const ArchConfig& c) {
  return json{{"in_channels", c.in_channels},     {"base_channels", c.base_channels},
              {"depth", c.depth},                 {"num_subnetworks", c.num_subnetworks},
              {"activation", to_string(c.activation)}, {"dropout", c.dropout},
              {"seed", c.seed}};
}

ArchConfig arch_from_json(const json& j) {
  ArchConfig c;
  c.in_channels = j.at("in_channels").get<int>();
  c.base_channels = j.at("base_channels").get<int>();
  c.depth = j.at("depth").get<int>();
  c.num_subnetworks = j.at("num_subnetworks").get<int>();
  c.activation = activation_from_string(j.at("activation").get<std::string>());
  c.dropout = j.at("dropout").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

std::string blob_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "t%05zu.bin", index);
  return buf;
}

json read_manifest(const fs::path& dir) {
  const fs::path path = dir / "manifest.json";
  if (!fs::exists(path)) throw IoError("missing checkpoint manifest: " + path.string());
  try {
    std::ifstream in(path);
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IoError("malformed checkpoint manifest " + path.string() + ": " + e.what());
  }
}

}  // namespace

void save_checkpoint(const fs::path& dir, const CheckpointInfo& info,
                     std::span<const MimoModel* const> models) {
  if (models.empty()) throw std::invalid_argument("save_checkpoint: no models");
  if (info.kind != ModelKind::ensemble && models.size() != 1)
    throw std::invalid_argument("save_checkpoint: only ensembles hold several models");
  fs::create_directories(dir);
  json members = json::array();
  json tensors = json::array();
  std::size_t index = 0;
  for (std::size_t k = 0; k < models.size(); ++k) {
    members.push_back(arch_json(models[k]->config()));
    const std::string prefix =
        info.kind == ModelKind::ensemble ? "member." + std::to_string(k) + "." : "";
    for (const nn::Parameter* p : models[k]->parameters()) {
      const std::string file = blob_name(index++);
      const std::uint32_t crc = io::write_f32(dir / file, p->value);
      tensors.push_back(
          json{{"name", prefix + p->name}, {"shape", p->shape}, {"file", file}, {"crc32", crc}});
    }
  }
  json doc{{"format", "mimo-checkpoint"},
           {"version", 1},
           {"model_kind", to_string(info.kind)},
           {"epoch", info.epoch},
           {"step", info.step},
           {"diagnostic", info.diagnostic},
           {"members", std::move(members)},
           {"tensors", std::move(tensors)}};
  io::write_text_atomic(dir / "manifest.json", doc.dump(2) + "\n");
}

void save_checkpoint(const fs::path& dir, const CheckpointInfo& info, const MimoModel& model) {
  const MimoModel* one[] = {&model};
  save_checkpoint(dir, info, one);
}

Checkpoint load_checkpoint(const fs::path& dir) {
  const json doc = read_manifest(dir);
  Checkpoint ck;
  try {
    if (doc.at("format").get<std::string>() != "mimo-checkpoint" || doc.at("version").get<int>() != 1)
      throw IoError("unsupported checkpoint format in " + dir.string());
    ck.info.kind = model_kind_from_string(doc.at("model_kind").get<std::string>());
    ck.info.epoch = doc.at("epoch").get<int>();
    ck.info.step = doc.at("step").get<long>();
    ck.info.diagnostic = doc.at("diagnostic").get<bool>();
    for (const auto& m : doc.at("members")) ck.models.emplace_back(arch_from_json(m));
    const auto& tensors = doc.at("tensors");
    std::size_t expected = 0;
    for (const auto& m : ck.models) expected += m.parameters().size();
    if (tensors.size() != expected)
      throw IoError("checkpoint " + dir.string() + " lists " + std::to_string(tensors.size()) +
                    " tensors, expected " + std::to_string(expected));
    std::size_t t = 0;
    for (std::size_t k = 0; k < ck.models.size(); ++k) {
      const std::string prefix =
          ck.info.kind == ModelKind::ensemble ? "member." + std::to_string(k) + "." : "";
      for (nn::Parameter* p : ck.models[k].parameters()) {
        const auto& j = tensors[t++];
        const std::string name = j.at("name").get<std::string>();
        if (name != prefix + p->name)
          throw IoError("checkpoint " + dir.string() + ": expected tensor " + prefix + p->name +
                        ", found " + name);
        if (j.at("shape").get<std::vector<int>>() != p->shape)
          throw IoError("checkpoint " + dir.string() + ": shape mismatch for " + name);
        const auto blob = io::read_f32(dir / j.at("file").get<std::string>(), p->value.size(),
                                       j.at("crc32").get<std::uint32_t>());
        std::copy(blob.begin(), blob.end(), p->value.begin());
      }
    }
  } catch (const json::exception& e) {
    throw IoError("malformed checkpoint manifest in " + dir.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw IoError("invalid architecture in checkpoint " + dir.string() + ": " + e.what());
  }
  return ck;
}

std::string checkpoint_hash(const fs::path& dir) {
  const json doc = read_manifest(dir);
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("SHA-256 unavailable");
  auto feed = [&](const std::vector<std::byte>& bytes) {
    EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size());
  };
  feed(io::read_bytes(dir / "manifest.json"));
  for (const auto& t : doc.at("tensors")) feed(io::read_bytes(dir / t.at("file").get<std::string>()));
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest, &len);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 15]);
  }
  return out;
}

}  // namespace mimo
