#include "mimo/cli.hpp"
#include "mimo/adversarial.hpp"
#include "mimo/data_io.hpp"
#include "mimo/error.hpp"
#include "mimo/raster_io.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

namespace mimo::cli {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- config file

namespace {

// Typed, strict view over one JSON object: every key must be consumed.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(where() + " must be a JSON object");
  }

  void read(const char* key, int& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_integer()) throw ConfigError(where(key) + " must be an integer");
      out = v->get<int>();
    }
  }
  void read(const char* key, std::uint64_t& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<long long>() >= 0))
        throw ConfigError(where(key) + " must be a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void read(const char* key, double& out) {
    if (const json* v = take(key)) {
      if (!v->is_number()) throw ConfigError(where(key) + " must be a number");
      out = v->get<double>();
    }
  }
  void read(const char* key, bool& out) {
    if (const json* v = take(key)) {
      if (!v->is_boolean()) throw ConfigError(where(key) + " must be true or false");
      out = v->get<bool>();
    }
  }
  void read(const char* key, std::string& out) {
    if (const json* v = take(key)) {
      if (!v->is_string()) throw ConfigError(where(key) + " must be a string");
      out = v->get<std::string>();
    }
  }
  void read(const char* key, std::vector<std::uint64_t>& out) {
    if (const json* v = take(key)) {
      if (!v->is_array()) throw ConfigError(where(key) + " must be an array");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_number_unsigned() && !(e.is_number_integer() && e.get<long long>() >= 0))
          throw ConfigError(where(key) + " must hold non-negative integers");
        out.push_back(e.get<std::uint64_t>());
      }
    }
  }
  const json* object(const char* key) { return take(key); }
  std::string where(const char* key = nullptr) const {
    return key ? path_ + "." + key : path_;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown config key '" + path_ + "." + k + "'");
  }

 private:
  const json* take(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace

void RunConfig::validate() const {
  arch.validate();
  train.validate();
  if (kind == ModelKind::dropout) {
    dropout.validate();
    if (arch.num_subnetworks != 1) throw ConfigError("dropout runs use num_subnetworks = 1");
    if (arch.dropout != dropout.p) throw ConfigError("arch.dropout must equal dropout.p");
  }
  if (kind == ModelKind::ensemble) {
    ensemble.validate();
    if (arch.num_subnetworks != 1) throw ConfigError("ensemble runs use num_subnetworks = 1");
  }
}

RunConfig parse_run_config(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig cfg;
  ObjectReader root(doc, "config");
  std::string kind = to_string(cfg.kind);
  root.read("model_kind", kind);
  cfg.kind = model_kind_from_string(kind);
  bool dropout_p_given = false;
  if (const json* j = root.object("dropout")) {
    ObjectReader r(*j, "config.dropout");
    dropout_p_given = j->is_object() && j->contains("p");
    r.read("p", cfg.dropout.p);
    r.read("samples", cfg.dropout.samples);
    r.finish();
  }
  if (cfg.kind == ModelKind::dropout) {
    cfg.arch.num_subnetworks = 1;
    cfg.arch.dropout = cfg.dropout.p;
  } else if (cfg.kind == ModelKind::ensemble) {
    cfg.arch.num_subnetworks = 1;
  }
  if (const json* j = root.object("arch")) {
    ObjectReader r(*j, "config.arch");
    r.read("in_channels", cfg.arch.in_channels);
    r.read("base_channels", cfg.arch.base_channels);
    r.read("depth", cfg.arch.depth);
    r.read("num_subnetworks", cfg.arch.num_subnetworks);
    std::string act = to_string(cfg.arch.activation);
    r.read("activation", act);
    try {
      cfg.arch.activation = activation_from_string(act);
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
    r.read("dropout", cfg.arch.dropout);
    r.read("seed", cfg.arch.seed);
    r.finish();
  }
  if (cfg.kind == ModelKind::dropout && !dropout_p_given) cfg.dropout.p = cfg.arch.dropout;
  if (const json* j = root.object("train")) {
    ObjectReader r(*j, "config.train");
    r.read("epochs", cfg.train.epochs);
    r.read("batch_size", cfg.train.batch_size);
    r.read("learning_rate", cfg.train.learning_rate);
    r.read("weight_decay", cfg.train.weight_decay);
    r.read("rho", cfg.train.rho);
    r.read("seed", cfg.train.seed);
    if (const json* d = r.object("lr_decay")) {
      ObjectReader rd(*d, "config.train.lr_decay");
      rd.read("gamma", cfg.train.lr_decay.gamma);
      rd.read("step_epochs", cfg.train.lr_decay.step_epochs);
      rd.finish();
    }
    if (const json* s = r.object("sync")) {
      ObjectReader rs(*s, "config.train.sync");
      rs.read("enabled", cfg.train.sync.enabled);
      rs.read("temperature", cfg.train.sync.temperature);
      rs.read("window", cfg.train.sync.window);
      rs.finish();
    }
    r.finish();
  }
  if (const json* j = root.object("ensemble")) {
    ObjectReader r(*j, "config.ensemble");
    const bool seeds_given = j->is_object() && j->contains("seeds");
    r.read("size", cfg.ensemble.size);
    r.read("seeds", cfg.ensemble.seeds);
    r.finish();
    if (!seeds_given)
      cfg.ensemble = EnsembleConfig::with_consecutive_seeds(cfg.ensemble.size, cfg.train.seed);
  }
  root.finish();
  cfg.validate();
  return cfg;
}

std::string to_json_text(const RunConfig& cfg) {
  const auto& a = cfg.arch;
  const auto& t = cfg.train;
  json doc{{"model_kind", to_string(cfg.kind)},
           {"arch",
            {{"in_channels", a.in_channels},
             {"base_channels", a.base_channels},
             {"depth", a.depth},
             {"num_subnetworks", a.num_subnetworks},
             {"activation", to_string(a.activation)},
             {"dropout", a.dropout},
             {"seed", a.seed}}},
           {"train",
            {{"epochs", t.epochs},
             {"batch_size", t.batch_size},
             {"learning_rate", t.learning_rate},
             {"lr_decay", {{"gamma", t.lr_decay.gamma}, {"step_epochs", t.lr_decay.step_epochs}}},
             {"weight_decay", t.weight_decay},
             {"rho", t.rho},
             {"sync",
              {{"enabled", t.sync.enabled},
               {"temperature", t.sync.temperature},
               {"window", t.sync.window}}},
             {"seed", t.seed}}},
           {"dropout", {{"p", cfg.dropout.p}, {"samples", cfg.dropout.samples}}},
           {"ensemble", {{"size", cfg.ensemble.size}, {"seeds", cfg.ensemble.seeds}}}};
  return doc.dump(2) + "\n";
}

// ---------------------------------------------------------------- helpers

namespace {

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<double> parse_list(const std::string& text, const char* what) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const double v = std::stod(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError(fmt::format("{}: '{}' is not a number", what, item));
    }
  }
  if (out.empty()) throw ConfigError(fmt::format("{}: empty list", what));
  return out;
}

std::string num(double v) { return fmt::format("{:.17g}", v); }

std::string eps_label(double eps) { return fmt::format("eps_{:g}", eps); }

struct ReportMeta {
  ModelKind kind = ModelKind::mimo;
  int members = 1;
  std::size_t params = 0;
  std::string checkpoint;
  std::string checkpoint_hash;
  std::string dataset_kind;
  std::optional<double> epsilon;
};

json metrics_json(const EvalReport& r, const ReportMeta& meta) {
  json j{{"model_kind", to_string(meta.kind)},
         {"m", meta.members},
         {"param_count", meta.params},
         {"checkpoint", meta.checkpoint},
         {"checkpoint_hash", meta.checkpoint_hash},
         {"dataset_kind", meta.dataset_kind},
         {"images", r.images},
         {"pixels", r.pixels},
         {"mae", r.mae},
         {"rmse", r.rmse},
         {"nll", r.nll},
         {"ece", r.ece},
         {"per_submodel_nll", r.per_submodel_nll},
         {"mean_aleatoric_var", r.mean_aleatoric_var},
         {"mean_epistemic_var", r.mean_epistemic_var},
         {"mean_epistemic_entropy", r.mean_epistemic_entropy},
         {"mean_combined_entropy", r.mean_combined_entropy},
         {"calibration_levels", r.calibration.levels.size()}};
  if (r.noise_floor_mae) j["noise_floor_mae"] = *r.noise_floor_mae;
  if (r.scale_pearson) j["scale_pearson"] = *r.scale_pearson;
  if (meta.epsilon) j["epsilon"] = *meta.epsilon;
  return j;
}

void write_report(const fs::path& dir, const EvalReport& r, const ReportMeta& meta) {
  fs::create_directories(dir);
  const std::string eps_head = meta.epsilon ? "epsilon," : "";
  const std::string eps_cell = meta.epsilon ? num(*meta.epsilon) + "," : "";

  std::string cal = eps_head + "level,observed\n";
  for (std::size_t k = 0; k < r.calibration.levels.size(); ++k)
    cal += eps_cell + num(r.calibration.levels[k]) + "," + num(r.calibration.observed[k]) + "\n";
  io::write_text_atomic(dir / "calibration.csv", cal);

  std::string sp = eps_head + "retained_fraction,mae\n";
  for (std::size_t k = 0; k < r.sparsification.retained_fractions.size(); ++k)
    sp += eps_cell + num(r.sparsification.retained_fractions[k]) + "," +
          num(r.sparsification.mae_at_fraction[k]) + "\n";
  io::write_text_atomic(dir / "sparsification.csv", sp);

  std::string hist = eps_head + "kind,bin_lo,bin_hi,count\n";
  auto add_hist = [&](const char* kind, const Histogram& h) {
    for (std::size_t k = 0; k < h.counts.size(); ++k)
      hist += eps_cell + kind + "," + num(h.edges[k]) + "," + num(h.edges[k + 1]) + "," +
              std::to_string(h.counts[k]) + "\n";
  };
  add_hist("epistemic", r.epistemic_entropy_hist);
  add_hist("combined", r.combined_entropy_hist);
  io::write_text_atomic(dir / "entropy_hist.csv", hist);

  std::string img = eps_head + "image,mean_epistemic_entropy,mae\n";
  for (std::size_t k = 0; k < r.image_mae.size(); ++k)
    img += eps_cell + std::to_string(k) + "," + num(r.image_epistemic_entropy[k]) + "," +
           num(r.image_mae[k]) + "\n";
  io::write_text_atomic(dir / "image_entropy.csv", img);

  io::write_text_atomic(dir / "metrics.json", metrics_json(r, meta).dump(2) + "\n");
}

// Shared options of eval and attack.
struct EvalArgs {
  std::string run_dir;
  std::string data;
  std::string checkpoint;
  std::string baseline;
  std::string tag;
  std::string levels;
  std::string hist_range = "-14,4";
  int bins = 72;
  int samples = 0;
  int threads = 0;
};

void add_eval_options(CLI::App* cmd, EvalArgs& a) {
  cmd->add_option("--run", a.run_dir, "Run directory")->required();
  cmd->add_option("--data", a.data, "Dataset directory or manifest")->required();
  cmd->add_option("--checkpoint", a.checkpoint, "Checkpoint directory (default <run>/checkpoints/final)");
  cmd->add_option("--baseline", a.baseline, "Expected method: mimo, dropout or ensemble")
      ->check(CLI::IsMember({"mimo", "dropout", "ensemble"}));
  cmd->add_option("--tag", a.tag, "Report name under <run>/reports");
  cmd->add_option("--levels", a.levels, "Comma-separated calibration levels in (0, 1)");
  cmd->add_option("--hist-range", a.hist_range, "Entropy histogram range lo,hi (nats)");
  cmd->add_option("--bins", a.bins, "Entropy histogram bins")->check(CLI::PositiveNumber);
  cmd->add_option("--samples", a.samples, "MC dropout passes (default from the run config)");
  cmd->add_option("--threads", a.threads, "Evaluation threads (capped by MIMO_RUN_THREADS)");
}

struct LoadedMethod {
  Predictor predictor;
  ReportMeta meta;
};

LoadedMethod load_method(const EvalArgs& a) {
  const fs::path run(a.run_dir);
  const fs::path ck_dir = a.checkpoint.empty() ? run / "checkpoints" / "final" : fs::path(a.checkpoint);
  if (!fs::exists(ck_dir / "manifest.json")) throw IoError("missing checkpoint: " + ck_dir.string());
  int samples = 8;
  std::uint64_t seed = 0;
  if (fs::exists(run / "config.json")) {
    const RunConfig cfg = parse_run_config(read_text(run / "config.json"));
    samples = cfg.dropout.samples;
    seed = cfg.train.seed;
  }
  if (a.samples > 0) samples = a.samples;
  Checkpoint ck = load_checkpoint(ck_dir);
  if (!a.baseline.empty() && model_kind_from_string(a.baseline) != ck.info.kind)
    throw ConfigError(fmt::format("--baseline {} requested but the checkpoint holds a {} model",
                                  a.baseline, to_string(ck.info.kind)));
  LoadedMethod lm{Predictor::from_checkpoint(std::move(ck), samples, Rng::derive_seed(seed, 7)), {}};
  lm.meta.kind = lm.predictor.kind();
  lm.meta.members = lm.predictor.members();
  lm.meta.params = lm.predictor.param_count();
  std::error_code ec;
  const fs::path rel = fs::relative(ck_dir, run, ec);
  lm.meta.checkpoint = (ec || rel.empty()) ? ck_dir.generic_string() : rel.generic_string();
  lm.meta.checkpoint_hash = checkpoint_hash(ck_dir);
  return lm;
}

EvalOptions eval_options(const EvalArgs& a) {
  EvalOptions o;
  if (!a.levels.empty()) {
    o.levels = parse_list(a.levels, "--levels");
    for (double l : o.levels)
      if (!(l > 0.0 && l < 1.0)) throw ConfigError("--levels values must lie in (0, 1)");
  }
  const auto range = parse_list(a.hist_range, "--hist-range");
  if (range.size() != 2 || !(range[0] < range[1])) throw ConfigError("--hist-range needs lo,hi with lo < hi");
  o.histogram_range = std::make_pair(range[0], range[1]);
  o.histogram_bins = a.bins;
  o.threads = a.threads;
  return o;
}

void check_compatible(const Predictor& p, const Dataset& ds) {
  const auto& arch = p.models().front().config();
  if (ds.manifest.input_channels != arch.in_channels)
    throw ConfigError(fmt::format("dataset has {} input channels, model expects {}",
                                  ds.manifest.input_channels, arch.in_channels));
  if (ds.manifest.height % arch.spatial_multiple() != 0 || ds.manifest.width % arch.spatial_multiple() != 0)
    throw ConfigError(fmt::format("dataset size {}x{} is not divisible by {}", ds.manifest.height,
                                  ds.manifest.width, arch.spatial_multiple()));
}

// ---------------------------------------------------------------- commands

struct GenArgs {
  std::string out;
  std::size_t n = 8;
  std::uint64_t seed = 0;
  int size = 64;
  int channels = 2;
  std::string field = "value_noise";
  std::string noise_fn = "input_magnitude";
  double noise_base = 0.02;
  double noise_slope = 0.2;
  double ood_shift = 0.0;
  double cell = 8.0;
  int classes = 4;
  int multiple = 16;
};

int cmd_gen_data(const GenArgs& a, std::ostream& out) {
  SynthTaskConfig cfg;
  cfg.field_kind = field_kind_from_string(a.field);
  cfg.noise_scale_fn = noise_scale_fn_from_string(a.noise_fn);
  cfg.channels = a.channels;
  cfg.height = cfg.width = a.size;
  cfg.noise_base = a.noise_base;
  cfg.noise_slope = a.noise_slope;
  cfg.cell = a.cell;
  cfg.num_classes = a.classes;
  cfg.spatial_multiple = a.multiple;
  cfg.seed = a.seed;
  if (a.n < 1) throw ConfigError("--n must be >= 1");
  if (!(a.ood_shift >= 0.0)) throw ConfigError("--ood-shift must be >= 0");
  cfg.validate();
  generate_synthetic(cfg, a.n, a.out);
  out << (fs::path(a.out) / "manifest.json").string() << "\n";
  if (a.ood_shift > 0.0) {
    SynthTaskConfig ood = cfg;
    ood.ood_shift = a.ood_shift;
    generate_synthetic(ood, a.n, fs::path(a.out) / "ood");
    out << (fs::path(a.out) / "ood" / "manifest.json").string() << "\n";
  }
  return kOk;
}

struct TrainArgs {
  std::string config;
  std::string data;
  std::string run_dir;
  std::string sync;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
};

class CsvLog {
 public:
  CsvLog(const fs::path& path, int m) : out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw IoError("cannot write " + path.string());
    out_ << train_log_header(m) << "\n";
  }
  void row(const TrainLogRow& r) { out_ << train_log_line(r) << "\n"; }
  void flush() { out_.flush(); }

 private:
  std::ofstream out_;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
  RunConfig cfg = a.config.empty() ? RunConfig{} : parse_run_config(read_text(a.config));
  if (!a.sync.empty()) cfg.train.sync.enabled = a.sync == "on";
  if (a.seed) {
    cfg.train.seed = *a.seed;
    cfg.arch.seed = *a.seed;
    if (cfg.kind == ModelKind::ensemble)
      cfg.ensemble = EnsembleConfig::with_consecutive_seeds(cfg.ensemble.size, *a.seed);
  }
  if (a.epochs) cfg.train.epochs = *a.epochs;
  cfg.validate();

  const Dataset ds = load_dataset(a.data);
  if (ds.manifest.input_channels != cfg.arch.in_channels)
    throw ConfigError(fmt::format("dataset has {} input channels, config expects {}",
                                  ds.manifest.input_channels, cfg.arch.in_channels));
  if (ds.manifest.height % cfg.arch.spatial_multiple() != 0 ||
      ds.manifest.width % cfg.arch.spatial_multiple() != 0)
    throw ConfigError(fmt::format("dataset size {}x{} is not divisible by 2^depth = {}",
                                  ds.manifest.height, ds.manifest.width, cfg.arch.spatial_multiple()));

  const fs::path run(a.run_dir);
  fs::create_directories(run / "checkpoints");
  fs::create_directories(run / "logs");
  io::write_text_atomic(run / "config.json", to_json_text(cfg));

  std::vector<MimoModel> models;
  auto train_one = [&](ArchConfig arch, std::uint64_t seed, const fs::path& ck_dir,
                       const fs::path& log_path) {
    TrainConfig tc = cfg.train;
    tc.seed = seed;
    MimoModel model = build_model(arch);
    CsvLog log(log_path, arch.num_subnetworks);
    TrainHooks hooks;
    hooks.checkpoint_dir = ck_dir;
    hooks.kind = cfg.kind == ModelKind::ensemble ? ModelKind::mimo : cfg.kind;
    hooks.on_step = [&](const TrainLogRow& r) { log.row(r); };
    hooks.on_epoch = [&](int epoch, const MimoModel&) {
      log.flush();
      out << fmt::format("epoch {} done\n", epoch);
    };
    train(model, ds.samples, tc, nullptr, hooks);
    models.push_back(std::move(model));
  };

  if (cfg.kind == ModelKind::ensemble) {
    for (int k = 0; k < cfg.ensemble.size; ++k) {
      ArchConfig arch = cfg.arch;
      arch.seed = cfg.ensemble.seeds[k];
      out << fmt::format("training ensemble member {} (seed {})\n", k, arch.seed);
      train_one(arch, cfg.ensemble.seeds[k], run / "checkpoints" / fmt::format("member_{}", k),
                run / "logs" / fmt::format("train_member_{}.csv", k));
    }
  } else {
    train_one(cfg.arch, cfg.train.seed, run / "checkpoints", run / "logs" / "train.csv");
  }

  std::vector<const MimoModel*> ptrs;
  for (const auto& m : models) ptrs.push_back(&m);
  const fs::path final_dir = run / "checkpoints" / "final";
  save_checkpoint(final_dir, CheckpointInfo{cfg.kind, cfg.train.epochs, 0, false}, ptrs);
  out << "checkpoint " << final_dir.string() << " sha256 " << checkpoint_hash(final_dir) << "\n";
  return kOk;
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const EvalOptions opts = eval_options(a);
  LoadedMethod lm = load_method(a);
  const Dataset ds = load_dataset(a.data);
  check_compatible(lm.predictor, ds);
  lm.meta.dataset_kind = ds.manifest.kind;
  const EvalReport r = evaluate(lm.predictor, ds.samples, opts, ds.noise_scales);
  const std::string tag = a.tag.empty() ? ds.manifest.kind : a.tag;
  const fs::path dir = fs::path(a.run_dir) / "reports" / tag;
  write_report(dir, r, lm.meta);
  out << fmt::format("mae {:.6g} rmse {:.6g} nll {:.6g} ece {:.6g}\n", r.mae, r.rmse, r.nll, r.ece);
  out << (dir / "metrics.json").string() << "\n";
  return kOk;
}

struct AttackArgs {
  EvalArgs eval;
  std::string eps;
  std::string clip = "0,1";
};

int cmd_attack(const AttackArgs& a, std::ostream& out) {
  const EvalOptions opts = eval_options(a.eval);
  const auto eps_list = parse_list(a.eps, "--eps");
  for (double e : eps_list)
    if (!(e >= 0.0) || !std::isfinite(e)) throw ConfigError("--eps values must be >= 0");
  const auto clip = parse_list(a.clip, "--clip");
  if (clip.size() != 2) throw ConfigError("--clip needs lo,hi");
  AttackConfig base{0.0, clip[0], clip[1]};
  base.validate();

  LoadedMethod lm = load_method(a.eval);
  const Dataset ds = load_dataset(a.eval.data);
  check_compatible(lm.predictor, ds);
  lm.meta.dataset_kind = ds.manifest.kind;
  const std::string tag = a.eval.tag.empty() ? "attack" : a.eval.tag;
  const fs::path root = fs::path(a.eval.run_dir) / "reports" / tag;

  std::vector<const MimoModel*> members;
  for (const auto& m : lm.predictor.models()) members.push_back(&m);

  std::string summary =
      "epsilon,mae,rmse,nll,ece,mean_epistemic_entropy,mean_combined_entropy,mean_epistemic_var\n";
  for (double eps : eps_list) {
    AttackConfig ac = base;
    ac.epsilon = eps;
    std::vector<Sample> attacked;
    attacked.reserve(ds.samples.size());
    for (const auto& s : ds.samples) {
      RasterTensor x_adv = lm.predictor.kind() == ModelKind::ensemble
                               ? fgsm(members, s.input, s.target, ac)
                               : fgsm(*members.front(), s.input, s.target, ac);
      attacked.push_back(Sample{std::move(x_adv), s.target, s.mask});
    }
    const EvalReport r = evaluate(lm.predictor, attacked, opts, ds.noise_scales);
    ReportMeta meta = lm.meta;
    meta.epsilon = eps;
    write_report(root / eps_label(eps), r, meta);
    summary += fmt::format("{},{},{},{},{},{},{},{}\n", num(eps), num(r.mae), num(r.rmse), num(r.nll),
                           num(r.ece), num(r.mean_epistemic_entropy), num(r.mean_combined_entropy),
                           num(r.mean_epistemic_var));
    out << fmt::format("eps {:g}: mae {:.6g} epistemic entropy {:.6g}\n", eps, r.mae,
                       r.mean_epistemic_entropy);
  }
  io::write_text_atomic(root / "attack.csv", summary);
  out << (root / "attack.csv").string() << "\n";
  return kOk;
}

struct ReportArgs {
  std::vector<std::string> runs;
  std::string out;
};

int cmd_report(const ReportArgs& a, std::ostream& out, std::ostream& err) {
  struct Row {
    std::string model;
    int m;
    std::string run, dataset;
    std::size_t params;
    double mae, rmse, nll, ece;
  };
  std::vector<Row> rows;
  for (const auto& run : a.runs) {
    const fs::path reports = fs::path(run) / "reports";
    if (!fs::is_directory(reports)) {
      err << "no reports in " << run << "\n";
      continue;
    }
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(reports))
      if (e.is_directory() && fs::exists(e.path() / "metrics.json")) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    for (const auto& d : dirs) {
      const json j = json::parse(read_text(d / "metrics.json"));
      rows.push_back(Row{j.at("model_kind").get<std::string>(), j.at("m").get<int>(), run,
                         d.filename().string(), j.at("param_count").get<std::size_t>(),
                         j.at("mae").get<double>(), j.at("rmse").get<double>(),
                         j.at("nll").get<double>(), j.at("ece").get<double>()});
    }
  }
  std::stable_sort(rows.begin(), rows.end(), [](const Row& x, const Row& y) {
    return std::tie(x.model, x.m, x.run, x.dataset) < std::tie(y.model, y.m, y.run, y.dataset);
  });
  std::string csv = "run,dataset,model,m,params,mae,rmse,nll,ece\n";
  for (const auto& r : rows)
    csv += fmt::format("{},{},{},{},{},{},{},{},{}\n", r.run, r.dataset, r.model, r.m, r.params,
                       num(r.mae), num(r.rmse), num(r.nll), num(r.ece));
  if (a.out.empty()) {
    out << csv;
  } else {
    io::write_text_atomic(a.out, csv);
    out << a.out << "\n";
  }
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"MIMO U-Net: uncertainty-aware pixel-wise regression", "mimo"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--n", gen.n, "Number of samples");
  gen_cmd->add_option("--seed", gen.seed, "Generator seed");
  gen_cmd->add_option("--size", gen.size, "Height and width in pixels");
  gen_cmd->add_option("--channels", gen.channels, "Input channels");
  gen_cmd->add_option("--field", gen.field, "gauss_bumps or value_noise");
  gen_cmd->add_option("--noise-fn", gen.noise_fn, "constant or input_magnitude");
  gen_cmd->add_option("--noise-base", gen.noise_base, "Noise scale offset");
  gen_cmd->add_option("--noise-slope", gen.noise_slope, "Noise scale slope");
  gen_cmd->add_option("--ood-shift", gen.ood_shift, "Also write a shifted split to <out>/ood");
  gen_cmd->add_option("--cell", gen.cell, "Field correlation length in pixels");
  gen_cmd->add_option("--classes", gen.classes, "Number of classes in the class maps");
  gen_cmd->add_option("--multiple", gen.multiple, "Required divisor of the size (2^depth)");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model into a run directory");
  train_cmd->add_option("--config", tr.config, "Run config (JSON)");
  train_cmd->add_option("--data", tr.data, "Training dataset")->required();
  train_cmd->add_option("--run", tr.run_dir, "Run directory")->required();
  train_cmd->add_option("--sync", tr.sync, "Submodel synchronisation on/off")
      ->check(CLI::IsMember({"on", "off"}));
  train_cmd->add_option("--seed", tr.seed, "Override model and training seeds");
  train_cmd->add_option("--epochs", tr.epochs, "Override the epoch count");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a trained run on a dataset");
  add_eval_options(eval_cmd, ev);

  AttackArgs at;
  auto* attack_cmd = app.add_subcommand("attack", "FGSM sweep over a list of epsilons");
  add_eval_options(attack_cmd, at.eval);
  attack_cmd->add_option("--eps", at.eps, "Comma-separated epsilons")->required();
  attack_cmd->add_option("--clip", at.clip, "Valid input range lo,hi");

  ReportArgs rep;
  auto* report_cmd = app.add_subcommand("report", "Merge run reports into one table");
  report_cmd->add_option("--run", rep.runs, "Run directories")->required();
  report_cmd->add_option("--out", rep.out, "Output CSV (default stdout)");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return kOk;
  } catch (const CLI::CallForAllHelp& e) {
    app.exit(e, out, err);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kUsageError;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen, out);
    if (*train_cmd) return cmd_train(tr, out);
    if (*eval_cmd) return cmd_eval(ev, out);
    if (*attack_cmd) return cmd_attack(at, out);
    if (*report_cmd) return cmd_report(rep, out, err);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kUsageError;
  } catch (const TrainingDiverged& e) {
    err << "training aborted at step " << e.step() << ": " << e.what() << "\n";
    return kRuntimeFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntimeFailure;
  }
  return kUsageError;
}

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace mimo::cli
