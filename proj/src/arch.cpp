#include "mimo/arch.hpp"
#include "mimo/error.hpp"

#include <cmath>
#include <numbers>

namespace mimo {

using nn::Conv2d;
using nn::GradientSet;
using nn::Tensor;

void ArchConfig::validate() const {
  if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
  if (num_subnetworks < 1) throw ConfigError("num_subnetworks must be >= 1");
  if (base_channels < 1) throw ConfigError("base_channels must be >= 1");
  if (base_channels < num_subnetworks)
    throw ConfigError("base_channels (" + std::to_string(base_channels) +
                      ") must be >= num_subnetworks (" + std::to_string(num_subnetworks) + ")");
  if (depth < 1) throw ConfigError("depth must be >= 1");
  if (depth > 12) throw ConfigError("depth must be <= 12");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
}

std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "leaky_relu"; }

Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "leaky_relu") return Activation::leaky_relu;
  throw ConfigError("unknown activation '" + s + "'");
}

namespace {

Tensor concat_many(std::span<const Tensor> parts) {
  Tensor out = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) out = nn::concat_channels(out, parts[i]);
  return out;
}

std::vector<Tensor> split_many(const Tensor& t, int pieces) {
  const int per = t.c() / pieces;
  std::vector<Tensor> out;
  out.reserve(pieces);
  Tensor rest = t;
  for (int i = 0; i + 1 < pieces; ++i) {
    auto [head, tail] = nn::split_channels(rest, per);
    out.push_back(std::move(head));
    rest = std::move(tail);
  }
  out.push_back(std::move(rest));
  return out;
}

void maybe_dropout(Tensor& x, double p, const ForwardOptions& opts, std::vector<float>* scale_out) {
  if (opts.dropout_rng == nullptr || p <= 0.0) {
    if (scale_out) scale_out->clear();
    return;
  }
  auto scale = nn::spatial_dropout(x, p, *opts.dropout_rng);
  if (scale_out) *scale_out = std::move(scale);
}

}  // namespace

class ConvBlock {
 public:
  ConvBlock(const std::string& name, int in, int out)
      : first(name + ".conv1", in, out, 3), second(name + ".conv2", out, out, 3) {}

  Tensor forward(const Tensor& x, detail::ConvBlockTape* tape, Activation act, double p,
                 const ForwardOptions& opts) const {
    Tensor hidden = first.forward(x);
    nn::activate(hidden, act);
    Tensor out = second.forward(hidden);
    nn::activate(out, act);
    if (tape) {
      tape->input = x;
      tape->hidden = std::move(hidden);
      tape->output = out;
    }
    maybe_dropout(out, p, opts, tape ? &tape->dropout_scale : nullptr);
    return out;
  }

  Tensor backward(const detail::ConvBlockTape& tape, Tensor dy, Activation act,
                  GradientSet* grads, bool input_grad) const {
    if (!tape.dropout_scale.empty()) nn::apply_channel_scale(dy, tape.dropout_scale);
    nn::activate_backward(tape.output, dy, act);
    Tensor dh = second.backward(tape.hidden, dy, grads, true);
    nn::activate_backward(tape.hidden, dh, act);
    return first.backward(tape.input, dh, grads, input_grad);
  }

  Conv2d first;
  Conv2d second;
};

struct UpLevel {
  Conv2d up;
  ConvBlock block;
};

struct Decoder {
  Conv2d hidden;
  Conv2d head;
};

struct MimoModel::Layers {
  std::vector<ConvBlock> encoders;
  std::vector<ConvBlock> down;  // down[l-1] produces level l
  std::vector<UpLevel> up;      // up[l-1] produces level l-1 from level l
  std::vector<Decoder> decoders;
};

MimoModel::MimoModel(const ArchConfig& cfg) : cfg_(cfg), layers_(std::make_unique<Layers>()) {
  cfg_.validate();
  const int m = cfg_.num_subnetworks;
  const int cs = cfg_.subnetwork_channels();
  const int base = cfg_.base_channels;
  for (int i = 0; i < m; ++i)
    layers_->encoders.emplace_back("encoder." + std::to_string(i), cfg_.in_channels, cs);
  for (int l = 1; l <= cfg_.depth; ++l) {
    const int in = l == 1 ? cfg_.core_input_channels() : cfg_.channels_at(l - 1);
    layers_->down.emplace_back("core.down." + std::to_string(l), in, cfg_.channels_at(l));
  }
  for (int l = 1; l <= cfg_.depth; ++l) {
    const std::string name = "core.up." + std::to_string(l);
    const int target = cfg_.channels_at(l - 1);
    const int skip = l == 1 ? cfg_.core_input_channels() : cfg_.channels_at(l - 1);
    layers_->up.push_back(
        UpLevel{Conv2d(name + ".upconv", cfg_.channels_at(l), target, 3),
                ConvBlock(name, target + skip, target)});
  }
  for (int i = 0; i < m; ++i) {
    const std::string name = "decoder." + std::to_string(i);
    layers_->decoders.push_back(
        Decoder{Conv2d(name + ".conv", base + cs, cs, 3), Conv2d(name + ".head", cs, 2, 1)});
  }
  register_parameters();

  Rng rng(cfg_.seed);
  const double relu_gain = std::numbers::sqrt2;
  auto init_block = [&](ConvBlock& b) {
    b.first.init(rng, relu_gain);
    b.second.init(rng, relu_gain);
  };
  for (auto& e : layers_->encoders) init_block(e);
  for (auto& d : layers_->down) init_block(d);
  for (auto& u : layers_->up) {
    u.up.init(rng, relu_gain);
    init_block(u.block);
  }
  for (auto& d : layers_->decoders) {
    d.hidden.init(rng, relu_gain);
    d.head.init(rng, 1.0);
  }
}

MimoModel::MimoModel(const MimoModel& other)
    : cfg_(other.cfg_), layers_(std::make_unique<Layers>(*other.layers_)) {
  register_parameters();
}

MimoModel& MimoModel::operator=(const MimoModel& other) {
  if (this != &other) {
    cfg_ = other.cfg_;
    layers_ = std::make_unique<Layers>(*other.layers_);
    register_parameters();
  }
  return *this;
}

MimoModel::MimoModel(MimoModel&& other) noexcept
    : cfg_(other.cfg_), layers_(std::move(other.layers_)), params_(std::move(other.params_)) {}

MimoModel& MimoModel::operator=(MimoModel&& other) noexcept {
  cfg_ = other.cfg_;
  layers_ = std::move(other.layers_);
  params_ = std::move(other.params_);
  return *this;
}

MimoModel::~MimoModel() = default;

void MimoModel::register_parameters() {
  params_.clear();
  auto add = [&](Conv2d& c) {
    params_.push_back(&c.weight);
    params_.push_back(&c.bias);
  };
  for (auto& e : layers_->encoders) {
    add(e.first);
    add(e.second);
  }
  for (auto& d : layers_->down) {
    add(d.first);
    add(d.second);
  }
  for (auto& u : layers_->up) {
    add(u.up);
    add(u.block.first);
    add(u.block.second);
  }
  for (auto& d : layers_->decoders) {
    add(d.hidden);
    add(d.head);
  }
  for (std::size_t i = 0; i < params_.size(); ++i) params_[i]->ordinal = static_cast<int>(i);
}

std::vector<nn::Parameter*> MimoModel::parameters() { return params_; }

std::vector<const nn::Parameter*> MimoModel::parameters() const {
  return {params_.begin(), params_.end()};
}

nn::Parameter* MimoModel::find_parameter(const std::string& name) {
  for (auto* p : params_)
    if (p->name == name) return p;
  return nullptr;
}

std::size_t MimoModel::param_count() const {
  std::size_t total = 0;
  for (const auto* p : params_) total += p->size();
  return total;
}

void MimoModel::check_input(const Tensor& x) const {
  if (x.c() != cfg_.in_channels)
    throw ShapeError("input has " + std::to_string(x.c()) + " channels, model expects " +
                     std::to_string(cfg_.in_channels));
  const int mult = cfg_.spatial_multiple();
  if (x.h() == 0 || x.w() == 0 || x.h() % mult != 0 || x.w() % mult != 0)
    throw ShapeError("input spatial size " + std::to_string(x.h()) + "x" + std::to_string(x.w()) +
                     " is not divisible by " + std::to_string(mult));
}

Tensor MimoModel::encode(int i, const Tensor& x, detail::ConvBlockTape* tape,
                         const ForwardOptions& opts) const {
  if (i < 0 || i >= cfg_.num_subnetworks) throw ShapeError("subnetwork index out of range");
  check_input(x);
  return layers_->encoders[i].forward(x, tape, cfg_.activation, cfg_.dropout, opts);
}

Tensor MimoModel::fuse_core(const Tensor& stacked, detail::CoreTape* tape,
                            const ForwardOptions& opts) const {
  if (stacked.c() != cfg_.core_input_channels())
    throw ShapeError("core expects " + std::to_string(cfg_.core_input_channels()) +
                     " stacked channels, got " + std::to_string(stacked.c()));
  const int mult = cfg_.spatial_multiple();
  if (stacked.h() % mult != 0 || stacked.w() % mult != 0)
    throw ShapeError("core input spatial size not divisible by 2^depth");
  core_calls_.fetch_add(1);
  const int depth = cfg_.depth;
  const Activation act = cfg_.activation;
  if (tape) {
    tape->down.assign(depth, {});
    tape->up.assign(depth, {});
  }

  std::vector<Tensor> features;  // level 0..depth
  features.reserve(depth + 1);
  features.push_back(stacked);
  for (int l = 1; l <= depth; ++l) {
    const Tensor& prev = features.back();
    detail::DownTape* dt = tape ? &tape->down[l - 1] : nullptr;
    Tensor pooled = nn::maxpool2(prev, dt ? &dt->argmax : nullptr);
    if (dt) {
      dt->in_h = prev.h();
      dt->in_w = prev.w();
    }
    features.push_back(layers_->down[l - 1].forward(pooled, dt ? &dt->block : nullptr, act,
                                                    cfg_.dropout, opts));
  }

  Tensor cur = std::move(features.back());
  for (int l = depth; l >= 1; --l) {
    const UpLevel& up = layers_->up[l - 1];
    detail::UpTape* ut = tape ? &tape->up[l - 1] : nullptr;
    Tensor upsampled = nn::upsample2(cur);
    Tensor u = up.up.forward(upsampled);
    nn::activate(u, act);
    Tensor cat = nn::concat_channels(u, features[l - 1]);
    if (ut) {
      ut->upsampled = std::move(upsampled);
      ut->up_channels = u.c();
      ut->up_out = std::move(u);
    }
    cur = up.block.forward(cat, ut ? &ut->block : nullptr, act, cfg_.dropout, opts);
  }
  return cur;
}

Tensor MimoModel::decode(int i, const Tensor& g, const Tensor& skip, detail::DecoderTape* tape,
                         const ForwardOptions& opts) const {
  if (i < 0 || i >= cfg_.num_subnetworks) throw ShapeError("subnetwork index out of range");
  if (g.c() != cfg_.base_channels) throw ShapeError("decoder: core features have wrong channels");
  if (skip.c() != cfg_.subnetwork_channels() || skip.n() != g.n() || skip.h() != g.h() ||
      skip.w() != g.w())
    throw ShapeError("decoder: skip features do not match the core features");
  const Decoder& dec = layers_->decoders[i];
  Tensor cat = nn::concat_channels(g, skip);
  Tensor hidden = dec.hidden.forward(cat);
  nn::activate(hidden, cfg_.activation);
  Tensor dropped = hidden;
  maybe_dropout(dropped, cfg_.dropout, opts, tape ? &tape->dropout_scale : nullptr);
  Tensor heads = dec.head.forward(dropped);
  if (tape) {
    tape->input = std::move(cat);
    tape->hidden = std::move(hidden);
    tape->hidden_dropped = std::move(dropped);
  }
  return heads;
}

std::vector<Tensor> MimoModel::forward(std::span<const Tensor> inputs, ForwardTape* tape,
                                       const ForwardOptions& opts) const {
  const int m = cfg_.num_subnetworks;
  if (static_cast<int>(inputs.size()) != m)
    throw ShapeError("forward expects " + std::to_string(m) + " inputs, got " +
                     std::to_string(inputs.size()));
  for (const auto& x : inputs)
    if (!x.same_shape(inputs.front())) throw ShapeError("forward inputs differ in shape");
  if (tape) {
    tape->encoders.assign(m, {});
    tape->decoders.assign(m, {});
    tape->features.clear();
  }
  std::vector<Tensor> h;
  h.reserve(m);
  for (int i = 0; i < m; ++i)
    h.push_back(encode(i, inputs[i], tape ? &tape->encoders[i] : nullptr, opts));
  Tensor g = fuse_core(concat_many(h), tape ? &tape->core : nullptr, opts);
  std::vector<Tensor> out;
  out.reserve(m);
  for (int i = 0; i < m; ++i)
    out.push_back(decode(i, g, h[i], tape ? &tape->decoders[i] : nullptr, opts));
  if (tape) tape->features = std::move(h);
  return out;
}

std::vector<Tensor> MimoModel::backward(const ForwardTape& tape, std::span<const Tensor> d_outputs,
                                        GradientSet* grads, bool input_grad) const {
  const int m = cfg_.num_subnetworks;
  if (static_cast<int>(d_outputs.size()) != m || static_cast<int>(tape.decoders.size()) != m)
    throw ShapeError("backward: wrong number of output gradients");
  const Activation act = cfg_.activation;
  const int base = cfg_.base_channels;

  Tensor dg;
  std::vector<Tensor> dh(m);
  for (int i = 0; i < m; ++i) {
    const Decoder& dec = layers_->decoders[i];
    const detail::DecoderTape& dt = tape.decoders[i];
    Tensor d_hidden = dec.head.backward(dt.hidden_dropped, d_outputs[i], grads, true);
    if (!dt.dropout_scale.empty()) nn::apply_channel_scale(d_hidden, dt.dropout_scale);
    nn::activate_backward(dt.hidden, d_hidden, act);
    Tensor dcat = dec.hidden.backward(dt.input, d_hidden, grads, true);
    auto [dgi, dhi] = nn::split_channels(dcat, base);
    if (i == 0) {
      dg = std::move(dgi);
    } else {
      dg += dgi;
    }
    dh[i] = std::move(dhi);
  }

  // Core: expanding path first, then the contracting path.
  const int depth = cfg_.depth;
  const detail::CoreTape& ct = tape.core;
  std::vector<Tensor> dfeat(depth + 1);
  auto add_to = [](Tensor& acc, Tensor&& v) {
    if (acc.empty()) {
      acc = std::move(v);
    } else {
      acc += v;
    }
  };
  Tensor dcur = std::move(dg);
  for (int l = 1; l <= depth; ++l) {
    const UpLevel& up = layers_->up[l - 1];
    const detail::UpTape& ut = ct.up[l - 1];
    Tensor dcat = up.block.backward(ut.block, std::move(dcur), act, grads, true);
    auto [du, dskip] = nn::split_channels(dcat, ut.up_channels);
    add_to(dfeat[l - 1], std::move(dskip));
    nn::activate_backward(ut.up_out, du, act);
    Tensor dup = up.up.backward(ut.upsampled, du, grads, true);
    dcur = nn::upsample2_backward(dup);
  }
  add_to(dfeat[depth], std::move(dcur));
  for (int l = depth; l >= 1; --l) {
    const detail::DownTape& dt = ct.down[l - 1];
    Tensor dpooled = layers_->down[l - 1].backward(dt.block, std::move(dfeat[l]), act, grads, true);
    add_to(dfeat[l - 1], nn::maxpool2_backward(dpooled, dt.argmax, dt.in_h, dt.in_w));
  }

  auto dstack = split_many(dfeat[0], m);
  std::vector<Tensor> dx;
  if (input_grad) dx.reserve(m);
  for (int i = 0; i < m; ++i) {
    dh[i] += dstack[i];
    Tensor d = layers_->encoders[i].backward(tape.encoders[i], std::move(dh[i]), act, grads,
                                             input_grad);
    if (input_grad) dx.push_back(std::move(d));
  }
  return dx;
}

MimoModel build_model(const ArchConfig& cfg) { return MimoModel(cfg); }

Encoding encode(const MimoModel& model, int i, const RasterTensor& x) {
  Tensor h = model.encode(i, nn::batch_of(x), nullptr);
  Encoding enc;
  enc.features = nn::image_of(h, 0);
  enc.skips.push_back(enc.features);
  return enc;
}

RasterTensor fuse_core(const MimoModel& model, const RasterTensor& stacked) {
  return nn::image_of(model.fuse_core(nn::batch_of(stacked), nullptr), 0);
}

SubnetworkOutput decode(const MimoModel& model, int i, const RasterTensor& g,
                        std::span<const RasterTensor> skips) {
  if (skips.size() != 1)
    throw ShapeError("decoder expects exactly one skip level, got " + std::to_string(skips.size()));
  Tensor heads = model.decode(i, nn::batch_of(g), nn::batch_of(skips.front()), nullptr);
  return split_heads(heads).front();
}

std::vector<SubnetworkOutput> forward(const MimoModel& model, std::span<const RasterTensor> inputs,
                                      const ForwardOptions& opts) {
  std::vector<Tensor> batches;
  batches.reserve(inputs.size());
  for (const auto& x : inputs) batches.push_back(nn::batch_of(x));
  auto heads = model.forward(batches, nullptr, opts);
  std::vector<SubnetworkOutput> out;
  out.reserve(heads.size());
  for (const auto& h : heads) out.push_back(split_heads(h).front());
  return out;
}

std::size_t param_count(const MimoModel& model) { return model.param_count(); }

std::vector<SubnetworkOutput> split_heads(const Tensor& heads) {
  if (heads.c() != 2) throw ShapeError("head tensor must have 2 channels");
  std::vector<SubnetworkOutput> out;
  out.reserve(heads.n());
  for (int n = 0; n < heads.n(); ++n)
    out.push_back({nn::channel_of(heads, n, 0), nn::channel_of(heads, n, 1)});
  return out;
}

}  // namespace mimo
