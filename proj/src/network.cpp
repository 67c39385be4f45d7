#include "iconforge/network.hpp"

#include <cmath>
#include <random>
#include <vector>

#include "iconforge/error.hpp"

namespace iconforge {

void UNetConfig::validate() const {
  if (depth < 1) throw Error("config", "unet depth must be >= 1");
  if (base_channels < 1 || in_channels < 1 || out_channels < 1) {
    throw Error("config", "unet channel counts must be >= 1");
  }
}

namespace {

int channels_at(const UNetConfig& cfg, int level) { return cfg.base_channels << level; }

struct ConvShape {
  std::string name;
  int in = 0;
  int out = 0;
};

// Layer order: enc0..enc{depth}, dec{depth-1}..dec0, out.
std::vector<ConvShape> unet_layers(const UNetConfig& cfg) {
  std::vector<ConvShape> layers;
  layers.push_back({"enc0", cfg.in_channels, channels_at(cfg, 0)});
  for (int l = 1; l <= cfg.depth; ++l) {
    layers.push_back({"enc" + std::to_string(l), channels_at(cfg, l - 1), channels_at(cfg, l)});
  }
  for (int l = cfg.depth - 1; l >= 0; --l) {
    layers.push_back({"dec" + std::to_string(l), channels_at(cfg, l + 1) + channels_at(cfg, l),
                      channels_at(cfg, l)});
  }
  layers.push_back({"out", channels_at(cfg, 0), cfg.out_channels});
  return layers;
}

template <class Store>
ad::Var conv_layer(ad::Tape& tape, Store& store, const std::string& prefix,
                   const std::string& layer, int out_channels, const ad::Var& x) {
  const auto w = tape.param(store.get(prefix + layer + ".weight"));
  const auto b = tape.param(store.get(prefix + layer + ".bias"));
  return ad::conv3d(tape, x, w, b, out_channels);
}

template <class Store>
ad::Var unet_impl(ad::Tape& tape, Store& store, const std::string& prefix, const UNetConfig& cfg,
                  const ad::Var& input) {
  if (input.value().channels != cfg.in_channels) {
    throw Error("shape", "unet expects " + std::to_string(cfg.in_channels) + " input channels");
  }
  std::vector<ad::Var> skips;
  ad::Var x = ad::leaky_relu(tape, conv_layer(tape, store, prefix, "enc0", channels_at(cfg, 0), input));
  for (int l = 1; l <= cfg.depth; ++l) {
    skips.push_back(x);
    x = ad::avg_pool2x(tape, x);
    x = ad::leaky_relu(tape, conv_layer(tape, store, prefix, "enc" + std::to_string(l),
                                        channels_at(cfg, l), x));
  }
  for (int l = cfg.depth - 1; l >= 0; --l) {
    const ad::Var& skip = skips[l];
    x = ad::trilinear_upsample(tape, x, skip.value().dims);
    x = ad::concat_channels(tape, x, skip);
    x = ad::leaky_relu(tape, conv_layer(tape, store, prefix, "dec" + std::to_string(l),
                                        channels_at(cfg, l), x));
  }
  return conv_layer(tape, store, prefix, "out", cfg.out_channels, x);
}

void require_canonical(const ModelConfig& cfg, const Tensor& t) {
  const int s = cfg.canonical_side;
  if (t.channels != 1 || t.dims != Dims3{s, s, s}) {
    throw Error("shape", "model expects single-channel " + std::to_string(s) + "^3 inputs");
  }
}

template <class Model>
ad::Var level_displacement(ad::Tape& tape, Model& model, const std::string& prefix,
                           const ad::Var& moving, const ad::Var& target) {
  if (!moving.value().same_shape(target.value()) || moving.value().channels != 1) {
    throw Error("shape", "level inputs must be single-channel images on one grid");
  }
  const auto input = ad::concat_channels(tape, moving, target);
  const auto raw = unet_forward(tape, model.params(), prefix, model.config().unet, input);
  return ad::scale(tape, raw, model.config().output_gain());
}

template <class Model>
ad::Var level_map(ad::Tape& tape, Model& model, const std::string& prefix, const ad::Var& moving,
                  const ad::Var& target) {
  const auto u = level_displacement(tape, model, prefix, moving, target);
  return ad::add(tape, u, tape.constant(identity_tensor(u.value().dims)));
}

ad::Var pooled(ad::Tape& tape, ad::Var x, int times) {
  for (int i = 0; i < times; ++i) x = ad::avg_pool2x(tape, x);
  return x;
}

template <class Model>
ad::Var multires_impl(ad::Tape& tape, Model& model, const ad::Var& ia, const ad::Var& ib) {
  require_canonical(model.config(), ia.value());
  require_canonical(model.config(), ib.value());
  const Dims3 canon = ia.value().dims;
  const auto identity = tape.constant(identity_tensor(canon));
  ad::Var phi;
  bool have_phi = false;
  for (int level = 0; level < 3; ++level) {
    const int shrink = 2 - level;  // 1/4, 1/2, 1
    const ad::Var warped = have_phi ? ad::warp(tape, ia, phi) : ia;
    const auto moving = pooled(tape, warped, shrink);
    const auto target = pooled(tape, ib, shrink);
    auto u = level_displacement(tape, model, kLevelPrefixes[level], moving, target);
    if (u.value().dims != canon) u = ad::trilinear_upsample(tape, u, canon);
    const auto psi = ad::add(tape, u, identity);
    // The first composition is with the identity, which is a no-op.
    phi = have_phi ? ad::warp(tape, phi, psi) : psi;
    have_phi = true;
  }
  return phi;
}

template <class Model>
ad::Var full_impl(ad::Tape& tape, Model& model, const ad::Var& ia, const ad::Var& ib) {
  const auto phi1 = multires_impl(tape, model, ia, ib);
  if (!model.config().step2_enabled) return phi1;
  const auto moving = ad::warp(tape, ia, phi1);
  const auto psi2 = level_map(tape, model, kRefinePrefix, moving, ib);
  return ad::warp(tape, phi1, psi2);
}

}  // namespace

void init_unet_params(ad::ParamStore& store, const std::string& prefix, const UNetConfig& cfg,
                      std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  for (const auto& layer : unet_layers(cfg)) {
    const std::size_t n = static_cast<std::size_t>(layer.out) * layer.in * 27;
    std::vector<float> w(n, 0.0f);
    if (layer.name != "out") {
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / (layer.in * 27.0)));
      for (auto& v : w) v = static_cast<float>(dist(rng));
    }
    store.add(prefix + layer.name + ".weight", {layer.out, layer.in, 3, 3, 3}, std::move(w));
    store.add(prefix + layer.name + ".bias", {layer.out}, std::vector<float>(layer.out, 0.0f));
  }
}

ad::Var unet_forward(ad::Tape& tape, const ad::ParamStore& store, const std::string& prefix,
                     const UNetConfig& cfg, const ad::Var& input) {
  return unet_impl(tape, store, prefix, cfg, input);
}

ad::Var unet_forward(ad::Tape& tape, ad::ParamStore& store, const std::string& prefix,
                     const UNetConfig& cfg, const ad::Var& input) {
  return unet_impl(tape, store, prefix, cfg, input);
}

Tensor identity_tensor(const Dims3& dims) {
  Tensor t(3, dims);
  const std::size_t n = t.voxels();
  std::size_t v = 0;
  for (int k = 0; k < dims[2]; ++k)
    for (int j = 0; j < dims[1]; ++j)
      for (int i = 0; i < dims[0]; ++i, ++v) {
        t.data[v] = dims[0] > 1 ? static_cast<float>(static_cast<double>(i) / (dims[0] - 1)) : 0.0f;
        t.data[n + v] = dims[1] > 1 ? static_cast<float>(static_cast<double>(j) / (dims[1] - 1)) : 0.0f;
        t.data[2 * n + v] = dims[2] > 1 ? static_cast<float>(static_cast<double>(k) / (dims[2] - 1)) : 0.0f;
      }
  return t;
}

RegistrationModel::RegistrationModel(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.unet.validate();
  if (cfg_.canonical_side < 4) throw Error("config", "canonical side must be >= 4");
  for (int level = 0; level < 3; ++level) {
    init_unet_params(params_, kLevelPrefixes[level], cfg_.unet, cfg_.init_seed * 4 + level);
  }
  init_unet_params(params_, kRefinePrefix, cfg_.unet, cfg_.init_seed * 4 + 3);
  set_phase(cfg_.step2_enabled ? TrainingPhase::finetune : TrainingPhase::step1);
}

RegistrationModel::RegistrationModel(const ModelConfig& cfg, ad::ParamStore params)
    : cfg_(cfg), params_(std::move(params)) {
  const RegistrationModel reference(cfg);
  for (const auto& p : reference.params().all()) {
    if (!params_.contains(p.name) || params_.get(p.name).shape != p.shape) {
      throw Error("checkpoint", "parameter '" + p.name + "' missing or mis-shaped");
    }
  }
  if (params_.all().size() != reference.params().all().size()) {
    throw Error("checkpoint", "unexpected extra parameters");
  }
  set_phase(cfg_.step2_enabled ? TrainingPhase::finetune : TrainingPhase::step1);
}

void RegistrationModel::set_phase(TrainingPhase phase, bool unfreeze_step1) {
  switch (phase) {
    case TrainingPhase::step1:
      cfg_.step2_enabled = false;
      for (auto* prefix : kLevelPrefixes) params_.set_trainable(prefix, true);
      params_.set_trainable(kRefinePrefix, false);
      break;
    case TrainingPhase::step2:
      cfg_.step2_enabled = true;
      for (auto* prefix : kLevelPrefixes) params_.set_trainable(prefix, unfreeze_step1);
      params_.set_trainable(kRefinePrefix, true);
      break;
    case TrainingPhase::finetune:
      cfg_.step2_enabled = true;
      for (auto* prefix : kLevelPrefixes) params_.set_trainable(prefix, true);
      params_.set_trainable(kRefinePrefix, true);
      break;
  }
}

ad::Var predict_level(ad::Tape& tape, RegistrationModel& model, const std::string& prefix,
                      const ad::Var& moving_warped, const ad::Var& target) {
  return level_map(tape, model, prefix, moving_warped, target);
}

ad::Var predict_multires(ad::Tape& tape, RegistrationModel& model, const ad::Var& ia,
                         const ad::Var& ib) {
  return multires_impl(tape, model, ia, ib);
}

ad::Var predict_full(ad::Tape& tape, RegistrationModel& model, const ad::Var& ia,
                     const ad::Var& ib) {
  return full_impl(tape, model, ia, ib);
}

TransformMap predict_level(const RegistrationModel& model, const std::string& prefix,
                           const Volume& moving_warped, const Volume& target) {
  ad::Tape tape(false);
  return TransformMap(level_map(tape, model, prefix, tape.constant(to_tensor(moving_warped)),
                                tape.constant(to_tensor(target)))
                          .value());
}

TransformMap predict_multires(const RegistrationModel& model, const Volume& ia, const Volume& ib) {
  ad::Tape tape(false);
  return TransformMap(
      multires_impl(tape, model, tape.constant(to_tensor(ia)), tape.constant(to_tensor(ib))).value());
}

TransformMap predict_full(const RegistrationModel& model, const Volume& ia, const Volume& ib) {
  ad::Tape tape(false);
  return TransformMap(
      full_impl(tape, model, tape.constant(to_tensor(ia)), tape.constant(to_tensor(ib))).value());
}

}  // namespace iconforge
