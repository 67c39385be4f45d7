#pragma once

#include <cstdint>
#include <string>

#include "iconforge/autodiff.hpp"
#include "iconforge/transform.hpp"
#include "iconforge/volume.hpp"

namespace iconforge {

struct UNetConfig {
  int depth = 3;
  int base_channels = 8;
  int in_channels = 2;   // warped moving + target
  int out_channels = 3;  // displacement components

  void validate() const;
  bool operator==(const UNetConfig&) const = default;
};

struct ModelConfig {
  UNetConfig unet;
  int canonical_side = 175;
  // Raw network outputs are multiplied by gain_voxels / (side - 1), so a unit
  // output moves by gain_voxels canonical voxels.
  double gain_voxels = 10.0;
  bool step2_enabled = false;
  std::uint64_t init_seed = 0;

  double output_gain() const { return gain_voxels / (canonical_side - 1); }
  bool operator==(const ModelConfig&) const = default;
};

// Parameter-name prefixes of the four identically shaped UNets.
inline const char* const kLevelPrefixes[3] = {"level1.", "level2.", "level3."};
inline const char* const kRefinePrefix = "refine.";

enum class TrainingPhase { step1, step2, finetune };

// Three-level coarse-to-fine predictor plus a full-resolution refinement net.
// The same parameters serve both registration directions.
class RegistrationModel {
 public:
  explicit RegistrationModel(const ModelConfig& cfg);
  RegistrationModel(const ModelConfig& cfg, ad::ParamStore params);

  const ModelConfig& config() const { return cfg_; }
  ad::ParamStore& params() { return params_; }
  const ad::ParamStore& params() const { return params_; }

  // step1: level nets train, step 2 off. step2: refinement on and trainable,
  // level nets frozen unless `unfreeze_step1`. finetune: everything trains.
  void set_phase(TrainingPhase phase, bool unfreeze_step1 = false);

 private:
  ModelConfig cfg_;
  ad::ParamStore params_;
};

// Adds the parameters of one UNet under `prefix`, He-initialized from `seed`;
// the output layer starts at zero.
void init_unet_params(ad::ParamStore& store, const std::string& prefix, const UNetConfig& cfg,
                      std::uint64_t seed);

// Raw UNet: input channels -> 3 output channels, same spatial dims.
ad::Var unet_forward(ad::Tape& tape, const ad::ParamStore& store, const std::string& prefix,
                     const UNetConfig& cfg, const ad::Var& input);
ad::Var unet_forward(ad::Tape& tape, ad::ParamStore& store, const std::string& prefix,
                     const UNetConfig& cfg, const ad::Var& input);

// Identity map as a tensor.
Tensor identity_tensor(const Dims3& dims);

// ---- recorded predictors (gradients flow into the model parameters) -------

// psi(x) = x + gain * unet(moving, target), on the inputs' grid.
ad::Var predict_level(ad::Tape& tape, RegistrationModel& model, const std::string& prefix,
                      const ad::Var& moving_warped, const ad::Var& target);
ad::Var predict_multires(ad::Tape& tape, RegistrationModel& model, const ad::Var& ia,
                         const ad::Var& ib);
ad::Var predict_full(ad::Tape& tape, RegistrationModel& model, const ad::Var& ia,
                     const ad::Var& ib);

// ---- inference -------------------------------------------------------------

TransformMap predict_level(const RegistrationModel& model, const std::string& prefix,
                           const Volume& moving_warped, const Volume& target);
TransformMap predict_multires(const RegistrationModel& model, const Volume& ia, const Volume& ib);
// phi_ab for the ordered pair (ia -> ib); call with (ib, ia) for phi_ba.
TransformMap predict_full(const RegistrationModel& model, const Volume& ia, const Volume& ib);

}  // namespace iconforge
