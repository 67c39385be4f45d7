#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "iconforge/eval.hpp"
#include "iconforge/io.hpp"
#include "iconforge/loss.hpp"
#include "iconforge/network.hpp"
#include "iconforge/preprocess.hpp"

namespace iconforge {

enum class PairingMode { intra, inter };

PairingMode parse_pairing(const std::string& name);

// Volumes are kept as loaded; training preprocesses them once with
// prepare_input, the same entry point inference uses.
struct DatasetSpec {
  std::string name;
  PairingMode mode = PairingMode::inter;
  std::vector<Volume> volumes;
  // Ordered (moving, target) index pairs; required for intra mode.
  std::vector<std::pair<int, int>> pairs;
  Modality preprocessing = Modality::none;
  std::vector<LabelVolume> labels;  // empty or one per volume

  // Throws Error("empty-dataset") when no pair can be drawn.
  void validate() const;
  // Number of distinct ordered pairs the sampler draws from.
  std::size_t pair_space() const;
};

struct TrainConfig {
  int pairs_per_dataset = 25;
  int epochs_phase1 = 1;
  int epochs_phase2 = 0;
  double lr = 5e-5;
  LossConfig loss;
  std::uint64_t seed = 0;
  int canonical_side = kDefaultCanonicalSide;
  bool unfreeze_step1 = false;
  // A checkpoint every this many epochs (and after the last one); 0 = only at the end.
  int checkpoint_every = 0;
  std::filesystem::path out_dir;  // empty: no files written
};

struct SampledPair {
  int dataset = 0;
  int moving = 0;
  int target = 0;
  bool operator==(const SampledPair&) const = default;
};

// N pairs per dataset, uniform with replacement over each dataset's pair
// space, concatenated and shuffled.
std::vector<SampledPair> sample_epoch(const std::vector<DatasetSpec>& datasets, int pairs_per_dataset,
                                      std::mt19937_64& rng);

struct EpochLog {
  int epoch = 0;  // 1-based, counted across phases
  TrainingPhase phase = TrainingPhase::step1;
  LossBreakdown mean;
  int pairs = 0;
  int skipped = 0;
};

struct TrainResult {
  std::vector<EpochLog> epochs;
  std::vector<std::filesystem::path> checkpoints;
};

// Called after every epoch; lets callers watch progress.
using EpochCallback = std::function<void(const EpochLog&)>;

// Phase 1 trains the three level nets with step 2 off, phase 2 switches step 2
// on. Throws Error("divergence") when at least 10% of an epoch's pairs give
// a non-finite loss.
TrainResult train(RegistrationModel& model, const std::vector<DatasetSpec>& datasets,
                  const TrainConfig& cfg, const EpochCallback& on_epoch = {});

// Same loop with every parameter trainable for `epochs` epochs.
TrainResult finetune(RegistrationModel& model, const std::vector<DatasetSpec>& datasets,
                     const TrainConfig& cfg, int epochs, const EpochCallback& on_epoch = {});

struct InstanceConfig {
  int iterations = 50;
  double lr = 1e-5;
  LossConfig loss;
};

enum class InstanceStatus { ok, nonfinite };

struct InstanceResult {
  TransformMap phi_ab;
  TransformMap phi_ba;
  InstanceStatus status = InstanceStatus::ok;
  int iterations_run = 0;
  std::vector<LossBreakdown> trace;  // loss before each step, then the final one
};

// Optimizes a private copy of `model` on one canonical pair. On a non-finite
// loss it stops and returns the best maps seen so far.
InstanceResult instance_optimize(const RegistrationModel& model, const Volume& ia, const Volume& ib,
                                 const InstanceConfig& cfg = {});

// Reads every volume (and label map) a manifest references.
std::vector<DatasetSpec> load_datasets(const io::Manifest& manifest);

// Preprocessed canonical copies of a dataset's volumes.
std::vector<Volume> prepare_dataset(const DatasetSpec& ds, int side);

// Writes the per-epoch CSV: epoch,sim_ab,sim_ba,reg,total
void write_metrics_log(const std::vector<EpochLog>& epochs, const std::filesystem::path& path);

}  // namespace iconforge
