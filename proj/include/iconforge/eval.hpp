#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "iconforge/network.hpp"
#include "iconforge/preprocess.hpp"
#include "iconforge/transform.hpp"
#include "iconforge/volume.hpp"

namespace iconforge {

// Physical points in mm, in the frame of the volume they were placed on.
using LandmarkSet = std::vector<Vec3>;

// x_norm = (p - origin) / (spacing * (dims - 1)) per axis.
NormalizedCoord physical_to_normalized(const Vec3& p, const Grid& grid);
Vec3 normalized_to_physical(const NormalizedCoord& x, const Grid& grid);

// Mean distance between each fixed landmark carried through phi_ab (a pull-back
// map on the fixed grid) into the moving frame and its paired moving landmark.
// Throws Error("landmark-count") on mismatched or empty sets.
double mtre(const TransformMap& phi_ab, const LandmarkSet& fixed_lm, const LandmarkSet& moving_lm,
            const Grid& fixed, const Grid& moving);

struct DiceScores {
  std::map<std::int32_t, double> per_label;
  double mean = 0.0;  // over per_label; 0 when no label is present
};

// Labels present in either volume; labels absent from both are skipped.
DiceScores dice(const LabelVolume& warped, const LabelVolume& target);

struct MetricsReport {
  std::optional<double> mtre_mm;
  std::map<std::int32_t, double> dice_per_label;
  std::optional<double> dice_mean;
  double neg_jac_fraction = 0.0;
  double wall_time_s = 0.0;

  std::string to_json() const;
  static MetricsReport from_json(const std::string& text);
  bool operator==(const MetricsReport&) const = default;
};

// One CSV row per pair: pair,mtre_mm,dice_mean,neg_jac_fraction,wall_time_s
// (empty cells for absent metrics).
std::string metrics_csv(const std::vector<std::pair<std::string, MetricsReport>>& rows);

// Stages an evaluation passed through, with the grid each one worked on.
struct TraceEvent {
  std::string stage;
  Dims3 dims{};
};

struct EvalInputs {
  std::optional<LandmarkSet> landmarks_fixed;
  std::optional<LandmarkSet> landmarks_moving;
  std::optional<LabelVolume> labels_fixed;
  std::optional<LabelVolume> labels_moving;
};

struct EvalResult {
  MetricsReport report;
  TransformMap phi;  // on the fixed image's original grid
  std::vector<TraceEvent> trace;
};

// Metrics for a map already on the fixed image's original grid. Throws
// Error("shape") when the map is on any other grid.
EvalResult evaluate_map(const TransformMap& phi, const Volume& fixed, const Volume& moving,
                        const EvalInputs& inputs = {});

struct PairOptions {
  Modality modality_fixed = Modality::none;
  Modality modality_moving = Modality::none;
  int io_iterations = 0;
  double io_lr = 1e-5;
};

// Preprocess both images onto the model's canonical grid, predict (optionally
// instance-optimize), carry the map back to the fixed image's grid, and
// evaluate there.
EvalResult evaluate_pair(const RegistrationModel& model, const Volume& fixed, const Volume& moving,
                         const EvalInputs& inputs = {}, const PairOptions& options = {});

}  // namespace iconforge
