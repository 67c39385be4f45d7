#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "iconforge/eval.hpp"
#include "iconforge/network.hpp"
#include "iconforge/preprocess.hpp"
#include "iconforge/transform.hpp"
#include "iconforge/volume.hpp"

namespace iconforge::io {

namespace fs = std::filesystem;

// ---- NIfTI-1 (single file, optionally gzip-compressed) ----------------------

// Header fields the reader consumed, kept for inspection and tests.
struct NiftiInfo {
  bool big_endian = false;
  int datatype = 0;
  int bitpix = 0;
  Dims3 dims{};
  Vec3 spacing{};
  Vec3 origin{};
  double scl_slope = 0.0;
  double scl_inter = 0.0;
  int qform_code = 0;
  int sform_code = 0;
  std::int64_t vox_offset = 0;
};

// Errors: "io" (unreadable), "not-nifti", "unsupported-dtype", "not-3d",
// "oblique-unsupported", "truncated".
Volume read_nifti(const fs::path& path, NiftiInfo* info = nullptr);
// Labels must be non-negative integers after scaling (Error "label").
LabelVolume read_nifti_labels(const fs::path& path);
// float32, sform = diag(spacing) + origin. A ".gz" suffix compresses.
void write_nifti(const Volume& v, const fs::path& path);
void write_nifti_labels(const LabelVolume& v, const fs::path& path);

// Volume by extension: .nii/.nii.gz as NIfTI, anything else as raw + sidecar.
Volume read_volume(const fs::path& path);
void write_volume(const Volume& v, const fs::path& path);
LabelVolume read_labels(const fs::path& path);

// ---- raw volume: little-endian float32 samples + "<path>.json" sidecar ------
void write_raw_volume(const Volume& v, const fs::path& path);
Volume read_raw_volume(const fs::path& path);

// ---- transform: little-endian float32, per node (x,y,z), nodes in grid order,
// plus "<path>.json" {"dims":[nx,ny,nz],"convention":"pullback-normalized-v1"}
inline constexpr const char* kTransformConvention = "pullback-normalized-v1";
void write_transform(const TransformMap& phi, const fs::path& path);
TransformMap read_transform(const fs::path& path);

// ---- landmarks: CSV x_mm,y_mm,z_mm, optional header line --------------------
LandmarkSet read_landmarks(const fs::path& path);
void write_landmarks(const LandmarkSet& points, const fs::path& path);

// ---- checkpoint: "<stem>.json" manifest + "<stem>.bin" parameter blob -------
struct Checkpoint {
  ModelConfig config;
  TrainingPhase phase = TrainingPhase::step1;
  int epoch = 0;
  ad::ParamStore params;
};

std::string to_string(TrainingPhase phase);
TrainingPhase parse_phase(const std::string& name);

// `path` names the manifest; the blob sits next to it with extension .bin.
void write_checkpoint(const RegistrationModel& model, TrainingPhase phase, int epoch,
                      const fs::path& path);
Checkpoint read_checkpoint(const fs::path& path);
RegistrationModel load_model(const fs::path& path);

// ---- dataset manifest -------------------------------------------------------
struct DatasetEntry {
  std::string name;
  std::string mode;           // "intra" | "inter"
  std::string preprocessing;  // "ct" | "mri" | "none"
  std::vector<fs::path> volumes;
  std::vector<std::pair<int, int>> pairs;
  std::vector<fs::path> labels;     // empty or one per volume
  std::vector<fs::path> landmarks;  // empty or one per volume
};

// Training settings a manifest may carry; flags override them.
struct ManifestSettings {
  std::optional<double> lambda;
  std::optional<double> lr;
  std::optional<int> canonical_side;
  std::optional<int> pairs_per_dataset;
  std::optional<int> epochs_phase1;
  std::optional<int> epochs_phase2;
  std::optional<std::uint64_t> seed;
};

struct Manifest {
  std::vector<DatasetEntry> datasets;
  ManifestSettings settings;
};

// Relative paths resolve against the manifest's directory. Every referenced
// file must exist (Error "missing-file" naming it).
Manifest read_manifest(const fs::path& path);
void write_manifest(const Manifest& m, const fs::path& path);

// Binary PGM (P5) of a 2D float image scaled from [lo, hi] to 0..255.
void write_pgm(const std::vector<float>& pixels, int width, int height, float lo, float hi,
               const fs::path& path);

}  // namespace iconforge::io
