#include "iconforge/eval.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <set>

#include <json.hpp>

#include "iconforge/error.hpp"
#include "iconforge/trainer.hpp"

namespace iconforge {

NormalizedCoord physical_to_normalized(const Vec3& p, const Grid& grid) {
  NormalizedCoord x{};
  for (int a = 0; a < 3; ++a) {
    x[a] = (p[a] - grid.origin[a]) / (grid.spacing[a] * (grid.dims[a] - 1));
  }
  return x;
}

Vec3 normalized_to_physical(const NormalizedCoord& x, const Grid& grid) {
  Vec3 p{};
  for (int a = 0; a < 3; ++a) p[a] = grid.origin[a] + x[a] * grid.spacing[a] * (grid.dims[a] - 1);
  return p;
}

double mtre(const TransformMap& phi_ab, const LandmarkSet& fixed_lm, const LandmarkSet& moving_lm,
            const Grid& fixed, const Grid& moving) {
  if (fixed_lm.size() != moving_lm.size() || fixed_lm.empty()) {
    throw Error("landmark-count", "fixed and moving landmark sets must be non-empty and paired (" +
                                      std::to_string(fixed_lm.size()) + " vs " +
                                      std::to_string(moving_lm.size()) + ")");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < fixed_lm.size(); ++i) {
    const auto mapped = normalized_to_physical(phi_ab.evaluate(physical_to_normalized(fixed_lm[i], fixed)), moving);
    double d2 = 0.0;
    for (int a = 0; a < 3; ++a) d2 += (mapped[a] - moving_lm[i][a]) * (mapped[a] - moving_lm[i][a]);
    total += std::sqrt(d2);
  }
  return total / static_cast<double>(fixed_lm.size());
}

DiceScores dice(const LabelVolume& warped, const LabelVolume& target) {
  if (warped.dims() != target.dims()) throw Error("shape", "label volumes have different dims");
  std::map<std::int32_t, std::array<std::size_t, 3>> counts;  // |A|, |B|, |A and B|
  const auto a = warped.labels(), b = target.labels();
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != 0) ++counts[a[i]][0];
    if (b[i] != 0) ++counts[b[i]][1];
    if (a[i] != 0 && a[i] == b[i]) ++counts[a[i]][2];
  }
  DiceScores out;
  for (const auto& [label, c] : counts) {
    out.per_label[label] = 2.0 * static_cast<double>(c[2]) / static_cast<double>(c[0] + c[1]);
  }
  if (!out.per_label.empty()) {
    double s = 0.0;
    for (const auto& [label, d] : out.per_label) s += d;
    out.mean = s / static_cast<double>(out.per_label.size());
  }
  return out;
}

std::string MetricsReport::to_json() const {
  nlohmann::json j;
  j["mtre_mm"] = mtre_mm ? nlohmann::json(*mtre_mm) : nlohmann::json(nullptr);
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [label, d] : dice_per_label) per[std::to_string(label)] = d;
  j["dice_per_label"] = per;
  j["dice_mean"] = dice_mean ? nlohmann::json(*dice_mean) : nlohmann::json(nullptr);
  j["neg_jac_fraction"] = neg_jac_fraction;
  j["wall_time_s"] = wall_time_s;
  return j.dump();
}

MetricsReport MetricsReport::from_json(const std::string& text) {
  MetricsReport r;
  try {
    const auto j = nlohmann::json::parse(text);
    if (!j.at("mtre_mm").is_null()) r.mtre_mm = j.at("mtre_mm").get<double>();
    for (const auto& [key, value] : j.at("dice_per_label").items()) {
      r.dice_per_label[std::stoi(key)] = value.get<double>();
    }
    if (!j.at("dice_mean").is_null()) r.dice_mean = j.at("dice_mean").get<double>();
    r.neg_jac_fraction = j.at("neg_jac_fraction").get<double>();
    r.wall_time_s = j.at("wall_time_s").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw Error("format", std::string("metrics report: ") + e.what());
  }
  return r;
}

std::string metrics_csv(const std::vector<std::pair<std::string, MetricsReport>>& rows) {
  std::string out = "pair,mtre_mm,dice_mean,neg_jac_fraction,wall_time_s\n";
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  for (const auto& [name, r] : rows) {
    out += name + "," + (r.mtre_mm ? num(*r.mtre_mm) : "") + "," +
           (r.dice_mean ? num(*r.dice_mean) : "") + "," + num(r.neg_jac_fraction) + "," +
           num(r.wall_time_s) + "\n";
  }
  return out;
}

namespace {

void check_inputs(const EvalInputs& in, const Volume& fixed, const Volume& moving) {
  if (in.landmarks_fixed.has_value() != in.landmarks_moving.has_value()) {
    throw Error("landmark-count", "landmarks must be given for both images");
  }
  if (in.labels_fixed.has_value() != in.labels_moving.has_value()) {
    throw Error("usage", "labels must be given for both images");
  }
  if (in.labels_fixed && (in.labels_fixed->dims() != fixed.dims() || in.labels_moving->dims() != moving.dims())) {
    throw Error("shape", "label volumes must match their images' dims");
  }
}

}  // namespace

EvalResult evaluate_map(const TransformMap& phi, const Volume& fixed, const Volume& moving,
                        const EvalInputs& inputs) {
  check_inputs(inputs, fixed, moving);
  if (phi.dims() != fixed.dims()) {
    throw Error("shape", "metrics need the map on the fixed image's original grid");
  }
  EvalResult out;
  out.phi = phi;
  out.trace.push_back({"metrics", phi.dims()});
  out.report.neg_jac_fraction = neg_jacobian_fraction(phi);
  if (inputs.landmarks_fixed) {
    out.report.mtre_mm = mtre(phi, *inputs.landmarks_fixed, *inputs.landmarks_moving, fixed.grid(), moving.grid());
  }
  if (inputs.labels_fixed) {
    const auto warped = warp_labels(*inputs.labels_moving, phi, fixed.grid());
    const auto d = dice(warped, *inputs.labels_fixed);
    out.report.dice_per_label = d.per_label;
    out.report.dice_mean = d.mean;
  }
  return out;
}

EvalResult evaluate_pair(const RegistrationModel& model, const Volume& fixed, const Volume& moving,
                         const EvalInputs& inputs, const PairOptions& options) {
  check_inputs(inputs, fixed, moving);
  const auto start = std::chrono::steady_clock::now();
  const int side = model.config().canonical_side;
  std::vector<TraceEvent> trace;
  const Volume ib = prepare_input(fixed, options.modality_fixed, side);
  const Volume ia = prepare_input(moving, options.modality_moving, side);
  trace.push_back({"prepare_input", ib.dims()});

  TransformMap canonical;
  if (options.io_iterations > 0) {
    InstanceConfig io_cfg;
    io_cfg.iterations = options.io_iterations;
    io_cfg.lr = options.io_lr;
    canonical = instance_optimize(model, ia, ib, io_cfg).phi_ab;
    trace.push_back({"instance_optimize", canonical.dims()});
  } else {
    canonical = predict_full(model, ia, ib);
    trace.push_back({"predict", canonical.dims()});
  }
  const TransformMap phi = map_to_original(canonical, fixed);
  trace.push_back({"map_to_original", phi.dims()});

  EvalResult out = evaluate_map(phi, fixed, moving, inputs);
  trace.insert(trace.end(), out.trace.begin(), out.trace.end());
  out.trace = std::move(trace);
  out.report.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

}  // namespace iconforge
