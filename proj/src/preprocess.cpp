#include "iconforge/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "iconforge/error.hpp"

namespace iconforge {

Modality parse_modality(const std::string& name) {
  if (name == "ct") return Modality::ct;
  if (name == "mri") return Modality::mri;
  if (name == "none") return Modality::none;
  throw Error("usage", "unknown modality '" + name + "' (expected ct|mri|none)");
}

std::string to_string(Modality m) {
  switch (m) {
    case Modality::ct: return "ct";
    case Modality::mri: return "mri";
    case Modality::none: return "none";
  }
  return "none";
}

Volume normalize_ct(const Volume& v) {
  std::vector<float> out(v.size());
  auto in = v.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double hu = std::clamp(static_cast<double>(in[i]), -1000.0, 1000.0);
    out[i] = static_cast<float>((hu + 1000.0) / 2000.0);
  }
  return v.with_values(std::move(out));
}

double percentile(std::span<const float> values, double q) {
  if (values.empty()) throw Error("shape", "percentile of an empty set");
  std::vector<float> sorted(values.begin(), values.end());
  const double rank = q / 100.0 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  std::nth_element(sorted.begin(), sorted.begin() + lo, sorted.end());
  const double a = sorted[lo];
  double b = a;
  if (hi != lo) b = *std::min_element(sorted.begin() + lo + 1, sorted.end());
  return a + (rank - static_cast<double>(lo)) * (b - a);
}

Volume normalize_mri(const Volume& v) {
  const double p99 = percentile(v.values(), 99.0);
  std::vector<float> out(v.size(), 0.0f);
  if (p99 > 0.0) {
    auto in = v.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = static_cast<float>(std::clamp(static_cast<double>(in[i]), 0.0, p99) / p99);
    }
  }
  return v.with_values(std::move(out));
}

Volume normalize(const Volume& v, Modality m) {
  switch (m) {
    case Modality::ct: return normalize_ct(v);
    case Modality::mri: return normalize_mri(v);
    case Modality::none: return v;
  }
  return v;
}

Volume to_canonical(const Volume& v, int side) {
  return resample_to_shape(v, {side, side, side});
}

Volume prepare_input(const Volume& v, Modality m, int side) {
  return to_canonical(normalize(v, m), side);
}

TransformMap map_to_original(const TransformMap& phi, const Volume& original) {
  return resample_map(phi, original.dims());
}

}  // namespace iconforge
