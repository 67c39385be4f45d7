#pragma once

#include <span>
#include <string>

#include "iconforge/transform.hpp"
#include "iconforge/volume.hpp"

namespace iconforge {

enum class Modality { ct, mri, none };

Modality parse_modality(const std::string& name);  // "ct" | "mri" | "none"
std::string to_string(Modality m);

inline constexpr int kDefaultCanonicalSide = 175;

// Clamp to [-1000, 1000] HU, then map linearly onto [0, 1].
Volume normalize_ct(const Volume& v);

// Clamp to [0, p99] and divide by p99 (all zeros when p99 == 0).
Volume normalize_mri(const Volume& v);

// Percentile by linear interpolation between order statistics at rank
// q/100 * (N-1).
double percentile(std::span<const float> values, double q);

Volume normalize(const Volume& v, Modality m);

// Trilinear resize to side^3 voxels, keeping the physical extent.
Volume to_canonical(const Volume& v, int side = kDefaultCanonicalSide);

// Intensity normalization followed by canonical resizing; the one entry point
// used by both training and inference.
Volume prepare_input(const Volume& v, Modality m, int side);

// Carries a map predicted on the canonical grid onto the original image's
// grid (normalized coordinates are shared, so this is a trilinear resample).
TransformMap map_to_original(const TransformMap& phi, const Volume& original);

}  // namespace iconforge
