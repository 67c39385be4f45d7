#pragma once

#include <array>
#include <optional>
#include <span>
#include <vector>

#include "iconforge/tensor.hpp"
#include "iconforge/volume.hpp"

namespace iconforge {

// Dense pull-back map: node x of the target grid holds phi(x), a normalized
// coordinate in the source image. Warping is (I o phi)(x) = I(phi(x)).
// Components are stored as three planes (x, y, z), each in grid order.
class TransformMap {
 public:
  TransformMap() = default;
  TransformMap(const Dims3& dims, std::vector<float> values);
  explicit TransformMap(Tensor t);

  const Dims3& dims() const { return field_.dims; }
  std::size_t nodes() const { return field_.voxels(); }
  std::span<const float> values() const { return field_.data; }
  std::span<const float> component(int c) const { return field_.channel(c); }
  std::array<float, 3> at(int i, int j, int k) const;

  // Trilinear evaluation of the value field (border-replicate clamp).
  std::array<double, 3> evaluate(const NormalizedCoord& p) const;

  const Tensor& tensor() const { return field_; }

  bool operator==(const TransformMap& o) const {
    return field_.dims == o.field_.dims && field_.data == o.field_.data;
  }

 private:
  Tensor field_;
};

using Mat3 = std::array<std::array<double, 3>, 3>;  // [component][axis]

TransformMap identity_map(const Dims3& dims);

// result(x) = outer(inner(x)), on inner's grid.
TransformMap compose(const TransformMap& outer, const TransformMap& inner);

// Resamples the map's value field onto another lattice of the same
// normalized domain.
TransformMap resample_map(const TransformMap& phi, const Dims3& dims);

// out(x) = v(phi(x)). Output metadata from `reference` (dims must match phi);
// by default v's physical extent resampled to phi's dims.
Volume warp(const Volume& v, const TransformMap& phi,
            const std::optional<Grid>& reference = std::nullopt);

// Nearest-neighbour label lookup at phi(x).
LabelVolume warp_labels(const LabelVolume& lv, const TransformMap& phi,
                        const std::optional<Grid>& reference = std::nullopt);

// Central-difference Jacobians at interior nodes (boundary layer excluded).
// Entry order: interior nodes in grid order.
struct JacobianField {
  Dims3 interior{0, 0, 0};
  std::vector<Mat3> values;
};
JacobianField jacobian_field(const TransformMap& phi);

double determinant(const Mat3& m);

// Fraction of interior nodes whose Jacobian determinant is negative.
double neg_jacobian_fraction(const TransformMap& phi);

}  // namespace iconforge
