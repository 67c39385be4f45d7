#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace iconforge {

using Dims3 = std::array<int, 3>;
using Vec3 = std::array<double, 3>;

// Normalized coordinate: voxel center i on an axis of n voxels sits at
// i/(n-1), so the grid spans [0,1]^3. Off-grid values are legal.
using NormalizedCoord = std::array<double, 3>;

// Sampling lattice with physical metadata. Axis 0 varies fastest in memory:
// linear index = i + nx*(j + ny*k).
struct Grid {
  Dims3 dims{2, 2, 2};
  Vec3 spacing{1.0, 1.0, 1.0};  // mm per voxel
  Vec3 origin{0.0, 0.0, 0.0};   // mm, center of voxel (0,0,0)

  std::size_t size() const {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }
  std::size_t index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(dims[0]) *
               (static_cast<std::size_t>(j) + static_cast<std::size_t>(dims[1]) * k);
  }
  // Throws Error("shape") unless every dim >= min_dim and spacing > 0.
  void validate(int min_dim = 2) const;

  // Same physical extent (dims-1)*spacing and origin, new dims.
  Grid reshaped(const Dims3& new_dims) const;

  bool operator==(const Grid&) const = default;
};

// Immutable 3D scalar image stored in 32-bit floats.
class Volume {
 public:
  Volume() = default;
  Volume(Grid grid, std::vector<float> data);

  static Volume filled(const Grid& grid, float value);
  static Volume generate(const Grid& grid,
                         const std::function<float(int, int, int)>& fn);

  const Grid& grid() const { return grid_; }
  const Dims3& dims() const { return grid_.dims; }
  const Vec3& spacing() const { return grid_.spacing; }
  const Vec3& origin() const { return grid_.origin; }
  std::size_t size() const { return data_.size(); }

  std::span<const float> values() const { return data_; }
  float at(int i, int j, int k) const { return data_[grid_.index(i, j, k)]; }
  float operator[](std::size_t idx) const { return data_[idx]; }

  float min() const;
  float max() const;

  // Same grid, new samples.
  Volume with_values(std::vector<float> data) const { return {grid_, std::move(data)}; }

 private:
  Grid grid_;
  std::vector<float> data_;
};

// Integer label map; 0 is background.
class LabelVolume {
 public:
  LabelVolume() = default;
  LabelVolume(Grid grid, std::vector<std::int32_t> labels);

  const Grid& grid() const { return grid_; }
  const Dims3& dims() const { return grid_.dims; }
  std::size_t size() const { return labels_.size(); }
  std::span<const std::int32_t> labels() const { return labels_; }
  std::int32_t at(int i, int j, int k) const { return labels_[grid_.index(i, j, k)]; }

 private:
  Grid grid_;
  std::vector<std::int32_t> labels_;
};

// Trilinear interpolation with border-replicate clamping of off-grid points.
double trilinear_sample(const Volume& v, const NormalizedCoord& p);

// Samples v at the voxel centers of a new lattice sharing v's physical extent.
Volume resample_to_shape(const Volume& v, const Dims3& new_dims);

// Spatial derivatives with respect to normalized coordinates: central
// differences inside, one-sided at the faces. Requires dims >= 3.
std::array<Volume, 3> gradient_central(const Volume& v);

}  // namespace iconforge
