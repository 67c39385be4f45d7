#include "iconforge/volume.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "iconforge/detail/sampling.hpp"
#include "iconforge/error.hpp"

namespace iconforge {

void Grid::validate(int min_dim) const {
  for (int a = 0; a < 3; ++a) {
    if (dims[a] < min_dim) {
      throw Error("shape", "axis " + std::to_string(a) + " has " +
                               std::to_string(dims[a]) + " voxels, need >= " +
                               std::to_string(min_dim));
    }
    if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a])) {
      throw Error("shape", "spacing must be positive on axis " + std::to_string(a));
    }
    if (!std::isfinite(origin[a])) throw Error("shape", "origin must be finite");
  }
}

Grid Grid::reshaped(const Dims3& new_dims) const {
  Grid g = *this;
  for (int a = 0; a < 3; ++a) {
    g.dims[a] = new_dims[a];
    g.spacing[a] = spacing[a] * (dims[a] - 1) / static_cast<double>(new_dims[a] - 1);
  }
  return g;
}

Volume::Volume(Grid grid, std::vector<float> data)
    : grid_(std::move(grid)), data_(std::move(data)) {
  grid_.validate();
  if (data_.size() != grid_.size()) {
    throw Error("shape", "volume holds " + std::to_string(data_.size()) +
                             " values for " + std::to_string(grid_.size()) + " voxels");
  }
  for (float x : data_) {
    if (!std::isfinite(x)) throw Error("nonfinite", "volume contains a non-finite value");
  }
}

Volume Volume::filled(const Grid& grid, float value) {
  return Volume(grid, std::vector<float>(grid.size(), value));
}

Volume Volume::generate(const Grid& grid, const std::function<float(int, int, int)>& fn) {
  std::vector<float> data(grid.size());
  std::size_t idx = 0;
  for (int k = 0; k < grid.dims[2]; ++k)
    for (int j = 0; j < grid.dims[1]; ++j)
      for (int i = 0; i < grid.dims[0]; ++i) data[idx++] = fn(i, j, k);
  return Volume(grid, std::move(data));
}

float Volume::min() const { return *std::min_element(data_.begin(), data_.end()); }
float Volume::max() const { return *std::max_element(data_.begin(), data_.end()); }

LabelVolume::LabelVolume(Grid grid, std::vector<std::int32_t> labels)
    : grid_(std::move(grid)), labels_(std::move(labels)) {
  grid_.validate();
  if (labels_.size() != grid_.size()) throw Error("shape", "label count does not match grid");
  for (auto l : labels_) {
    if (l < 0) throw Error("label", "labels must be non-negative");
  }
}

double trilinear_sample(const Volume& v, const NormalizedCoord& p) {
  const auto& d = v.dims();
  const auto wx = detail::axis_weight(p[0], d[0]);
  const auto wy = detail::axis_weight(p[1], d[1]);
  const auto wz = detail::axis_weight(p[2], d[2]);
  const auto& g = v.grid();
  auto val = [&](int i, int j, int k) { return static_cast<double>(v[g.index(i, j, k)]); };
  const double c00 = val(wx.lo, wy.lo, wz.lo) * (1 - wx.frac) + val(wx.hi, wy.lo, wz.lo) * wx.frac;
  const double c10 = val(wx.lo, wy.hi, wz.lo) * (1 - wx.frac) + val(wx.hi, wy.hi, wz.lo) * wx.frac;
  const double c01 = val(wx.lo, wy.lo, wz.hi) * (1 - wx.frac) + val(wx.hi, wy.lo, wz.hi) * wx.frac;
  const double c11 = val(wx.lo, wy.hi, wz.hi) * (1 - wx.frac) + val(wx.hi, wy.hi, wz.hi) * wx.frac;
  const double c0 = c00 * (1 - wy.frac) + c10 * wy.frac;
  const double c1 = c01 * (1 - wy.frac) + c11 * wy.frac;
  return c0 * (1 - wz.frac) + c1 * wz.frac;
}

Volume resample_to_shape(const Volume& v, const Dims3& new_dims) {
  const Grid out = v.grid().reshaped(new_dims);
  out.validate();
  if (new_dims == v.dims()) return v;
  return Volume::generate(out, [&](int i, int j, int k) {
    const NormalizedCoord p{static_cast<double>(i) / (new_dims[0] - 1),
                            static_cast<double>(j) / (new_dims[1] - 1),
                            static_cast<double>(k) / (new_dims[2] - 1)};
    return static_cast<float>(trilinear_sample(v, p));
  });
}

std::array<Volume, 3> gradient_central(const Volume& v) {
  v.grid().validate(3);
  const auto& g = v.grid();
  const auto& d = g.dims;
  std::array<std::vector<float>, 3> out;
  for (auto& o : out) o.resize(g.size());
  for (int k = 0; k < d[2]; ++k)
    for (int j = 0; j < d[1]; ++j)
      for (int i = 0; i < d[0]; ++i) {
        const std::array<int, 3> at{i, j, k};
        for (int a = 0; a < 3; ++a) {
          auto lo = at, hi = at;
          double h = 2.0;
          if (at[a] == 0) {
            hi[a] = 1;
            h = 1.0;
          } else if (at[a] == d[a] - 1) {
            lo[a] = d[a] - 2;
            h = 1.0;
          } else {
            lo[a] -= 1;
            hi[a] += 1;
          }
          const double diff = static_cast<double>(v[g.index(hi[0], hi[1], hi[2])]) -
                              v[g.index(lo[0], lo[1], lo[2])];
          out[a][g.index(i, j, k)] = static_cast<float>(diff * (d[a] - 1) / h);
        }
      }
  return {Volume(g, std::move(out[0])), Volume(g, std::move(out[1])),
          Volume(g, std::move(out[2]))};
}

}  // namespace iconforge
