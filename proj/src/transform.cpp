#include "iconforge/transform.hpp"

#include <cmath>
#include <string>

#include "iconforge/detail/sampling.hpp"
#include "iconforge/error.hpp"

namespace iconforge {

TransformMap::TransformMap(const Dims3& dims, std::vector<float> values) {
  field_.channels = 3;
  field_.dims = dims;
  field_.data = std::move(values);
  if (field_.data.size() != 3 * field_.voxels()) {
    throw Error("shape", "map needs 3 values per node");
  }
  for (int a = 0; a < 3; ++a) {
    if (dims[a] < 2) throw Error("shape", "map dims must be >= 2");
  }
  for (float x : field_.data) {
    if (!std::isfinite(x)) throw Error("nonfinite", "map contains a non-finite value");
  }
}

TransformMap::TransformMap(Tensor t) {
  if (t.channels != 3) throw Error("shape", "map tensor must have 3 channels");
  const Dims3 d = t.dims;
  *this = TransformMap(d, std::move(t.data));
}

std::array<float, 3> TransformMap::at(int i, int j, int k) const {
  const std::size_t v = i + static_cast<std::size_t>(dims()[0]) *
                                (j + static_cast<std::size_t>(dims()[1]) * k);
  const std::size_t n = nodes();
  return {field_.data[v], field_.data[n + v], field_.data[2 * n + v]};
}

std::array<double, 3> TransformMap::evaluate(const NormalizedCoord& p) const {
  const auto& d = dims();
  const auto wx = detail::axis_weight(p[0], d[0]);
  const auto wy = detail::axis_weight(p[1], d[1]);
  const auto wz = detail::axis_weight(p[2], d[2]);
  const std::size_t n = nodes();
  std::array<double, 3> out{};
  for (int c = 0; c < 3; ++c) {
    const float* f = field_.data.data() + c * n;
    auto val = [&](int i, int j, int k) {
      return static_cast<double>(f[i + static_cast<std::size_t>(d[0]) *
                                           (j + static_cast<std::size_t>(d[1]) * k)]);
    };
    const double c00 = val(wx.lo, wy.lo, wz.lo) * (1 - wx.frac) + val(wx.hi, wy.lo, wz.lo) * wx.frac;
    const double c10 = val(wx.lo, wy.hi, wz.lo) * (1 - wx.frac) + val(wx.hi, wy.hi, wz.lo) * wx.frac;
    const double c01 = val(wx.lo, wy.lo, wz.hi) * (1 - wx.frac) + val(wx.hi, wy.lo, wz.hi) * wx.frac;
    const double c11 = val(wx.lo, wy.hi, wz.hi) * (1 - wx.frac) + val(wx.hi, wy.hi, wz.hi) * wx.frac;
    const double c0 = c00 * (1 - wy.frac) + c10 * wy.frac;
    const double c1 = c01 * (1 - wy.frac) + c11 * wy.frac;
    out[c] = c0 * (1 - wz.frac) + c1 * wz.frac;
  }
  return out;
}

TransformMap identity_map(const Dims3& dims) {
  Tensor t(3, dims);
  const std::size_t n = t.voxels();
  std::size_t v = 0;
  for (int k = 0; k < dims[2]; ++k)
    for (int j = 0; j < dims[1]; ++j)
      for (int i = 0; i < dims[0]; ++i, ++v) {
        t.data[v] = static_cast<float>(static_cast<double>(i) / (dims[0] - 1));
        t.data[n + v] = static_cast<float>(static_cast<double>(j) / (dims[1] - 1));
        t.data[2 * n + v] = static_cast<float>(static_cast<double>(k) / (dims[2] - 1));
      }
  return TransformMap(std::move(t));
}

TransformMap compose(const TransformMap& outer, const TransformMap& inner) {
  Tensor out;
  kernels::warp_forward(outer.tensor(), inner.tensor(), out);
  return TransformMap(std::move(out));
}

TransformMap resample_map(const TransformMap& phi, const Dims3& dims) {
  if (dims == phi.dims()) return phi;
  Tensor out;
  kernels::resize_forward(phi.tensor(), dims, out);
  return TransformMap(std::move(out));
}

namespace {

Grid output_grid(const Grid& source, const TransformMap& phi, const std::optional<Grid>& reference) {
  if (reference) {
    if (reference->dims != phi.dims()) throw Error("shape", "reference grid dims differ from map dims");
    return *reference;
  }
  return source.reshaped(phi.dims());
}

}  // namespace

Volume warp(const Volume& v, const TransformMap& phi, const std::optional<Grid>& reference) {
  const Grid g = output_grid(v.grid(), phi, reference);
  Tensor out;
  kernels::warp_forward(to_tensor(v), phi.tensor(), out);
  return Volume(g, std::move(out.data));
}

LabelVolume warp_labels(const LabelVolume& lv, const TransformMap& phi,
                        const std::optional<Grid>& reference) {
  const Grid g = output_grid(lv.grid(), phi, reference);
  const auto& src = lv.dims();
  const std::size_t n = phi.nodes();
  auto mx = phi.component(0), my = phi.component(1), mz = phi.component(2);
  std::vector<std::int32_t> out(n);
  for (std::size_t v = 0; v < n; ++v) {
    const int i = detail::nearest_index(mx[v], src[0]);
    const int j = detail::nearest_index(my[v], src[1]);
    const int k = detail::nearest_index(mz[v], src[2]);
    out[v] = lv.at(i, j, k);
  }
  return LabelVolume(g, std::move(out));
}

JacobianField jacobian_field(const TransformMap& phi) {
  const auto& d = phi.dims();
  if (d[0] < 3 || d[1] < 3 || d[2] < 3) throw Error("shape", "jacobian needs dims >= 3");
  JacobianField jf;
  jf.interior = {d[0] - 2, d[1] - 2, d[2] - 2};
  jf.values.reserve(static_cast<std::size_t>(jf.interior[0]) * jf.interior[1] * jf.interior[2]);
  const std::size_t n = phi.nodes();
  const std::size_t stride[3] = {1, static_cast<std::size_t>(d[0]),
                                 static_cast<std::size_t>(d[0]) * d[1]};
  const float* m = phi.values().data();
  for (int k = 1; k < d[2] - 1; ++k)
    for (int j = 1; j < d[1] - 1; ++j)
      for (int i = 1; i < d[0] - 1; ++i) {
        const std::size_t v = i + stride[1] * j + stride[2] * k;
        Mat3 jac{};
        for (int c = 0; c < 3; ++c)
          for (int a = 0; a < 3; ++a) {
            const float* f = m + c * n;
            jac[c][a] = (static_cast<double>(f[v + stride[a]]) - f[v - stride[a]]) * (d[a] - 1) / 2.0;
          }
        jf.values.push_back(jac);
      }
  return jf;
}

double determinant(const Mat3& m) {
  return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
         m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
         m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

double neg_jacobian_fraction(const TransformMap& phi) {
  const auto jf = jacobian_field(phi);
  std::size_t negative = 0;
  for (const auto& j : jf.values) {
    if (determinant(j) < 0.0) ++negative;
  }
  return static_cast<double>(negative) / static_cast<double>(jf.values.size());
}

}  // namespace iconforge
