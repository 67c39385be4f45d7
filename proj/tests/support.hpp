#pragma once

// Helpers shared by the unit tests and the acceptance runner.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "iconforge/error.hpp"
#include "iconforge/tensor.hpp"
#include "iconforge/transform.hpp"
#include "iconforge/volume.hpp"

namespace testing {

using namespace iconforge;

inline Grid cube(int n, double spacing = 1.0) { return Grid{{n, n, n}, {spacing, spacing, spacing}, {0, 0, 0}}; }

inline Volume random_volume(const Grid& g, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<float> v(g.size());
  for (auto& x : v) x = static_cast<float>(u(rng));
  return Volume(g, std::move(v));
}

inline Tensor random_tensor(int channels, const Dims3& dims, std::uint64_t seed, double lo = -1.0,
                            double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(channels, dims);
  for (auto& x : t.data) x = static_cast<float>(u(rng));
  return t;
}

// Separable Gaussian blur with clamped borders, sigma in voxels.
inline std::vector<double> blur(const std::vector<double>& in, const Dims3& d, double sigma) {
  const int r = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(2 * r + 1);
  double ks = 0;
  for (int i = -r; i <= r; ++i) ks += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& x : k) x /= ks;
  std::vector<double> cur = in, next(in.size());
  const std::array<std::size_t, 3> stride{1, static_cast<std::size_t>(d[0]),
                                          static_cast<std::size_t>(d[0]) * d[1]};
  for (int axis = 0; axis < 3; ++axis) {
    for (int z = 0; z < d[2]; ++z)
      for (int y = 0; y < d[1]; ++y)
        for (int x = 0; x < d[0]; ++x) {
          const std::array<int, 3> p{x, y, z};
          const std::size_t base = x + stride[1] * y + stride[2] * z - stride[axis] * p[axis];
          double s = 0;
          for (int o = -r; o <= r; ++o) {
            const int q = std::clamp(p[axis] + o, 0, d[axis] - 1);
            s += k[o + r] * cur[base + stride[axis] * q];
          }
          next[x + stride[1] * y + stride[2] * z] = s;
        }
    std::swap(cur, next);
  }
  return cur;
}

// Smooth random texture in [0, 1]: blurred noise at two scales, rescaled.
// Low-frequency pattern in roughly [0.05, 0.95].
inline Volume smooth_pattern(const Grid& g, double freq, double phase) {
  return Volume::generate(g, [&](int i, int j, int k) {
    const double x = i / (g.dims[0] - 1.0), y = j / (g.dims[1] - 1.0), z = k / (g.dims[2] - 1.0);
    return static_cast<float>(0.5 + 0.25 * std::sin(freq * x + phase) * std::cos(2.3 * y - phase) +
                              0.2 * std::sin(1.7 * z + 2 * x));
  });
}

inline Volume textured_volume(const Grid& g, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> a(g.size()), b(g.size());
  for (auto& x : a) x = n(rng);
  for (auto& x : b) x = n(rng);
  a = blur(a, g.dims, 2.0);
  b = blur(b, g.dims, 1.0);
  std::vector<double> s(g.size());
  double lo = 1e300, hi = -1e300;
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i] = a[i] + 0.3 * b[i];
    lo = std::min(lo, s[i]);
    hi = std::max(hi, s[i]);
  }
  std::vector<float> v(g.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>((s[i] - lo) / (hi - lo));
  return Volume(g, std::move(v));
}

// Displacement in voxels per component: white noise on a grid padded by
// 3 sigma, Gaussian-smoothed, cropped (so the field is stationary up to the
// border), then scaled so the largest vector length equals max_voxels.
inline std::array<std::vector<double>, 3> smooth_displacement(const Dims3& d, double sigma,
                                                              double max_voxels, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  const int pad = static_cast<int>(std::ceil(3 * sigma));
  const Dims3 big{d[0] + 2 * pad, d[1] + 2 * pad, d[2] + 2 * pad};
  const std::size_t count = static_cast<std::size_t>(d[0]) * d[1] * d[2];
  std::array<std::vector<double>, 3> u;
  for (auto& c : u) {
    std::vector<double> noise(static_cast<std::size_t>(big[0]) * big[1] * big[2]);
    for (auto& x : noise) x = n(rng);
    noise = blur(noise, big, sigma);
    c.resize(count);
    std::size_t idx = 0;
    for (int k = 0; k < d[2]; ++k)
      for (int j = 0; j < d[1]; ++j)
        for (int i = 0; i < d[0]; ++i, ++idx) {
          c[idx] = noise[(i + pad) + big[0] * ((j + pad) + static_cast<std::size_t>(big[1]) * (k + pad))];
        }
  }
  double peak = 0;
  for (std::size_t i = 0; i < count; ++i) {
    peak = std::max(peak, std::sqrt(u[0][i] * u[0][i] + u[1][i] * u[1][i] + u[2][i] * u[2][i]));
  }
  for (auto& c : u)
    for (auto& x : c) x *= max_voxels / peak;
  return u;
}

// x + u(x) in normalized units, u given in voxels.
inline TransformMap map_from_displacement(const Dims3& d, const std::array<std::vector<double>, 3>& u) {
  const std::size_t count = static_cast<std::size_t>(d[0]) * d[1] * d[2];
  std::vector<float> v(3 * count);
  std::size_t idx = 0;
  for (int k = 0; k < d[2]; ++k)
    for (int j = 0; j < d[1]; ++j)
      for (int i = 0; i < d[0]; ++i, ++idx) {
        const std::array<int, 3> p{i, j, k};
        for (int c = 0; c < 3; ++c) {
          v[c * count + idx] = static_cast<float>((p[c] + u[c][idx]) / (d[c] - 1));
        }
      }
  return TransformMap(d, std::move(v));
}

// Two overlapping textured blobs on a soft background: label 1 an ellipsoid, label 2
// a smaller sphere that wins where they overlap.
struct ShapeSample {
  Volume image;
  LabelVolume labels;
};

inline ShapeSample shape_template(const Grid& g) {
  std::vector<std::int32_t> lab(g.size(), 0);
  std::vector<double> img(g.size());
  std::size_t idx = 0;
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i, ++idx) {
        const double x = i / (g.dims[0] - 1.0), y = j / (g.dims[1] - 1.0), z = k / (g.dims[2] - 1.0);
        const double e = std::pow((x - 0.42) / 0.3, 2) + std::pow((y - 0.5) / 0.25, 2) + std::pow((z - 0.5) / 0.28, 2);
        const double s = std::pow(x - 0.66, 2) + std::pow(y - 0.45, 2) + std::pow(z - 0.52, 2);
        if (e <= 1.0) lab[idx] = 1;
        if (s <= 0.18 * 0.18) lab[idx] = 2;
        img[idx] = lab[idx] == 0 ? 0.15 : lab[idx] == 1 ? 0.5 : 0.85;
      }
  img = blur(img, g.dims, 0.7);
  // Mild texture so flat regions still carry local structure.
  const Volume tex = textured_volume(g, 7);
  std::vector<float> v(g.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(img[i] + 0.15 * (tex[i] - 0.5));
  return {Volume(g, std::move(v)), LabelVolume(g, std::move(lab))};
}

// The template pulled back through x + u(x), u a smooth random field.
inline ShapeSample deformed_shapes(const Grid& g, double sigma, double max_voxels, std::uint64_t seed) {
  const ShapeSample t = shape_template(g);
  const TransformMap phi = map_from_displacement(g.dims, smooth_displacement(g.dims, sigma, max_voxels, seed));
  return {warp(t.image, phi), warp_labels(t.labels, phi)};
}

// Affine map x -> A x + t in normalized coordinates.
inline TransformMap affine_map(const Dims3& d, const std::array<std::array<double, 3>, 3>& A,
                               const std::array<double, 3>& t) {
  const std::size_t count = static_cast<std::size_t>(d[0]) * d[1] * d[2];
  std::vector<float> v(3 * count);
  std::size_t idx = 0;
  for (int k = 0; k < d[2]; ++k)
    for (int j = 0; j < d[1]; ++j)
      for (int i = 0; i < d[0]; ++i, ++idx) {
        const std::array<double, 3> x{static_cast<double>(i) / (d[0] - 1),
                                      static_cast<double>(j) / (d[1] - 1),
                                      static_cast<double>(k) / (d[2] - 1)};
        for (int c = 0; c < 3; ++c) {
          v[c * count + idx] = static_cast<float>(A[c][0] * x[0] + A[c][1] * x[1] + A[c][2] * x[2] + t[c]);
        }
      }
  return TransformMap(d, std::move(v));
}

// Reference trilinear lookup on one scalar plane (clamp, then weight the 8
// corners). Kept separate from the library's sampling code on purpose.
inline double oracle_trilinear(std::span<const float> plane, const Dims3& d, const std::array<double, 3>& p) {
  std::array<int, 3> lo{};
  std::array<double, 3> f{};
  for (int a = 0; a < 3; ++a) {
    const double x = std::clamp(p[a], 0.0, 1.0) * (d[a] - 1);
    lo[a] = std::min(static_cast<int>(std::floor(x)), d[a] - 2);
    f[a] = x - lo[a];
  }
  double s = 0;
  for (int c = 0; c < 8; ++c) {
    double w = 1;
    std::array<int, 3> q{};
    for (int a = 0; a < 3; ++a) {
      const int bit = (c >> a) & 1;
      q[a] = lo[a] + bit;
      w *= bit ? f[a] : 1 - f[a];
    }
    s += w * plane[q[0] + static_cast<std::size_t>(d[0]) * (q[1] + static_cast<std::size_t>(d[1]) * q[2])];
  }
  return s;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("iconforge_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Code of the iconforge::Error thrown by f, or "" when nothing is thrown.
template <class F>
std::string error_code(F&& f) {
  try {
    f();
  } catch (const iconforge::Error& e) {
    return e.code();
  }
  return "";
}

inline double rel_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

}  // namespace testing
