#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "iconforge/volume.hpp"

namespace iconforge {

// Dense multi-channel grid, channel-major; inside a channel axis 0 is fastest.
// Network activations, displacement fields and scalars (1 channel, 1x1x1) all
// use this one layout.
struct Tensor {
  int channels = 0;
  Dims3 dims{0, 0, 0};
  std::vector<float> data;

  Tensor() = default;
  Tensor(int c, const Dims3& d, float fill = 0.0f)
      : channels(c), dims(d),
        data(static_cast<std::size_t>(c) * d[0] * d[1] * d[2], fill) {}

  static Tensor scalar(float v) { return Tensor(1, {1, 1, 1}, v); }

  std::size_t voxels() const {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }
  std::size_t size() const { return data.size(); }
  std::span<float> channel(int c) { return {data.data() + c * voxels(), voxels()}; }
  std::span<const float> channel(int c) const {
    return {data.data() + c * voxels(), voxels()};
  }
  bool same_shape(const Tensor& o) const { return channels == o.channels && dims == o.dims; }
};

Tensor to_tensor(const Volume& v);
Volume to_volume(const Tensor& t, const Grid& grid, int channel = 0);

// Numerical kernels with hand-written adjoints. The public modules (transform,
// loss) and the differentiation tape both run through these, so a forward
// result never depends on whether it is being recorded.
namespace kernels {

inline constexpr float kLeakySlope = 0.2f;

// 3x3x3 convolution, stride 1, zero "same" padding.
// weight layout [out][in][kz][ky][kx]; bias [out].
void conv3d_forward(const Tensor& in, std::span<const float> weight,
                    std::span<const float> bias, int out_channels, Tensor& out);
// Any of grad_in / grad_weight / grad_bias may be null. Gradients accumulate.
void conv3d_backward(const Tensor& in, std::span<const float> weight, const Tensor& grad_out,
                     Tensor* grad_in, std::span<float> grad_weight,
                     std::span<float> grad_bias);

// 2x average pooling; output dims are max(1, floor(n/2)).
Dims3 pooled_dims(const Dims3& d);
void avg_pool2x_forward(const Tensor& in, Tensor& out);
void avg_pool2x_backward(const Tensor& grad_out, Tensor& grad_in);

// Trilinear resize on the normalized-coordinate lattice (node i at i/(n-1)).
void resize_forward(const Tensor& in, const Dims3& target, Tensor& out);
void resize_backward(const Tensor& grad_out, Tensor& grad_in);

// out[c](x) = trilinear sample of field[c] at map(x); map has 3 channels.
// Output takes the map's dims.
void warp_forward(const Tensor& field, const Tensor& map, Tensor& out);
void warp_backward(const Tensor& field, const Tensor& map, const Tensor& grad_out,
                   Tensor* grad_field, Tensor* grad_map);

// Adjoint data retained by lncc_forward for lncc_backward.
struct LnccCache {
  std::vector<double> alpha_a, beta_a, alpha_b, beta_b, gamma;
};

// 1 - mean windowed normalized cross correlation, box window of `radius`
// clipped at the faces. `cache` may be null when no adjoint is needed.
double lncc_forward(std::span<const float> a, std::span<const float> b, const Dims3& dims,
                    int radius, double epsilon, LnccCache* cache);
void lncc_backward(std::span<const float> a, std::span<const float> b, const Dims3& dims,
                   int radius, const LnccCache& cache, double grad, std::span<float> grad_a,
                   std::span<float> grad_b);

// Mean over interior nodes of ||J - I||_F^2, where J holds forward differences
// of a 3-channel map in normalized units.
double jacobian_penalty_forward(const Tensor& map);
void jacobian_penalty_backward(const Tensor& map, double grad, Tensor& grad_map);

// Separable clipped box sum of half-width `radius`.
void box_sum(std::span<const double> in, const Dims3& dims, int radius, std::span<double> out);

}  // namespace kernels
}  // namespace iconforge
