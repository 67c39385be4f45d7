#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "iconforge/detail/sampling.hpp"
#include "iconforge/error.hpp"
#include "iconforge/parallel.hpp"
#include "iconforge/tensor.hpp"

namespace iconforge {

Tensor to_tensor(const Volume& v) {
  Tensor t(1, v.dims());
  std::copy(v.values().begin(), v.values().end(), t.data.begin());
  return t;
}

Volume to_volume(const Tensor& t, const Grid& grid, int channel) {
  if (t.dims != grid.dims) throw Error("shape", "tensor dims differ from grid");
  auto c = t.channel(channel);
  return Volume(grid, std::vector<float>(c.begin(), c.end()));
}

namespace kernels {
namespace {

// Zero-padded copy with a one-voxel border on every face.
struct Padded {
  Dims3 inner{};
  std::size_t sy = 0, sz = 0, total = 0;
  std::size_t begin = 0, end = 0;  // covers every interior node
  // Per-channel buffer length; the slack lets vector loops overrun `end`.
  std::size_t stride = 0;

  explicit Padded(const Dims3& d) : inner(d) {
    sy = static_cast<std::size_t>(d[0]) + 2;
    sz = sy * (d[1] + 2);
    total = sz * (d[2] + 2);
    begin = sz + sy + 1;
    end = static_cast<std::size_t>(d[2]) * sz + d[1] * sy + d[0] + 1;
    stride = total + 32;
  }
  std::array<std::ptrdiff_t, 27> offsets() const {
    std::array<std::ptrdiff_t, 27> o{};
    for (int t = 0; t < 27; ++t) {
      o[t] = (t / 9 - 1) * static_cast<std::ptrdiff_t>(sz) +
             (t / 3 % 3 - 1) * static_cast<std::ptrdiff_t>(sy) + (t % 3 - 1);
    }
    return o;
  }
  std::size_t at(int i, int j, int k) const {
    return static_cast<std::size_t>(i + 1) + (j + 1) * sy + (k + 1) * sz;
  }
  void pack(std::span<const float> src, float* dst) const {
    std::size_t s = 0;
    for (int k = 0; k < inner[2]; ++k)
      for (int j = 0; j < inner[1]; ++j) {
        std::copy_n(src.data() + s, inner[0], dst + at(0, j, k));
        s += inner[0];
      }
  }
  void unpack(const float* src, std::span<float> dst, bool accumulate) const {
    std::size_t s = 0;
    for (int k = 0; k < inner[2]; ++k)
      for (int j = 0; j < inner[1]; ++j) {
        const float* row = src + at(0, j, k);
        if (accumulate) {
          for (int i = 0; i < inner[0]; ++i) dst[s + i] += row[i];
        } else {
          std::copy_n(row, inner[0], dst.data() + s);
        }
        s += inner[0];
      }
  }
};

// Dots of g against src shifted by -1, 0, +1. Float vector lanes are flushed
// into the double sums every block so long reductions keep their precision.
using Lanes = float __attribute__((vector_size(32)));
constexpr int kWidth = 8;

inline Lanes load_lanes(const float* p) {
  Lanes v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline double lane_sum(const Lanes& v) {
  double s = 0.0;
  for (int l = 0; l < kWidth; ++l) s += v[l];
  return s;
}

inline void dot3(const float* __restrict g, const float* __restrict src, std::ptrdiff_t off,
                 std::size_t begin, std::size_t end, double& s0, double& s1, double& s2) {
  constexpr int kStep = 2 * kWidth;
  constexpr std::ptrdiff_t kBlock = kStep * 128;
  auto i = static_cast<std::ptrdiff_t>(begin);
  const auto e = static_cast<std::ptrdiff_t>(end);
  const float* p = src + off;
  while (i + kStep <= e) {
    Lanes a0{}, a1{}, a2{}, b0{}, b1{}, b2{};
    const std::ptrdiff_t stop = std::min(e, i + kBlock);
    for (; i + kStep <= stop; i += kStep) {
      const Lanes g0 = load_lanes(g + i), g1 = load_lanes(g + i + kWidth);
      a0 += g0 * load_lanes(p + i - 1);
      a1 += g0 * load_lanes(p + i);
      a2 += g0 * load_lanes(p + i + 1);
      b0 += g1 * load_lanes(p + i + kWidth - 1);
      b1 += g1 * load_lanes(p + i + kWidth);
      b2 += g1 * load_lanes(p + i + kWidth + 1);
    }
    s0 += lane_sum(a0 + b0);
    s1 += lane_sum(a1 + b1);
    s2 += lane_sum(a2 + b2);
  }
  for (; i < e; ++i) {
    s0 += static_cast<double>(g[i]) * src[i + off - 1];
    s1 += static_cast<double>(g[i]) * src[i + off];
    s2 += static_cast<double>(g[i]) * src[i + off + 1];
  }
}

// out[o] (+)= bias[o] + sum_i sum_t w[o][i][t] * in_i[v + offset_t] over the
// interior range, CB output channels at a time so each input load feeds CB
// accumulators.
template <int CB>
void correlate_block(const float* in, int nin, const float* w, const float* bias, int o0,
                     const Padded& pad, float* out) {
  const auto offs = pad.offsets();
  constexpr int kChunk = 2 * kWidth;
  const auto b = static_cast<std::ptrdiff_t>(pad.begin), e = static_cast<std::ptrdiff_t>(pad.end);
  for (std::ptrdiff_t v = b; v < e; v += kChunk) {
    Lanes acc[CB][2];
    for (int c = 0; c < CB; ++c) {
      const float b0 = bias != nullptr ? bias[o0 + c] : 0.0f;
      acc[c][0] = Lanes{} + b0;
      acc[c][1] = Lanes{} + b0;
    }
    for (int i = 0; i < nin; ++i) {
      const float* src = in + i * pad.stride + v;
      for (int t = 0; t < 27; ++t) {
        const Lanes x0 = load_lanes(src + offs[t]);
        const Lanes x1 = load_lanes(src + offs[t] + kWidth);
        for (int c = 0; c < CB; ++c) {
          const float wv = w[((o0 + c) * static_cast<std::ptrdiff_t>(nin) + i) * 27 + t];
          acc[c][0] += wv * x0;
          acc[c][1] += wv * x1;
        }
      }
    }
    for (int c = 0; c < CB; ++c) {
      float* dst = out + c * pad.stride + v;
      std::memcpy(dst, &acc[c][0], sizeof(Lanes));
      std::memcpy(dst + kWidth, &acc[c][1], sizeof(Lanes));
    }
  }
}

// Correlates every output channel; results land in `out` (nout padded
// channels) at the interior positions.
void correlate(const float* in, int nin, const float* w, const float* bias, int nout,
               const Padded& pad, float* out) {
  constexpr int kBlock = 4;
  const std::size_t blocks = (nout + kBlock - 1) / kBlock;
  parallel_for(blocks, [&](std::size_t blk) {
    const int o0 = static_cast<int>(blk) * kBlock;
    float* dst = out + o0 * pad.stride;
    switch (std::min(kBlock, nout - o0)) {
      case 4: correlate_block<4>(in, nin, w, bias, o0, pad, dst); break;
      case 3: correlate_block<3>(in, nin, w, bias, o0, pad, dst); break;
      case 2: correlate_block<2>(in, nin, w, bias, o0, pad, dst); break;
      default: correlate_block<1>(in, nin, w, bias, o0, pad, dst); break;
    }
  });
}

}  // namespace

void conv3d_forward(const Tensor& in, std::span<const float> weight,
                    std::span<const float> bias, int out_channels, Tensor& out) {
  const int cin = in.channels;
  if (weight.size() != static_cast<std::size_t>(out_channels) * cin * 27 ||
      bias.size() != static_cast<std::size_t>(out_channels)) {
    throw Error("shape", "conv3d weight/bias size does not match channel counts");
  }
  const Padded pad(in.dims);
  std::vector<float> pin(pad.stride * cin, 0.0f);
  for (int c = 0; c < cin; ++c) pad.pack(in.channel(c), pin.data() + c * pad.stride);
  std::vector<float> acc(pad.stride * out_channels, 0.0f);
  correlate(pin.data(), cin, weight.data(), bias.data(), out_channels, pad, acc.data());
  out = Tensor(out_channels, in.dims);
  for (int co = 0; co < out_channels; ++co) {
    pad.unpack(acc.data() + co * pad.stride, out.channel(co), false);
  }
}

void conv3d_backward(const Tensor& in, std::span<const float> weight, const Tensor& grad_out,
                     Tensor* grad_in, std::span<float> grad_weight,
                     std::span<float> grad_bias) {
  const int cin = in.channels;
  const int cout = grad_out.channels;
  const Padded pad(in.dims);
  std::vector<float> gpad(pad.stride * cout, 0.0f);
  for (int c = 0; c < cout; ++c) pad.pack(grad_out.channel(c), gpad.data() + c * pad.stride);

  if (!grad_bias.empty()) {
    for (int co = 0; co < cout; ++co) {
      double s = 0.0;
      for (float g : grad_out.channel(co)) s += g;
      grad_bias[co] += static_cast<float>(s);
    }
  }

  if (!grad_weight.empty()) {
    std::vector<float> pin(pad.stride * cin, 0.0f);
    for (int c = 0; c < cin; ++c) pad.pack(in.channel(c), pin.data() + c * pad.stride);
    parallel_for(static_cast<std::size_t>(cout), [&](std::size_t co) {
      const float* g = gpad.data() + co * pad.stride;
      for (int ci = 0; ci < cin; ++ci) {
        const float* src = pin.data() + ci * pad.stride;
        double sums[27] = {};
        for (int kz = 0; kz < 3; ++kz)
          for (int ky = 0; ky < 3; ++ky) {
            const std::ptrdiff_t off = (kz - 1) * static_cast<std::ptrdiff_t>(pad.sz) +
                                       (ky - 1) * static_cast<std::ptrdiff_t>(pad.sy);
            double* s = sums + (kz * 3 + ky) * 3;
            dot3(g, src, off, pad.begin, pad.end, s[0], s[1], s[2]);
          }
        float* gw = grad_weight.data() + (co * cin + ci) * 27;
        for (int k = 0; k < 27; ++k) gw[k] += static_cast<float>(sums[k]);
      }
    });
  }

  if (grad_in != nullptr) {
    // Input gradient: correlation of grad_out with the transposed, flipped kernel.
    std::vector<float> wt(weight.size());
    for (int co = 0; co < cout; ++co)
      for (int ci = 0; ci < cin; ++ci)
        for (int t = 0; t < 27; ++t) {
          wt[(static_cast<std::size_t>(ci) * cout + co) * 27 + (26 - t)] =
              weight[(static_cast<std::size_t>(co) * cin + ci) * 27 + t];
        }
    std::vector<float> acc(pad.stride * cin, 0.0f);
    correlate(gpad.data(), cout, wt.data(), nullptr, cin, pad, acc.data());
    for (int ci = 0; ci < cin; ++ci) pad.unpack(acc.data() + ci * pad.stride, grad_in->channel(ci), true);
  }
}

Dims3 pooled_dims(const Dims3& d) {
  return {std::max(1, d[0] / 2), std::max(1, d[1] / 2), std::max(1, d[2] / 2)};
}

void avg_pool2x_forward(const Tensor& in, Tensor& out) {
  const Dims3 od = pooled_dims(in.dims);
  out = Tensor(in.channels, od);
  const auto& d = in.dims;
  for (int c = 0; c < in.channels; ++c) {
    auto src = in.channel(c);
    auto dst = out.channel(c);
    std::size_t o = 0;
    for (int k = 0; k < od[2]; ++k)
      for (int j = 0; j < od[1]; ++j)
        for (int i = 0; i < od[0]; ++i) {
          double s = 0.0;
          for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) {
                const int x = std::min(2 * i + dx, d[0] - 1);
                const int y = std::min(2 * j + dy, d[1] - 1);
                const int z = std::min(2 * k + dz, d[2] - 1);
                s += src[x + static_cast<std::size_t>(d[0]) * (y + static_cast<std::size_t>(d[1]) * z)];
              }
          dst[o++] = static_cast<float>(s / 8.0);
        }
  }
}

void avg_pool2x_backward(const Tensor& grad_out, Tensor& grad_in) {
  const Dims3 od = grad_out.dims;
  const auto& d = grad_in.dims;
  for (int c = 0; c < grad_out.channels; ++c) {
    auto g = grad_out.channel(c);
    auto dst = grad_in.channel(c);
    std::size_t o = 0;
    for (int k = 0; k < od[2]; ++k)
      for (int j = 0; j < od[1]; ++j)
        for (int i = 0; i < od[0]; ++i) {
          const float share = g[o++] / 8.0f;
          for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) {
                const int x = std::min(2 * i + dx, d[0] - 1);
                const int y = std::min(2 * j + dy, d[1] - 1);
                const int z = std::min(2 * k + dz, d[2] - 1);
                dst[x + static_cast<std::size_t>(d[0]) * (y + static_cast<std::size_t>(d[1]) * z)] += share;
              }
        }
  }
}

namespace {

std::vector<detail::AxisWeight> resize_weights(int n_src, int n_dst) {
  std::vector<detail::AxisWeight> w(n_dst);
  for (int i = 0; i < n_dst; ++i) {
    const double p = n_dst > 1 ? static_cast<double>(i) / (n_dst - 1) : 0.0;
    w[i] = detail::axis_weight(p, n_src);
  }
  return w;
}

// One separable pass along `axis`: dst dims equal src dims except on `axis`.
void resize_axis(const float* src, const Dims3& sd, int axis, int n_dst, float* dst) {
  Dims3 dd = sd;
  dd[axis] = n_dst;
  const auto w = resize_weights(sd[axis], n_dst);
  const std::size_t sstride[3] = {1, static_cast<std::size_t>(sd[0]),
                                  static_cast<std::size_t>(sd[0]) * sd[1]};
  std::size_t o = 0;
  for (int k = 0; k < dd[2]; ++k)
    for (int j = 0; j < dd[1]; ++j)
      for (int i = 0; i < dd[0]; ++i, ++o) {
        const int idx[3] = {i, j, k};
        std::size_t base = 0;
        for (int a = 0; a < 3; ++a)
          if (a != axis) base += idx[a] * sstride[a];
        const auto& aw = w[idx[axis]];
        const std::size_t lo = base + aw.lo * sstride[axis];
        const std::size_t hi = base + aw.hi * sstride[axis];
        dst[o] = static_cast<float>((1.0 - aw.frac) * src[lo] + aw.frac * src[hi]);
      }
}

// Transposed pass: grad_src (dims sd) += W^T grad_dst.
void resize_axis_adjoint(const float* grad_dst, const Dims3& sd, int axis, int n_dst,
                         float* grad_src) {
  Dims3 dd = sd;
  dd[axis] = n_dst;
  const auto w = resize_weights(sd[axis], n_dst);
  const std::size_t sstride[3] = {1, static_cast<std::size_t>(sd[0]),
                                  static_cast<std::size_t>(sd[0]) * sd[1]};
  std::size_t o = 0;
  for (int k = 0; k < dd[2]; ++k)
    for (int j = 0; j < dd[1]; ++j)
      for (int i = 0; i < dd[0]; ++i, ++o) {
        const int idx[3] = {i, j, k};
        std::size_t base = 0;
        for (int a = 0; a < 3; ++a)
          if (a != axis) base += idx[a] * sstride[a];
        const auto& aw = w[idx[axis]];
        grad_src[base + aw.lo * sstride[axis]] += static_cast<float>((1.0 - aw.frac) * grad_dst[o]);
        if (aw.frac != 0.0) {
          grad_src[base + aw.hi * sstride[axis]] += static_cast<float>(aw.frac * grad_dst[o]);
        }
      }
}

}  // namespace

void resize_forward(const Tensor& in, const Dims3& target, Tensor& out) {
  if (in.dims == target) {
    out = in;
    return;
  }
  out = Tensor(in.channels, target);
  for (int c = 0; c < in.channels; ++c) {
    Dims3 d0 = in.dims;
    Dims3 d1 = {target[0], d0[1], d0[2]};
    Dims3 d2 = {target[0], target[1], d0[2]};
    std::vector<float> t1(static_cast<std::size_t>(d1[0]) * d1[1] * d1[2]);
    std::vector<float> t2(static_cast<std::size_t>(d2[0]) * d2[1] * d2[2]);
    resize_axis(in.channel(c).data(), d0, 0, target[0], t1.data());
    resize_axis(t1.data(), d1, 1, target[1], t2.data());
    resize_axis(t2.data(), d2, 2, target[2], out.channel(c).data());
  }
}

void resize_backward(const Tensor& grad_out, Tensor& grad_in) {
  if (grad_out.dims == grad_in.dims) {
    for (std::size_t i = 0; i < grad_in.data.size(); ++i) grad_in.data[i] += grad_out.data[i];
    return;
  }
  const Dims3 target = grad_out.dims;
  for (int c = 0; c < grad_out.channels; ++c) {
    Dims3 d0 = grad_in.dims;
    Dims3 d1 = {target[0], d0[1], d0[2]};
    Dims3 d2 = {target[0], target[1], d0[2]};
    std::vector<float> t2(static_cast<std::size_t>(d2[0]) * d2[1] * d2[2], 0.0f);
    std::vector<float> t1(static_cast<std::size_t>(d1[0]) * d1[1] * d1[2], 0.0f);
    resize_axis_adjoint(grad_out.channel(c).data(), d2, 2, target[2], t2.data());
    resize_axis_adjoint(t2.data(), d1, 1, target[1], t1.data());
    resize_axis_adjoint(t1.data(), d0, 0, target[0], grad_in.channel(c).data());
  }
}

namespace {

struct Corner {
  std::size_t idx[8];
  double w[8];
  detail::AxisWeight ax, ay, az;
};

inline Corner corners(const Dims3& d, double px, double py, double pz) {
  Corner c;
  c.ax = detail::axis_weight(px, d[0]);
  c.ay = detail::axis_weight(py, d[1]);
  c.az = detail::axis_weight(pz, d[2]);
  const std::size_t nx = d[0], nxy = static_cast<std::size_t>(d[0]) * d[1];
  // Degenerate (single-node) axes collapse both corners onto node 0.
  const int xs[2] = {c.ax.lo, d[0] > 1 ? c.ax.hi : 0};
  const int ys[2] = {c.ay.lo, d[1] > 1 ? c.ay.hi : 0};
  const int zs[2] = {c.az.lo, d[2] > 1 ? c.az.hi : 0};
  const double fx[2] = {1.0 - c.ax.frac, c.ax.frac};
  const double fy[2] = {1.0 - c.ay.frac, c.ay.frac};
  const double fz[2] = {1.0 - c.az.frac, c.az.frac};
  int n = 0;
  for (int z = 0; z < 2; ++z)
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 2; ++x, ++n) {
        c.idx[n] = xs[x] + nx * ys[y] + nxy * zs[z];
        c.w[n] = fx[x] * fy[y] * fz[z];
      }
  return c;
}

}  // namespace

void warp_forward(const Tensor& field, const Tensor& map, Tensor& out) {
  if (map.channels != 3) throw Error("shape", "warp map must have 3 channels");
  out = Tensor(field.channels, map.dims);
  const std::size_t n = map.voxels();
  const float* mx = map.channel(0).data();
  const float* my = map.channel(1).data();
  const float* mz = map.channel(2).data();
  const std::size_t nz = map.dims[2];
  const std::size_t slab = n / nz;
  parallel_for(nz, [&](std::size_t z) {
    for (std::size_t v = z * slab; v < (z + 1) * slab; ++v) {
      const Corner c = corners(field.dims, mx[v], my[v], mz[v]);
      for (int ch = 0; ch < field.channels; ++ch) {
        const float* f = field.channel(ch).data();
        double s = 0.0;
        for (int q = 0; q < 8; ++q) s += c.w[q] * f[c.idx[q]];
        out.data[ch * n + v] = static_cast<float>(s);
      }
    }
  });
}

void warp_backward(const Tensor& field, const Tensor& map, const Tensor& grad_out,
                   Tensor* grad_field, Tensor* grad_map) {
  const std::size_t n = map.voxels();
  const float* mx = map.channel(0).data();
  const float* my = map.channel(1).data();
  const float* mz = map.channel(2).data();
  for (std::size_t v = 0; v < n; ++v) {
    const Corner c = corners(field.dims, mx[v], my[v], mz[v]);
    double dp[3] = {0.0, 0.0, 0.0};
    for (int ch = 0; ch < field.channels; ++ch) {
      const double g = grad_out.data[ch * n + v];
      if (g == 0.0) continue;
      if (grad_field != nullptr) {
        float* gf = grad_field->channel(ch).data();
        for (int q = 0; q < 8; ++q) gf[c.idx[q]] += static_cast<float>(c.w[q] * g);
      }
      if (grad_map != nullptr) {
        const float* f = field.channel(ch).data();
        double val[8];
        for (int q = 0; q < 8; ++q) val[q] = f[c.idx[q]];
        const double fx = c.ax.frac, fy = c.ay.frac, fz = c.az.frac;
        // corner order: q = x + 2y + 4z
        const double ddx = (1 - fy) * (1 - fz) * (val[1] - val[0]) + fy * (1 - fz) * (val[3] - val[2]) +
                           (1 - fy) * fz * (val[5] - val[4]) + fy * fz * (val[7] - val[6]);
        const double ddy = (1 - fx) * (1 - fz) * (val[2] - val[0]) + fx * (1 - fz) * (val[3] - val[1]) +
                           (1 - fx) * fz * (val[6] - val[4]) + fx * fz * (val[7] - val[5]);
        const double ddz = (1 - fx) * (1 - fy) * (val[4] - val[0]) + fx * (1 - fy) * (val[5] - val[1]) +
                           (1 - fx) * fy * (val[6] - val[2]) + fx * fy * (val[7] - val[3]);
        if (!c.ax.clamped) dp[0] += g * ddx * c.ax.scale;
        if (!c.ay.clamped) dp[1] += g * ddy * c.ay.scale;
        if (!c.az.clamped) dp[2] += g * ddz * c.az.scale;
      }
    }
    if (grad_map != nullptr) {
      for (int a = 0; a < 3; ++a) grad_map->data[a * n + v] += static_cast<float>(dp[a]);
    }
  }
}

void box_sum(std::span<const double> in, const Dims3& d, int radius, std::span<double> out) {
  std::vector<double> cur(in.begin(), in.end());
  std::vector<double> next(cur.size());
  const std::size_t stride[3] = {1, static_cast<std::size_t>(d[0]),
                                 static_cast<std::size_t>(d[0]) * d[1]};
  std::vector<double> prefix;
  for (int axis = 0; axis < 3; ++axis) {
    const int n = d[axis];
    prefix.assign(n + 1, 0.0);
    const int o1 = (axis + 1) % 3, o2 = (axis + 2) % 3;
    for (int b = 0; b < d[o2]; ++b)
      for (int a = 0; a < d[o1]; ++a) {
        const std::size_t base = a * stride[o1] + b * stride[o2];
        for (int i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + cur[base + i * stride[axis]];
        for (int i = 0; i < n; ++i) {
          const int lo = std::max(0, i - radius);
          const int hi = std::min(n - 1, i + radius);
          next[base + i * stride[axis]] = prefix[hi + 1] - prefix[lo];
        }
      }
    std::swap(cur, next);
  }
  std::copy(cur.begin(), cur.end(), out.begin());
}

namespace {

// Clipped window size at every node, as a product of per-axis lengths.
std::vector<double> window_counts(const Dims3& d, int radius) {
  std::vector<double> per_axis[3];
  for (int a = 0; a < 3; ++a) {
    per_axis[a].resize(d[a]);
    for (int i = 0; i < d[a]; ++i)
      per_axis[a][i] = std::min(d[a] - 1, i + radius) - std::max(0, i - radius) + 1;
  }
  std::vector<double> n(static_cast<std::size_t>(d[0]) * d[1] * d[2]);
  std::size_t o = 0;
  for (int k = 0; k < d[2]; ++k)
    for (int j = 0; j < d[1]; ++j)
      for (int i = 0; i < d[0]; ++i) n[o++] = per_axis[0][i] * per_axis[1][j] * per_axis[2][k];
  return n;
}

}  // namespace

double lncc_forward(std::span<const float> a, std::span<const float> b, const Dims3& dims,
                    int radius, double epsilon, LnccCache* cache) {
  const std::size_t n = a.size();
  if (b.size() != n) throw Error("shape", "lncc inputs differ in size");
  std::vector<double> buf(n);
  auto windowed = [&](auto fn) {
    for (std::size_t i = 0; i < n; ++i) buf[i] = fn(i);
    std::vector<double> out(n);
    box_sum(buf, dims, radius, out);
    return out;
  };
  const auto sa = windowed([&](std::size_t i) { return static_cast<double>(a[i]); });
  const auto sb = windowed([&](std::size_t i) { return static_cast<double>(b[i]); });
  const auto saa = windowed([&](std::size_t i) { return static_cast<double>(a[i]) * a[i]; });
  const auto sbb = windowed([&](std::size_t i) { return static_cast<double>(b[i]) * b[i]; });
  const auto sab = windowed([&](std::size_t i) { return static_cast<double>(a[i]) * b[i]; });
  const auto count = window_counts(dims, radius);

  if (cache != nullptr) {
    cache->alpha_a.assign(n, 0.0);
    cache->beta_a.assign(n, 0.0);
    cache->alpha_b.assign(n, 0.0);
    cache->beta_b.assign(n, 0.0);
    cache->gamma.assign(n, 0.0);
  }
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double w = count[i];
    const double ma = sa[i] / w, mb = sb[i] / w;
    const double va = std::max(0.0, saa[i] / w - ma * ma);
    const double vb = std::max(0.0, sbb[i] / w - mb * mb);
    if (va < epsilon && vb < epsilon) continue;  // flat window pair: correlation 0
    const double cov = sab[i] / w - ma * mb;
    const double ea = va + epsilon, eb = vb + epsilon;
    const double denom = std::sqrt(ea * eb);
    const double cc = cov / denom;
    total += cc;
    if (cache != nullptr) {
      // Partial derivatives of cc with respect to the five window sums.
      cache->gamma[i] = 1.0 / (denom * w);
      cache->alpha_a[i] = (-mb / denom + cc * ma / ea) / w;
      cache->alpha_b[i] = (-ma / denom + cc * mb / eb) / w;
      cache->beta_a[i] = -cc / (2.0 * ea * w);
      cache->beta_b[i] = -cc / (2.0 * eb * w);
    }
  }
  return 1.0 - total / static_cast<double>(n);
}

void lncc_backward(std::span<const float> a, std::span<const float> b, const Dims3& dims,
                   int radius, const LnccCache& cache, double grad, std::span<float> grad_a,
                   std::span<float> grad_b) {
  const std::size_t n = a.size();
  const double scale = -grad / static_cast<double>(n);
  std::vector<double> box_g(n);
  box_sum(cache.gamma, dims, radius, box_g);
  if (!grad_a.empty()) {
    std::vector<double> ba(n), bb(n);
    box_sum(cache.alpha_a, dims, radius, ba);
    box_sum(cache.beta_a, dims, radius, bb);
    for (std::size_t i = 0; i < n; ++i)
      grad_a[i] += static_cast<float>(scale * (ba[i] + 2.0 * a[i] * bb[i] + b[i] * box_g[i]));
  }
  if (!grad_b.empty()) {
    std::vector<double> ba(n), bb(n);
    box_sum(cache.alpha_b, dims, radius, ba);
    box_sum(cache.beta_b, dims, radius, bb);
    for (std::size_t i = 0; i < n; ++i)
      grad_b[i] += static_cast<float>(scale * (ba[i] + 2.0 * b[i] * bb[i] + a[i] * box_g[i]));
  }
}

namespace {

template <typename Fn>
void for_each_interior(const Dims3& d, Fn&& fn) {
  for (int k = 1; k < d[2] - 1; ++k)
    for (int j = 1; j < d[1] - 1; ++j)
      for (int i = 1; i < d[0] - 1; ++i) fn(i, j, k);
}

std::size_t interior_count(const Dims3& d) {
  return static_cast<std::size_t>(d[0] - 2) * (d[1] - 2) * (d[2] - 2);
}

}  // namespace

double jacobian_penalty_forward(const Tensor& map) {
  const auto& d = map.dims;
  if (map.channels != 3 || d[0] < 3 || d[1] < 3 || d[2] < 3) {
    throw Error("shape", "jacobian penalty needs a 3-channel map with dims >= 3");
  }
  const std::size_t n = map.voxels();
  const std::size_t stride[3] = {1, static_cast<std::size_t>(d[0]),
                                 static_cast<std::size_t>(d[0]) * d[1]};
  double total = 0.0;
  for_each_interior(d, [&](int i, int j, int k) {
    const std::size_t v = i + stride[1] * j + stride[2] * k;
    for (int c = 0; c < 3; ++c) {
      const float* m = map.data.data() + c * n;
      for (int a = 0; a < 3; ++a) {
        const double jac = (static_cast<double>(m[v + stride[a]]) - m[v]) * (d[a] - 1);
        const double dev = jac - (a == c ? 1.0 : 0.0);
        total += dev * dev;
      }
    }
  });
  return total / static_cast<double>(interior_count(d));
}

void jacobian_penalty_backward(const Tensor& map, double grad, Tensor& grad_map) {
  const auto& d = map.dims;
  const std::size_t n = map.voxels();
  const std::size_t stride[3] = {1, static_cast<std::size_t>(d[0]),
                                 static_cast<std::size_t>(d[0]) * d[1]};
  const double scale = 2.0 * grad / static_cast<double>(interior_count(d));
  for_each_interior(d, [&](int i, int j, int k) {
    const std::size_t v = i + stride[1] * j + stride[2] * k;
    for (int c = 0; c < 3; ++c) {
      const float* m = map.data.data() + c * n;
      float* g = grad_map.data.data() + c * n;
      for (int a = 0; a < 3; ++a) {
        const double h = d[a] - 1;
        const double jac = (static_cast<double>(m[v + stride[a]]) - m[v]) * h;
        const double dev = jac - (a == c ? 1.0 : 0.0);
        const double gv = scale * dev * h;
        g[v + stride[a]] += static_cast<float>(gv);
        g[v] -= static_cast<float>(gv);
      }
    }
  });
}

}  // namespace kernels
}  // namespace iconforge
