#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "iconforge/error.hpp"
#include "iconforge/io.hpp"

namespace iconforge::io {
namespace {

constexpr int kHeaderSize = 348;
constexpr std::int64_t kWriteOffset = 352;  // header + 4-byte extension flag

std::vector<unsigned char> slurp(const fs::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");  // passes plain files through
  if (f == nullptr) throw Error("io", "cannot open " + path.string());
  std::vector<unsigned char> bytes;
  std::array<unsigned char, 1 << 16> chunk{};
  for (;;) {
    const int n = gzread(f, chunk.data(), static_cast<unsigned>(chunk.size()));
    if (n < 0) {
      gzclose(f);
      throw Error("io", "read failed for " + path.string());
    }
    if (n == 0) break;
    bytes.insert(bytes.end(), chunk.begin(), chunk.begin() + n);
  }
  gzclose(f);
  return bytes;
}

bool has_gz_suffix(const fs::path& path) { return path.extension() == ".gz"; }

void spit(const std::vector<unsigned char>& bytes, const fs::path& path) {
  if (has_gz_suffix(path)) {
    gzFile f = gzopen(path.string().c_str(), "wb");
    if (f == nullptr) throw Error("io", "cannot write " + path.string());
    const int n = gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
    if (gzclose(f) != Z_OK || n != static_cast<int>(bytes.size())) {
      throw Error("io", "write failed for " + path.string());
    }
    return;
  }
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("io", "write failed for " + path.string());
}

class Reader {
 public:
  Reader(const std::vector<unsigned char>& bytes, bool swap) : bytes_(bytes), swap_(swap) {}

  template <class T>
  T get(std::size_t offset) const {
    std::array<unsigned char, sizeof(T)> raw{};
    std::memcpy(raw.data(), bytes_.data() + offset, sizeof(T));
    if (swap_) std::reverse(raw.begin(), raw.end());
    return std::bit_cast<T>(raw);
  }

 private:
  const std::vector<unsigned char>& bytes_;
  bool swap_;
};

template <class T>
void put(std::vector<unsigned char>& bytes, std::size_t offset, T value) {
  static_assert(std::endian::native == std::endian::little, "writer assumes a little-endian host");
  std::memcpy(bytes.data() + offset, &value, sizeof(T));
}

int bits_for(int datatype) {
  switch (datatype) {
    case 2: return 8;
    case 4: return 16;
    case 16: return 32;
    case 64: return 64;
    default: return 0;
  }
}

// Axis-aligned positive scaling only; anything else would need direction
// cosines the Volume type does not carry.
void require_axis_aligned(const std::array<std::array<double, 3>, 3>& m, const fs::path& path) {
  double scale = 0.0;
  for (int r = 0; r < 3; ++r) scale = std::max(scale, std::abs(m[r][r]));
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) {
      const bool off = r != c && std::abs(m[r][c]) > 1e-6 * scale;
      const bool flipped = r == c && !(m[r][c] > 0.0);
      if (off || flipped) {
        throw Error("oblique-unsupported",
                    path.string() + ": orientation is not a positive axis-aligned scaling");
      }
    }
}

}  // namespace

Volume read_nifti(const fs::path& path, NiftiInfo* info_out) {
  const auto bytes = slurp(path);
  if (bytes.size() < kHeaderSize) throw Error("not-nifti", path.string() + ": shorter than a header");

  std::int32_t sizeof_hdr = 0;
  std::memcpy(&sizeof_hdr, bytes.data(), 4);
  bool swap = false;
  if (sizeof_hdr != kHeaderSize) {
    swap = true;
    if (Reader(bytes, true).get<std::int32_t>(0) != kHeaderSize) {
      throw Error("not-nifti", path.string() + ": sizeof_hdr is not 348 in either byte order");
    }
  }
  const Reader r(bytes, swap);

  const char* magic = reinterpret_cast<const char*>(bytes.data() + 344);
  if (std::memcmp(magic, "ni1\0", 4) == 0) {
    throw Error("not-nifti",
                path.string() + ": two-file (.hdr/.img pair) form is unsupported; use single-file n+1");
  }
  if (std::memcmp(magic, "n+1\0", 4) != 0) throw Error("not-nifti", path.string() + ": bad magic");

  NiftiInfo info;
  info.big_endian = (std::endian::native == std::endian::little) == swap;

  int ndim = r.get<std::int16_t>(40);
  if (ndim < 1 || ndim > 7) throw Error("not-3d", path.string() + ": dim[0] out of range");
  std::array<int, 8> dim{};
  for (int i = 0; i < 8; ++i) dim[i] = r.get<std::int16_t>(40 + 2 * i);
  while (ndim > 3 && dim[ndim] == 1) --ndim;
  if (ndim != 3) {
    throw Error("not-3d", path.string() + ": " + std::to_string(ndim) + " dimensions after squeezing");
  }
  for (int a = 0; a < 3; ++a) {
    if (dim[a + 1] < 1) throw Error("not-3d", path.string() + ": non-positive dim");
    info.dims[a] = dim[a + 1];
  }

  info.datatype = r.get<std::int16_t>(70);
  info.bitpix = r.get<std::int16_t>(72);
  const int bits = bits_for(info.datatype);
  if (bits == 0) {
    throw Error("unsupported-dtype",
                path.string() + ": datatype code " + std::to_string(info.datatype));
  }

  for (int a = 0; a < 3; ++a) info.spacing[a] = r.get<float>(76 + 4 * (a + 1));
  const double qfac = r.get<float>(76) < 0.0f ? -1.0 : 1.0;
  info.vox_offset = static_cast<std::int64_t>(r.get<float>(108));
  info.scl_slope = r.get<float>(112);
  info.scl_inter = r.get<float>(116);
  info.qform_code = r.get<std::int16_t>(252);
  info.sform_code = r.get<std::int16_t>(254);

  if (info.sform_code > 0) {
    std::array<std::array<double, 3>, 3> m{};
    for (int row = 0; row < 3; ++row) {
      for (int c = 0; c < 3; ++c) m[row][c] = r.get<float>(280 + 16 * row + 4 * c);
      info.origin[row] = r.get<float>(280 + 16 * row + 12);
    }
    require_axis_aligned(m, path);
  } else if (info.qform_code > 0) {
    const double b = r.get<float>(256), c = r.get<float>(260), d = r.get<float>(264);
    const double a = std::sqrt(std::max(0.0, 1.0 - (b * b + c * c + d * d)));
    const std::array<std::array<double, 3>, 3> rot{{
        {a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c) * qfac},
        {2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b) * qfac},
        {2 * (b * d - a * c), 2 * (c * d + a * b), (a * a + d * d - c * c - b * b) * qfac},
    }};
    require_axis_aligned(rot, path);
    for (int a2 = 0; a2 < 3; ++a2) info.origin[a2] = r.get<float>(268 + 4 * a2);
  }

  const std::size_t count = static_cast<std::size_t>(info.dims[0]) * info.dims[1] * info.dims[2];
  const std::size_t need = count * (bits / 8);
  if (info.vox_offset < kHeaderSize ||
      static_cast<std::size_t>(info.vox_offset) + need > bytes.size()) {
    throw Error("truncated", path.string() + ": voxel data shorter than the header declares");
  }

  const bool scaled = info.scl_slope != 0.0 && std::isfinite(info.scl_slope);
  const double inter = std::isfinite(info.scl_inter) ? info.scl_inter : 0.0;
  std::vector<float> data(count);
  const std::size_t base = static_cast<std::size_t>(info.vox_offset);
  for (std::size_t i = 0; i < count; ++i) {
    double raw = 0.0;
    switch (info.datatype) {
      case 2: raw = bytes[base + i]; break;
      case 4: raw = r.get<std::int16_t>(base + 2 * i); break;
      case 16: raw = r.get<float>(base + 4 * i); break;
      case 64: raw = r.get<double>(base + 8 * i); break;
    }
    data[i] = static_cast<float>(scaled ? info.scl_slope * raw + inter : raw);
  }

  Grid grid{info.dims, info.spacing, info.origin};
  if (info_out != nullptr) *info_out = info;
  return Volume(grid, std::move(data));
}

LabelVolume read_nifti_labels(const fs::path& path) {
  const Volume v = read_nifti(path);
  std::vector<std::int32_t> labels(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const float x = v[i];
    if (x < 0.0f || x != std::floor(x) || x > 2147483520.0f) {
      throw Error("label", path.string() + ": voxel value is not a non-negative integer label");
    }
    labels[i] = static_cast<std::int32_t>(x);
  }
  return LabelVolume(v.grid(), std::move(labels));
}

void write_nifti(const Volume& v, const fs::path& path) {
  const auto& g = v.grid();
  std::vector<unsigned char> bytes(kWriteOffset + v.size() * 4, 0);
  put<std::int32_t>(bytes, 0, kHeaderSize);
  put<char>(bytes, 39, 0);
  const std::array<std::int16_t, 8> dim = {3, static_cast<std::int16_t>(g.dims[0]),
                                           static_cast<std::int16_t>(g.dims[1]),
                                           static_cast<std::int16_t>(g.dims[2]), 1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) put<std::int16_t>(bytes, 40 + 2 * i, dim[i]);
  put<std::int16_t>(bytes, 70, 16);
  put<std::int16_t>(bytes, 72, 32);
  put<float>(bytes, 76, 1.0f);
  for (int a = 0; a < 3; ++a) put<float>(bytes, 76 + 4 * (a + 1), static_cast<float>(g.spacing[a]));
  put<float>(bytes, 108, static_cast<float>(kWriteOffset));
  put<char>(bytes, 123, 2);  // mm
  put<std::int16_t>(bytes, 252, 1);
  put<std::int16_t>(bytes, 254, 1);
  for (int a = 0; a < 3; ++a) {
    put<float>(bytes, 268 + 4 * a, static_cast<float>(g.origin[a]));
    put<float>(bytes, 280 + 16 * a + 4 * a, static_cast<float>(g.spacing[a]));
    put<float>(bytes, 280 + 16 * a + 12, static_cast<float>(g.origin[a]));
  }
  std::memcpy(bytes.data() + 344, "n+1\0", 4);
  std::memcpy(bytes.data() + kWriteOffset, v.values().data(), v.size() * 4);
  spit(bytes, path);
}

void write_nifti_labels(const LabelVolume& v, const fs::path& path) {
  std::vector<float> values(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v.labels()[i] > (1 << 24)) throw Error("label", "label too large for a float32 image");
    values[i] = static_cast<float>(v.labels()[i]);
  }
  write_nifti(Volume(v.grid(), std::move(values)), path);
}

void write_pgm(const std::vector<float>& pixels, int width, int height, float lo, float hi,
               const fs::path& path) {
  if (pixels.size() != static_cast<std::size_t>(width) * height) {
    throw Error("shape", "pgm pixel count does not match width*height");
  }
  std::ofstream out(path, std::ios::binary);
  out << "P5\n" << width << ' ' << height << "\n255\n";
  const float span = hi > lo ? hi - lo : 1.0f;
  for (float p : pixels) {
    const float t = std::clamp((p - lo) / span, 0.0f, 1.0f);
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(t * 255.0f))));
  }
  if (!out) throw Error("io", "write failed for " + path.string());
}

}  // namespace iconforge::io
