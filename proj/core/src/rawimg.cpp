#include "bracket/rawimg.hpp"

#include <cstdio>
#include <cstring>
#include <memory>

namespace bracket::rawimg {

BayerMosaic make_mosaic(int height, int width, ScaleTag tag, float fill) {
  require(height > 0 && width > 0, "mosaic dimensions must be positive");
  require(height % 2 == 0 && width % 2 == 0, "mosaic dimensions must be even");
  BayerMosaic m;
  m.height = height;
  m.width = width;
  m.tag = tag;
  m.v.assign(size_t(height) * width, fill);
  return m;
}

PackedRaw make_packed(int plane_h, int plane_w, ScaleTag tag, float fill) {
  require(plane_h > 0 && plane_w > 0, "packed plane dimensions must be positive");
  PackedRaw p;
  p.plane_h = plane_h;
  p.plane_w = plane_w;
  p.tag = tag;
  p.v.assign(4 * size_t(plane_h) * plane_w, fill);
  return p;
}

void ExposureMeta::validate() const {
  require(index >= 1, "exposure index must be >= 1");
  require(ratio > 1.0, "exposure ratio S must be > 1");
  require(bit_depth >= 1 && bit_depth <= 16, "bit depth must be in [1, 16]");
}

PackedRaw pack_bayer(const BayerMosaic& m) {
  require(m.height > 0 && m.width > 0, "empty mosaic");
  require(m.height % 2 == 0 && m.width % 2 == 0, "pack_bayer: odd mosaic dimensions");
  PackedRaw p = make_packed(m.height / 2, m.width / 2, m.tag);
  const int ph = p.plane_h, pw = p.plane_w;
  for (int y = 0; y < ph; ++y) {
    for (int x = 0; x < pw; ++x) {
      const size_t i = size_t(y) * pw + x;
      p.v[0 * p.plane_size() + i] = m.at(2 * y, 2 * x);          // R
      p.v[1 * p.plane_size() + i] = m.at(2 * y, 2 * x + 1);      // G1
      p.v[2 * p.plane_size() + i] = m.at(2 * y + 1, 2 * x);      // G2
      p.v[3 * p.plane_size() + i] = m.at(2 * y + 1, 2 * x + 1);  // B
    }
  }
  return p;
}

BayerMosaic unpack_bayer(const PackedRaw& p) {
  require(p.plane_h > 0 && p.plane_w > 0, "empty packed raw");
  require(p.v.size() == 4 * p.plane_size(), "unpack_bayer: plane shape mismatch");
  BayerMosaic m = make_mosaic(2 * p.plane_h, 2 * p.plane_w, p.tag);
  for (int y = 0; y < p.plane_h; ++y) {
    for (int x = 0; x < p.plane_w; ++x) {
      const size_t i = size_t(y) * p.plane_w + x;
      m.at(2 * y, 2 * x) = p.v[0 * p.plane_size() + i];
      m.at(2 * y, 2 * x + 1) = p.v[1 * p.plane_size() + i];
      m.at(2 * y + 1, 2 * x) = p.v[2 * p.plane_size() + i];
      m.at(2 * y + 1, 2 * x + 1) = p.v[3 * p.plane_size() + i];
    }
  }
  return m;
}

ConditionedFrame condition_frame(const PackedRaw& packed, const ExposureMeta& meta,
                                 double gamma) {
  meta.validate();
  require(gamma > 0.0, "gamma must be positive");
  ConditionedFrame out;
  out.plane_h = packed.plane_h;
  out.plane_w = packed.plane_w;
  out.gamma = float(gamma);
  out.v.resize(8 * packed.plane_size());
  const double inv = 1.0 / meta.divisor();
  const size_t n = 4 * packed.plane_size();
  for (size_t i = 0; i < n; ++i) {
    const float norm = float(packed.v[i] * inv);
    out.v[i] = norm;
    out.v[n + i] = norm <= 0.f ? 0.f : std::pow(norm, float(gamma));
  }
  return out;
}

void tonemap(std::span<float> x, double mu) {
  require(mu > 0.0, "tonemap: mu must be > 0");
  const float denom = std::log1p(float(mu));
  for (float& e : x) {
    const float c = e < 0.f ? 0.f : e;
    e = std::log1p(float(mu) * c) / denom;
  }
}

void inverse_tonemap(std::span<float> y, double mu) {
  require(mu > 0.0, "inverse_tonemap: mu must be > 0");
  const float l = std::log1p(float(mu));
  for (float& e : y) {
    if (e < 0.f || e > 1.f) throw ValueError("inverse_tonemap: input outside [0, 1]");
    e = std::expm1(e * l) / float(mu);
  }
}

uint32_t quantize_value(double x, int bits) {
  require(bits >= 1 && bits <= 16, "quantize: bits must be in [1, 16]");
  if (x < 0.0) x = 0.0;
  if (x > 1.0) x = 1.0;
  const double top = double((1u << bits) - 1);
  return uint32_t(std::llround(x * top));  // llround: half away from zero
}

double dequantize_value(uint32_t q, int bits) {
  require(bits >= 1 && bits <= 16, "dequantize: bits must be in [1, 16]");
  return double(q) / double((1u << bits) - 1);
}

void quantize_dequantize(std::span<float> x, int bits) {
  require(bits >= 1 && bits <= 16, "quantize: bits must be in [1, 16]");
  const double top = double((1u << bits) - 1);
  for (float& e : x) {
    double c = e;
    if (c < 0.0) c = 0.0;
    if (c > 1.0) c = 1.0;
    e = float(double(std::llround(c * top)) / top);
  }
}

namespace {
struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

void put_u32(FILE* f, uint32_t v) {
  unsigned char b[4] = {(unsigned char)(v & 0xff), (unsigned char)((v >> 8) & 0xff),
                        (unsigned char)((v >> 16) & 0xff), (unsigned char)((v >> 24) & 0xff)};
  if (std::fwrite(b, 1, 4, f) != 4) throw IoError("raw write failed");
}

uint32_t get_u32(FILE* f) {
  unsigned char b[4];
  if (std::fread(b, 1, 4, f) != 4) throw IoError("raw file truncated");
  return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) | (uint32_t(b[3]) << 24);
}
}  // namespace

void write_packed(const std::string& path, const PackedRaw& p) {
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IoError("cannot open for write: " + path);
  if (std::fwrite("BRK1", 1, 4, f.get()) != 4) throw IoError("raw write failed");
  put_u32(f.get(), 4u);
  put_u32(f.get(), uint32_t(p.plane_h));
  put_u32(f.get(), uint32_t(p.plane_w));
  // x86 floats are already little-endian IEEE-754
  if (std::fwrite(p.v.data(), sizeof(float), p.v.size(), f.get()) != p.v.size())
    throw IoError("raw write failed: " + path);
}

PackedRaw read_packed(const std::string& path, ScaleTag tag) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw IoError("cannot open: " + path);
  char magic[4];
  if (std::fread(magic, 1, 4, f.get()) != 4 || std::memcmp(magic, "BRK1", 4) != 0)
    throw IoError("bad raw magic in " + path);
  const uint32_t planes = get_u32(f.get());
  const uint32_t h = get_u32(f.get());
  const uint32_t w = get_u32(f.get());
  if (planes != 4) throw IoError("unsupported plane count in " + path);
  if (h == 0 || w == 0 || h > (1u << 20) || w > (1u << 20)) throw IoError("bad raw dims in " + path);
  PackedRaw p = make_packed(int(h), int(w), tag);
  if (std::fread(p.v.data(), sizeof(float), p.v.size(), f.get()) != p.v.size())
    throw IoError("raw file truncated: " + path);
  return p;
}

}  // namespace bracket::rawimg
