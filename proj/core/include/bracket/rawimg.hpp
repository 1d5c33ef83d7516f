#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bracket/common.hpp"

namespace bracket::rawimg {

// The CFA is fixed to RGGB. Anything else is rejected at load time.
enum class ScaleTag { kLdr, kHdr };

struct BayerMosaic {
  int height = 0;
  int width = 0;
  ScaleTag tag = ScaleTag::kLdr;
  std::vector<float> v;  // row-major height*width

  float& at(int y, int x) { return v[size_t(y) * width + x]; }
  float at(int y, int x) const { return v[size_t(y) * width + x]; }
};

BayerMosaic make_mosaic(int height, int width, ScaleTag tag = ScaleTag::kLdr, float fill = 0.f);

// 4 quarter-resolution planes in R, G1, G2, B order, stored plane-major.
struct PackedRaw {
  int plane_h = 0;
  int plane_w = 0;
  ScaleTag tag = ScaleTag::kLdr;
  std::vector<float> v;  // 4 * plane_h * plane_w

  size_t plane_size() const { return size_t(plane_h) * plane_w; }
  std::span<float> plane(int k) { return {v.data() + k * plane_size(), plane_size()}; }
  std::span<const float> plane(int k) const { return {v.data() + k * plane_size(), plane_size()}; }
};

PackedRaw make_packed(int plane_h, int plane_w, ScaleTag tag = ScaleTag::kLdr, float fill = 0.f);

struct ExposureMeta {
  int index = 1;          // i in 1..T
  double ratio = 4.0;     // S, exposure-time ratio between consecutive frames
  double base_exposure = 1.0;
  int bit_depth = 10;

  // dt_i / dt_1 = S^(i-1)
  double divisor() const { return std::pow(ratio, index - 1); }
  void validate() const;
};

// 8 planes: the 4 exposure-normalized planes followed by their
// gamma-transformed copies.
struct ConditionedFrame {
  int plane_h = 0;
  int plane_w = 0;
  float gamma = 1.0f / 2.2f;
  std::vector<float> v;  // 8 * plane_h * plane_w

  size_t plane_size() const { return size_t(plane_h) * plane_w; }
  std::span<const float> plane(int k) const { return {v.data() + k * plane_size(), plane_size()}; }
};

constexpr double kDefaultGamma = 1.0 / 2.2;
constexpr double kDefaultMu = 5000.0;

PackedRaw pack_bayer(const BayerMosaic& m);
BayerMosaic unpack_bayer(const PackedRaw& p);

ConditionedFrame condition_frame(const PackedRaw& packed, const ExposureMeta& meta,
                                 double gamma = kDefaultGamma);

// mu-law tone map T(x) = log(1 + mu x) / log(1 + mu). Negative inputs clamp
// to 0; inputs above 1 are not clipped (T keeps increasing).
template <class S>
inline S tonemap_value(S x, S mu) {
  if (x < S(0)) x = S(0);
  return std::log1p(mu * x) / std::log1p(mu);
}

template <class S>
inline S inverse_tonemap_value(S y, S mu) {
  return std::expm1(y * std::log1p(mu)) / mu;
}

void tonemap(std::span<float> x, double mu = kDefaultMu);          // in place
void inverse_tonemap(std::span<float> y, double mu = kDefaultMu);  // in place; y in [0,1]

// Round-half-away-from-zero. Input clipped to [0,1] first.
uint32_t quantize_value(double x, int bits);
double dequantize_value(uint32_t q, int bits);
void quantize_dequantize(std::span<float> x, int bits);  // in place

// --- raw frame file format -------------------------------------------------
// 16-byte header: magic "BRK1", plane count u32, plane height u32,
// plane width u32 (little endian), then planar little-endian f32 data.
void write_packed(const std::string& path, const PackedRaw& p);
PackedRaw read_packed(const std::string& path, ScaleTag tag);

}  // namespace bracket::rawimg
