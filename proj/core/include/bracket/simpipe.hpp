#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "bracket/rawimg.hpp"
#include "bracket/rng.hpp"

namespace bracket::simpipe {

using rawimg::BayerMosaic;
using rawimg::ExposureMeta;
using rawimg::PackedRaw;
using rawimg::ScaleTag;

// Parametric invertible ISP: white-balance gains plus a row-normalized
// color matrix.
struct IspParams {
  double gain_r = 1.9;
  double gain_b = 1.6;
  double ccm[3][3] = {{1.70, -0.60, -0.10},
                      {-0.30, 1.60, -0.30},
                      {-0.05, -0.45, 1.50}};
  void validate() const;
};

struct NoiseParams {
  double lambda_shot = 0.0;  // signal-proportional variance coefficient
  double lambda_read = 0.0;  // constant variance floor
};

// Xiaomi-10S-style calibration point used by the fixed mode.
inline NoiseParams iso1600_noise() { return {2.42e-3, 1.79e-5}; }

enum class Task { kIre, kIrePlus };
enum class NoiseSampling { kFixed, kRange, kShifted };

inline int sr_factor_for(Task t) { return t == Task::kIrePlus ? 4 : 1; }

struct SimConfig {
  int frames = 5;     // T
  int ratio = 4;      // S
  int bits = 10;      // b
  Task task = Task::kIre;
  NoiseSampling noise_mode = NoiseSampling::kRange;
  NoiseParams fixed_noise = iso1600_noise();
  uint64_t seed = 0;

  int sr_factor() const { return sr_factor_for(task); }
  // Q_T = sum of S^(k-1), k = 1..T
  long frames_needed() const;
  void validate() const;
};

// Dense linear-radiance RGB sequence; the simulation source material.
struct HdrSequence {
  int frames = 0;
  int height = 0;
  int width = 0;
  std::vector<float> rgb;  // frame-major, then 3 channel planes per frame

  size_t frame_size() const { return 3 * size_t(height) * width; }
  float* frame(int m) { return rgb.data() + size_t(m) * frame_size(); }
  const float* frame(int m) const { return rgb.data() + size_t(m) * frame_size(); }
};

struct RawSequence {
  int frames = 0;
  int height = 0;
  int width = 0;
  std::vector<float> v;  // frame-major mosaics

  size_t frame_size() const { return size_t(height) * width; }
  const float* frame(int m) const { return v.data() + size_t(m) * frame_size(); }
};

struct BracketExample {
  std::vector<PackedRaw> stack;      // T LDR noisy frames
  std::vector<ExposureMeta> meta;    // per frame
  NoiseParams noise;                 // shared across the stack
  PackedRaw gt;                      // HDR, shortest-exposure units, unclipped
  std::vector<long> cum_counts;      // Q_i
  int sr_factor = 1;
  int burst_exposure = 0;            // 0 = bracket mode
};

// Deterministic procedural scene: slow global camera drift (sub-pixel per
// source frame), one independently moving object, radiance spanning at
// least four orders of magnitude up to radiance_max.
HdrSequence procedural_hdr_scene(uint64_t seed, int height, int width, int frame_count,
                                 double radiance_max = 32.0);

// Inverse ISP: inverse CCM, then inverse white balance, then RGGB mosaic.
BayerMosaic rgb_to_raw(const float* rgb, int height, int width, const IspParams& isp);

// Forward of the inverse above, on a full-resolution RGB triple per pixel.
// Used by evalkit's post-processing.
void apply_forward_isp(float* rgb, size_t pixels, const IspParams& isp);

// Catmull-Rom (a = -0.5) separable downsample, kernel widened by the factor.
void downsample_rgb(const float* src, int height, int width, int factor, float* dst);

// Splits the first Q_T mosaics into T groups of S^(i-1) consecutive frames
// and sums each group in source order. Returns the clean HDR mosaics and Q.
std::pair<std::vector<BayerMosaic>, std::vector<long>> group_and_integrate(
    const RawSequence& seq, int frames, int ratio);

// log(lambda_shot) ~ U(log 1.2e-3, log 4.8e-3);
// log(lambda_read) | log(lambda_shot) ~ N(1.869 log(lambda_shot) + 0.3276, 0.3^2)
NoiseParams sample_noise_params(Rng& rng);

// Outside the training distribution but within sensor bounds: lambda_shot
// pinned to the top of its range, lambda_read well above the regression line.
NoiseParams sample_shifted_noise_params(Rng& rng);

// x <- x + n, n ~ N(0, lambda_read + lambda_shot * x) element-wise. No clipping.
void add_hetero_noise(std::span<float> x, const NoiseParams& p, Rng& rng);

// clip to [0,1], add noise, clip again, quantize/dequantize at b bits.
PackedRaw degrade_to_ldr(const PackedRaw& hdr, const NoiseParams& p, int bits, Rng& rng);

BracketExample synthesize_example(const HdrSequence& scene, const IspParams& isp,
                                  const SimConfig& cfg, Rng& rng);

// n same-exposure frames at exposure index i, consecutive non-overlapping
// integration windows, same degradation path as synthesize_example.
BracketExample synthesize_burst(const HdrSequence& scene, const IspParams& isp,
                                const SimConfig& cfg, int exposure_index, int count, Rng& rng);

// --- dataset directory layout ---------------------------------------------
// <dir>/frame_<i>.raw, <dir>/gt.raw, <dir>/meta.txt (key=value lines).
void write_example(const std::string& dir, const BracketExample& ex);
BracketExample read_example(const std::string& dir);

// Mean squared 3x3 Laplacian over the interior; the blur oracle.
double gradient_energy(const BayerMosaic& m);

}  // namespace bracket::simpipe
