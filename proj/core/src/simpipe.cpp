#include "bracket/simpipe.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

namespace bracket::simpipe {

namespace fs = std::filesystem;

void IspParams::validate() const {
  require(gain_r >= 0.25 && gain_r <= 4.0 && gain_b >= 0.25 && gain_b <= 4.0,
          "isp: white-balance gains must be in [0.25, 4]");
  for (int r = 0; r < 3; ++r) {
    const double s = ccm[r][0] + ccm[r][1] + ccm[r][2];
    require(std::abs(s - 1.0) < 1e-6, "isp: ccm rows must sum to 1");
  }
  const double det = ccm[0][0] * (ccm[1][1] * ccm[2][2] - ccm[1][2] * ccm[2][1]) -
                     ccm[0][1] * (ccm[1][0] * ccm[2][2] - ccm[1][2] * ccm[2][0]) +
                     ccm[0][2] * (ccm[1][0] * ccm[2][1] - ccm[1][1] * ccm[2][0]);
  require(std::abs(det) > 1e-3, "isp: ccm is not invertible");
}

long SimConfig::frames_needed() const {
  long q = 0, g = 1;
  for (int i = 0; i < frames; ++i) {
    q += g;
    g *= ratio;
  }
  return q;
}

void SimConfig::validate() const {
  require(frames >= 1, "sim: T must be >= 1");
  require(ratio >= 2, "sim: S must be >= 2");
  require(bits >= 1 && bits <= 16, "sim: bit depth must be in [1, 16]");
}

// --- procedural scene --------------------------------------------------------

namespace {

struct SceneModel {
  // log10-radiance texture: sum of oriented sinusoids
  struct Wave {
    double kx, ky, phase, amp;
  };
  std::array<Wave, 4> waves;
  double wave_norm = 1.0;
  double log_lo = 0.0, log_hi = 0.0;

  // emissive gaussian bumps (highlights)
  struct Bump {
    double x, y, sigma, amp;
  };
  std::vector<Bump> bumps;

  // mild chroma fields
  double cr_kx, cr_ky, cr_ph;
  double cb_kx, cb_ky, cb_ph;

  // camera path: linear drift plus sinusoidal shake, both sub-pixel per frame
  double vx, vy, shake_amp_x, shake_amp_y, shake_period, shake_phase;

  // moving object: emissive gaussian on its own path
  double ox0, oy0, ovx, ovy, osigma, oamp;
  double ocol_r, ocol_b;

  void cam(int m, double& cx, double& cy) const {
    const double s = 2.0 * std::numbers::pi * double(m) / shake_period + shake_phase;
    cx = vx * m + shake_amp_x * std::sin(s);
    cy = vy * m + shake_amp_y * std::cos(s);
  }

  double background_log10(double x, double y) const {
    double n = 0.0;
    for (const Wave& w : waves) n += w.amp * std::sin(w.kx * x + w.ky * y + w.phase);
    const double t = 0.5 + 0.5 * n / wave_norm;  // [0, 1]
    return log_lo + (log_hi - log_lo) * t;
  }

  double bumps_at(double x, double y) const {
    double b = 0.0;
    for (const Bump& bp : bumps) {
      const double dx = x - bp.x, dy = y - bp.y;
      b += bp.amp * std::exp(-(dx * dx + dy * dy) / (2.0 * bp.sigma * bp.sigma));
    }
    return b;
  }
};

SceneModel build_scene_model(uint64_t seed, int height, int width, double radiance_max) {
  Rng rng = Rng::derive(seed, {0x5ce9e});
  SceneModel s;
  double norm = 0.0;
  for (auto& w : s.waves) {
    const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double freq = rng.uniform(0.06, 0.35);  // cycles ~ every 18..100 px
    w.kx = freq * std::cos(theta);
    w.ky = freq * std::sin(theta);
    w.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    w.amp = rng.uniform(0.5, 1.0);
    norm += w.amp;
  }
  s.wave_norm = norm;
  // texture spans ~4.3 decades, topping out well below the lights
  s.log_hi = std::log10(radiance_max) - 1.1;
  s.log_lo = s.log_hi - 4.3;

  const int n_bumps = 3 + int(rng.below(3));
  for (int i = 0; i < n_bumps; ++i) {
    SceneModel::Bump b;
    b.x = rng.uniform(0.12, 0.88) * width;
    b.y = rng.uniform(0.12, 0.88) * height;
    b.sigma = rng.uniform(0.04, 0.09) * std::min(height, width);
    b.amp = (i == 0) ? radiance_max
                     : std::exp(rng.uniform(std::log(radiance_max / 32.0),
                                            std::log(radiance_max / 2.0)));
    s.bumps.push_back(b);
  }

  s.cr_kx = rng.uniform(0.02, 0.1);
  s.cr_ky = rng.uniform(0.02, 0.1);
  s.cr_ph = rng.uniform(0.0, 6.28);
  s.cb_kx = rng.uniform(0.02, 0.1);
  s.cb_ky = rng.uniform(0.02, 0.1);
  s.cb_ph = rng.uniform(0.0, 6.28);

  const double drift_dir = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double drift_speed = rng.uniform(0.006, 0.012);  // px per source frame
  s.vx = drift_speed * std::cos(drift_dir);
  s.vy = drift_speed * std::sin(drift_dir);
  s.shake_amp_x = rng.uniform(0.3, 0.8);
  s.shake_amp_y = rng.uniform(0.3, 0.8);
  s.shake_period = rng.uniform(60.0, 140.0);
  s.shake_phase = rng.uniform(0.0, 6.28);

  s.ox0 = rng.uniform(0.2, 0.8) * width;
  s.oy0 = rng.uniform(0.2, 0.8) * height;
  const double odir = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double ospeed = rng.uniform(0.02, 0.04);  // px per source frame
  s.ovx = ospeed * std::cos(odir);
  s.ovy = ospeed * std::sin(odir);
  s.osigma = rng.uniform(0.03, 0.06) * std::min(height, width);
  s.oamp = std::exp(rng.uniform(std::log(0.5), std::log(4.0)));
  s.ocol_r = rng.uniform(0.7, 1.0);
  s.ocol_b = rng.uniform(0.7, 1.0);
  return s;
}

}  // namespace

HdrSequence procedural_hdr_scene(uint64_t seed, int height, int width, int frame_count,
                                 double radiance_max) {
  require(height >= 8 && width >= 8 && height % 2 == 0 && width % 2 == 0,
          "scene: dimensions must be even and >= 8");
  require(frame_count >= 1, "scene: frame count must be >= 1");
  require(radiance_max >= 1.0, "scene: radiance_max must be >= 1");
  const SceneModel s = build_scene_model(seed, height, width, radiance_max);

  HdrSequence seq;
  seq.frames = frame_count;
  seq.height = height;
  seq.width = width;
  seq.rgb.resize(size_t(frame_count) * 3 * height * width);

  const size_t plane = size_t(height) * width;
  for (int m = 0; m < frame_count; ++m) {
    double cx, cy;
    s.cam(m, cx, cy);
    const double obx = s.ox0 + s.ovx * m;
    const double oby = s.oy0 + s.ovy * m;
    float* r = seq.frame(m);
    float* g = r + plane;
    float* b = g + plane;
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        const double sx = x + cx, sy = y + cy;
        double lum = std::pow(10.0, s.background_log10(sx, sy)) + s.bumps_at(sx, sy);
        // object sits in scene coordinates too, so it moves independently
        const double dx = sx - obx, dy = sy - oby;
        const double obj = s.oamp * std::exp(-(dx * dx + dy * dy) / (2.0 * s.osigma * s.osigma));
        const double cr = 0.78 + 0.17 * std::sin(s.cr_kx * sx + s.cr_ky * sy + s.cr_ph);
        const double cb = 0.78 + 0.17 * std::sin(s.cb_kx * sx + s.cb_ky * sy + s.cb_ph);
        const size_t i = size_t(y) * width + x;
        r[i] = float(lum * cr + obj * s.ocol_r);
        g[i] = float(lum + obj);
        b[i] = float(lum * cb + obj * s.ocol_b);
      }
    }
  }
  return seq;
}

// --- ISP ----------------------------------------------------------------------

namespace {
void invert3x3(const double m[3][3], double out[3][3]) {
  const double det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
                     m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
                     m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
  require(std::abs(det) > 1e-3, "ccm not invertible");
  const double inv = 1.0 / det;
  out[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv;
  out[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv;
  out[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv;
  out[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv;
  out[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv;
  out[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv;
  out[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv;
  out[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv;
  out[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv;
}
}  // namespace

BayerMosaic rgb_to_raw(const float* rgb, int height, int width, const IspParams& isp) {
  isp.validate();
  double inv[3][3];
  invert3x3(isp.ccm, inv);
  BayerMosaic m = rawimg::make_mosaic(height, width, ScaleTag::kHdr);
  const size_t plane = size_t(height) * width;
  const float* r = rgb;
  const float* g = rgb + plane;
  const float* b = rgb + 2 * plane;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const size_t i = size_t(y) * width + x;
      const double cam_r = inv[0][0] * r[i] + inv[0][1] * g[i] + inv[0][2] * b[i];
      const double cam_g = inv[1][0] * r[i] + inv[1][1] * g[i] + inv[1][2] * b[i];
      const double cam_b = inv[2][0] * r[i] + inv[2][1] * g[i] + inv[2][2] * b[i];
      double v;
      const bool even_row = (y % 2 == 0);
      const bool even_col = (x % 2 == 0);
      if (even_row && even_col)
        v = cam_r / isp.gain_r;
      else if (!even_row && !even_col)
        v = cam_b / isp.gain_b;
      else
        v = cam_g;
      m.at(y, x) = float(std::max(v, 0.0));
    }
  }
  return m;
}

void apply_forward_isp(float* rgb, size_t pixels, const IspParams& isp) {
  for (size_t i = 0; i < pixels; ++i) {
    const double r = double(rgb[3 * i + 0]) * isp.gain_r;
    const double g = double(rgb[3 * i + 1]);
    const double b = double(rgb[3 * i + 2]) * isp.gain_b;
    rgb[3 * i + 0] = float(isp.ccm[0][0] * r + isp.ccm[0][1] * g + isp.ccm[0][2] * b);
    rgb[3 * i + 1] = float(isp.ccm[1][0] * r + isp.ccm[1][1] * g + isp.ccm[1][2] * b);
    rgb[3 * i + 2] = float(isp.ccm[2][0] * r + isp.ccm[2][1] * g + isp.ccm[2][2] * b);
  }
}

// --- bicubic downsample --------------------------------------------------------

namespace {
double catmull_rom(double t) {
  t = std::abs(t);
  if (t <= 1.0) return 1.5 * t * t * t - 2.5 * t * t + 1.0;
  if (t < 2.0) return -0.5 * t * t * t + 2.5 * t * t - 4.0 * t + 2.0;
  return 0.0;
}

// One axis, anti-aliased by widening the kernel support by `factor`.
void resample_axis(const float* src, int n_in, long stride_in, int lines, long line_in,
                   float* dst, int n_out, long stride_out, long line_out, int factor) {
  std::vector<std::pair<int, std::vector<double>>> taps(size_t(n_out));
  for (int o = 0; o < n_out; ++o) {
    const double c = (o + 0.5) * factor - 0.5;
    const int j0 = int(std::ceil(c - 2.0 * factor));
    const int j1 = int(std::floor(c + 2.0 * factor));
    std::vector<double> w(size_t(j1 - j0 + 1));
    double total = 0.0;
    for (int j = j0; j <= j1; ++j) {
      const double v = catmull_rom((j - c) / factor);
      w[size_t(j - j0)] = v;
      total += v;
    }
    for (double& v : w) v /= total;
    taps[size_t(o)] = {j0, std::move(w)};
  }
  for (int l = 0; l < lines; ++l) {
    const float* in = src + l * line_in;
    float* out = dst + l * line_out;
    for (int o = 0; o < n_out; ++o) {
      const auto& [j0, w] = taps[size_t(o)];
      double acc = 0.0;
      for (size_t k = 0; k < w.size(); ++k) {
        const int j = std::clamp(j0 + int(k), 0, n_in - 1);
        acc += w[k] * double(in[j * stride_in]);
      }
      out[o * stride_out] = float(acc);
    }
  }
}
}  // namespace

void downsample_rgb(const float* src, int height, int width, int factor, float* dst) {
  require(factor >= 1, "downsample: factor must be >= 1");
  require(height % factor == 0 && width % factor == 0,
          "downsample: dimensions must be divisible by the factor");
  const int oh = height / factor, ow = width / factor;
  std::vector<float> tmp(size_t(height) * ow);
  for (int c = 0; c < 3; ++c) {
    const float* plane = src + size_t(c) * height * width;
    // horizontal: lines are rows
    resample_axis(plane, width, 1, height, width, tmp.data(), ow, 1, ow, factor);
    // vertical: lines are columns
    resample_axis(tmp.data(), height, ow, ow, 1, dst + size_t(c) * oh * ow, oh, ow, 1, factor);
  }
}

// --- grouping -------------------------------------------------------------------

std::pair<std::vector<BayerMosaic>, std::vector<long>> group_and_integrate(
    const RawSequence& seq, int frames, int ratio) {
  require(frames >= 1 && ratio >= 2, "group: bad T or S");
  long needed = 0, g = 1;
  std::vector<long> q(size_t(frames));
  for (int i = 0; i < frames; ++i) {
    needed += g;
    q[size_t(i)] = needed;
    g *= ratio;
  }
  require(seq.frames >= needed, "group: sequence has " + std::to_string(seq.frames) +
                                    " frames, needs " + std::to_string(needed));
  std::vector<BayerMosaic> out;
  out.reserve(size_t(frames));
  long m = 0;
  long group_size = 1;
  for (int i = 0; i < frames; ++i) {
    BayerMosaic acc = rawimg::make_mosaic(seq.height, seq.width, ScaleTag::kHdr);
    for (long k = 0; k < group_size; ++k, ++m) {
      const float* f = seq.frame(int(m));
      for (size_t p = 0; p < acc.v.size(); ++p) acc.v[p] += f[p];
    }
    out.push_back(std::move(acc));
    group_size *= ratio;
  }
  return {std::move(out), std::move(q)};
}

// --- noise ---------------------------------------------------------------------

NoiseParams sample_noise_params(Rng& rng) {
  const double log_shot = rng.uniform(std::log(0.0012), std::log(0.0048));
  const double log_read = rng.normal(1.869 * log_shot + 0.3276, 0.3);
  return {std::exp(log_shot), std::exp(log_read)};
}

NoiseParams sample_shifted_noise_params(Rng& rng) {
  // top of the shot-noise range, read noise ~e^2 above the regression line
  const double log_shot = rng.uniform(std::log(0.0036), std::log(0.0048));
  const double log_read = rng.normal(1.869 * log_shot + 0.3276 + 2.0, 0.1);
  return {std::exp(log_shot), std::exp(log_read)};
}

void add_hetero_noise(std::span<float> x, const NoiseParams& p, Rng& rng) {
  require(p.lambda_shot >= 0.0 && p.lambda_read >= 0.0, "noise: negative variance");
  if (p.lambda_shot == 0.0 && p.lambda_read == 0.0) return;
  for (float& v : x) {
    const double var = p.lambda_read + p.lambda_shot * std::max(double(v), 0.0);
    v = float(double(v) + std::sqrt(var) * rng.normal());
  }
}

PackedRaw degrade_to_ldr(const PackedRaw& hdr, const NoiseParams& p, int bits, Rng& rng) {
  PackedRaw out = hdr;
  out.tag = ScaleTag::kLdr;
  for (float& v : out.v) v = std::clamp(v, 0.f, 1.f);
  add_hetero_noise(out.v, p, rng);
  rawimg::quantize_dequantize(out.v, bits);
  return out;
}

// --- example synthesis -----------------------------------------------------------

namespace {
RawSequence convert_frames(const HdrSequence& scene, const IspParams& isp, int count,
                           int factor) {
  RawSequence seq;
  seq.frames = count;
  seq.height = scene.height / factor;
  seq.width = scene.width / factor;
  seq.v.resize(size_t(count) * seq.frame_size());
  std::vector<float> low(factor > 1 ? 3 * seq.frame_size() : 0);
  for (int m = 0; m < count; ++m) {
    const float* rgb = scene.frame(m);
    if (factor > 1) {
      downsample_rgb(rgb, scene.height, scene.width, factor, low.data());
      rgb = low.data();
    }
    BayerMosaic mo = rgb_to_raw(rgb, seq.height, seq.width, isp);
    std::copy(mo.v.begin(), mo.v.end(), seq.v.begin() + size_t(m) * seq.frame_size());
  }
  return seq;
}

NoiseParams pick_noise(const SimConfig& cfg, Rng& rng) {
  switch (cfg.noise_mode) {
    case NoiseSampling::kFixed:
      return cfg.fixed_noise;
    case NoiseSampling::kRange:
      return sample_noise_params(rng);
    case NoiseSampling::kShifted:
      return sample_shifted_noise_params(rng);
  }
  throw ValueError("sim: unknown noise mode");
}
}  // namespace

BracketExample synthesize_example(const HdrSequence& scene, const IspParams& isp,
                                  const SimConfig& cfg, Rng& rng) {
  cfg.validate();
  const int factor = cfg.sr_factor();
  require(scene.height % (2 * factor) == 0 && scene.width % (2 * factor) == 0,
          "sim: scene dims must pack after downsampling");
  const long needed = cfg.frames_needed();
  require(scene.frames >= needed, "sim: scene too short: " + std::to_string(scene.frames) +
                                      " < " + std::to_string(needed));

  BracketExample ex;
  ex.sr_factor = factor;
  ex.gt = rawimg::pack_bayer(rgb_to_raw(scene.frame(0), scene.height, scene.width, isp));

  RawSequence seq = convert_frames(scene, isp, int(needed), factor);
  auto [groups, q] = group_and_integrate(seq, cfg.frames, cfg.ratio);
  ex.cum_counts = std::move(q);

  ex.noise = pick_noise(cfg, rng);
  for (int i = 0; i < cfg.frames; ++i) {
    ex.stack.push_back(
        degrade_to_ldr(rawimg::pack_bayer(groups[size_t(i)]), ex.noise, cfg.bits, rng));
    ex.meta.push_back(ExposureMeta{i + 1, double(cfg.ratio), 1.0, cfg.bits});
  }
  return ex;
}

BracketExample synthesize_burst(const HdrSequence& scene, const IspParams& isp,
                                const SimConfig& cfg, int exposure_index, int count, Rng& rng) {
  cfg.validate();
  require(exposure_index >= 1 && exposure_index <= cfg.frames, "burst: exposure index out of range");
  require(count >= 1, "burst: count must be >= 1");
  const int factor = cfg.sr_factor();
  require(scene.height % (2 * factor) == 0 && scene.width % (2 * factor) == 0,
          "sim: scene dims must pack after downsampling");
  long window = 1;
  for (int k = 1; k < exposure_index; ++k) window *= cfg.ratio;
  const long needed = window * count;
  require(scene.frames >= needed, "burst: scene too short: " + std::to_string(scene.frames) +
                                      " < " + std::to_string(needed));

  BracketExample ex;
  ex.sr_factor = factor;
  ex.burst_exposure = exposure_index;
  ex.gt = rawimg::pack_bayer(rgb_to_raw(scene.frame(0), scene.height, scene.width, isp));

  RawSequence seq = convert_frames(scene, isp, int(needed), factor);
  ex.noise = pick_noise(cfg, rng);
  for (int b = 0; b < count; ++b) {
    BayerMosaic acc = rawimg::make_mosaic(seq.height, seq.width, ScaleTag::kHdr);
    for (long k = 0; k < window; ++k) {
      const float* f = seq.frame(int(b * window + k));
      for (size_t p = 0; p < acc.v.size(); ++p) acc.v[p] += f[p];
    }
    ex.stack.push_back(degrade_to_ldr(rawimg::pack_bayer(acc), ex.noise, cfg.bits, rng));
    ex.meta.push_back(ExposureMeta{exposure_index, double(cfg.ratio), 1.0, cfg.bits});
    ex.cum_counts.push_back(window * (b + 1));
  }
  return ex;
}

// --- dataset I/O ------------------------------------------------------------------

void write_example(const std::string& dir, const BracketExample& ex) {
  fs::create_directories(dir);
  for (size_t i = 0; i < ex.stack.size(); ++i)
    rawimg::write_packed(dir + "/frame_" + std::to_string(i + 1) + ".raw", ex.stack[i]);
  rawimg::write_packed(dir + "/gt.raw", ex.gt);
  std::ofstream meta(dir + "/meta.txt");
  if (!meta) throw IoError("cannot write " + dir + "/meta.txt");
  char buf[64];
  meta << "T = " << ex.stack.size() << "\n";
  meta << "S = " << (ex.meta.empty() ? 4 : int(ex.meta[0].ratio)) << "\n";
  meta << "b = " << (ex.meta.empty() ? 10 : ex.meta[0].bit_depth) << "\n";
  meta << "task = " << (ex.sr_factor == 4 ? "ire+" : "ire") << "\n";
  std::snprintf(buf, sizeof(buf), "%.17g", ex.noise.lambda_shot);
  meta << "lambda_shot = " << buf << "\n";
  std::snprintf(buf, sizeof(buf), "%.17g", ex.noise.lambda_read);
  meta << "lambda_read = " << buf << "\n";
  meta << "seed = 0\n";
  if (ex.burst_exposure > 0) meta << "burst_exposure = " << ex.burst_exposure << "\n";
}

namespace {
std::map<std::string, std::string> read_kv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const size_t eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}
}  // namespace

BracketExample read_example(const std::string& dir) {
  auto kv = read_kv(dir + "/meta.txt");
  BracketExample ex;
  const int t = std::stoi(kv.at("T"));
  const int s = std::stoi(kv.at("S"));
  const int bits = std::stoi(kv.at("b"));
  ex.sr_factor = kv.at("task") == "ire+" ? 4 : 1;
  ex.noise.lambda_shot = std::stod(kv.at("lambda_shot"));
  ex.noise.lambda_read = std::stod(kv.at("lambda_read"));
  if (kv.count("burst_exposure")) ex.burst_exposure = std::stoi(kv.at("burst_exposure"));
  long window = 1;
  for (int k = 1; k < (ex.burst_exposure > 0 ? ex.burst_exposure : 1); ++k) window *= s;
  long cum = 0, g = 1;
  for (int i = 1; i <= t; ++i) {
    ex.stack.push_back(
        rawimg::read_packed(dir + "/frame_" + std::to_string(i) + ".raw", ScaleTag::kLdr));
    const int idx = ex.burst_exposure > 0 ? ex.burst_exposure : i;
    ex.meta.push_back(ExposureMeta{idx, double(s), 1.0, bits});
    if (ex.burst_exposure > 0) {
      cum += window;
    } else {
      cum += g;
      g *= s;
    }
    ex.cum_counts.push_back(cum);
  }
  ex.gt = rawimg::read_packed(dir + "/gt.raw", ScaleTag::kHdr);
  return ex;
}

double gradient_energy(const BayerMosaic& m) {
  double acc = 0.0;
  long count = 0;
  for (int y = 1; y < m.height - 1; ++y)
    for (int x = 1; x < m.width - 1; ++x) {
      const double lap = 4.0 * m.at(y, x) - m.at(y - 1, x) - m.at(y + 1, x) - m.at(y, x - 1) -
                         m.at(y, x + 1);
      acc += lap * lap;
      ++count;
    }
  return count > 0 ? acc / double(count) : 0.0;
}

}  // namespace bracket::simpipe
