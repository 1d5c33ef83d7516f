#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "bracket/simpipe.hpp"
#include "bracket/tmrnet.hpp"

namespace bracket::evalkit {

using rawimg::PackedRaw;
using simpipe::BracketExample;
using simpipe::IspParams;

// Tone-mapped 16-bit render; dimensions match the raw mosaic (2x the
// packed planes).
struct RenderedImage {
  int height = 0;
  int width = 0;
  std::vector<uint16_t> rgb;  // interleaved, row-major

  size_t pixels() const { return size_t(height) * width; }
};

// unpack -> bilinear demosaic -> white balance -> CCM -> clamp negatives ->
// mu-law tone map -> 16-bit quantization.
RenderedImage postprocess(const PackedRaw& x, const IspParams& isp,
                          double mu = rawimg::kDefaultMu);

// 10 log10(1 / MSE) on values normalized to [0,1], excluding `border`
// rendered pixels on every side. Identical images cap at 99 dB.
double psnr(const RenderedImage& a, const RenderedImage& b, int border);

// Single-scale SSIM, 11x11 Gaussian window sigma 1.5, K1 = 0.01, K2 = 0.03,
// dynamic range 1; windows fully inside the interior, channel-averaged.
double ssim(const RenderedImage& a, const RenderedImage& b, int border);

struct MetricRow {
  std::string id;
  double psnr = 0.0;
  double ssim = 0.0;
};

struct MetricReport {
  std::vector<MetricRow> rows;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
  std::vector<std::pair<std::string, std::string>> config_echo;
};

// Border exclusion in raw-mosaic terms: 10 packed-plane pixels for IRE,
// 4 for IRE+, doubled in rendered coordinates.
int metric_border(int sr_factor);

MetricReport evaluate(const ad::ParamStore& params, const tmrnet::TMRNetConfig& cfg,
                      const std::vector<BracketExample>& dataset,
                      const std::vector<std::string>& ids, const IspParams& isp,
                      double mu = rawimg::kDefaultMu, int r = 0 /* 0 = full stack */);

void write_report_text(std::ostream& out, const MetricReport& report);
void write_report_csv(std::ostream& out, const MetricReport& report);

// Binary 16-bit netpbm, maxval 65535, big-endian samples.
void write_ppm16(const std::string& path, const RenderedImage& img);
void write_pgm16(const std::string& path, const std::vector<uint16_t>& gray, int height,
                 int width);

}  // namespace bracket::evalkit
