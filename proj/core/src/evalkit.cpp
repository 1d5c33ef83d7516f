#include "bracket/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>

namespace bracket::evalkit {

namespace {

// Bilinear demosaic of an RGGB mosaic, replicated borders. Returns
// interleaved linear RGB at mosaic resolution.
std::vector<float> demosaic_bilinear(const rawimg::BayerMosaic& m) {
  const int h = m.height, w = m.width;
  auto at = [&](int y, int x) {
    y = std::clamp(y, 0, h - 1);
    x = std::clamp(x, 0, w - 1);
    return double(m.at(y, x));
  };
  std::vector<float> rgb(3 * size_t(h) * w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const bool er = (y % 2 == 0), ec = (x % 2 == 0);
      double r, g, b;
      if (er && ec) {  // R site
        r = at(y, x);
        g = 0.25 * (at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1));
        b = 0.25 * (at(y - 1, x - 1) + at(y - 1, x + 1) + at(y + 1, x - 1) + at(y + 1, x + 1));
      } else if (er && !ec) {  // G1 site: R left/right, B up/down
        g = at(y, x);
        r = 0.5 * (at(y, x - 1) + at(y, x + 1));
        b = 0.5 * (at(y - 1, x) + at(y + 1, x));
      } else if (!er && ec) {  // G2 site: R up/down, B left/right
        g = at(y, x);
        r = 0.5 * (at(y - 1, x) + at(y + 1, x));
        b = 0.5 * (at(y, x - 1) + at(y, x + 1));
      } else {  // B site
        b = at(y, x);
        g = 0.25 * (at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1));
        r = 0.25 * (at(y - 1, x - 1) + at(y - 1, x + 1) + at(y + 1, x - 1) + at(y + 1, x + 1));
      }
      const size_t i = size_t(y) * w + x;
      rgb[3 * i + 0] = float(r);
      rgb[3 * i + 1] = float(g);
      rgb[3 * i + 2] = float(b);
    }
  }
  return rgb;
}

}  // namespace

RenderedImage postprocess(const PackedRaw& x, const IspParams& isp, double mu) {
  isp.validate();
  require(mu > 0.0, "postprocess: mu must be > 0");
  const rawimg::BayerMosaic mosaic = rawimg::unpack_bayer(x);
  std::vector<float> rgb = demosaic_bilinear(mosaic);
  simpipe::apply_forward_isp(rgb.data(), size_t(mosaic.height) * mosaic.width, isp);

  RenderedImage out;
  out.height = mosaic.height;
  out.width = mosaic.width;
  out.rgb.resize(rgb.size());
  const double denom = std::log1p(mu);
  for (size_t i = 0; i < rgb.size(); ++i) {
    const double lin = std::max(double(rgb[i]), 0.0);
    const double tm = std::log1p(mu * lin) / denom;
    out.rgb[i] = uint16_t(rawimg::quantize_value(tm, 16));
  }
  return out;
}

int metric_border(int sr_factor) { return sr_factor == 4 ? 8 : 20; }

namespace {
void check_pair(const RenderedImage& a, const RenderedImage& b, int border) {
  require(a.height == b.height && a.width == b.width, "metric: dimension mismatch");
  require(border >= 0, "metric: negative border");
  require(2 * border < a.height && 2 * border < a.width,
          "metric: border leaves no interior");
}
}  // namespace

double psnr(const RenderedImage& a, const RenderedImage& b, int border) {
  check_pair(a, b, border);
  double acc = 0.0;
  long count = 0;
  for (int y = border; y < a.height - border; ++y)
    for (int x = border; x < a.width - border; ++x)
      for (int c = 0; c < 3; ++c) {
        const size_t i = 3 * (size_t(y) * a.width + x) + c;
        const double d = (double(a.rgb[i]) - double(b.rgb[i])) / 65535.0;
        acc += d * d;
        ++count;
      }
  const double mse = acc / double(count);
  if (mse <= 0.0) return 99.0;
  return std::min(99.0, 10.0 * std::log10(1.0 / mse));
}

double ssim(const RenderedImage& a, const RenderedImage& b, int border) {
  check_pair(a, b, border);
  constexpr int kWin = 11;
  constexpr double kSigma = 1.5;
  constexpr double kC1 = 0.01 * 0.01;
  constexpr double kC2 = 0.03 * 0.03;
  require(a.height - 2 * border >= kWin && a.width - 2 * border >= kWin,
          "ssim: interior smaller than the window");

  double win[kWin][kWin];
  double total = 0.0;
  for (int i = 0; i < kWin; ++i)
    for (int j = 0; j < kWin; ++j) {
      const double dy = i - kWin / 2, dx = j - kWin / 2;
      win[i][j] = std::exp(-(dy * dy + dx * dx) / (2.0 * kSigma * kSigma));
      total += win[i][j];
    }
  for (auto& row : win)
    for (double& v : row) v /= total;

  double acc = 0.0;
  long count = 0;
  for (int c = 0; c < 3; ++c) {
    for (int y = border; y + kWin <= a.height - border; ++y) {
      for (int x = border; x + kWin <= a.width - border; ++x) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (int i = 0; i < kWin; ++i)
          for (int j = 0; j < kWin; ++j) {
            const size_t p = 3 * (size_t(y + i) * a.width + (x + j)) + c;
            const double va = double(a.rgb[p]) / 65535.0;
            const double vb = double(b.rgb[p]) / 65535.0;
            const double w = win[i][j];
            ma += w * va;
            mb += w * vb;
            saa += w * va * va;
            sbb += w * vb * vb;
            sab += w * va * vb;
          }
        const double var_a = saa - ma * ma;
        const double var_b = sbb - mb * mb;
        const double cov = sab - ma * mb;
        const double s = ((2 * ma * mb + kC1) * (2 * cov + kC2)) /
                         ((ma * ma + mb * mb + kC1) * (var_a + var_b + kC2));
        acc += s;
        ++count;
      }
    }
  }
  return acc / double(count);
}

MetricReport evaluate(const ad::ParamStore& params, const tmrnet::TMRNetConfig& cfg,
                      const std::vector<BracketExample>& dataset,
                      const std::vector<std::string>& ids, const IspParams& isp, double mu,
                      int r) {
  require(dataset.size() == ids.size(), "evaluate: ids do not match dataset");
  require(!dataset.empty(), "evaluate: empty dataset");
  const int rr = r == 0 ? cfg.frames : r;
  MetricReport report;
  double sum_p = 0.0, sum_s = 0.0;
  for (size_t i = 0; i < dataset.size(); ++i) {
    const BracketExample& ex = dataset[i];
    require((ex.sr_factor == 4) == (cfg.sr_factor == 4),
            "evaluate: task mismatch between dataset and model");
    const PackedRaw pred = tmrnet::infer(params, cfg, ex, rr);
    const RenderedImage rp = postprocess(pred, isp, mu);
    const RenderedImage rg = postprocess(ex.gt, isp, mu);
    const int border = metric_border(ex.sr_factor);
    MetricRow row{ids[i], psnr(rp, rg, border), ssim(rp, rg, border)};
    sum_p += row.psnr;
    sum_s += row.ssim;
    report.rows.push_back(std::move(row));
  }
  report.mean_psnr = sum_p / double(report.rows.size());
  report.mean_ssim = sum_s / double(report.rows.size());
  return report;
}

void write_report_text(std::ostream& out, const MetricReport& report) {
  for (const auto& [k, v] : report.config_echo) out << "# " << k << " = " << v << "\n";
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-24s %10s %10s\n", "image", "psnr_db", "ssim");
  out << buf;
  for (const auto& row : report.rows) {
    std::snprintf(buf, sizeof(buf), "%-24s %10.4f %10.4f\n", row.id.c_str(), row.psnr,
                  row.ssim);
    out << buf;
  }
  std::snprintf(buf, sizeof(buf), "%-24s %10.4f %10.4f\n", "mean", report.mean_psnr,
                report.mean_ssim);
  out << buf;
}

void write_report_csv(std::ostream& out, const MetricReport& report) {
  out << "image,psnr_db,ssim\n";
  char buf[160];
  for (const auto& row : report.rows) {
    std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f\n", row.id.c_str(), row.psnr, row.ssim);
    out << buf;
  }
  std::snprintf(buf, sizeof(buf), "mean,%.6f,%.6f\n", report.mean_psnr, report.mean_ssim);
  out << buf;
}

namespace {
void write_netpbm(const std::string& path, const char* magic, const uint16_t* data,
                  size_t count, int height, int width) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for write: " + path);
  f << magic << "\n" << width << " " << height << "\n" << 65535 << "\n";
  std::vector<unsigned char> buf(2 * count);
  for (size_t i = 0; i < count; ++i) {
    buf[2 * i] = (unsigned char)(data[i] >> 8);  // big-endian per the format
    buf[2 * i + 1] = (unsigned char)(data[i] & 0xff);
  }
  f.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size()));
  if (!f) throw IoError("write failed: " + path);
}
}  // namespace

void write_ppm16(const std::string& path, const RenderedImage& img) {
  write_netpbm(path, "P6", img.rgb.data(), img.rgb.size(), img.height, img.width);
}

void write_pgm16(const std::string& path, const std::vector<uint16_t>& gray, int height,
                 int width) {
  require(long(gray.size()) == long(height) * width, "pgm: size mismatch");
  write_netpbm(path, "P5", gray.data(), gray.size(), height, width);
}

}  // namespace bracket::evalkit
