#include "pptrn/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace pptrn {

namespace {

constexpr double kK1 = 0.01;
constexpr double kK2 = 0.03;

void require_same_shape(const char* op, const Image& a, const Image& b) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": image shapes differ (" + std::to_string(a.height) + "x" +
                         std::to_string(a.width) + "x" + std::to_string(a.channels) + " vs " +
                         std::to_string(b.height) + "x" + std::to_string(b.width) + "x" + std::to_string(b.channels) +
                         ")");
  }
}

std::vector<double> gaussian_taps() {
  std::vector<double> g(kSsimWindow);
  const double r = double(kSsimWindow / 2);
  double total = 0;
  for (std::size_t i = 0; i < kSsimWindow; ++i) {
    const double d = double(i) - r;
    g[i] = std::exp(-d * d / (2 * kSsimSigma * kSsimSigma));
    total += g[i];
  }
  for (double& v : g) v /= total;
  return g;
}

// Separable "valid" filtering of one plane.
std::vector<double> filter_valid(const std::vector<double>& plane, std::size_t h, std::size_t w,
                                 const std::vector<double>& g) {
  const std::size_t k = g.size();
  const std::size_t oh = h - k + 1, ow = w - k + 1;
  std::vector<double> tmp(h * ow, 0.0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0;
      for (std::size_t i = 0; i < k; ++i) acc += g[i] * plane[y * w + x + i];
      tmp[y * ow + x] = acc;
    }
  }
  std::vector<double> out(oh * ow, 0.0);
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0;
      for (std::size_t i = 0; i < k; ++i) acc += g[i] * tmp[(y + i) * ow + x];
      out[y * ow + x] = acc;
    }
  }
  return out;
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10f", v);
  return buf;
}

}  // namespace

double psnr(const Image& a, const Image& b, double peak) {
  require_same_shape("psnr", a, b);
  if (a.pixels.empty()) throw SizeError("psnr: empty images");
  double se = 0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = a.pixels[i] - b.pixels[i];
    se += d * d;
  }
  const double mse = se / double(a.pixels.size());
  if (mse == 0.0) return kPsnrCapDb;
  return std::min(kPsnrCapDb, 10.0 * std::log10(peak * peak / mse));
}

double ssim(const Image& a, const Image& b) {
  require_same_shape("ssim", a, b);
  if (a.height < kSsimWindow || a.width < kSsimWindow) {
    throw SizeError("ssim: image " + std::to_string(a.height) + "x" + std::to_string(a.width) +
                    " smaller than the 11x11 window");
  }
  const auto g = gaussian_taps();
  const double c1 = kK1 * kK1, c2 = kK2 * kK2;
  const std::size_t h = a.height, w = a.width, hw = h * w;
  double total = 0;
  for (std::size_t c = 0; c < a.channels; ++c) {
    std::vector<double> x(hw), y(hw), xx(hw), yy(hw), xy(hw);
    for (std::size_t i = 0; i < hw; ++i) {
      x[i] = a.pixels[i * a.channels + c];
      y[i] = b.pixels[i * a.channels + c];
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = filter_valid(x, h, w, g), my = filter_valid(y, h, w, g);
    const auto sxx = filter_valid(xx, h, w, g), syy = filter_valid(yy, h, w, g), sxy = filter_valid(xy, h, w, g);
    double acc = 0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
      const double vx = sxx[i] - mx[i] * mx[i];
      const double vy = syy[i] - my[i] * my[i];
      const double cov = sxy[i] - mx[i] * my[i];
      acc += ((2 * mx[i] * my[i] + c1) * (2 * cov + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    total += acc / double(mx.size());
  }
  return total / double(a.channels);
}

MetricsReport MetricsReport::from(std::vector<ImageMetrics> per_image) {
  MetricsReport r;
  r.per_image = std::move(per_image);
  if (r.per_image.empty()) return r;
  for (const auto& m : r.per_image) {
    r.psnr_db += m.psnr_db;
    r.ssim += m.ssim;
  }
  r.psnr_db /= double(r.per_image.size());
  r.ssim /= double(r.per_image.size());
  return r;
}

void MetricsReport::write_tsv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "# color_mode\t" << color_mode << '\n';
  out << "source_id\tpsnr_db\tssim\n";
  for (const auto& m : per_image) out << m.source_id << '\t' << fmt_double(m.psnr_db) << '\t' << fmt_double(m.ssim) << '\n';
  out << "mean\t" << fmt_double(psnr_db) << '\t' << fmt_double(ssim) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

MetricsReport MetricsReport::read_tsv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  MetricsReport r;
  std::string line;
  bool header = false;
  std::vector<ImageMetrics> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.rfind("# color_mode\t", 0) == 0) {
      r.color_mode = line.substr(13);
      continue;
    }
    if (!header) {
      if (line != "source_id\tpsnr_db\tssim") throw ParseError(path.string() + ": unexpected metrics header");
      header = true;
      continue;
    }
    std::istringstream ls(line);
    ImageMetrics m;
    std::string p, s;
    if (!std::getline(ls, m.source_id, '\t') || !std::getline(ls, p, '\t') || !std::getline(ls, s)) {
      throw ParseError(path.string() + ": malformed metrics row");
    }
    m.psnr_db = std::stod(p);
    m.ssim = std::stod(s);
    if (m.source_id == "mean") continue;
    rows.push_back(std::move(m));
  }
  auto mode = r.color_mode;
  r = from(std::move(rows));
  r.color_mode = mode;
  return r;
}

}  // namespace pptrn
