#include "pptrn/turbsim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "pptrn/rng.hpp"

namespace pptrn {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kTiltStream = 0;
constexpr std::uint64_t kBlurStream = 1;
constexpr std::uint64_t kNoiseStream = 2;
// The blur-sigma field is never rougher than this, even for uncorrelated tilt.
constexpr double kMinBlurCorrelation = 2.0;

std::vector<double> gaussian_kernel(double sigma) {
  const int radius = std::max(1, int(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double total = 0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-double(i * i) / (2 * sigma * sigma));
    total += k[i + radius];
  }
  for (double& v : k) v /= total;
  return k;
}

std::size_t clamp_index(long i, std::size_t n) { return std::size_t(std::clamp<long>(i, 0, long(n) - 1)); }

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError("manifest: bad " + what + " '" + s + "'");
  }
}

}  // namespace

void TurbulenceParams::validate() const {
  auto finite = [](double v) { return std::isfinite(v); };
  if (!finite(tilt_strength) || tilt_strength < 0) throw ConfigError("tilt_strength must be >= 0");
  if (!finite(tilt_correlation) || tilt_correlation < 0) throw ConfigError("tilt_correlation must be >= 0");
  if (!finite(sigma_min) || !finite(sigma_max) || sigma_min < 0 || sigma_min > sigma_max) {
    throw ConfigError("blur sigma range must satisfy 0 <= sigma_min <= sigma_max");
  }
  if (!finite(noise_std) || noise_std < 0) throw ConfigError("noise_std must be >= 0");
}

double TiltField::max_magnitude() const {
  double m = 0;
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) m = std::max(m, std::hypot(dy(y, x), dx(y, x)));
  return m;
}

std::vector<double> gaussian_smooth(const std::vector<double>& plane, std::size_t height, std::size_t width,
                                    double sigma) {
  if (sigma <= 0) return plane;
  const auto k = gaussian_kernel(sigma);
  const long r = long(k.size() / 2);
  std::vector<double> tmp(plane.size()), out(plane.size());
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      double acc = 0;
      for (long i = -r; i <= r; ++i) acc += k[i + r] * plane[y * width + clamp_index(long(x) + i, width)];
      tmp[y * width + x] = acc;
    }
  }
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      double acc = 0;
      for (long i = -r; i <= r; ++i) acc += k[i + r] * tmp[clamp_index(long(y) + i, height) * width + x];
      out[y * width + x] = acc;
    }
  }
  return out;
}

TiltField generate_tilt_field(std::size_t height, std::size_t width, const TurbulenceParams& params) {
  params.validate();
  if (height < 8 || width < 8) throw SizeError("generate_tilt_field: image must be at least 8x8");
  TiltField field{height, width, std::vector<double>(2 * height * width, 0.0)};
  if (params.tilt_strength == 0) return field;
  Philox rng(params.seed, kTiltStream);
  const std::size_t hw = height * width;
  for (std::size_t c = 0; c < 2; ++c) {
    std::vector<double> plane(hw);
    for (double& v : plane) v = rng.normal();
    plane = gaussian_smooth(plane, height, width, params.tilt_correlation);
    std::copy(plane.begin(), plane.end(), field.data.begin() + long(c * hw));
  }
  const double m = field.max_magnitude();
  if (m > 0) {
    for (double& v : field.data) v *= params.tilt_strength / m;
  }
  return field;
}

std::vector<double> blur_sigma_field(std::size_t height, std::size_t width, const TurbulenceParams& params) {
  params.validate();
  std::vector<double> sigma(height * width, params.sigma_min);
  if (params.sigma_max == params.sigma_min) return sigma;
  Philox rng(params.seed, kBlurStream);
  std::vector<double> plane(height * width);
  for (double& v : plane) v = rng.normal();
  plane = gaussian_smooth(plane, height, width, std::max(params.tilt_correlation, kMinBlurCorrelation));
  const auto [lo, hi] = std::minmax_element(plane.begin(), plane.end());
  const double span = *hi - *lo;
  for (std::size_t i = 0; i < plane.size(); ++i) {
    const double u = span > 0 ? (plane[i] - *lo) / span : 0.5;
    sigma[i] = params.sigma_min + (params.sigma_max - params.sigma_min) * u;
  }
  return sigma;
}

double sample_bilinear(const Image& image, double y, double x, std::size_t channel) {
  y = std::clamp(y, 0.0, double(image.height - 1));
  x = std::clamp(x, 0.0, double(image.width - 1));
  const auto y0 = std::size_t(std::floor(y)), x0 = std::size_t(std::floor(x));
  const std::size_t y1 = std::min(y0 + 1, image.height - 1), x1 = std::min(x0 + 1, image.width - 1);
  const double fy = y - double(y0), fx = x - double(x0);
  const double top = (1 - fx) * image.at(y0, x0, channel) + fx * image.at(y0, x1, channel);
  const double bottom = (1 - fx) * image.at(y1, x0, channel) + fx * image.at(y1, x1, channel);
  return (1 - fy) * top + fy * bottom;
}

Image degrade(const Image& image, const TurbulenceParams& params) {
  params.validate();
  if (image.pixels.empty()) throw SizeError("degrade: empty image");
  const std::size_t h = image.height, w = image.width, ch = image.channels;

  Image warped = image;
  if (params.tilt_strength > 0) {
    const TiltField field = generate_tilt_field(h, w, params);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t c = 0; c < ch; ++c)
          warped.at(y, x, c) = sample_bilinear(image, double(y) + field.dy(y, x), double(x) + field.dx(y, x), c);
  }

  Image blurred = warped;
  if (params.sigma_max > 0) {
    const auto sigma = blur_sigma_field(h, w, params);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double s = sigma[y * w + x];
        if (s < 1e-6) continue;
        const auto k = gaussian_kernel(s);
        const long r = long(k.size() / 2);
        for (std::size_t c = 0; c < ch; ++c) {
          double acc = 0;
          for (long i = -r; i <= r; ++i) {
            const std::size_t yy = clamp_index(long(y) + i, h);
            double row = 0;
            for (long j = -r; j <= r; ++j) row += k[j + r] * warped.at(yy, clamp_index(long(x) + j, w), c);
            acc += k[i + r] * row;
          }
          blurred.at(y, x, c) = acc;
        }
      }
    }
  }

  if (params.noise_std > 0) {
    Philox rng(params.seed, kNoiseStream);
    for (double& v : blurred.pixels) v += params.noise_std * rng.normal();
  }
  return clamp01(blurred);
}

Image synthesize_pattern(std::size_t height, std::size_t width, std::size_t channels, std::uint64_t seed) {
  if (height == 0 || width == 0 || (channels != 1 && channels != 3)) {
    throw ConfigError("synthesize_pattern: need positive extents and 1 or 3 channels");
  }
  Philox rng(seed, 0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * rng.uniform(); };
  auto color = [&] {
    std::vector<double> c(channels);
    for (double& v : c) v = uni(0.05, 0.95);
    return c;
  };
  Image img = Image::zeros(height, width, channels, "pattern_" + std::to_string(seed));
  const double H = double(height), W = double(width);

  // Background: linear gradient between two colours.
  const auto c0 = color(), c1 = color();
  const double angle = uni(0, 2 * M_PI);
  const double gy = std::sin(angle), gx = std::cos(angle);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const double t = 0.5 + 0.5 * ((double(y) / H - 0.5) * gy + (double(x) / W - 0.5) * gx) * 1.4;
      for (std::size_t c = 0; c < channels; ++c) img.at(y, x, c) = c0[c] + (c1[c] - c0[c]) * std::clamp(t, 0.0, 1.0);
    }
  }

  const std::size_t shapes = 3 + rng.below(4);
  for (std::size_t s = 0; s < shapes; ++s) {
    const auto kind = rng.below(4);
    const auto fg = color(), bg = color();
    const double cy = uni(0, H), cx = uni(0, W);
    const double ry = uni(0.12, 0.35) * H, rx = uni(0.12, 0.35) * W;
    const double period = uni(3.0, 8.0);
    const double theta = uni(0, M_PI);
    const double ct = std::cos(theta), st = std::sin(theta);
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) {
        const double py = double(y) + 0.5 - cy, px = double(x) + 0.5 - cx;
        const double* paint = nullptr;
        switch (kind) {
          case 0:  // ellipse
            if ((py * py) / (ry * ry) + (px * px) / (rx * rx) <= 1.0) paint = fg.data();
            break;
          case 1:  // rotated rectangle
            if (std::abs(py * ct - px * st) <= ry && std::abs(py * st + px * ct) <= rx * 0.6) paint = fg.data();
            break;
          case 2:  // stripes inside a box
            if (std::abs(py) <= ry && std::abs(px) <= rx) {
              paint = std::fmod(std::abs(py * st + px * ct), period) < period / 2 ? fg.data() : bg.data();
            }
            break;
          default:  // checkerboard inside a box
            if (std::abs(py) <= ry && std::abs(px) <= rx) {
              const long a = long(std::floor((py + ry) / period)), b = long(std::floor((px + rx) / period));
              paint = ((a + b) & 1) ? fg.data() : bg.data();
            }
            break;
        }
        if (paint) {
          for (std::size_t c = 0; c < channels; ++c) img.at(y, x, c) = paint[c];
        }
      }
    }
  }
  return clamp01(img);
}

std::vector<fs::path> list_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return char(std::tolower(c)); });
    if (ext == ".png" || ext == ".pgm" || ext == ".ppm" || ext == ".pnm") out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

fs::path make_dataset(const fs::path& clean_dir, const fs::path& out_dir, const TurbulenceParams& params,
                      std::size_t count) {
  params.validate();
  if (count == 0) throw ConfigError("make_dataset: count must be >= 1");
  const auto sources = list_images(clean_dir);
  if (sources.empty()) throw IoError("make_dataset: no loadable images in " + clean_dir.string());
  std::vector<Image> clean;
  clean.reserve(sources.size());
  for (const auto& p : sources) clean.push_back(quantize8(load_image(p)));

  fs::create_directories(out_dir / "clean");
  fs::create_directories(out_dir / "degraded");
  const fs::path manifest = out_dir / "manifest.tsv";
  std::ofstream out(manifest);
  if (!out) throw IoError("cannot write " + manifest.string());
  out << kManifestHeader << '\n';
  for (std::size_t i = 0; i < count; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "pair_%05zu", i);
    TurbulenceParams p = params;
    p.seed = derive_seed(params.seed, i);
    const Image& src = clean[i % clean.size()];
    const fs::path clean_rel = fs::path("clean") / (std::string(id) + ".png");
    const fs::path degraded_rel = fs::path("degraded") / (std::string(id) + ".png");
    save_image(src, out_dir / clean_rel);
    save_image(degrade(src, p), out_dir / degraded_rel);
    out << id << '\t' << clean_rel.generic_string() << '\t' << degraded_rel.generic_string() << '\t' << p.seed << '\t'
        << fmt(p.tilt_strength) << '\t' << fmt(p.tilt_correlation) << '\t' << fmt(p.sigma_min) << '\t'
        << fmt(p.sigma_max) << '\t' << fmt(p.noise_std) << '\n';
  }
  if (!out) throw IoError("write failed for " + manifest.string());
  return manifest;
}

std::vector<ManifestRow> read_manifest(const fs::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot open manifest " + manifest.string());
  std::string line;
  if (!std::getline(in, line) || line != kManifestHeader) {
    throw ParseError(manifest.string() + ": unexpected manifest header");
  }
  const fs::path base = manifest.parent_path();
  std::vector<ManifestRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, '\t')) f.push_back(cell);
    if (f.size() != 9) throw ParseError(manifest.string() + ": expected 9 fields, got " + std::to_string(f.size()));
    ManifestRow row;
    row.pair_id = f[0];
    row.clean_path = fs::path(f[1]).is_absolute() ? fs::path(f[1]) : base / f[1];
    row.degraded_path = fs::path(f[2]).is_absolute() ? fs::path(f[2]) : base / f[2];
    try {
      std::size_t used = 0;
      row.params.seed = std::stoull(f[3], &used);
      if (used != f[3].size()) throw std::invalid_argument(f[3]);
    } catch (const std::exception&) {
      throw ParseError("manifest: bad seed '" + f[3] + "'");
    }
    row.params.tilt_strength = parse_double(f[4], "tilt_strength");
    row.params.tilt_correlation = parse_double(f[5], "tilt_corr");
    row.params.sigma_min = parse_double(f[6], "sigma_min");
    row.params.sigma_max = parse_double(f[7], "sigma_max");
    row.params.noise_std = parse_double(f[8], "noise_std");
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ParseError(manifest.string() + ": manifest has no rows");
  return rows;
}

}  // namespace pptrn
