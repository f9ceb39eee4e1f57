#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "pptrn/metrics.hpp"
#include "pptrn/turbsim.hpp"

using namespace pptrn;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "pptrn_test_turbsim" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<char> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Independent field generator: mt19937 noise, direct 2-D Gaussian sum with edge clamping.
double oracle_mean_magnitude(std::mt19937_64& rng, std::size_t n, double corr, double strength) {
  std::normal_distribution<double> normal;
  const int r = std::max(1, int(std::ceil(3 * corr)));
  std::vector<double> noise(2 * n * n), field(2 * n * n, 0.0);
  for (double& v : noise) v = normal(rng);
  for (std::size_t c = 0; c < 2; ++c) {
    for (int y = 0; y < int(n); ++y) {
      for (int x = 0; x < int(n); ++x) {
        double acc = 0, wsum = 0;
        for (int i = -r; i <= r; ++i) {
          for (int j = -r; j <= r; ++j) {
            const double w = std::exp(-(i * i + j * j) / (2 * corr * corr));
            const int yy = std::clamp(y + i, 0, int(n) - 1), xx = std::clamp(x + j, 0, int(n) - 1);
            acc += w * noise[c * n * n + std::size_t(yy) * n + std::size_t(xx)];
            wsum += w;
          }
        }
        field[c * n * n + std::size_t(y) * n + std::size_t(x)] = acc / wsum;
      }
    }
  }
  double maxm = 0, sum = 0;
  for (std::size_t i = 0; i < n * n; ++i) maxm = std::max(maxm, std::hypot(field[i], field[n * n + i]));
  for (std::size_t i = 0; i < n * n; ++i) sum += std::hypot(field[i], field[n * n + i]) * strength / maxm;
  return sum / double(n * n);
}

// E[(clamp(x + s n) - x)^2] for n ~ N(0,1) by trapezoidal integration.
double expected_clamped_se(double x, double s) {
  const int steps = 4000;
  const double lo = -8, hi = 8, dz = (hi - lo) / steps;
  double acc = 0;
  for (int i = 0; i <= steps; ++i) {
    const double z = lo + i * dz;
    const double d = std::clamp(x + s * z, 0.0, 1.0) - x;
    const double w = (i == 0 || i == steps) ? 0.5 : 1.0;
    acc += w * d * d * std::exp(-0.5 * z * z);
  }
  return acc * dz / std::sqrt(2 * M_PI);
}

double mean_psnr(const std::vector<Image>& images, TurbulenceParams p) {
  double total = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    p.seed = 1000 + i;
    total += psnr(images[i], degrade(images[i], p));
  }
  return total / double(images.size());
}

}  // namespace

TEST_CASE("zero tilt strength gives a zero field and fields are deterministic") {
  TurbulenceParams p;
  p.seed = 4;
  const auto zero = generate_tilt_field(16, 16, p);
  for (double v : zero.data) CHECK(v == 0.0);
  p.tilt_strength = 2.5;
  const auto a = generate_tilt_field(16, 20, p), b = generate_tilt_field(16, 20, p);
  CHECK(a.data == b.data);
  CHECK(a.max_magnitude() == doctest::Approx(2.5).epsilon(1e-12));
  p.seed = 5;
  CHECK(generate_tilt_field(16, 20, p).data != a.data);
  CHECK_THROWS_AS(generate_tilt_field(4, 16, p), SizeError);
}

TEST_CASE("tilt field mean magnitude agrees with an independent Monte-Carlo reference") {
  const std::size_t n = 16, runs = 1000;
  const double corr = 2.0, strength = 3.0;
  TurbulenceParams p;
  p.tilt_strength = strength;
  p.tilt_correlation = corr;
  std::vector<double> ours(runs), ref(runs);
  std::mt19937_64 rng(2024);
  for (std::size_t i = 0; i < runs; ++i) {
    p.seed = i;
    const auto f = generate_tilt_field(n, n, p);
    double s = 0;
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) s += std::hypot(f.dy(y, x), f.dx(y, x));
    ours[i] = s / double(n * n);
    ref[i] = oracle_mean_magnitude(rng, n, corr, strength);
  }
  auto stats = [](const std::vector<double>& v) {
    double m = 0, s2 = 0;
    for (double x : v) m += x;
    m /= double(v.size());
    for (double x : v) s2 += (x - m) * (x - m);
    return std::pair{m, std::sqrt(s2 / double(v.size() - 1) / double(v.size()))};
  };
  const auto [m1, se1] = stats(ours);
  const auto [m2, se2] = stats(ref);
  MESSAGE("mean magnitude " << m1 << " vs reference " << m2);
  CHECK(std::abs(m1 - m2) < 3 * std::hypot(se1, se2));
}

TEST_CASE("degrade is the identity with all degradations off") {
  const Image img = synthesize_pattern(24, 24, 3, 1);
  TurbulenceParams p;
  p.seed = 77;
  CHECK(degrade(img, p).pixels == img.pixels);
}

TEST_CASE("noise-only degradation matches the clamped-noise PSNR") {
  TurbulenceParams p;
  p.noise_std = 0.05;
  p.seed = 3;
  Image mid = Image::zeros(64, 64, 1);
  for (double& v : mid.pixels) v = 0.5;
  const double flat = psnr(mid, degrade(mid, p));
  CHECK(std::abs(flat - 26.0206) < 0.3);

  const Image pattern = synthesize_pattern(64, 64, 1, 9);
  double mse = 0;
  for (double x : pattern.pixels) mse += expected_clamped_se(x, 0.05);
  mse /= double(pattern.pixels.size());
  const double expected = 10 * std::log10(1.0 / mse);
  const double got = psnr(pattern, degrade(pattern, p));
  MESSAGE("pattern noise PSNR " << got << " expected " << expected);
  CHECK(std::abs(got - expected) < 0.3);
  CHECK(expected >= 26.0206);
}

TEST_CASE("degraded pixels stay in range and degradation is deterministic") {
  const Image img = synthesize_pattern(32, 32, 3, 2);
  TurbulenceParams p{3.0, 1.5, 0.5, 2.0, 0.2, 11};
  const Image a = degrade(img, p), b = degrade(img, p);
  CHECK(a.pixels == b.pixels);
  for (double v : a.pixels) {
    REQUIRE(v >= 0.0);
    REQUIRE(v <= 1.0);
  }
  TurbulenceParams bad = p;
  bad.sigma_min = 3.0;
  CHECK_THROWS_AS(degrade(img, bad), ConfigError);
}

TEST_CASE("mean PSNR is non-increasing in each degradation knob") {
  std::vector<Image> images;
  for (std::uint64_t s = 0; s < 10; ++s) images.push_back(synthesize_pattern(32, 32, 1, s));
  TurbulenceParams base{0.0, 3.0, 0.0, 0.0, 0.0, 0};
  double prev = 1e9;
  for (double tilt : {0.0, 1.0, 2.0, 4.0}) {
    auto p = base;
    p.tilt_strength = tilt;
    const double m = mean_psnr(images, p);
    CHECK(m <= prev);
    prev = m;
  }
  prev = 1e9;
  for (double smax : {0.0, 0.5, 1.0, 2.0}) {
    auto p = base;
    p.sigma_max = smax;
    const double m = mean_psnr(images, p);
    CHECK(m <= prev);
    prev = m;
  }
  prev = 1e9;
  for (double noise : {0.0, 0.02, 0.05, 0.1}) {
    auto p = base;
    p.noise_std = noise;
    const double m = mean_psnr(images, p);
    CHECK(m <= prev);
    prev = m;
  }
}

TEST_CASE("make_dataset writes pairs and a reproducible manifest") {
  const auto clean = fresh_dir("clean_src");
  for (std::uint64_t i = 0; i < 10; ++i) {
    save_image(synthesize_pattern(16, 16, 1, i), clean / ("img" + std::to_string(i) + ".png"));
  }
  std::ofstream(clean / "notes.txt") << "ignored";
  TurbulenceParams p{2.0, 3.0, 0.5, 1.5, 0.03, 123};
  const auto out = fresh_dir("out");
  const auto manifest = make_dataset(clean, out, p, 10);
  const auto rows = read_manifest(manifest);
  REQUIRE(rows.size() == 10);
  for (const auto& row : rows) {
    CHECK(fs::exists(row.clean_path));
    const Image regenerated = quantize8(degrade(load_image(row.clean_path), row.params));
    CHECK(load_image(row.degraded_path).pixels == regenerated.pixels);
    CHECK(row.params.tilt_strength == 2.0);
    CHECK(row.params.noise_std == 0.03);
  }
  CHECK(rows[0].params.seed != rows[1].params.seed);

  const auto again = fresh_dir("again");
  make_dataset(clean, again, p, 10);
  CHECK(file_bytes(again / "manifest.tsv") == file_bytes(manifest));
  CHECK(file_bytes(again / "degraded" / "pair_00007.png") == file_bytes(out / "degraded" / "pair_00007.png"));

  CHECK_THROWS_AS(make_dataset(fresh_dir("empty"), fresh_dir("o2"), p, 3), IoError);
  CHECK_THROWS_AS(make_dataset(clean, fresh_dir("o3"), p, 0), ConfigError);
}

TEST_CASE("pattern generator is deterministic and varied") {
  const Image a = synthesize_pattern(32, 32, 1, 5);
  CHECK(a.pixels == synthesize_pattern(32, 32, 1, 5).pixels);
  CHECK(a.pixels != synthesize_pattern(32, 32, 1, 6).pixels);
  double lo = 1, hi = 0;
  for (double v : a.pixels) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  CHECK(hi - lo > 0.1);
}
