#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pptrn/image.hpp"

namespace pptrn {

struct TurbulenceParams {
  double tilt_strength = 0.0;     // max displacement magnitude, px
  double tilt_correlation = 4.0;  // Gaussian smoothing scale of the displacement field, px
  double sigma_min = 0.0;
  double sigma_max = 0.0;
  double noise_std = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

// Displacement field stored as [2 x H x W]: plane 0 is dy, plane 1 is dx.
struct TiltField {
  std::size_t height = 0, width = 0;
  std::vector<double> data;

  double dy(std::size_t y, std::size_t x) const { return data[y * width + x]; }
  double dx(std::size_t y, std::size_t x) const { return data[height * width + y * width + x]; }
  double max_magnitude() const;
};

// Philox streams used per seed: 0 tilt field, 1 blur-sigma field, 2 sensor noise.
TiltField generate_tilt_field(std::size_t height, std::size_t width, const TurbulenceParams& params);

// Per-pixel blur sigma in [sigma_min, sigma_max], from a smooth random field.
std::vector<double> blur_sigma_field(std::size_t height, std::size_t width, const TurbulenceParams& params);

// Warp, then spatially varying blur, then noise; output clamped to [0, 1].
Image degrade(const Image& image, const TurbulenceParams& params);

// Separable Gaussian smoothing of one plane with edge clamping; sigma <= 0 copies.
std::vector<double> gaussian_smooth(const std::vector<double>& plane, std::size_t height, std::size_t width,
                                    double sigma);

// Bilinear sample with edge clamping.
double sample_bilinear(const Image& image, double y, double x, std::size_t channel);

// Synthetic clean content: gradients, disks, rectangles, stripes and checker
// patches composited on a random background. Deterministic in seed.
Image synthesize_pattern(std::size_t height, std::size_t width, std::size_t channels, std::uint64_t seed);

struct ManifestRow {
  std::string pair_id;
  std::filesystem::path clean_path;     // absolute, resolved against the manifest directory
  std::filesystem::path degraded_path;
  TurbulenceParams params;
};

inline constexpr const char* kManifestHeader =
    "pair_id\tclean_path\tdegraded_path\tseed\ttilt_strength\ttilt_corr\tsigma_min\tsigma_max\tnoise_std";

// Loadable images in clean_dir in filename order; `count` pairs cycle through
// them. Pair i uses seed derive_seed(params.seed, i). Clean images are stored
// 8-bit quantized and degradation is applied to that stored version, so each
// degraded file is reproducible from its manifest row. Returns the manifest path.
std::filesystem::path make_dataset(const std::filesystem::path& clean_dir, const std::filesystem::path& out_dir,
                                   const TurbulenceParams& params, std::size_t count);

std::vector<ManifestRow> read_manifest(const std::filesystem::path& manifest);

// Images that load_image accepts, sorted by filename.
std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir);

}  // namespace pptrn
