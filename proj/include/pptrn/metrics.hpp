#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "pptrn/image.hpp"

namespace pptrn {

// Returned by psnr() when the images are identical, so reports stay finite.
inline constexpr double kPsnrCapDb = 100.0;

// 10 log10(peak^2 / MSE) over all pixels and channels.
double psnr(const Image& a, const Image& b, double peak = 1.0);

// Mean of the local SSIM map (11x11 Gaussian window, sigma 1.5, K1 0.01,
// K2 0.03, dynamic range 1) over window positions fully inside the image,
// averaged across channels.
double ssim(const Image& a, const Image& b);

inline constexpr std::size_t kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;

struct ImageMetrics {
  std::string source_id;
  double psnr_db = 0.0;
  double ssim = 0.0;
};

struct MetricsReport {
  double psnr_db = 0.0;
  double ssim = 0.0;
  std::vector<ImageMetrics> per_image;
  // How multi-channel images were scored.
  std::string color_mode = "per-channel-mean";

  static MetricsReport from(std::vector<ImageMetrics> per_image);
  void write_tsv(const std::filesystem::path& path) const;
  static MetricsReport read_tsv(const std::filesystem::path& path);
};

}  // namespace pptrn
