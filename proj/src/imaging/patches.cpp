#include <algorithm>
#include <cmath>
#include <numeric>

#include "pptrn/image.hpp"
#include "pptrn/rng.hpp"

namespace pptrn {

PatchSet extract_patches(const Image& image, std::size_t size, std::size_t stride, std::optional<std::uint64_t> seed) {
  if (size == 0 || stride == 0) throw ConfigError("extract_patches: size and stride must be positive");
  if (size > image.height || size > image.width) {
    throw SizeError("extract_patches: patch size " + std::to_string(size) + " exceeds image " +
                    std::to_string(image.height) + "x" + std::to_string(image.width));
  }
  PatchSet set;
  set.layout = {image.height, image.width, image.channels, size, stride, {}};
  for (std::size_t y = 0; y + size <= image.height; y += stride) {
    for (std::size_t x = 0; x + size <= image.width; x += stride) set.layout.origins.emplace_back(y, x);
  }
  if (seed) {
    Philox rng(*seed, 0);
    auto& o = set.layout.origins;
    for (std::size_t i = o.size(); i > 1; --i) std::swap(o[i - 1], o[rng.below(i)]);
  }
  set.patches.reserve(set.layout.origins.size());
  for (const auto& [y, x] : set.layout.origins) set.patches.push_back(crop(image, y, x, size, size));
  return set;
}

Image reassemble(const std::vector<Image>& patches, const PatchLayout& layout) {
  if (patches.size() != layout.origins.size()) {
    throw SizeError("reassemble: " + std::to_string(patches.size()) + " patches for " +
                    std::to_string(layout.origins.size()) + " origins");
  }
  Image out = Image::zeros(layout.height, layout.width, layout.channels);
  std::vector<double> weight(layout.height * layout.width, 0.0);
  for (std::size_t p = 0; p < patches.size(); ++p) {
    const Image& patch = patches[p];
    if (patch.height != layout.size || patch.width != layout.size || patch.channels != layout.channels) {
      throw DimensionError("reassemble: patch " + std::to_string(p) + " does not match layout");
    }
    const auto [y0, x0] = layout.origins[p];
    for (std::size_t y = 0; y < layout.size; ++y) {
      for (std::size_t x = 0; x < layout.size; ++x) {
        weight[(y0 + y) * layout.width + x0 + x] += 1.0;
        for (std::size_t c = 0; c < layout.channels; ++c) out.at(y0 + y, x0 + x, c) += patch.at(y, x, c);
      }
    }
  }
  for (std::size_t i = 0; i < weight.size(); ++i) {
    if (weight[i] == 0.0) continue;
    for (std::size_t c = 0; c < layout.channels; ++c) out.pixels[i * layout.channels + c] /= weight[i];
  }
  return out;
}

Image side_by_side(const std::vector<Image>& images, std::size_t gap) {
  if (images.empty()) throw SizeError("side_by_side: no images");
  const std::size_t h = images.front().height, w = images.front().width;
  for (const auto& img : images) {
    if (img.height != h || img.width != w) throw DimensionError("side_by_side: images differ in size");
    if (img.channels != 1 && img.channels != 3) throw ConfigError("side_by_side: images must have 1 or 3 channels");
  }
  const std::size_t total_w = images.size() * w + (images.size() - 1) * gap;
  Image out = Image::zeros(h, total_w, 3);
  std::fill(out.pixels.begin(), out.pixels.end(), 1.0);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Image& img = images[i];
    const std::size_t x0 = i * (w + gap);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        for (std::size_t c = 0; c < 3; ++c) out.at(y, x0 + x, c) = img.at(y, x, img.channels == 3 ? c : 0);
      }
    }
  }
  return clamp01(out);
}

Image error_heatmap(const Image& a, const Image& b, double max_error) {
  if (!a.same_shape(b)) throw DimensionError("error_heatmap: image shapes differ");
  if (!(max_error > 0.0)) throw ConfigError("error_heatmap: max_error must be positive");
  Image out = Image::zeros(a.height, a.width, 3, a.source_id);
  for (std::size_t y = 0; y < a.height; ++y) {
    for (std::size_t x = 0; x < a.width; ++x) {
      double e = 0;
      for (std::size_t c = 0; c < a.channels; ++c) e += std::abs(a.at(y, x, c) - b.at(y, x, c));
      const double t = std::clamp(e / double(a.channels) / max_error, 0.0, 1.0) * 3.0;
      out.at(y, x, 0) = std::clamp(t, 0.0, 1.0);
      out.at(y, x, 1) = std::clamp(t - 1.0, 0.0, 1.0);
      out.at(y, x, 2) = std::clamp(t - 2.0, 0.0, 1.0);
    }
  }
  return out;
}

}  // namespace pptrn
