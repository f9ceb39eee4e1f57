#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pptrn/errors.hpp"
#include "pptrn/tensor.hpp"

namespace pptrn {

// Raised for valid-looking files whose bit depth or type the readers reject.
class UnsupportedFormat : public ParseError {
 public:
  using ParseError::ParseError;
};

// H x W x C raster, interleaved row-major, values nominally in [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<double> pixels;
  std::string source_id;

  static Image zeros(std::size_t height, std::size_t width, std::size_t channels, std::string source_id = {});

  double& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
  double at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }
  bool same_shape(const Image& other) const {
    return height == other.height && width == other.width && channels == other.channels;
  }
};

// PNG (8-bit gray/RGB; alpha dropped) and binary PGM/PPM (maxval <= 255).
// Format is chosen by extension on save and by signature on load.
Image load_image(const std::filesystem::path& path);
void save_image(const Image& image, const std::filesystem::path& path);

// Values clamped to [0,1] and rounded to the nearest 1/255.
Image quantize8(const Image& image);
Image clamp01(const Image& image);

// Luma 0.299 R + 0.587 G + 0.114 B; single-channel input is returned as is.
Image to_grayscale(const Image& image);

// Reflect-pads bottom/right edges up to (height, width); crop takes the top-left region.
Image reflect_pad(const Image& image, std::size_t height, std::size_t width);
Image crop(const Image& image, std::size_t y0, std::size_t x0, std::size_t height, std::size_t width);

// One of the 8 symmetries of the square: bit 2 transposes first, bit 1 flips
// rows, bit 0 flips columns. k = 0 is the identity.
Image dihedral(const Image& image, unsigned k);

// [C x H x W] tensor views of an image.
template <typename T>
Tensor<T> image_to_tensor(const Image& image);
template <typename T>
Image tensor_to_image(const Tensor<T>& tensor, std::string source_id = {});

// --- patches -------------------------------------------------------------

struct PatchLayout {
  std::size_t height = 0, width = 0, channels = 0;
  std::size_t size = 0, stride = 0;
  // Top-left corner (y, x) of each patch, in the order patches were returned.
  std::vector<std::pair<std::size_t, std::size_t>> origins;
};

struct PatchSet {
  std::vector<Image> patches;
  PatchLayout layout;
};

// Grid of floor((H - size) / stride) + 1 patches per axis. With a seed the
// patch order is shuffled (Philox stream 0 of that seed); layout follows it.
PatchSet extract_patches(const Image& image, std::size_t size, std::size_t stride,
                         std::optional<std::uint64_t> seed = std::nullopt);
// Overlaps are averaged; pixels no patch covers are 0.
Image reassemble(const std::vector<Image>& patches, const PatchLayout& layout);

// --- report rendering ----------------------------------------------------

// Horizontal strip of equally sized images separated by `gap` white pixels,
// promoted to RGB.
Image side_by_side(const std::vector<Image>& images, std::size_t gap = 2);
// |a - b| averaged over channels, mapped through a black-red-yellow-white ramp
// with `max_error` at the top of the scale.
Image error_heatmap(const Image& a, const Image& b, double max_error = 0.25);

}  // namespace pptrn
