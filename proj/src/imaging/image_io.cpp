#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "pptrn/image.hpp"

namespace pptrn {

namespace fs = std::filesystem;

namespace {

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

std::string lower_ext(const fs::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return char(std::tolower(c)); });
  return ext;
}

std::vector<std::uint8_t> read_all(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed for " + path.string());
  return bytes;
}

// Binary PGM (P5) / PPM (P6).
Image decode_pnm(const std::vector<std::uint8_t>& bytes, const std::string& name) {
  std::size_t pos = 2;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_uint = [&](const char* what) {
    skip_space();
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) throw ParseError(name + ": malformed PNM header (" + what + ")");
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + std::size_t(bytes[pos++] - '0');
      if (v > (1u << 24)) throw ParseError(name + ": PNM " + what + " out of range");
    }
    return v;
  };
  const std::size_t channels = bytes[1] == '5' ? 1 : 3;
  const std::size_t width = read_uint("width");
  const std::size_t height = read_uint("height");
  const std::size_t maxval = read_uint("maxval");
  if (width == 0 || height == 0 || maxval == 0) throw ParseError(name + ": PNM header has zero extent or maxval");
  if (maxval > 255) throw UnsupportedFormat(name + ": 16-bit PNM (maxval " + std::to_string(maxval) + ") unsupported");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw ParseError(name + ": malformed PNM header");
  ++pos;
  const std::size_t n = width * height * channels;
  if (bytes.size() - pos < n) throw ParseError(name + ": truncated PNM pixel data");
  Image img = Image::zeros(height, width, channels, name);
  for (std::size_t i = 0; i < n; ++i) img.pixels[i] = double(bytes[pos + i]) / double(maxval);
  return img;
}

Image decode_png(const fs::path& path, const std::string& name) {
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw ParseError(name + ": " + png.message);
  }
  if (png.format & PNG_FORMAT_FLAG_LINEAR) {
    png_image_free(&png);
    throw UnsupportedFormat(name + ": 16-bit PNG unsupported");
  }
  const std::size_t channels = (png.format & PNG_FORMAT_FLAG_COLOR) ? 3 : 1;
  png.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buffer.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw ParseError(name + ": " + msg);
  }
  Image img = Image::zeros(png.height, png.width, channels, name);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = double(buffer[i]) / 255.0;
  return img;
}

}  // namespace

Image Image::zeros(std::size_t height, std::size_t width, std::size_t channels, std::string source_id) {
  Image img;
  img.height = height;
  img.width = width;
  img.channels = channels;
  img.pixels.assign(height * width * channels, 0.0);
  img.source_id = std::move(source_id);
  return img;
}

Image load_image(const fs::path& path) {
  const std::string name = path.filename().string();
  if (!fs::is_regular_file(path)) throw IoError("not a readable file: " + path.string());
  const auto bytes = read_all(path);
  Image img;
  if (bytes.size() >= 8 && png_sig_cmp(bytes.data(), 0, 8) == 0) {
    img = decode_png(path, name);
  } else if (bytes.size() >= 2 && bytes[0] == 'P' && (bytes[1] == '5' || bytes[1] == '6')) {
    img = decode_pnm(bytes, name);
  } else if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] >= '1' && bytes[1] <= '4') {
    throw UnsupportedFormat(name + ": only binary PGM/PPM (P5/P6) are supported");
  } else {
    throw ParseError(name + ": unrecognised image signature");
  }
  img.source_id = path.stem().string();
  return img;
}

void save_image(const Image& image, const fs::path& path) {
  if (image.channels != 1 && image.channels != 3) {
    throw ConfigError("save_image: channels must be 1 or 3, got " + std::to_string(image.channels));
  }
  if (image.pixels.size() != image.height * image.width * image.channels || image.pixels.empty()) {
    throw SizeError("save_image: pixel buffer does not match image extents");
  }
  std::vector<std::uint8_t> bytes(image.pixels.size());
  std::transform(image.pixels.begin(), image.pixels.end(), bytes.begin(), to_byte);
  const std::string ext = lower_ext(path);
  if (ext == ".png") {
    png_image png;
    std::memset(&png, 0, sizeof png);
    png.version = PNG_IMAGE_VERSION;
    png.width = static_cast<png_uint_32>(image.width);
    png.height = static_cast<png_uint_32>(image.height);
    png.format = image.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    if (!png_image_write_to_file(&png, path.c_str(), 0, bytes.data(), 0, nullptr)) {
      throw IoError("cannot write " + path.string() + ": " + png.message);
    }
    return;
  }
  if (ext == ".pgm" || ext == ".ppm" || ext == ".pnm") {
    if ((ext == ".pgm" && image.channels != 1) || (ext == ".ppm" && image.channels != 3)) {
      throw ConfigError("save_image: " + ext + " does not match " + std::to_string(image.channels) + " channel(s)");
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << (image.channels == 1 ? "P5" : "P6") << '\n' << image.width << ' ' << image.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) throw IoError("write failed for " + path.string());
    return;
  }
  throw ConfigError("save_image: unsupported extension '" + ext + "'");
}

Image quantize8(const Image& image) {
  Image out = image;
  for (double& v : out.pixels) v = double(to_byte(v)) / 255.0;
  return out;
}

Image clamp01(const Image& image) {
  Image out = image;
  for (double& v : out.pixels) v = std::clamp(v, 0.0, 1.0);
  return out;
}

Image to_grayscale(const Image& image) {
  if (image.channels == 1) return image;
  if (image.channels != 3) throw ConfigError("to_grayscale: expected 1 or 3 channels");
  Image out = Image::zeros(image.height, image.width, 1, image.source_id);
  for (std::size_t i = 0; i < image.height * image.width; ++i) {
    const double* p = &image.pixels[i * 3];
    out.pixels[i] = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
  }
  return out;
}

Image reflect_pad(const Image& image, std::size_t height, std::size_t width) {
  if (height < image.height || width < image.width) throw SizeError("reflect_pad: target smaller than image");
  if ((height > image.height && image.height < 2) || (width > image.width && image.width < 2)) {
    throw SizeError("reflect_pad: image too small to reflect");
  }
  auto reflect = [](std::size_t i, std::size_t n) {
    const std::size_t period = 2 * (n - 1);
    std::size_t r = i % period;
    return r < n ? r : period - r;
  };
  Image out = Image::zeros(height, width, image.channels, image.source_id);
  for (std::size_t y = 0; y < height; ++y) {
    const std::size_t sy = image.height == 1 ? 0 : reflect(y, image.height);
    for (std::size_t x = 0; x < width; ++x) {
      const std::size_t sx = image.width == 1 ? 0 : reflect(x, image.width);
      for (std::size_t c = 0; c < image.channels; ++c) out.at(y, x, c) = image.at(sy, sx, c);
    }
  }
  return out;
}

Image crop(const Image& image, std::size_t y0, std::size_t x0, std::size_t height, std::size_t width) {
  if (y0 + height > image.height || x0 + width > image.width) throw SizeError("crop: region exceeds image");
  Image out = Image::zeros(height, width, image.channels, image.source_id);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t c = 0; c < image.channels; ++c) out.at(y, x, c) = image.at(y0 + y, x0 + x, c);
    }
  }
  return out;
}

Image dihedral(const Image& image, unsigned k) {
  if (k > 7) throw ConfigError("dihedral: k must lie in [0, 7]");
  const bool transpose = (k & 4) != 0;
  const std::size_t h = transpose ? image.width : image.height, w = transpose ? image.height : image.width;
  Image out = Image::zeros(h, w, image.channels, image.source_id);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t ty = (k & 2) ? h - 1 - y : y, tx = (k & 1) ? w - 1 - x : x;
      const std::size_t sy = transpose ? tx : ty, sx = transpose ? ty : tx;
      for (std::size_t c = 0; c < image.channels; ++c) out.at(y, x, c) = image.at(sy, sx, c);
    }
  }
  return out;
}

template <typename T>
Tensor<T> image_to_tensor(const Image& image) {
  const std::size_t hw = image.height * image.width;
  std::vector<T> data(image.channels * hw);
  for (std::size_t c = 0; c < image.channels; ++c) {
    for (std::size_t i = 0; i < hw; ++i) data[c * hw + i] = static_cast<T>(image.pixels[i * image.channels + c]);
  }
  return Tensor<T>::from_data({image.channels, image.height, image.width}, std::move(data));
}

template <typename T>
Image tensor_to_image(const Tensor<T>& tensor, std::string source_id) {
  if (tensor.rank() != 3) throw DimensionError("tensor_to_image: expected [C x H x W], got " + shape_str(tensor.shape()));
  Image img = Image::zeros(tensor.dim(1), tensor.dim(2), tensor.dim(0), std::move(source_id));
  const std::size_t hw = img.height * img.width;
  const auto d = tensor.data();
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::size_t i = 0; i < hw; ++i) img.pixels[i * img.channels + c] = static_cast<double>(d[c * hw + i]);
  }
  return img;
}

template Tensor<float> image_to_tensor(const Image&);
template Tensor<double> image_to_tensor(const Image&);
template Image tensor_to_image(const Tensor<float>&, std::string);
template Image tensor_to_image(const Tensor<double>&, std::string);

}  // namespace pptrn
