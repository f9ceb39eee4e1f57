#pragma once

#include <array>

#include "pptrn/image.hpp"
#include "pptrn/nn.hpp"

namespace pptrn {

struct EncoderConfig {
  std::size_t in_channels = 1;
  std::array<std::size_t, 4> widths{16, 32, 64, 128};
  std::size_t d_z = 128;
};

// Four stride-2 3x3 conv + gelu stages, global average pool, affine to d_z.
template <typename T>
class Encoder {
 public:
  Encoder(const EncoderConfig& config, std::uint64_t seed);

  // x is [C x H x W] with H, W positive multiples of 16; returns [d_z].
  Tensor<T> encode(const Tensor<T>& x) const;
  Tensor<T> encode(const Image& image) const { return encode(image_to_tensor<T>(image)); }

  void freeze() { store_.set_frozen(true); }
  void unfreeze() { store_.set_frozen(false); }
  bool is_frozen() const { return store_.is_frozen(); }

  const EncoderConfig& config() const { return config_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }

 private:
  EncoderConfig config_;
  ParamStore<T> store_{"encoder"};
  std::array<Conv<T>, 4> stages_;
  Linear<T> head_;
};

}  // namespace pptrn
