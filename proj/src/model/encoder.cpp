#include "pptrn/encoder.hpp"

namespace pptrn {

template <typename T>
Encoder<T>::Encoder(const EncoderConfig& config, std::uint64_t seed) : config_(config) {
  if (config.in_channels == 0 || config.d_z == 0) throw ConfigError("encoder: channels and d_z must be positive");
  Philox rng(seed, 0);
  std::size_t c_in = config.in_channels;
  for (std::size_t i = 0; i < 4; ++i) {
    stages_[i] = Conv<T>::make(store_, "conv" + std::to_string(i), c_in, config.widths[i], 3, rng, {2, 1, 1});
    c_in = config.widths[i];
  }
  head_ = Linear<T>::make(store_, "head", c_in, config.d_z, rng);
}

template <typename T>
Tensor<T> Encoder<T>::encode(const Tensor<T>& x) const {
  if (x.rank() != 3 || x.dim(0) != config_.in_channels) {
    throw DimensionError("encode: expected [" + std::to_string(config_.in_channels) + " x H x W], got " +
                         shape_str(x.shape()));
  }
  if (x.dim(1) < 16 || x.dim(2) < 16 || x.dim(1) % 16 != 0 || x.dim(2) % 16 != 0) {
    throw SizeError("encode: H and W must be multiples of 16, got " + std::to_string(x.dim(1)) + "x" +
                    std::to_string(x.dim(2)));
  }
  Tensor<T> h = x;
  for (const auto& stage : stages_) h = gelu(stage(h));
  const std::size_t c = h.dim(0);
  const Tensor<T> pooled = mean(reshape(h, {c, h.dim(1) * h.dim(2)}), 1);
  return head_(pooled);
}

template class Encoder<float>;
template class Encoder<double>;

}  // namespace pptrn
