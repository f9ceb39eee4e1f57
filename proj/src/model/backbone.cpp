#include "pptrn/backbone.hpp"

#include <cmath>

namespace pptrn {

std::size_t BackboneConfig::ffn_hidden(std::size_t level) const {
  return std::max<std::size_t>(1, std::size_t(std::lround(double(width(level)) * ffn_expansion)));
}

void BackboneConfig::validate() const {
  if (in_channels == 0) throw ConfigError("backbone: in_channels must be positive");
  if (d < 4) throw ConfigError("backbone: d must be >= 4");
  if (levels < 1 || levels > 6) throw ConfigError("backbone: levels must be in [1, 6]");
  if (m < 1 || d_z < 1) throw ConfigError("backbone: m and d_z must be positive");
  if (!(ffn_expansion > 0)) throw ConfigError("backbone: ffn_expansion must be positive");
}

template <typename T>
Block<T>::Block(const BackboneConfig& config, std::size_t level, ParamStore<T>& store, const std::string& name,
                Philox& rng)
    : hidden_(config.ffn_hidden(level)) {
  const std::size_t w = config.width(level);
  norm1_ = ChannelNorm<T>::make(store, name + ".norm1", w, rng);
  if (config.attention == AttentionKind::kPpda) {
    ppda_.emplace(PpdaConfig{w, config.m, config.d_k, config.d_z, config.depthwise_qkv}, store, name + ".ppda", rng);
  } else {
    self_attn_.emplace(w, config.depthwise_qkv, store, name + ".attn", rng);
  }
  norm2_ = ChannelNorm<T>::make(store, name + ".norm2", w, rng);
  ffn_in_ = Conv<T>::make(store, name + ".ffn_in", w, 2 * hidden_, 1, rng);
  ffn_dw_ = Conv<T>::make(store, name + ".ffn_dw", 2 * hidden_, 2 * hidden_, 3, rng, {1, 1, 2 * hidden_});
  ffn_out_ = Conv<T>::make(store, name + ".ffn_out", hidden_, w, 1, rng);
}

template <typename T>
Tensor<T> Block<T>::operator()(const Tensor<T>& x, const Tensor<T>* z) const {
  const auto n1 = norm1_(x);
  Tensor<T> h = add(x, ppda_ ? ppda_->attend(n1, *z) : self_attn_->attend(n1));
  const auto e = ffn_dw_(ffn_in_(norm2_(h)));
  const auto gated = mul(gelu(slice(e, 0, 0, hidden_)), slice(e, 0, hidden_, 2 * hidden_));
  return add(h, ffn_out_(gated));
}

template <typename T>
Backbone<T>::Backbone(const BackboneConfig& config, std::uint64_t seed) : config_(config) {
  config.validate();
  Philox rng(seed, 0);
  const std::size_t L = config.levels;
  in_conv_ = Conv<T>::make(store_, "in_conv", config.in_channels, config.d, 3, rng, {1, 1, 1});
  for (std::size_t l = 0; l < L; ++l) {
    if (config.attention == AttentionKind::kPpda) {
      adapters_.push_back(Linear<T>::make(store_, "adapter" + std::to_string(l), config.d_z, config.d_z, rng));
    }
    blocks_.emplace_back(config, l, store_, "block" + std::to_string(l), rng);
    if (l + 1 < L) {
      down_.push_back(Conv<T>::make(store_, "down" + std::to_string(l), config.width(l), config.width(l + 1), 1, rng));
    }
  }
  for (std::size_t l = 0; l + 1 < L; ++l) {
    reduce_.push_back(Conv<T>::make(store_, "reduce" + std::to_string(l), config.width(l + 1), config.width(l), 1, rng));
    fuse_.push_back(Conv<T>::make(store_, "fuse" + std::to_string(l), 2 * config.width(l), config.width(l), 1, rng));
  }
  out_conv_ = Conv<T>::make(store_, "out_conv", config.d, config.in_channels, 3, rng, {1, 1, 1}, true, Init::kZeros);
}

template <typename T>
Tensor<T> Backbone<T>::restore(const Tensor<T>& degraded, const Tensor<T>& z) const {
  if (degraded.rank() != 3 || degraded.dim(0) != config_.in_channels) {
    throw DimensionError("restore: expected [" + std::to_string(config_.in_channels) + " x H x W], got " +
                         shape_str(degraded.shape()));
  }
  const std::size_t mult = config_.size_multiple();
  if (degraded.dim(1) % mult != 0 || degraded.dim(2) % mult != 0) {
    throw SizeError("restore: H and W must be multiples of " + std::to_string(mult) + ", got " +
                    std::to_string(degraded.dim(1)) + "x" + std::to_string(degraded.dim(2)));
  }
  const bool uses_prior = config_.attention == AttentionKind::kPpda;
  if (uses_prior && (!z.defined() || z.shape() != Shape{config_.d_z})) {
    throw DimensionError("restore: prior must be [" + std::to_string(config_.d_z) + "]");
  }
  const std::size_t L = config_.levels;
  std::vector<Tensor<T>> skips;
  Tensor<T> h = in_conv_(degraded);
  for (std::size_t l = 0; l < L; ++l) {
    Tensor<T> z_l;
    if (uses_prior) z_l = adapters_[l](z);
    h = blocks_[l](h, uses_prior ? &z_l : nullptr);
    if (l + 1 < L) {
      skips.push_back(h);
      h = down_[l](avg_pool2(h));
    }
  }
  for (std::size_t i = L - 1; i-- > 0;) {
    h = upsample2(reduce_[i](h));
    h = fuse_[i](concat<T>({h, skips[i]}, 0));
  }
  return add(degraded, out_conv_(h));
}

std::size_t backbone_parameter_count(const BackboneConfig& c) {
  c.validate();
  auto conv = [](std::size_t in, std::size_t out, std::size_t k, std::size_t groups) {
    return out * (in / groups) * k * k + out;
  };
  auto linear = [](std::size_t in, std::size_t out) { return out * in + out; };
  std::size_t n = conv(c.in_channels, c.d, 3, 1) + conv(c.d, c.in_channels, 3, 1);
  for (std::size_t l = 0; l < c.levels; ++l) {
    const std::size_t w = c.width(l), h = c.ffn_hidden(l);
    const std::size_t dk = c.d_k == 0 ? w : c.d_k;
    n += 4 * w;  // two norms
    if (c.attention == AttentionKind::kPpda) {
      n += linear(c.d_z, c.d_z);
      n += 2 * linear(c.d_z, c.m * dk) + linear(c.d_z, c.m * w);
      n += 2 * (conv(w, dk, 1, 1) + conv(dk, dk, 3, c.depthwise_qkv ? dk : 1));
      n += conv(w, w, 1, 1) + conv(w, w, 3, c.depthwise_qkv ? w : 1);
      n += 3 * linear(w, w) + conv(w, w, 1, 1);
    } else {
      n += 3 * (conv(w, w, 1, 1) + conv(w, w, 3, c.depthwise_qkv ? w : 1)) + conv(w, w, 1, 1) + 1;
    }
    n += conv(w, 2 * h, 1, 1) + conv(2 * h, 2 * h, 3, 2 * h) + conv(h, w, 1, 1);
    if (l + 1 < c.levels) {
      n += conv(w, c.width(l + 1), 1, 1);                                // down
      n += conv(c.width(l + 1), w, 1, 1) + conv(2 * w, w, 1, 1);         // reduce, fuse
    }
  }
  return n;
}

template class Block<float>;
template class Block<double>;
template class Backbone<float>;
template class Backbone<double>;

}  // namespace pptrn
