#pragma once

#include <memory>
#include <optional>

#include "pptrn/ppda.hpp"

namespace pptrn {

enum class AttentionKind {
  kPpda,         // prior-driven cross-attention in every block
  kChannelSelf,  // prior-free channel self-attention (cross-attention ablated)
};

struct BackboneConfig {
  std::size_t in_channels = 1;
  std::size_t d = 48;
  std::size_t levels = 3;
  std::size_t m = 16;
  std::size_t d_k = 0;  // 0 means the level width
  std::size_t d_z = 128;
  double ffn_expansion = 2.0;
  bool depthwise_qkv = true;
  AttentionKind attention = AttentionKind::kPpda;

  std::size_t width(std::size_t level) const { return d << level; }
  std::size_t ffn_hidden(std::size_t level) const;
  // Input extents must be multiples of this.
  std::size_t size_multiple() const { return std::size_t(1) << (levels - 1); }
  void validate() const;
};

// Pre-norm transformer block: x + attn(norm(x)), then x + ffn(norm(x)) with a
// gelu-gated feed-forward (1x1 expand to two halves, depthwise 3x3, gelu(a) * b, 1x1 project).
template <typename T>
class Block {
 public:
  Block(const BackboneConfig& config, std::size_t level, ParamStore<T>& store, const std::string& name, Philox& rng);
  Tensor<T> operator()(const Tensor<T>& x, const Tensor<T>* z) const;

  const Ppda<T>* ppda() const { return ppda_ ? &*ppda_ : nullptr; }

 private:
  std::size_t hidden_;
  ChannelNorm<T> norm1_, norm2_;
  std::optional<Ppda<T>> ppda_;
  std::optional<ChannelSelfAttention<T>> self_attn_;
  Conv<T> ffn_in_, ffn_dw_, ffn_out_;
};

// Encoder-decoder over `levels` scales with one block per scale, skip
// connections and a zero-initialised output conv that predicts a residual.
template <typename T>
class Backbone {
 public:
  Backbone(const BackboneConfig& config, std::uint64_t seed);

  // degraded [C x H x W] with H, W multiples of size_multiple(); z is [d_z]
  // (ignored by the ablated variant, may be undefined there). Returns degraded + delta.
  Tensor<T> restore(const Tensor<T>& degraded, const Tensor<T>& z) const;

  const BackboneConfig& config() const { return config_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }
  std::size_t count_parameters() const { return store_.count(); }
  const Block<T>& block(std::size_t level) const { return blocks_[level]; }

 private:
  BackboneConfig config_;
  ParamStore<T> store_{"backbone"};
  Conv<T> in_conv_, out_conv_;
  std::vector<Linear<T>> adapters_;
  std::vector<Block<T>> blocks_;
  std::vector<Conv<T>> down_, reduce_, fuse_;
};

// Closed form of the parameter count for a configuration.
std::size_t backbone_parameter_count(const BackboneConfig& config);

}  // namespace pptrn
