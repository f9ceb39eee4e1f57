#pragma once

#include "pptrn/nn.hpp"

namespace pptrn {

struct PpdaConfig {
  std::size_t d = 48;    // feature channels
  std::size_t m = 16;    // prior tokens
  std::size_t d_k = 0;   // query/key width; 0 means d
  std::size_t d_z = 128;
  // 3x3 stage of the feature projections: depthwise (groups = width) or dense.
  bool depthwise_qkv = true;

  std::size_t key_width() const { return d_k == 0 ? d : d_k; }
  void validate() const;
};

template <typename T>
struct PpdaTrace {
  Tensor<T> q_z, k_z, v_z;  // [m x d_k], [m x d_k], [m x d]
  Tensor<T> q_x, k_x, v_x;  // [d_k x N], [d_k x N], [d x N] (channel-major)
  Tensor<T> a_prior;        // [m x N]
  Tensor<T> a_feature;      // [N x m]
  Tensor<T> q_prime, k_prime;  // [m x d]
  Tensor<T> v_prime;        // [N x d]
  Tensor<T> a_transposed;   // [d x d]
  Tensor<T> fused;          // [d x H x W], before the output conv
};

// Prior-driven cross-attention between feature map X [d x H x W] and latent Z [d_z].
template <typename T>
class Ppda {
 public:
  Ppda(const PpdaConfig& config, ParamStore<T>& store, const std::string& name, Philox& rng);

  // (Q_Z, K_Z, V_Z) from Z.
  void project_prior(const Tensor<T>& z, Tensor<T>& q, Tensor<T>& k, Tensor<T>& v) const;
  // (Q_X, K_X, V_X) from X, channel-major [width x N].
  void project_features(const Tensor<T>& x, Tensor<T>& q, Tensor<T>& k, Tensor<T>& v) const;

  // Output-conv branch only; forward() adds it to X.
  Tensor<T> attend(const Tensor<T>& x, const Tensor<T>& z, PpdaTrace<T>* trace = nullptr) const;
  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& z, PpdaTrace<T>* trace = nullptr) const {
    return add(x, attend(x, z, trace));
  }

  const PpdaConfig& config() const { return config_; }

  // Exposed for tests that pin weights.
  Linear<T> wq_z, wk_z, wv_z;
  Conv<T> q_point, q_spatial, k_point, k_spatial, v_point, v_spatial;
  Linear<T> wq_prime, wk_prime, wv_prime;
  Conv<T> out;

 private:
  PpdaConfig config_;
};

// Single-head channel self-attention over X alone (no prior), used when the
// cross-attention is ablated: Q, K, V from 1x1 + 3x3 projections, Q and K
// normalised over positions, logits Q K^T / N times a learned temperature.
template <typename T>
class ChannelSelfAttention {
 public:
  ChannelSelfAttention(std::size_t d, bool depthwise, ParamStore<T>& store, const std::string& name, Philox& rng);
  Tensor<T> attend(const Tensor<T>& x) const;

 private:
  std::size_t d_;
  Conv<T> q_point, q_spatial, k_point, k_spatial, v_point, v_spatial, out;
  Tensor<T> temperature;
};

}  // namespace pptrn
