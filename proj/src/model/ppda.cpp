#include "pptrn/ppda.hpp"

#include <cmath>

namespace pptrn {

namespace {

template <typename T>
Conv<T> spatial_conv(ParamStore<T>& store, const std::string& name, std::size_t width, bool depthwise, Philox& rng) {
  return Conv<T>::make(store, name, width, width, 3, rng, {1, 1, depthwise ? width : 1});
}

template <typename T>
Tensor<T> flatten_hw(const Tensor<T>& x) {
  return reshape(x, {x.dim(0), x.dim(1) * x.dim(2)});
}

}  // namespace

void PpdaConfig::validate() const {
  if (d < 4) throw ConfigError("ppda: d must be >= 4");
  if (m < 1) throw ConfigError("ppda: m must be >= 1");
  if (d_z < 1) throw ConfigError("ppda: d_z must be >= 1");
}

template <typename T>
Ppda<T>::Ppda(const PpdaConfig& config, ParamStore<T>& store, const std::string& name, Philox& rng)
    : config_(config) {
  config.validate();
  const std::size_t d = config.d, dk = config.key_width(), m = config.m;
  wq_z = Linear<T>::make(store, name + ".wq_z", config.d_z, m * dk, rng);
  wk_z = Linear<T>::make(store, name + ".wk_z", config.d_z, m * dk, rng);
  wv_z = Linear<T>::make(store, name + ".wv_z", config.d_z, m * d, rng);
  q_point = Conv<T>::make(store, name + ".q_point", d, dk, 1, rng);
  q_spatial = spatial_conv(store, name + ".q_spatial", dk, config.depthwise_qkv, rng);
  k_point = Conv<T>::make(store, name + ".k_point", d, dk, 1, rng);
  k_spatial = spatial_conv(store, name + ".k_spatial", dk, config.depthwise_qkv, rng);
  v_point = Conv<T>::make(store, name + ".v_point", d, d, 1, rng);
  v_spatial = spatial_conv(store, name + ".v_spatial", d, config.depthwise_qkv, rng);
  wq_prime = Linear<T>::make(store, name + ".wq_prime", d, d, rng);
  wk_prime = Linear<T>::make(store, name + ".wk_prime", d, d, rng);
  wv_prime = Linear<T>::make(store, name + ".wv_prime", d, d, rng);
  out = Conv<T>::make(store, name + ".out", d, d, 1, rng);
}

template <typename T>
void Ppda<T>::project_prior(const Tensor<T>& z, Tensor<T>& q, Tensor<T>& k, Tensor<T>& v) const {
  if (z.rank() != 1 || z.dim(0) != config_.d_z) {
    throw DimensionError("ppda prior projection: Z " + shape_str(z.shape()) + ", expected [" +
                         std::to_string(config_.d_z) + "]");
  }
  const std::size_t m = config_.m;
  q = reshape(wq_z(z), {m, config_.key_width()});
  k = reshape(wk_z(z), {m, config_.key_width()});
  v = reshape(wv_z(z), {m, config_.d});
}

template <typename T>
void Ppda<T>::project_features(const Tensor<T>& x, Tensor<T>& q, Tensor<T>& k, Tensor<T>& v) const {
  if (x.rank() != 3 || x.dim(0) != config_.d) {
    throw DimensionError("ppda feature projection: X " + shape_str(x.shape()) + ", expected " +
                         std::to_string(config_.d) + " channels");
  }
  q = flatten_hw(q_spatial(q_point(x)));
  k = flatten_hw(k_spatial(k_point(x)));
  v = flatten_hw(v_spatial(v_point(x)));
}

template <typename T>
Tensor<T> Ppda<T>::attend(const Tensor<T>& x, const Tensor<T>& z, PpdaTrace<T>* trace) const {
  Tensor<T> q_z, k_z, v_z, q_x, k_x, v_x;
  project_prior(z, q_z, k_z, v_z);
  project_features(x, q_x, k_x, v_x);
  const T inv_dk = T(1.0 / std::sqrt(double(config_.key_width())));
  const T inv_dc = T(1.0 / std::sqrt(double(config_.d)));

  // Prior attention [m x N] and feature attention [N x m].
  const auto a_prior = softmax(scale(matmul(q_z, k_x), inv_dk), 1);
  const auto a_feature = softmax(scale(matmul(q_x, k_z, true, true), inv_dk), 1);

  // Recalculated Q', K' [m x d] from prior-attended features, V' [N x d] from feature-attended prior values.
  const auto prior_ctx = matmul(a_prior, v_x, false, true);
  const auto q_prime = wq_prime(prior_ctx);
  const auto k_prime = wk_prime(prior_ctx);
  const auto v_prime = wv_prime(matmul(a_feature, v_z));

  // Channel-space attention [d x d]; A V'^T is the channel-major form of V' A^T.
  const auto a_t = softmax(scale(matmul(q_prime, k_prime, true, false), inv_dc), 1);
  const auto fused = reshape(matmul(a_t, v_prime, false, true), x.shape());
  const auto result = out(fused);

  if (trace) {
    *trace = {q_z, k_z, v_z, q_x, k_x, v_x, a_prior, a_feature, q_prime, k_prime, v_prime, a_t, fused};
  }
  return result;
}

template <typename T>
ChannelSelfAttention<T>::ChannelSelfAttention(std::size_t d, bool depthwise, ParamStore<T>& store,
                                              const std::string& name, Philox& rng)
    : d_(d) {
  q_point = Conv<T>::make(store, name + ".q_point", d, d, 1, rng);
  q_spatial = spatial_conv(store, name + ".q_spatial", d, depthwise, rng);
  k_point = Conv<T>::make(store, name + ".k_point", d, d, 1, rng);
  k_spatial = spatial_conv(store, name + ".k_spatial", d, depthwise, rng);
  v_point = Conv<T>::make(store, name + ".v_point", d, d, 1, rng);
  v_spatial = spatial_conv(store, name + ".v_spatial", d, depthwise, rng);
  out = Conv<T>::make(store, name + ".out", d, d, 1, rng);
  temperature = store.create(name + ".temperature", {1}, Init::kOnes, rng);
}

template <typename T>
Tensor<T> ChannelSelfAttention<T>::attend(const Tensor<T>& x) const {
  if (x.rank() != 3 || x.dim(0) != d_) {
    throw DimensionError("channel attention: X " + shape_str(x.shape()) + ", expected " + std::to_string(d_) +
                         " channels");
  }
  const std::size_t n = x.dim(1) * x.dim(2);
  const auto q = layer_norm(flatten_hw(q_spatial(q_point(x))), 1);
  const auto k = layer_norm(flatten_hw(k_spatial(k_point(x))), 1);
  const auto v = flatten_hw(v_spatial(v_point(x)));
  const auto logits = mul(scale(matmul(q, k, false, true), T(1.0 / double(n))), temperature);
  const auto a = softmax(logits, 1);
  return out(reshape(matmul(a, v), x.shape()));
}

template class Ppda<float>;
template class Ppda<double>;
template class ChannelSelfAttention<float>;
template class ChannelSelfAttention<double>;

}  // namespace pptrn
