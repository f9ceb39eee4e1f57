#include "pptrn/nn.hpp"

#include <cmath>
#include <cstring>

#include "pptrn/hash.hpp"

namespace pptrn {

template <typename T>
Tensor<T> ParamStore<T>::create(const std::string& name, Shape shape, Init init, Philox& rng) {
  const std::string full = prefix_.empty() ? name : prefix_ + "." + name;
  for (const auto& e : entries_) {
    if (e.name == full) throw ConfigError("duplicate parameter name " + full);
  }
  std::vector<T> data(numel(shape));
  switch (init) {
    case Init::kZeros:
      break;
    case Init::kOnes:
      std::fill(data.begin(), data.end(), T(1));
      break;
    case Init::kFanIn: {
      const double fan_in = shape.size() > 1 ? double(numel(shape) / shape[0]) : double(shape[0]);
      const double bound = 1.0 / std::sqrt(fan_in);
      for (T& v : data) v = static_cast<T>((2.0 * rng.uniform() - 1.0) * bound);
      break;
    }
  }
  auto t = Tensor<T>::from_data(std::move(shape), std::move(data), !frozen_);
  entries_.push_back({full, t});
  return t;
}

template <typename T>
const Tensor<T>& ParamStore<T>::get(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e.value;
  }
  throw ConfigError("no parameter named " + name);
}

template <typename T>
std::size_t ParamStore<T>::count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

template <typename T>
std::uint64_t ParamStore<T>::hash() const {
  Fnv1a64 h;
  for (const auto& e : entries_) {
    h.update(e.name);
    for (std::size_t d : e.value.shape()) h.update_u64(d);
    const auto data = e.value.data();
    h.update(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(data.data()), data.size_bytes()));
  }
  return h.value();
}

template <typename T>
void ParamStore<T>::set_frozen(bool frozen) {
  frozen_ = frozen;
  for (auto& e : entries_) {
    e.value.zero_grad();
    e.value.set_requires_grad(!frozen);
  }
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& e : entries_) e.value.zero_grad();
}

template <typename T>
template <typename U>
void ParamStore<T>::copy_from(const ParamStore<U>& other) {
  const auto& src = other.entries();
  if (src.size() != entries_.size()) throw ConfigError("copy_from: parameter count differs");
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].name != entries_[i].name || src[i].value.shape() != entries_[i].value.shape()) {
      throw ConfigError("copy_from: parameter " + entries_[i].name + " does not match " + src[i].name);
    }
    auto dst = entries_[i].value.mutable_data();
    const auto s = src[i].value.data();
    for (std::size_t k = 0; k < s.size(); ++k) dst[k] = static_cast<T>(s[k]);
  }
}

template <typename T>
Conv<T> Conv<T>::make(ParamStore<T>& store, const std::string& name, std::size_t c_in, std::size_t c_out,
                      std::size_t k, Philox& rng, Conv2dOptions options, bool with_bias, Init init) {
  if (c_in % options.groups != 0 || c_out % options.groups != 0) {
    throw ConfigError(name + ": channels not divisible by groups");
  }
  Conv c;
  c.options = options;
  c.weight = store.create(name + ".weight", {c_out, c_in / options.groups, k, k}, init, rng);
  if (with_bias) c.bias = store.create(name + ".bias", {c_out}, Init::kZeros, rng);
  return c;
}

template <typename T>
Linear<T> Linear<T>::make(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out, Philox& rng,
                          bool with_bias, Init init) {
  Linear l;
  l.weight = store.create(name + ".weight", {out, in}, init, rng);
  if (with_bias) l.bias = store.create(name + ".bias", {out}, Init::kZeros, rng);
  return l;
}

template <typename T>
ChannelNorm<T> ChannelNorm<T>::make(ParamStore<T>& store, const std::string& name, std::size_t channels, Philox& rng) {
  ChannelNorm n;
  n.gamma = store.create(name + ".gamma", {channels, 1, 1, 1}, Init::kOnes, rng);
  n.beta = store.create(name + ".beta", {channels}, Init::kZeros, rng);
  return n;
}

template <typename T>
Tensor<T> ChannelNorm<T>::operator()(const Tensor<T>& x) const {
  // Per-channel scale and shift as a 1x1 depthwise conv.
  return conv2d(layer_norm(x, 0), gamma, beta, {1, 0, x.dim(0)});
}

template class ParamStore<float>;
template class ParamStore<double>;
template void ParamStore<float>::copy_from(const ParamStore<double>&);
template void ParamStore<double>::copy_from(const ParamStore<float>&);
template void ParamStore<float>::copy_from(const ParamStore<float>&);
template void ParamStore<double>::copy_from(const ParamStore<double>&);
template struct Conv<float>;
template struct Conv<double>;
template struct Linear<float>;
template struct Linear<double>;
template struct ChannelNorm<float>;
template struct ChannelNorm<double>;

}  // namespace pptrn
