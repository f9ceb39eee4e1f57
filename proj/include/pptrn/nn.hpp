#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pptrn/errors.hpp"
#include "pptrn/ops.hpp"
#include "pptrn/rng.hpp"
#include "pptrn/tensor.hpp"

namespace pptrn {

enum class Init {
  kFanIn,  // uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); fan_in = product of all but the first extent
  kZeros,
  kOnes,
};

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> value;
};

// Ordered collection of named leaf tensors. Modules keep handles to the same
// nodes, so in-place updates through the store are seen by the modules.
template <typename T>
class ParamStore {
 public:
  explicit ParamStore(std::string prefix = {}) : prefix_(std::move(prefix)) {}

  // Values are drawn in double from `rng` and then cast, so float and double
  // stores built from the same seed hold the same (rounded) weights.
  Tensor<T> create(const std::string& name, Shape shape, Init init, Philox& rng);

  const std::vector<NamedParam<T>>& entries() const { return entries_; }
  std::vector<NamedParam<T>>& entries() { return entries_; }
  const Tensor<T>& get(const std::string& name) const;
  std::size_t count() const;
  const std::string& prefix() const { return prefix_; }

  // FNV-1a over names, shapes and raw value bytes.
  std::uint64_t hash() const;

  // Frozen parameters have requires_grad off, so no graph routes gradient to them.
  void set_frozen(bool frozen);
  bool is_frozen() const { return frozen_; }
  void zero_grad();

  // Copies values (with a cast) from another store with identical names and shapes.
  template <typename U>
  void copy_from(const ParamStore<U>& other);

 private:
  std::string prefix_;
  std::vector<NamedParam<T>> entries_;
  bool frozen_ = false;
};

template <typename T>
struct Conv {
  Tensor<T> weight;
  std::optional<Tensor<T>> bias;
  Conv2dOptions options;

  static Conv make(ParamStore<T>& store, const std::string& name, std::size_t c_in, std::size_t c_out, std::size_t k,
                   Philox& rng, Conv2dOptions options = {}, bool with_bias = true, Init init = Init::kFanIn);
  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, options); }
};

template <typename T>
struct Linear {
  Tensor<T> weight;
  std::optional<Tensor<T>> bias;

  static Linear make(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out, Philox& rng,
                     bool with_bias = true, Init init = Init::kFanIn);
  Tensor<T> operator()(const Tensor<T>& x) const { return affine(x, weight, bias); }
};

// Layer norm over the channel axis of [C x H x W] with per-channel scale and shift.
template <typename T>
struct ChannelNorm {
  Tensor<T> gamma, beta;

  static ChannelNorm make(ParamStore<T>& store, const std::string& name, std::size_t channels, Philox& rng);
  Tensor<T> operator()(const Tensor<T>& x) const;
};

}  // namespace pptrn
