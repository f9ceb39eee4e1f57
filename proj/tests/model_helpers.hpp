#pragma once

// Shared fixtures for model tests: weight overwrites and tensor builders.

#include <random>

#include "gradcheck.hpp"
#include "pptrn/nn.hpp"

namespace pptrn::testing {

inline void fill(Tensor<double>& t, double v) {
  for (double& x : t.mutable_data()) x = v;
}

inline void fill_random(Tensor<double>& t, std::mt19937_64& rng, double lo = -0.5, double hi = 0.5) {
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& x : t.mutable_data()) x = dist(rng);
}

inline void randomize(ParamStore<double>& store, std::mt19937_64& rng, double amplitude = 0.5) {
  for (auto& e : store.entries()) fill_random(e.value, rng, -amplitude, amplitude);
}

inline std::vector<double> to_vec(const Tensor<double>& t) { return {t.data().begin(), t.data().end()}; }

// Leaf tensors of a store, for passing to grad_check.
inline std::vector<TensorD> leaves(ParamStore<double>& store) {
  std::vector<TensorD> out;
  for (auto& e : store.entries()) out.push_back(e.value);
  return out;
}

}  // namespace pptrn::testing
