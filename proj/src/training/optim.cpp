#include "pptrn/optim.hpp"

#include <cmath>

namespace pptrn {

template <typename T>
AdamW<T>::AdamW(const AdamWConfig& config) : config_(config) {
  if (!(config.lr > 0.0)) throw ConfigError("AdamW: lr must be positive");
  if (!(config.beta1 >= 0.0 && config.beta1 < 1.0) || !(config.beta2 >= 0.0 && config.beta2 < 1.0)) {
    throw ConfigError("AdamW: betas must lie in [0, 1)");
  }
  if (!(config.eps > 0.0) || !(config.weight_decay >= 0.0)) throw ConfigError("AdamW: eps > 0 and weight_decay >= 0");
}

template <typename T>
void AdamW<T>::add(ParamStore<T>& store) {
  Group g{&store, {}};
  for (const auto& e : store.entries()) g.moments.push_back({std::vector<double>(e.value.size(), 0.0),
                                                             std::vector<double>(e.value.size(), 0.0), 0});
  groups_.push_back(std::move(g));
}

template <typename T>
void AdamW<T>::step() {
  const double lr = config_.lr * lr_scale_, b1 = config_.beta1, b2 = config_.beta2;
  for (auto& g : groups_) {
    auto& entries = g.store->entries();
    if (entries.size() != g.moments.size()) throw ContractViolation("AdamW: parameter store changed after add()");
    for (const auto& e : entries) {
      if (e.value.requires_grad() || !e.value.has_grad()) continue;
      for (T v : e.value.grad()) {
        if (v != T(0)) throw ContractViolation("AdamW: frozen parameter " + e.name + " received a gradient");
      }
    }
  }
  for (auto& g : groups_) {
    auto& entries = g.store->entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      auto& p = entries[i].value;
      if (!p.requires_grad() || !p.has_grad()) continue;
      auto& mo = g.moments[i];
      ++mo.count;
      const double c1 = 1.0 - std::pow(b1, double(mo.count));
      const double c2 = 1.0 - std::pow(b2, double(mo.count));
      const auto grad = p.grad();
      auto w = p.mutable_data();
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double gk = double(grad[k]);
        mo.m[k] = b1 * mo.m[k] + (1.0 - b1) * gk;
        mo.v[k] = b2 * mo.v[k] + (1.0 - b2) * gk * gk;
        double x = double(w[k]);
        x -= lr * config_.weight_decay * x;
        x -= lr * (mo.m[k] / c1) / (std::sqrt(mo.v[k] / c2) + config_.eps);
        w[k] = static_cast<T>(x);
      }
    }
    g.store->zero_grad();
  }
  ++steps_;
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace pptrn
