#pragma once

#include <vector>

#include "pptrn/nn.hpp"

namespace pptrn {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Adam with decoupled weight decay. Parameters that received no gradient
// since the last step are left untouched (including decay). A frozen
// parameter holding a nonzero gradient raises ContractViolation.
template <typename T>
class AdamW {
 public:
  explicit AdamW(const AdamWConfig& config);

  void add(ParamStore<T>& store);
  // Updates every trainable parameter with a gradient, then clears all gradients.
  void step();
  std::size_t steps() const { return steps_; }
  // Multiplier on the configured lr for subsequent steps (schedules).
  void set_lr_scale(double scale) { lr_scale_ = scale; }
  const AdamWConfig& config() const { return config_; }

 private:
  struct Moments {
    std::vector<double> m, v;
    std::size_t count = 0;
  };
  struct Group {
    ParamStore<T>* store;
    std::vector<Moments> moments;
  };
  AdamWConfig config_;
  std::vector<Group> groups_;
  std::size_t steps_ = 0;
  double lr_scale_ = 1.0;
};

}  // namespace pptrn
