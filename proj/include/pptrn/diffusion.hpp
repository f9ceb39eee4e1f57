#pragma once

#include <optional>
#include <vector>

#include "pptrn/nn.hpp"

namespace pptrn {

// Index 0 is the clean endpoint (alpha_bar = 1, beta = 0); steps run 1..T.
struct Schedule {
  std::size_t T = 0;
  std::vector<double> beta, alpha, alpha_bar, sigma;
  // Model timestep evaluated at each step; identity unless respaced.
  std::vector<std::size_t> model_t;

  void check_step(std::size_t t, const char* op) const;
};

inline constexpr double kCosineOffset = 0.008;
inline constexpr double kBetaMin = 1e-8;
inline constexpr double kBetaMax = 0.999;

// f(t) = cos^2(((t/T + s)/(1 + s)) pi/2); beta_t = 1 - f(t)/f(t-1), clipped to
// [1e-8, 0.999]; alpha_bar is then the running product of (1 - beta).
Schedule cosine_schedule(std::size_t T);

// `steps` timesteps evenly spaced over 1..T (always including T), with betas
// recomputed from alpha_bar at the kept steps.
Schedule respace(const Schedule& schedule, std::size_t steps);

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps. t = 0 returns z0.
template <typename T>
Tensor<T> forward_marginal(const Schedule& s, const Tensor<T>& z0, std::size_t t, const Tensor<T>& eps);

// One forward transition z_t = sqrt(alpha_t) z_{t-1} + sqrt(beta_t) eps.
template <typename T>
Tensor<T> forward_step(const Schedule& s, const Tensor<T>& z_prev, std::size_t t, const Tensor<T>& eps);

// (1/sqrt(alpha_t)) (z_t - beta_t / sqrt(1 - abar_t) eps_pred) + sigma_t noise;
// the noise term is dropped at t = 1.
template <typename T>
Tensor<T> reverse_step(const Schedule& s, const Tensor<T>& z_t, std::size_t t, const Tensor<T>& eps_pred,
                       const Tensor<T>& noise);

// (z_t - sqrt(1 - abar_t) eps_pred) / sqrt(abar_t)
template <typename T>
Tensor<T> predict_z0(const Schedule& s, const Tensor<T>& z_t, std::size_t t, const Tensor<T>& eps_pred);

// Sinusoidal embedding of a timestep: [sin(t w_0..w_{n/2-1}), cos(t w_0..)], w_i = 10000^(-i/(n/2)).
std::vector<double> time_embedding(double t, std::size_t dim);

struct EstimatorConfig {
  std::size_t d_z = 128;
  std::size_t time_dim = 64;
  std::size_t hidden = 256;
  std::size_t layers = 3;
  // When nonzero, a cosine schedule of this length supplies a skip term
  // sqrt(1 - abar_t) (z_t - sqrt(abar_t) c) added to the MLP output. That term
  // alone is the exact noise predictor for z0 ~ N(c, I); the MLP learns the rest.
  std::size_t skip_steps = 0;
};

// eps_theta(z_t, t, c): MLP over [z_t | emb(t) | c], plus the optional skip term.
template <typename T>
class NoiseEstimator {
 public:
  NoiseEstimator(const EstimatorConfig& config, std::uint64_t seed);

  // z_t and c are [d_z] or [B x d_z]; `t` holds one timestep per row.
  Tensor<T> operator()(const Tensor<T>& z_t, const std::vector<std::size_t>& t, const Tensor<T>& c) const;
  Tensor<T> operator()(const Tensor<T>& z_t, std::size_t t, const Tensor<T>& c) const {
    return (*this)(z_t, std::vector<std::size_t>{t}, c);
  }

  // Sampling refuses to run until this is set (by training or checkpoint load).
  bool trained() const { return trained_; }
  void set_trained(bool v) { trained_ = v; }

  const EstimatorConfig& config() const { return config_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }

 private:
  EstimatorConfig config_;
  ParamStore<T> store_{"estimator"};
  std::vector<Linear<T>> layers_;
  std::vector<double> skip_alpha_bar_;  // abar_t for t = 0..skip_steps
  bool trained_ = false;
};

// ||eps - eps_theta(z_t, t, c)||^2 / d_z, averaged over rows when batched.
template <typename T>
Tensor<T> diffusion_loss(const Schedule& s, const NoiseEstimator<T>& estimator, const Tensor<T>& z0,
                         const std::vector<std::size_t>& t, const Tensor<T>& eps, const Tensor<T>& c);

// Same loss with a supplied prediction, for checking the objective itself.
template <typename T>
Tensor<T> eps_mse(const Tensor<T>& eps, const Tensor<T>& eps_pred);

// Reverse chain from z_T ~ N(0, I) over `steps` respaced steps. Noise comes
// from Philox(seed, 0): z_T first, then one draw per step. With `clip_z0`,
// each step's implied z0 estimate is clamped to [-clip, clip] and the noise
// prediction re-derived from it before reverse_step.
template <typename T>
Tensor<T> sample_prior(const Schedule& s, const NoiseEstimator<T>& estimator, const Tensor<T>& c, std::size_t steps,
                       std::uint64_t seed, std::optional<double> clip_z0 = std::nullopt);

}  // namespace pptrn
