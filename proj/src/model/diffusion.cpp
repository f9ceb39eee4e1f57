#include "pptrn/diffusion.hpp"

#include <cmath>

namespace pptrn {

void Schedule::check_step(std::size_t t, const char* op) const {
  if (t > T) throw ConfigError(std::string(op) + ": timestep " + std::to_string(t) + " outside [0, " +
                               std::to_string(T) + "]");
}

Schedule cosine_schedule(std::size_t T) {
  if (T < 2) throw ConfigError("cosine_schedule: T must be >= 2");
  auto f = [T](double t) {
    const double c = std::cos((t / double(T) + kCosineOffset) / (1 + kCosineOffset) * M_PI / 2);
    return c * c;
  };
  Schedule s;
  s.T = T;
  s.beta.assign(T + 1, 0.0);
  s.alpha.assign(T + 1, 1.0);
  s.alpha_bar.assign(T + 1, 1.0);
  s.sigma.assign(T + 1, 0.0);
  s.model_t.resize(T + 1);
  for (std::size_t t = 0; t <= T; ++t) s.model_t[t] = t;
  for (std::size_t t = 1; t <= T; ++t) {
    const double b = 1.0 - f(double(t)) / f(double(t - 1));
    s.beta[t] = std::clamp(b, kBetaMin, kBetaMax);
    s.alpha[t] = 1.0 - s.beta[t];
    s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
    s.sigma[t] = std::sqrt(s.beta[t]);
  }
  return s;
}

Schedule respace(const Schedule& base, std::size_t steps) {
  if (steps == 0 || steps > base.T) {
    throw ConfigError("respace: steps must be in [1, " + std::to_string(base.T) + "], got " + std::to_string(steps));
  }
  Schedule s;
  s.T = steps;
  s.beta.assign(steps + 1, 0.0);
  s.alpha.assign(steps + 1, 1.0);
  s.alpha_bar.assign(steps + 1, 1.0);
  s.sigma.assign(steps + 1, 0.0);
  s.model_t.assign(steps + 1, 0);
  for (std::size_t i = 1; i <= steps; ++i) {
    // Evenly spaced, rounded, ending exactly at T.
    const auto t = std::size_t(std::llround(double(i) * double(base.T) / double(steps)));
    s.model_t[i] = base.model_t[t];
    s.alpha_bar[i] = base.alpha_bar[t];
    s.alpha[i] = s.alpha_bar[i] / s.alpha_bar[i - 1];
    s.beta[i] = 1.0 - s.alpha[i];
    s.sigma[i] = std::sqrt(s.beta[i]);
  }
  return s;
}

template <typename T>
Tensor<T> forward_marginal(const Schedule& s, const Tensor<T>& z0, std::size_t t, const Tensor<T>& eps) {
  s.check_step(t, "forward_marginal");
  if (z0.shape() != eps.shape()) {
    throw DimensionError("forward_marginal: z0 " + shape_str(z0.shape()) + " vs eps " + shape_str(eps.shape()));
  }
  if (t == 0) return z0;
  const double ab = s.alpha_bar[t];
  return add(scale(z0, T(std::sqrt(ab))), scale(eps, T(std::sqrt(1.0 - ab))));
}

template <typename T>
Tensor<T> forward_step(const Schedule& s, const Tensor<T>& z_prev, std::size_t t, const Tensor<T>& eps) {
  s.check_step(t, "forward_step");
  if (t == 0) throw ConfigError("forward_step: t must be >= 1");
  return add(scale(z_prev, T(std::sqrt(s.alpha[t]))), scale(eps, T(std::sqrt(s.beta[t]))));
}

template <typename T>
Tensor<T> reverse_step(const Schedule& s, const Tensor<T>& z_t, std::size_t t, const Tensor<T>& eps_pred,
                       const Tensor<T>& noise) {
  s.check_step(t, "reverse_step");
  if (t == 0) throw ConfigError("reverse_step: t must be >= 1");
  const double inv = 1.0 / std::sqrt(s.alpha[t]);
  const double coef = s.beta[t] / std::sqrt(1.0 - s.alpha_bar[t]);
  Tensor<T> mean_part = scale(sub(z_t, scale(eps_pred, T(coef))), T(inv));
  if (t == 1) return mean_part;
  return add(mean_part, scale(noise, T(s.sigma[t])));
}

template <typename T>
Tensor<T> predict_z0(const Schedule& s, const Tensor<T>& z_t, std::size_t t, const Tensor<T>& eps_pred) {
  s.check_step(t, "predict_z0");
  const double ab = s.alpha_bar[t];
  return scale(sub(z_t, scale(eps_pred, T(std::sqrt(1.0 - ab)))), T(1.0 / std::sqrt(ab)));
}

std::vector<double> time_embedding(double t, std::size_t dim) {
  if (dim < 2 || dim % 2 != 0) throw ConfigError("time_embedding: dim must be even and >= 2");
  const std::size_t half = dim / 2;
  std::vector<double> e(dim);
  for (std::size_t i = 0; i < half; ++i) {
    const double w = std::exp(-std::log(10000.0) * double(i) / double(half));
    e[i] = std::sin(t * w);
    e[half + i] = std::cos(t * w);
  }
  return e;
}

template <typename T>
NoiseEstimator<T>::NoiseEstimator(const EstimatorConfig& config, std::uint64_t seed) : config_(config) {
  if (config.layers == 0 || config.hidden == 0 || config.d_z == 0) throw ConfigError("estimator: empty config");
  Philox rng(seed, 0);
  std::size_t in = 2 * config.d_z + config.time_dim;
  for (std::size_t i = 0; i < config.layers; ++i) {
    layers_.push_back(Linear<T>::make(store_, "fc" + std::to_string(i), in, config.hidden, rng));
    in = config.hidden;
  }
  // With the skip term a zero output layer starts the model at the Gaussian predictor.
  const Init out_init = config.skip_steps > 0 ? Init::kZeros : Init::kFanIn;
  layers_.push_back(Linear<T>::make(store_, "out", in, config.d_z, rng, true, out_init));
  if (config.skip_steps > 0) {
    skip_alpha_bar_ = cosine_schedule(config.skip_steps).alpha_bar;
  }
}

template <typename T>
Tensor<T> NoiseEstimator<T>::operator()(const Tensor<T>& z_t, const std::vector<std::size_t>& t,
                                        const Tensor<T>& c) const {
  const bool single = z_t.rank() == 1;
  const std::size_t rows = single ? 1 : z_t.dim(0);
  const Shape row_shape{rows, config_.d_z};
  if (z_t.shape().back() != config_.d_z || z_t.size() != rows * config_.d_z) {
    throw DimensionError("estimator: z_t " + shape_str(z_t.shape()) + " for d_z " + std::to_string(config_.d_z));
  }
  if (c.size() != rows * config_.d_z) {
    throw DimensionError("estimator: condition " + shape_str(c.shape()) + " for z_t " + shape_str(z_t.shape()));
  }
  if (t.size() != rows) throw DimensionError("estimator: " + std::to_string(t.size()) + " timesteps for " +
                                             std::to_string(rows) + " rows");
  std::vector<T> emb(rows * config_.time_dim);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto e = time_embedding(double(t[r]), config_.time_dim);
    for (std::size_t i = 0; i < e.size(); ++i) emb[r * config_.time_dim + i] = static_cast<T>(e[i]);
  }
  const auto emb_t = Tensor<T>::from_data({rows, config_.time_dim}, std::move(emb));
  Tensor<T> h = concat<T>({reshape(z_t, row_shape), emb_t, reshape(c, row_shape)}, 1);
  for (std::size_t i = 0; i + 1 < layers_.size(); ++i) h = gelu(layers_[i](h));
  h = layers_.back()(h);
  if (!skip_alpha_bar_.empty()) {
    std::vector<T> coef_z(rows), coef_c(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      if (t[r] >= skip_alpha_bar_.size()) {
        throw ConfigError("estimator: timestep " + std::to_string(t[r]) + " beyond skip schedule of " +
                          std::to_string(config_.skip_steps));
      }
      const double ab = skip_alpha_bar_[t[r]];
      coef_z[r] = static_cast<T>(std::sqrt(1.0 - ab));
      coef_c[r] = static_cast<T>(-std::sqrt((1.0 - ab) * ab));
    }
    h = add(h, mul(reshape(z_t, row_shape), Tensor<T>::from_data({rows, 1}, std::move(coef_z))));
    h = add(h, mul(reshape(c, row_shape), Tensor<T>::from_data({rows, 1}, std::move(coef_c))));
  }
  return single ? reshape(h, {config_.d_z}) : h;
}

template <typename T>
Tensor<T> eps_mse(const Tensor<T>& eps, const Tensor<T>& eps_pred) {
  const std::size_t d = eps.shape().back();
  const std::size_t rows = eps.size() / d;
  return scale(sum(square(sub(eps, eps_pred))), T(1.0 / double(d * rows)));
}

template <typename T>
Tensor<T> diffusion_loss(const Schedule& s, const NoiseEstimator<T>& estimator, const Tensor<T>& z0,
                         const std::vector<std::size_t>& t, const Tensor<T>& eps, const Tensor<T>& c) {
  if (z0.shape() != eps.shape()) {
    throw DimensionError("diffusion_loss: z0 " + shape_str(z0.shape()) + " vs eps " + shape_str(eps.shape()));
  }
  const std::size_t d = z0.shape().back();
  const std::size_t rows = z0.size() / d;
  if (t.size() != rows) throw DimensionError("diffusion_loss: one timestep per row required");
  std::vector<Tensor<T>> parts;
  for (std::size_t r = 0; r < rows; ++r) {
    const auto z0_r = rows == 1 && z0.rank() == 1 ? z0 : reshape(slice(z0, 0, r, r + 1), {d});
    const auto eps_r = rows == 1 && eps.rank() == 1 ? eps : reshape(slice(eps, 0, r, r + 1), {d});
    parts.push_back(reshape(forward_marginal(s, z0_r, t[r], eps_r), {1, d}));
  }
  const auto z_t = rows == 1 ? parts.front() : concat(parts, 0);
  const auto pred = estimator(z_t, t, reshape(c, {rows, d}));
  return eps_mse(reshape(eps, {rows, d}), pred);
}

template <typename T>
Tensor<T> sample_prior(const Schedule& s, const NoiseEstimator<T>& estimator, const Tensor<T>& c, std::size_t steps,
                       std::uint64_t seed, std::optional<double> clip_z0) {
  if (!estimator.trained()) throw ContractViolation("sample_prior: estimator has not been trained");
  const Schedule r = steps == s.T ? s : respace(s, steps);
  const std::size_t d = estimator.config().d_z;
  NoGradGuard no_grad;
  Philox rng(seed, 0);
  auto draw = [&] {
    std::vector<T> v(d);
    for (T& x : v) x = static_cast<T>(rng.normal());
    return Tensor<T>::from_data({d}, std::move(v));
  };
  Tensor<T> z = draw();
  const auto cond = reshape(c, {d});
  for (std::size_t i = r.T; i >= 1; --i) {
    auto eps_pred = estimator(z, r.model_t[i], cond);
    if (clip_z0) {
      const T bound = static_cast<T>(*clip_z0);
      const auto z0_hat = clamp(predict_z0(r, z, i, eps_pred), -bound, bound);
      const double ab = r.alpha_bar[i];
      eps_pred = scale(sub(z, scale(z0_hat, T(std::sqrt(ab)))), T(1.0 / std::sqrt(1.0 - ab)));
    }
    const auto noise = i > 1 ? draw() : Tensor<T>::zeros({d});
    z = reverse_step(r, z, i, eps_pred, noise);
  }
  return z;
}

#define PPTRN_INSTANTIATE_DIFFUSION(T)                                                                          \
  template Tensor<T> forward_marginal(const Schedule&, const Tensor<T>&, std::size_t, const Tensor<T>&);        \
  template Tensor<T> forward_step(const Schedule&, const Tensor<T>&, std::size_t, const Tensor<T>&);            \
  template Tensor<T> reverse_step(const Schedule&, const Tensor<T>&, std::size_t, const Tensor<T>&,             \
                                  const Tensor<T>&);                                                            \
  template Tensor<T> predict_z0(const Schedule&, const Tensor<T>&, std::size_t, const Tensor<T>&);              \
  template class NoiseEstimator<T>;                                                                             \
  template Tensor<T> eps_mse(const Tensor<T>&, const Tensor<T>&);                                               \
  template Tensor<T> diffusion_loss(const Schedule&, const NoiseEstimator<T>&, const Tensor<T>&,                \
                                    const std::vector<std::size_t>&, const Tensor<T>&, const Tensor<T>&);       \
  template Tensor<T> sample_prior(const Schedule&, const NoiseEstimator<T>&, const Tensor<T>&, std::size_t,     \
                                  std::uint64_t, std::optional<double>);

PPTRN_INSTANTIATE_DIFFUSION(float)
PPTRN_INSTANTIATE_DIFFUSION(double)

}  // namespace pptrn
