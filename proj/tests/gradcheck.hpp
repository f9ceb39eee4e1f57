#pragma once

// Test-only oracles: central finite differences and seeded fillers. Nothing
// here calls into the backward path except to read the analytic gradient.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "pptrn/ops.hpp"
#include "pptrn/tensor.hpp"

namespace pptrn::testing {

using TensorD = Tensor<double>;

inline TensorD random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0,
                             bool requires_grad = true) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return TensorD::from_data(std::move(shape), std::move(v), requires_grad);
}

struct GradCheckResult {
  // Norm-wise relative error ||analytic - numeric|| / max(||analytic||, ||numeric||), per input.
  std::vector<double> rel_err;
  double max_rel_err() const {
    double m = 0;
    for (double e : rel_err) m = std::max(m, e);
    return m;
  }
};

inline double norm_rel_err(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  // Below the floor both sides are central-difference roundoff (e.g. a bias a
  // softmax is invariant to), so the absolute difference is reported instead.
  constexpr double kFloor = 1e-6;
  const double scale = std::sqrt(std::max(na, nb));
  if (scale < kFloor) return std::sqrt(diff);
  return std::sqrt(diff) / scale;
}

// Reduces f's output to a scalar through fixed random weights, then compares
// backward() against central differences with step h on every input element.
inline GradCheckResult grad_check(const std::function<TensorD(const std::vector<TensorD>&)>& f,
                                  std::vector<TensorD> inputs, double h = 1e-5, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  TensorD probe;
  auto scalar_loss = [&](const std::vector<TensorD>& in) {
    TensorD out = f(in);
    if (!probe.defined()) probe = random_tensor(rng, out.shape(), -1.0, 1.0, false);
    return sum(mul(out, probe));
  };

  for (auto& t : inputs) t.zero_grad();
  TensorD loss = scalar_loss(inputs);
  loss.backward();

  GradCheckResult result;
  for (auto& t : inputs) {
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    if (analytic.empty()) analytic.assign(t.size(), 0.0);
    std::vector<double> numeric(t.size());
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double saved = data[i];
      double plus, minus;
      {
        NoGradGuard ng;
        data[i] = saved + h;
        plus = scalar_loss(inputs).item();
        data[i] = saved - h;
        minus = scalar_loss(inputs).item();
      }
      data[i] = saved;
      numeric[i] = (plus - minus) / (2 * h);
    }
    result.rel_err.push_back(norm_rel_err(analytic, numeric));
  }
  return result;
}

// Triple-loop product of row-major matrices.
inline std::vector<double> loop_matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t m,
                                       std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
  return c;
}

// Naive cross-correlation, zero padding, ungrouped or grouped.
inline std::vector<double> loop_conv2d(const std::vector<double>& x, std::size_t cin, std::size_t h, std::size_t w,
                                       const std::vector<double>& wt, std::size_t cout, std::size_t k,
                                       std::size_t stride, std::size_t pad, std::size_t groups,
                                       std::size_t& oh, std::size_t& ow) {
  oh = (h + 2 * pad - k) / stride + 1;
  ow = (w + 2 * pad - k) / stride + 1;
  const std::size_t cg_in = cin / groups, cg_out = cout / groups;
  std::vector<double> out(cout * oh * ow, 0.0);
  for (std::size_t o = 0; o < cout; ++o) {
    const std::size_t g = o / cg_out;
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        double acc = 0;
        for (std::size_t ci = 0; ci < cg_in; ++ci)
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long iy = long(y * stride + ky) - long(pad);
              const long ix = long(xx * stride + kx) - long(pad);
              if (iy < 0 || ix < 0 || iy >= long(h) || ix >= long(w)) continue;
              acc += wt[((o * cg_in + ci) * k + ky) * k + kx] * x[((g * cg_in + ci) * h + iy) * w + ix];
            }
        out[(o * oh + y) * ow + xx] = acc;
      }
  }
  return out;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace pptrn::testing
