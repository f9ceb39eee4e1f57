#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "model_helpers.hpp"
#include "pptrn/ppda.hpp"

using namespace pptrn;
using namespace pptrn::testing;

namespace {

struct Fixture {
  PpdaConfig config;
  ParamStore<double> store{"t"};
  Philox rng{5};
  Ppda<double> ppda;

  explicit Fixture(PpdaConfig c) : config(c), ppda(c, store, "ppda", rng) {}
};

PpdaConfig small(std::size_t d = 8, std::size_t m = 4, std::size_t d_z = 6, bool depthwise = true) {
  PpdaConfig c;
  c.d = d;
  c.m = m;
  c.d_z = d_z;
  c.depthwise_qkv = depthwise;
  return c;
}

void check_row_stochastic(const TensorD& a, double tol) {
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      REQUIRE(a.at({r, c}) >= 0.0);
      s += a.at({r, c});
    }
    REQUIRE(std::abs(s - 1.0) < tol);
  }
}

// Kernel that is the identity under a grouped 3x3 conv: only the centre tap set.
void delta_kernel(TensorD& w, double centre = 1.0) {
  fill(w, 0.0);
  auto d = w.mutable_data();
  const std::size_t per = 9;
  for (std::size_t o = 0; o < w.dim(0); ++o) {
    for (std::size_t i = 0; i < w.dim(1); ++i) d[(o * w.dim(1) + i) * per + 4] = (o == i || w.dim(1) == 1) ? centre : 0.0;
  }
}

void identity_pointwise(TensorD& w) {
  fill(w, 0.0);
  auto d = w.mutable_data();
  for (std::size_t o = 0; o < w.dim(0); ++o) d[o * w.dim(1) + o] = 1.0;
}

}  // namespace

TEST_CASE("prior projection: zero map, shapes and affine oracle") {
  Fixture f(small());
  std::mt19937_64 rng(1);
  const auto z = random_tensor(rng, {6}, -1, 1, false);
  TensorD q, k, v;
  f.ppda.project_prior(z, q, k, v);
  CHECK(q.shape() == Shape{4, 8});
  CHECK(k.shape() == Shape{4, 8});
  CHECK(v.shape() == Shape{4, 8});

  randomize(f.store, rng);
  f.ppda.project_prior(z, q, k, v);
  const auto W = to_vec(f.ppda.wq_z.weight), b = to_vec(*f.ppda.wq_z.bias), zv = to_vec(z);
  std::vector<double> oracle(32);
  for (std::size_t o = 0; o < 32; ++o) {
    double acc = b[o];
    for (std::size_t i = 0; i < 6; ++i) acc += W[o * 6 + i] * zv[i];
    oracle[o] = acc;
  }
  CHECK(max_abs_diff(q.data(), oracle) < 1e-12);

  for (Linear<double>* l : {&f.ppda.wq_z, &f.ppda.wk_z, &f.ppda.wv_z}) {
    fill(l->weight, 0.0);
    fill(*l->bias, 0.0);
  }
  f.ppda.project_prior(z, q, k, v);
  for (const auto* t : {&q, &k, &v})
    for (double x : t->data()) CHECK(x == 0.0);
}

TEST_CASE("feature projection: identity kernels, token count and conv oracle") {
  for (bool depthwise : {true, false}) {
    Fixture f(small(8, 4, 6, depthwise));
    std::mt19937_64 rng(2);
    const auto x = random_tensor(rng, {8, 3, 5}, -1, 1, false);
    identity_pointwise(f.ppda.q_point.weight);
    delta_kernel(f.ppda.q_spatial.weight);
    TensorD q, k, v;
    f.ppda.project_features(x, q, k, v);
    CHECK(q.shape() == Shape{8, 15});
    CHECK(transpose(q).dim(0) == 15);
    CHECK(max_abs_diff(q.data(), x.data()) == 0.0);

    randomize(f.store, rng);
    f.ppda.project_features(x, q, k, v);
    std::size_t oh, ow;
    const auto mid = loop_conv2d(to_vec(x), 8, 3, 5, to_vec(f.ppda.k_point.weight), 8, 1, 1, 0, 1, oh, ow);
    std::vector<double> mid_b = mid;
    const auto b1 = to_vec(*f.ppda.k_point.bias);
    for (std::size_t c = 0; c < 8; ++c)
      for (std::size_t p = 0; p < 15; ++p) mid_b[c * 15 + p] += b1[c];
    auto out = loop_conv2d(mid_b, 8, 3, 5, to_vec(f.ppda.k_spatial.weight), 8, 3, 1, 1, depthwise ? 8 : 1, oh, ow);
    const auto b2 = to_vec(*f.ppda.k_spatial.bias);
    for (std::size_t c = 0; c < 8; ++c)
      for (std::size_t p = 0; p < 15; ++p) out[c * 15 + p] += b2[c];
    CHECK(max_abs_diff(k.data(), out) < 1e-12);
  }
  Fixture f(small());
  TensorD q, k, v;
  CHECK_THROWS_AS(f.ppda.project_features(TensorD::zeros({7, 4, 4}), q, k, v), DimensionError);
}

TEST_CASE("zero query/key weights give uniform attention and a V-averaging output") {
  Fixture f(small(8, 4, 6));
  std::mt19937_64 rng(3);
  randomize(f.store, rng);
  for (Linear<double>* l : {&f.ppda.wq_z, &f.ppda.wk_z, &f.ppda.wq_prime, &f.ppda.wk_prime}) {
    fill(l->weight, 0.0);
    fill(*l->bias, 0.0);
  }
  for (Conv<double>* c : {&f.ppda.q_point, &f.ppda.k_point}) {
    fill(c->weight, 0.0);
    fill(*c->bias, 0.0);
  }
  const auto x = random_tensor(rng, {8, 4, 4}, -1, 1, false);
  const auto z = random_tensor(rng, {6}, -1, 1, false);
  PpdaTrace<double> tr;
  const auto y = f.ppda.forward(x, z, &tr);
  for (const auto* a : {&tr.a_prior, &tr.a_feature, &tr.a_transposed}) {
    const double u = 1.0 / double(a->dim(1));
    for (double v : a->data()) CHECK(v == doctest::Approx(u).epsilon(1e-14));
  }
  // Hand-built oracle: V_Z averaged over tokens -> V' (identical rows) ->
  // channel average -> constant map -> output 1x1 conv -> residual.
  const auto Wv = to_vec(f.ppda.wv_z.weight), bv = to_vec(*f.ppda.wv_z.bias), zv = to_vec(z);
  std::vector<double> vz_mean(8, 0.0);
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t j = 0; j < 8; ++j) {
      double acc = bv[t * 8 + j];
      for (std::size_t i = 0; i < 6; ++i) acc += Wv[(t * 8 + j) * 6 + i] * zv[i];
      vz_mean[j] += acc / 4.0;
    }
  const auto Wp = to_vec(f.ppda.wv_prime.weight), bp = to_vec(*f.ppda.wv_prime.bias);
  double fused = 0;
  for (std::size_t j = 0; j < 8; ++j) {
    double acc = bp[j];
    for (std::size_t i = 0; i < 8; ++i) acc += Wp[j * 8 + i] * vz_mean[i];
    fused += acc / 8.0;
  }
  const auto Wo = to_vec(f.ppda.out.weight), bo = to_vec(*f.ppda.out.bias), xv = to_vec(x);
  double worst = 0;
  for (std::size_t c = 0; c < 8; ++c) {
    double rowsum = 0;
    for (std::size_t i = 0; i < 8; ++i) rowsum += Wo[c * 8 + i];
    for (std::size_t p = 0; p < 16; ++p) {
      const double expect = xv[c * 16 + p] + bo[c] + rowsum * fused;
      worst = std::max(worst, std::abs(y.data()[c * 16 + p] - expect));
    }
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("zero output conv makes the block an exact identity") {
  Fixture f(small());
  std::mt19937_64 rng(4);
  randomize(f.store, rng);
  fill(f.ppda.out.weight, 0.0);
  fill(*f.ppda.out.bias, 0.0);
  const auto x = random_tensor(rng, {8, 4, 6}, -1, 1, false);
  const auto y = f.ppda.forward(x, random_tensor(rng, {6}, -1, 1, false));
  CHECK(y.shape() == x.shape());
  CHECK(to_vec(y) == to_vec(x));
}

TEST_CASE("attention matrices are row-stochastic and shapes are preserved across random configurations") {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::size_t> dd(4, 12), mm(1, 6), hw(1, 6), dz(1, 10);
  for (int trial = 0; trial < 100; ++trial) {
    PpdaConfig c = small(dd(rng), mm(rng), dz(rng), trial % 2 == 0);
    if (trial % 3 == 0) c.d_k = dd(rng);
    Fixture f(c);
    randomize(f.store, rng, 1.0);
    const std::size_t h = hw(rng), w = hw(rng);
    const double mag = trial % 5 == 0 ? 50.0 : 2.0;
    const auto x = random_tensor(rng, {c.d, h, w}, -mag, mag, false);
    const auto z = random_tensor(rng, {c.d_z}, -mag, mag, false);
    PpdaTrace<double> tr;
    const auto y = f.ppda.forward(x, z, &tr);
    REQUIRE(y.shape() == x.shape());
    REQUIRE(tr.a_prior.shape() == Shape{c.m, h * w});
    REQUIRE(tr.a_feature.shape() == Shape{h * w, c.m});
    REQUIRE(tr.a_transposed.shape() == Shape{c.d, c.d});
    check_row_stochastic(tr.a_prior, 1e-6);
    check_row_stochastic(tr.a_feature, 1e-6);
    check_row_stochastic(tr.a_transposed, 1e-6);
  }
}

TEST_CASE("permuting spatial tokens permutes V' rows") {
  Fixture f(small(8, 3, 5));
  std::mt19937_64 rng(6);
  randomize(f.store, rng);
  for (Conv<double>* c : {&f.ppda.q_spatial, &f.ppda.k_spatial, &f.ppda.v_spatial}) {
    // 1x1 restriction of the 3x3 stage: keep a random centre tap per channel.
    auto d = c->weight.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (i % 9 != 4) d[i] = 0.0;
    }
  }
  const std::size_t h = 3, w = 4, n = h * w;
  const auto x = random_tensor(rng, {8, h, w}, -1, 1, false);
  const auto z = random_tensor(rng, {5}, -1, 1, false);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<double> xp(x.size());
  for (std::size_t c = 0; c < 8; ++c)
    for (std::size_t p = 0; p < n; ++p) xp[c * n + p] = x.data()[c * n + perm[p]];
  PpdaTrace<double> a, b;
  f.ppda.forward(x, z, &a);
  f.ppda.forward(TensorD::from_data({8, h, w}, xp), z, &b);
  double worst = 0;
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t j = 0; j < 8; ++j) worst = std::max(worst, std::abs(b.v_prime.at({p, j}) - a.v_prime.at({perm[p], j})));
  CHECK(worst < 1e-12);
}

TEST_CASE("large-magnitude inputs stay finite") {
  Fixture f(small());
  std::mt19937_64 rng(7);
  randomize(f.store, rng);
  const auto x = random_tensor(rng, {8, 4, 4}, -1e3, 1e3, false);
  const auto z = random_tensor(rng, {6}, -1e3, 1e3, false);
  const auto y = f.ppda.forward(x, z);
  for (double v : y.data()) REQUIRE(std::isfinite(v));
}

TEST_CASE("full block gradient matches finite differences") {
  for (bool depthwise : {true, false}) {
    Fixture f(small(8, 4, 6, depthwise));
    std::mt19937_64 rng(8);
    randomize(f.store, rng);
    auto x = random_tensor(rng, {8, 4, 4});
    auto z = random_tensor(rng, {6});
    std::vector<TensorD> inputs{x, z};
    for (auto& p : leaves(f.store)) inputs.push_back(p);
    const auto r = grad_check([&](const std::vector<TensorD>& in) { return f.ppda.forward(in[0], in[1]); }, inputs);
    MESSAGE("ppda max rel err " << r.max_rel_err());
    CHECK(r.max_rel_err() < 1e-4);
  }
}
