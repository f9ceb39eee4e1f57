#include <doctest.h>

#include <chrono>

#include "model_helpers.hpp"
#include "pptrn/backbone.hpp"

using namespace pptrn;
using namespace pptrn::testing;

namespace {

BackboneConfig tiny(AttentionKind kind = AttentionKind::kPpda) {
  BackboneConfig c;
  c.d = 8;
  c.m = 2;
  c.d_z = 4;
  c.attention = kind;
  return c;
}

// Parameter count written out layer by layer, independent of the library's formula.
std::size_t count_by_hand(std::size_t cin, std::size_t d, std::size_t m, std::size_t dz, bool depthwise) {
  auto conv = [](std::size_t i, std::size_t o, std::size_t k, bool dw) { return o * (dw ? 1 : i) * k * k + o; };
  auto lin = [](std::size_t i, std::size_t o) { return i * o + o; };
  std::size_t n = 0;
  n += conv(cin, d, 3, false);
  for (std::size_t l = 0; l < 3; ++l) {
    const std::size_t w = d << l, h = 2 * w;
    n += lin(dz, dz);                                                    // adapter
    n += 2 * 2 * w;                                                      // norms
    n += lin(dz, m * w) * 3;                                             // prior Q, K, V
    n += 3 * (conv(w, w, 1, false) + conv(w, w, 3, depthwise));          // feature Q, K, V
    n += 3 * lin(w, w);                                                  // Q', K', V'
    n += conv(w, w, 1, false);                                           // attention output
    n += conv(w, 2 * h, 1, false) + conv(2 * h, 2 * h, 3, true) + conv(h, w, 1, false);  // ffn
    if (l < 2) n += conv(w, 2 * w, 1, false) + conv(2 * w, w, 1, false) + conv(2 * w, w, 1, false);
  }
  n += conv(d, cin, 3, false);
  return n;
}

}  // namespace

TEST_CASE("fresh backbone is an exact residual identity") {
  for (auto kind : {AttentionKind::kPpda, AttentionKind::kChannelSelf}) {
    Backbone<double> b(tiny(kind), 3);
    std::mt19937_64 rng(1);
    for (std::size_t size : {16, 32, 64}) {
      const auto x = random_tensor(rng, {1, size, size}, 0, 1, false);
      const auto y = b.restore(x, random_tensor(rng, {4}, -1, 1, false));
      REQUIRE(y.shape() == x.shape());
      CHECK(to_vec(y) == to_vec(x));
    }
  }
}

TEST_CASE("backbone preserves shape for rectangular and colour inputs") {
  auto c = tiny();
  c.in_channels = 3;
  Backbone<double> b(c, 4);
  std::mt19937_64 rng(2);
  randomize(b.params(), rng, 0.2);
  const auto x = random_tensor(rng, {3, 12, 20}, 0, 1, false);
  const auto y = b.restore(x, random_tensor(rng, {4}, -1, 1, false));
  CHECK(y.shape() == x.shape());
  for (double v : y.data()) CHECK(std::isfinite(v));
  CHECK_THROWS_AS(b.restore(random_tensor(rng, {3, 10, 12}, 0, 1, false), TensorD::zeros({4})), SizeError);
  CHECK_THROWS_AS(b.restore(random_tensor(rng, {1, 12, 12}, 0, 1, false), TensorD::zeros({4})), DimensionError);
}

TEST_CASE("parameter count matches an independent tally and grows with width") {
  for (bool dw : {true, false}) {
    BackboneConfig c;
    c.depthwise_qkv = dw;
    Backbone<float> b(c, 1);
    CHECK(b.count_parameters() == count_by_hand(1, 48, 16, 128, dw));
    CHECK(backbone_parameter_count(c) == b.count_parameters());
  }
  auto c = tiny();
  const std::size_t small = Backbone<float>(c, 1).count_parameters();
  CHECK(small == count_by_hand(1, 8, 2, 4, true));
  c.d = 16;
  CHECK(Backbone<float>(c, 1).count_parameters() > small);
  auto ablated = tiny(AttentionKind::kChannelSelf);
  CHECK(backbone_parameter_count(ablated) == Backbone<float>(ablated, 1).count_parameters());
}

TEST_CASE("output depends on the prior only when prior attention is used") {
  std::mt19937_64 rng(3);
  const auto x = random_tensor(rng, {1, 8, 8}, 0, 1, false);
  const auto z1 = random_tensor(rng, {4}, -1, 1, false), z2 = random_tensor(rng, {4}, -1, 1, false);
  Backbone<double> with(tiny(), 5);
  randomize(with.params(), rng, 0.3);
  CHECK(max_abs_diff(with.restore(x, z1).data(), to_vec(with.restore(x, z2))) > 1e-6);

  Backbone<double> without(tiny(AttentionKind::kChannelSelf), 5);
  randomize(without.params(), rng, 0.3);
  CHECK(to_vec(without.restore(x, z1)) == to_vec(without.restore(x, z2)));
  CHECK(to_vec(without.restore(x, TensorD())) == to_vec(without.restore(x, z1)));
}

TEST_CASE("backbone gradient matches finite differences at every level") {
  for (auto kind : {AttentionKind::kPpda, AttentionKind::kChannelSelf}) {
    Backbone<double> b(tiny(kind), 6);
    std::mt19937_64 rng(4);
    randomize(b.params(), rng, 0.3);
    auto x = random_tensor(rng, {1, 8, 8}, 0, 1);
    auto z = random_tensor(rng, {4});
    std::vector<TensorD> inputs{x, z};
    std::vector<std::string> levels_hit;
    for (auto& e : b.params().entries()) {
      if (e.value.size() > 300) continue;
      inputs.push_back(e.value);
      for (std::size_t l = 0; l < 3; ++l) {
        if (e.name.find("block" + std::to_string(l) + ".") != std::string::npos) levels_hit.push_back(e.name);
      }
    }
    for (std::size_t l = 0; l < 3; ++l) {
      const auto tag = "block" + std::to_string(l) + ".";
      CHECK(std::any_of(levels_hit.begin(), levels_hit.end(),
                        [&](const std::string& n) { return n.find(tag) != std::string::npos; }));
    }
    const auto r = grad_check(
        [&](const std::vector<TensorD>& in) { return b.restore(in[0], kind == AttentionKind::kPpda ? in[1] : TensorD()); },
        inputs, 1e-4);
    MESSAGE("backbone max rel err " << r.max_rel_err() << " over " << inputs.size() << " tensors");
    CHECK(r.max_rel_err() < 1e-3);
  }
}
