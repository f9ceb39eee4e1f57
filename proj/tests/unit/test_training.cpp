#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "model_helpers.hpp"
#include "pptrn/training.hpp"

using namespace pptrn;
using namespace pptrn::testing;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_config(std::size_t steps = 0) {
  TrainConfig c;
  c.d = 8;
  c.m = 2;
  c.d_z = 8;
  c.encoder_widths = {4, 4, 8, 8};
  c.estimator_hidden = 16;
  c.estimator_layers = 2;
  c.time_dim = 8;
  c.diffusion_steps = 50;
  c.val_sampling_steps = 5;
  c.batch_size = 2;
  c.steps = steps;
  c.seed = 3;
  return c;
}

std::vector<Pair> toy_pairs(std::size_t n, std::size_t size = 16, bool degrade_on = true) {
  std::vector<Pair> pairs;
  for (std::size_t i = 0; i < n; ++i) {
    Image clean = quantize8(synthesize_pattern(size, size, 1, derive_seed(11, i)));
    TurbulenceParams tp;
    tp.tilt_strength = 1.0;
    tp.tilt_correlation = 3.0;
    tp.sigma_min = 0.5;
    tp.sigma_max = 1.0;
    tp.noise_std = 0.02;
    tp.seed = derive_seed(12, i);
    Image degraded = degrade_on ? degrade(clean, tp) : clean;
    const std::string id = "pair_" + std::to_string(i);
    clean.source_id = degraded.source_id = id;
    pairs.push_back({id, clean, degraded});
  }
  return pairs;
}

fs::path temp_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("pptrn_test_training_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

bool same_prefix_blobs(const Checkpoint& a, const Checkpoint& b, const std::string& prefix) {
  std::size_t checked = 0;
  for (std::size_t i = 0; i < a.blobs.size(); ++i) {
    if (a.blobs[i].name.rfind(prefix, 0) != 0) continue;
    if (a.blobs[i].data != b.blobs[i].data) return false;
    ++checked;
  }
  return checked > 0;
}

}  // namespace

// --- optimizer -----------------------------------------------------------

TEST_CASE("AdamW matches a scalar reference over several steps") {
  ParamStore<double> store("p");
  Philox rng(1);
  auto w = store.create("w", {3}, Init::kZeros, rng);
  const std::vector<double> w0{0.5, -1.0, 2.0};
  std::copy(w0.begin(), w0.end(), w.mutable_data().begin());
  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.05;
  AdamW<double> opt(cfg);
  opt.add(store);

  std::vector<double> ref = w0, m(3, 0.0), v(3, 0.0);
  const std::vector<std::vector<double>> grads{{0.3, -0.2, 0.0}, {0.1, 0.4, -1.0}, {-0.5, 0.0, 0.25}, {0.2, 0.2, 0.2}};
  for (std::size_t k = 0; k < grads.size(); ++k) {
    auto g = w.mutable_grad();
    std::copy(grads[k].begin(), grads[k].end(), g.begin());
    opt.step();
    const double t = double(k + 1);
    for (std::size_t i = 0; i < 3; ++i) {
      ref[i] *= 1.0 - cfg.lr * cfg.weight_decay;
      m[i] = 0.9 * m[i] + 0.1 * grads[k][i];
      v[i] = 0.999 * v[i] + 0.001 * grads[k][i] * grads[k][i];
      const double mh = m[i] / (1.0 - std::pow(0.9, t)), vh = v[i] / (1.0 - std::pow(0.999, t));
      ref[i] -= cfg.lr * mh / (std::sqrt(vh) + cfg.eps);
    }
    CHECK(max_abs_diff(w.data(), ref) < 1e-14);
    CHECK_FALSE(w.has_grad());
  }
  CHECK(opt.steps() == 4);
}

TEST_CASE("AdamW leaves gradient-free parameters alone and refuses frozen updates") {
  ParamStore<float> store("p");
  Philox rng(2);
  auto a = store.create("a", {4}, Init::kFanIn, rng);
  auto b = store.create("b", {4}, Init::kFanIn, rng);
  AdamW<float> opt(AdamWConfig{});
  opt.add(store);
  const auto before_b = std::vector<float>(b.data().begin(), b.data().end());
  a.mutable_grad()[0] = 1.0f;
  opt.step();
  CHECK(std::vector<float>(b.data().begin(), b.data().end()) == before_b);

  store.set_frozen(true);
  const auto hash = store.hash();
  opt.step();
  CHECK(store.hash() == hash);
  a.mutable_grad()[1] = 0.5f;
  CHECK_THROWS_AS(opt.step(), ContractViolation);
  CHECK(store.hash() == hash);
  CHECK_THROWS_AS(AdamW<float>(AdamWConfig{0.0}), ConfigError);

  store.set_frozen(false);
  opt.set_lr_scale(0.0);
  a.mutable_grad()[2] = 1.0f;
  opt.step();
  CHECK(store.hash() == hash);
}

TEST_CASE("backbone overfits a single pair within 150 steps") {
  BackboneConfig c;
  c.d = 8;
  c.m = 2;
  c.d_z = 4;
  Backbone<float> net(c, 1);
  AdamWConfig oc;
  oc.lr = 2e-3;
  AdamW<float> opt(oc);
  opt.add(net.params());
  const auto pair = toy_pairs(1).front();
  const auto x = image_to_tensor<float>(pair.degraded), y = image_to_tensor<float>(pair.clean);
  const auto z = Tensor<float>::full({4}, 0.5f);
  double first = 0, last = 0;
  for (int step = 0; step < 150; ++step) {
    auto loss = mean(abs(sub(net.restore(x, z), y)));
    loss.backward();
    opt.step();
    (step == 0 ? first : last) = loss.item();
  }
  MESSAGE("overfit L1 " << first << " -> " << last);
  CHECK(last < 0.5 * first);
}

// --- configuration -------------------------------------------------------

TEST_CASE("config text round-trips and rejects bad input") {
  TrainConfig c = tiny_config(17);
  c.lr = 3.25e-4;
  c.joint = false;
  c.attention = AttentionKind::kChannelSelf;
  c.prior_clamp = 2.0;
  c.lr_schedule = "cosine";
  c.augment = true;
  const TrainConfig back = TrainConfig::parse(c.to_text());
  CHECK(back.to_text() == c.to_text());
  CHECK(back.lr == c.lr);
  CHECK(back.lr_schedule == "cosine");
  CHECK(back.augment);
  CHECK(back.encoder_widths == c.encoder_widths);

  const auto parsed = TrainConfig::parse("# comment\n steps = 5 # trailing\n\nlr=0.001\n");
  CHECK(parsed.steps == 5);
  CHECK(parsed.lr == 0.001);
  CHECK_THROWS_AS(TrainConfig::parse("bogus = 1\n"), ParseError);
  CHECK_THROWS_AS(TrainConfig::parse("steps = many\n"), ParseError);
  CHECK_THROWS_AS(TrainConfig::parse("steps\n"), ParseError);
  CHECK_THROWS_AS(TrainConfig::parse("encoder_widths = 1,2,3\n"), ParseError);
  CHECK_THROWS_AS(TrainConfig::parse("lr = 0\n"), ConfigError);
  CHECK_THROWS_AS(TrainConfig::parse("lr_schedule = step\n"), ParseError);
  CHECK_THROWS_AS(TrainConfig::parse("batch_size = 0\n"), ConfigError);
  CHECK_THROWS_AS(TrainConfig::parse("stage = 3\n"), ConfigError);

  TrainConfig other = c;
  other.lr = 1.0;
  other.seed = 99;
  CHECK(other.model_hash() == c.model_hash());
  other.d = 16;
  CHECK(other.model_hash() != c.model_hash());
}

// --- checkpoints ---------------------------------------------------------

TEST_CASE("checkpoint round trip is bit-exact and detects damage") {
  Pipeline p(tiny_config());
  Philox rng(5, 1);
  rng.normal();
  const Checkpoint ck = capture(p, 1, 42, rng);
  const auto bytes = serialize(ck);
  const Checkpoint back = deserialize(bytes);
  CHECK(back.weights_hash() == ck.weights_hash());
  CHECK(back.config_text == ck.config_text);
  CHECK(back.step == 42);
  CHECK(serialize(back) == bytes);
  Philox resumed = Philox::from_state(back.rng);
  CHECK(resumed.normal() == rng.normal());

  const fs::path dir = temp_dir("ckpt");
  save_checkpoint(ck, dir / "a.ckpt");
  CHECK(load_checkpoint(dir / "a.ckpt").weights_hash() == ck.weights_hash());

  auto truncated = bytes;
  truncated.resize(bytes.size() / 2);
  CHECK_THROWS_AS(deserialize(truncated), CorruptCheckpoint);
  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  CHECK_THROWS_AS(deserialize(flipped), CorruptCheckpoint);
  auto versioned = bytes;
  versioned[8] = 9;
  CHECK_THROWS_AS(deserialize(versioned), VersionMismatch);
  auto magic = bytes;
  magic[0] = 'X';
  CHECK_THROWS_AS(deserialize(magic), CorruptCheckpoint);
  CHECK_THROWS_AS(deserialize({}), CorruptCheckpoint);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), IoError);

  // A mismatched architecture is rejected before any weight is written.
  TrainConfig wide = tiny_config();
  wide.d = 16;
  Pipeline target(wide);
  const auto before = target.backbone.params().hash();
  CHECK_THROWS_AS(apply(ck, target), ConfigError);
  CHECK(target.backbone.params().hash() == before);
}

// --- training ------------------------------------------------------------

TEST_CASE("stage 1 with zero steps returns the initialisation; runs are deterministic") {
  const auto pairs = toy_pairs(4);
  const auto zero = train_stage1(pairs, tiny_config(0));
  const Pipeline fresh(tiny_config(0));
  CHECK(zero.checkpoint.weights_hash() == capture(fresh, 1, 0, Philox(0)).weights_hash());
  CHECK(zero.curve.empty());

  const auto a = train_stage1(pairs, tiny_config(5));
  const auto b = train_stage1(pairs, tiny_config(5));
  CHECK(serialize(a.checkpoint) == serialize(b.checkpoint));
  CHECK(a.checkpoint.step == 5);
  CHECK(a.checkpoint.weights_hash() != zero.checkpoint.weights_hash());
  auto other_seed = tiny_config(5);
  other_seed.seed = 4;
  CHECK(train_stage1(pairs, other_seed).checkpoint.weights_hash() != a.checkpoint.weights_hash());

  const auto resumed = train_stage1(pairs, tiny_config(3), &a.checkpoint);
  CHECK(resumed.checkpoint.step == 8);
}

TEST_CASE("augmented stage 1 is deterministic and differs from plain training") {
  const auto pairs = toy_pairs(3);
  auto c = tiny_config(5);
  c.augment = true;
  const auto a = train_stage1(pairs, c).checkpoint;
  CHECK(serialize(a) == serialize(train_stage1(pairs, c).checkpoint));
  c.augment = false;
  CHECK(serialize(a) != serialize(train_stage1(pairs, c).checkpoint));
}

TEST_CASE("stage 1 overfits a single pair") {
  auto c = tiny_config(200);
  c.lr = 2e-3;
  c.batch_size = 1;
  const auto out = train_stage1(toy_pairs(1), c);
  const double first = out.curve.front().loss, last = out.curve.back().loss;
  MESSAGE("stage 1 single-pair L1 " << first << " -> " << last);
  CHECK(last < 0.2 * first);
}

TEST_CASE("stage 1 aborts with diagnostics on a non-finite loss") {
  auto pairs = toy_pairs(2);
  // Each value is finite as float, but their difference overflows.
  for (auto& pair : pairs) {
    pair.clean.pixels[5] = 3e38;
    pair.degraded.pixels[5] = -3e38;
  }
  const fs::path dir = temp_dir("nan");
  try {
    train_stage1(pairs, tiny_config(3), nullptr, {dir / "curve.tsv", {}});
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("stage 1 step 1") != std::string::npos);
    CHECK(msg.find("pair_") != std::string::npos);
  }
  CHECK(fs::exists(dir / "curve.tsv"));
}

TEST_CASE("stage 2 keeps the encoder frozen and honours its modes") {
  const auto pairs = toy_pairs(4);
  const auto s1 = train_stage1(pairs, tiny_config(3)).checkpoint;
  auto c = tiny_config(4);
  c.stage = 2;

  const auto joint = train_stage2(s1, pairs, c);
  CHECK(joint.checkpoint.stage == 2);
  CHECK(joint.checkpoint.estimator_trained);
  CHECK(same_prefix_blobs(joint.checkpoint, s1, "encoder."));
  CHECK_FALSE(same_prefix_blobs(joint.checkpoint, s1, "backbone."));
  CHECK_FALSE(same_prefix_blobs(joint.checkpoint, s1, "estimator."));
  CHECK(joint.checkpoint.encoder_hash == load_pipeline(s1).encoder.params().hash());
  CHECK(serialize(train_stage2(s1, pairs, c).checkpoint) == serialize(joint.checkpoint));
  for (const auto& row : joint.curve) {
    CHECK(row.l_rec > 0.0);
    CHECK(row.loss == doctest::Approx(row.l_rec + row.l_diff).epsilon(1e-5));
  }

  auto nj = c;
  nj.joint = false;
  const auto non_joint = train_stage2(s1, pairs, nj);
  CHECK(same_prefix_blobs(non_joint.checkpoint, s1, "encoder."));
  CHECK(same_prefix_blobs(non_joint.checkpoint, s1, "backbone."));
  CHECK_FALSE(same_prefix_blobs(non_joint.checkpoint, s1, "estimator."));

  auto idle = c;
  idle.lambda_rec = 0.0;
  idle.lambda_diff = 0.0;
  const auto noop = train_stage2(s1, pairs, idle);
  for (const char* prefix : {"encoder.", "backbone.", "estimator."}) CHECK(same_prefix_blobs(noop.checkpoint, s1, prefix));

  CHECK_THROWS_AS(train_stage2(joint.checkpoint, pairs, c), ConfigError);
  auto wide = c;
  wide.d = 16;
  CHECK_THROWS_AS(train_stage2(s1, pairs, wide), ConfigError);
}

TEST_CASE("latent statistics standardise the training latents") {
  auto c = tiny_config();
  c.d_z = 2;
  Pipeline p(c);
  CHECK(p.latent_bound() == 0.0f);
  // Dimension means 2 and -1; pooled deviations {1, -1, 3, -3} give scale sqrt(5).
  p.fit_latent_stats({Tensor<float>::from_data({2}, {3.0f, -4.0f}), Tensor<float>::from_data({2}, {1.0f, 2.0f})});
  CHECK(p.latent.get("latent.mean").data()[0] == 2.0f);
  CHECK(p.latent.get("latent.mean").data()[1] == -1.0f);
  CHECK(p.latent.get("latent.scale").data()[0] == doctest::Approx(std::sqrt(5.0)));
  CHECK(p.latent_bound() == doctest::Approx(c.prior_clamp * 3.0 / std::sqrt(5.0)));
  const auto z = Tensor<float>::from_data({2}, {0.25f, 7.0f});
  const auto u = p.normalize(z);
  CHECK(u.data()[1] == doctest::Approx(8.0 / std::sqrt(5.0)));
  const auto back = p.denormalize(u);
  for (std::size_t i = 0; i < 2; ++i) CHECK(back.data()[i] == doctest::Approx(z.data()[i]).epsilon(1e-6));

  const auto pairs = toy_pairs(4);
  auto s2c = tiny_config(4);
  s2c.stage = 2;
  const auto s2 = train_stage2(train_stage1(pairs, tiny_config(3)).checkpoint, pairs, s2c).checkpoint;
  const auto loaded = load_pipeline(s2);
  CHECK(loaded.latent_bound() > 0.0f);
  CHECK(loaded.latent.get("latent.scale").data()[0] > 0.0f);
}

TEST_CASE("validation split and early stopping") {
  const auto pairs = toy_pairs(30);
  const auto [train, val] = split_validation(pairs);
  CHECK(train.size() + val.size() == pairs.size());
  CHECK(!val.empty());
  CHECK(val.size() < pairs.size() / 3);
  for (const auto& v : val) {
    for (const auto& t : train) CHECK(v.id != t.id);
  }
  auto c = tiny_config(6);
  c.eval_every = 2;
  c.patience = 1;
  const auto out = train_stage1(pairs, c);
  CHECK(out.curve.size() >= 4);
  CHECK(std::isfinite(out.curve[1].val_psnr));
  CHECK(std::isnan(out.curve[0].val_psnr));
}

// --- evaluation ----------------------------------------------------------

TEST_CASE("identity model on undegraded pairs scores the PSNR cap") {
  const auto pairs = toy_pairs(3, 16, false);
  const auto ck = train_stage1(pairs, tiny_config(0)).checkpoint;
  EvalOptions o;
  o.mode = PriorMode::kOracle;
  const auto r = evaluate(ck, pairs, o);
  for (const auto& m : r.restored.per_image) CHECK(m.psnr_db == kPsnrCapDb);
  CHECK_THROWS_AS(evaluate(ck, pairs, EvalOptions{}), ContractViolation);
}

TEST_CASE("evaluation is seeded, survives a checkpoint round trip and writes a report") {
  const auto pairs = toy_pairs(3);
  auto c = tiny_config(3);
  const auto s1 = train_stage1(pairs, c).checkpoint;
  c.stage = 2;
  const auto s2 = train_stage2(s1, pairs, c).checkpoint;
  const fs::path dir = temp_dir("eval");
  save_checkpoint(s2, dir / "s2.ckpt");

  EvalOptions o;
  o.sampling_steps = 10;
  o.seed = 8;
  o.report_dir = dir / "a";
  o.panels = true;
  const auto first = evaluate(s2, pairs, o);
  o.report_dir = dir / "b";
  const auto second = evaluate(load_checkpoint(dir / "s2.ckpt"), pairs, o);
  REQUIRE(first.restored.per_image.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(first.restored.per_image[i].psnr_db == second.restored.per_image[i].psnr_db);
    CHECK(first.restored.per_image[i].ssim == second.restored.per_image[i].ssim);
  }
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  CHECK(slurp(dir / "a" / "metrics.tsv") == slurp(dir / "b" / "metrics.tsv"));
  CHECK(MetricsReport::read_tsv(dir / "a" / "metrics.tsv").per_image.size() == 3);
  for (const auto& p : pairs) {
    CHECK(fs::exists(dir / "a" / "restored" / (p.id + ".png")));
    CHECK(fs::exists(dir / "a" / "panels" / (p.id + ".png")));
    CHECK(fs::exists(dir / "a" / "error_maps" / (p.id + ".png")));
  }
  const Image panel = load_image(dir / "a" / "panels" / (pairs[0].id + ".png"));
  CHECK(panel.width == 3 * 16 + 2 * 2);
  CHECK(panel.channels == 3);

  o.seed = 9;
  o.report_dir.clear();
  o.panels = false;
  const auto reseeded = evaluate(s2, pairs, o);
  CHECK(reseeded.restored.per_image[0].psnr_db != first.restored.per_image[0].psnr_db);
}

TEST_CASE("restoration pads odd sizes internally and crops back") {
  const Pipeline p(tiny_config());
  const Image img = quantize8(synthesize_pattern(33, 33, 1, 4));
  const Image out = p.restore(img, p.encode(img));
  CHECK(out.height == 33);
  CHECK(out.width == 33);
  REQUIRE(out.pixels.size() == img.pixels.size());
  for (std::size_t i = 0; i < img.pixels.size(); ++i) CHECK(out.pixels[i] == doctest::Approx(img.pixels[i]).epsilon(1e-6));
}
