#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "pptrn/backbone.hpp"
#include "pptrn/diffusion.hpp"
#include "pptrn/encoder.hpp"
#include "pptrn/metrics.hpp"
#include "pptrn/optim.hpp"
#include "pptrn/rng.hpp"
#include "pptrn/turbsim.hpp"

namespace pptrn {

// Training hyperparameters plus the model architecture, so a checkpoint can
// rebuild its networks from the embedded text alone.
struct TrainConfig {
  int stage = 1;
  double lr = 1e-4;
  // "constant", or "cosine": lr * (1 + cos(pi * (step - 1) / steps)) / 2 over the run.
  std::string lr_schedule = "constant";
  // Train on all 8 flips/rotations of every pair.
  bool augment = false;
  std::size_t batch_size = 4;
  std::size_t steps = 2000;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  double lambda_rec = 1.0;
  double lambda_diff = 1.0;
  // Stage 2: false trains only the estimator on the diffusion loss, backbone frozen.
  bool joint = true;
  // Validation every N steps on a held-out tenth of the pairs (0 = off).
  std::size_t eval_every = 0;
  // With validation on: stop after this many evaluations without improvement
  // and keep the best weights (0 = never stop early).
  std::size_t patience = 0;
  std::size_t val_sampling_steps = 25;

  // Architecture.
  std::size_t in_channels = 1;
  std::size_t d = 48;
  std::size_t levels = 3;
  std::size_t m = 16;
  std::size_t d_k = 0;
  std::size_t d_z = 128;
  double ffn_expansion = 2.0;
  bool depthwise_qkv = true;
  AttentionKind attention = AttentionKind::kPpda;
  std::array<std::size_t, 4> encoder_widths{16, 32, 64, 128};
  std::size_t estimator_hidden = 256;
  // Adds sqrt(1 - abar_t) z_t to the estimator output.
  bool estimator_skip = true;
  std::size_t estimator_layers = 3;
  std::size_t time_dim = 64;
  std::size_t diffusion_steps = 1000;
  // Standardised z0 estimates (stage-2 one-step estimates and the sampler's
  // per-step estimates) are clamped to this multiple of the largest training magnitude.
  double prior_clamp = 1.5;

  void validate() const;
  BackboneConfig backbone() const;
  EncoderConfig encoder() const;
  EstimatorConfig estimator() const;
  AdamWConfig optimizer() const;

  // key = value lines; '#' starts a comment. Every field has a key.
  std::string to_text() const;
  static TrainConfig parse(const std::string& text, const std::string& origin = "config");
  static TrainConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
  // Hash of the architecture fields only.
  std::uint64_t model_hash() const;
};

// Float networks built from a configuration.
class Pipeline {
 public:
  explicit Pipeline(const TrainConfig& config);

  const TrainConfig& config() const { return config_; }

  // Latent of an image; input is reflect-padded to a multiple of 16 for the encoder.
  Tensor<float> encode(const Image& image) const;
  // Reflect-pads to the backbone's size multiple, restores, crops back and clamps to [0, 1].
  Image restore(const Image& degraded, const Tensor<float>& z) const;
  // Prior sampled from the diffusion model conditioned on the degraded image.
  Tensor<float> sample_prior(const Image& degraded, std::size_t steps, std::uint64_t seed) const;

  // The diffusion model works on standardised latents (z - mean) / scale.
  // Stage 2 fits mean and scale to the training latents and sets the clamp
  // bound to prior_clamp times the largest standardised magnitude seen.
  void fit_latent_stats(const std::vector<Tensor<float>>& latents);
  Tensor<float> normalize(const Tensor<float>& z) const;
  Tensor<float> denormalize(const Tensor<float>& u) const;
  // 0 until fitted.
  float latent_bound() const { return latent.get("latent.bound").data()[0]; }

  std::array<ParamStore<float>*, 4> stores() { return {&encoder.params(), &backbone.params(), &estimator.params(), &latent}; }
  std::array<const ParamStore<float>*, 4> stores() const {
    return {&encoder.params(), &backbone.params(), &estimator.params(), &latent};
  }

  Encoder<float> encoder;
  Backbone<float> backbone;
  NoiseEstimator<float> estimator;
  // Non-trainable latent statistics: latent.mean [d_z], latent.scale [1], latent.bound [1].
  ParamStore<float> latent{"latent"};
  Schedule schedule;

 private:
  TrainConfig config_;
};

struct Pair {
  std::string id;
  Image clean, degraded;
};

std::vector<Pair> load_pairs(const std::vector<ManifestRow>& rows);
std::vector<Pair> load_pairs(const std::filesystem::path& manifest);
// Deterministic 90/10 split by a hash of pair_id: (train, validation).
std::pair<std::vector<Pair>, std::vector<Pair>> split_validation(const std::vector<Pair>& pairs);

// --- checkpoints ---------------------------------------------------------

struct Blob {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::uint32_t version = kVersion;
  std::uint32_t stage = 1;
  std::uint64_t config_hash = 0;
  std::string config_text;
  std::uint64_t step = 0;
  // Hash of the frozen encoder weights (stage 2), 0 otherwise.
  std::uint64_t encoder_hash = 0;
  bool estimator_trained = false;
  Philox::State rng;
  std::vector<Blob> blobs;

  TrainConfig config() const { return TrainConfig::parse(config_text, "checkpoint"); }
  // Hash over every blob's name, shape and bytes.
  std::uint64_t weights_hash() const;
};

Checkpoint capture(const Pipeline& pipeline, std::uint32_t stage, std::uint64_t step, const Philox& rng);
// Copies blobs into the pipeline's stores; names and shapes must match exactly.
void apply(const Checkpoint& checkpoint, Pipeline& pipeline);
Pipeline load_pipeline(const Checkpoint& checkpoint);

// Layout: "PPTRNCKP" magic, u32 version, u32 stage, u64 config hash, u64 step,
// u64 encoder hash, u8 estimator flag, config text, RNG state, blob count, then
// per blob: name, rank, extents, count, float32 values; FNV-1a 64 trailer over
// all preceding bytes. Integers and floats little-endian; strings u32-length-prefixed.
std::vector<std::uint8_t> serialize(const Checkpoint& checkpoint);
Checkpoint deserialize(const std::vector<std::uint8_t>& bytes, const std::string& origin = "checkpoint");
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// --- training ------------------------------------------------------------

struct CurveRow {
  std::size_t step = 0;
  double loss = 0.0;
  double l_rec = 0.0;
  double l_diff = 0.0;
  double val_psnr = std::numeric_limits<double>::quiet_NaN();
};

struct TrainHooks {
  // Loss curve TSV, rewritten at the end of the run (and on abort).
  std::filesystem::path curve_path;
  std::function<void(const CurveRow&)> on_step;
};

struct TrainOutput {
  Checkpoint checkpoint;
  std::vector<CurveRow> curve;
};

// Encoder and backbone jointly, with the clean image's latent as the prior.
// `init` warm-starts from an earlier stage-1 checkpoint.
TrainOutput train_stage1(const std::vector<Pair>& pairs, const TrainConfig& config, const Checkpoint* init = nullptr,
                         const TrainHooks& hooks = {});
// Frozen encoder; diffusion estimator (and, when joint, the backbone).
TrainOutput train_stage2(const Checkpoint& stage1, const std::vector<Pair>& pairs, const TrainConfig& config,
                         const TrainHooks& hooks = {});

void write_curve(const std::filesystem::path& path, const std::vector<CurveRow>& curve, int stage);

// --- evaluation ----------------------------------------------------------

enum class PriorMode { kSampled, kOracle };

struct EvalOptions {
  std::size_t sampling_steps = 50;
  std::uint64_t seed = 0;
  PriorMode mode = PriorMode::kSampled;
  // When set: metrics.tsv, baseline.tsv, pairs.tsv and restored/<id>.png.
  std::filesystem::path report_dir;
  bool panels = false;
};

struct EvalResult {
  MetricsReport restored;
  MetricsReport degraded;
  std::vector<Image> outputs;
};

EvalResult evaluate(const Pipeline& pipeline, const std::vector<Pair>& pairs, const EvalOptions& options);
EvalResult evaluate(const Checkpoint& checkpoint, const std::vector<Pair>& pairs, const EvalOptions& options);

// Per-pair [degraded | restored | clean] panels and |restored - clean| heatmaps
// under <report_dir>/panels and <report_dir>/error_maps.
void render_report(const std::filesystem::path& report_dir);

}  // namespace pptrn
