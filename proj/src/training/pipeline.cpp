#include <cmath>

#include "pptrn/hash.hpp"
#include "pptrn/training.hpp"

namespace pptrn {

namespace {

std::size_t round_up(std::size_t v, std::size_t multiple) { return (v + multiple - 1) / multiple * multiple; }

Image pad_to_multiple(const Image& image, std::size_t multiple) {
  const std::size_t h = round_up(image.height, multiple), w = round_up(image.width, multiple);
  if (h == image.height && w == image.width) return image;
  return reflect_pad(image, h, w);
}

}  // namespace

Pipeline::Pipeline(const TrainConfig& config)
    : encoder(config.encoder(), derive_seed(config.seed, 10)),
      backbone(config.backbone(), derive_seed(config.seed, 11)),
      estimator(config.estimator(), derive_seed(config.seed, 12)),
      schedule(cosine_schedule(config.diffusion_steps)),
      config_(config) {
  config.validate();
  Philox unused(0);
  latent.create("mean", {config.d_z}, Init::kZeros, unused);
  latent.create("scale", {1}, Init::kOnes, unused);
  latent.create("bound", {1}, Init::kZeros, unused);
  latent.set_frozen(true);
}

void Pipeline::fit_latent_stats(const std::vector<Tensor<float>>& latents) {
  if (latents.empty()) throw ConfigError("fit_latent_stats: no latents");
  const std::size_t dz = config_.d_z;
  std::vector<double> mu(dz, 0.0);
  for (const auto& z : latents) {
    for (std::size_t k = 0; k < dz; ++k) mu[k] += double(z.data()[k]) / double(latents.size());
  }
  double var = 0.0;
  for (const auto& z : latents) {
    for (std::size_t k = 0; k < dz; ++k) var += (double(z.data()[k]) - mu[k]) * (double(z.data()[k]) - mu[k]);
  }
  var /= double(latents.size() * dz);
  // A degenerate (constant) latent set keeps unit scale.
  const double sd = var > 1e-20 ? std::sqrt(var) : 1.0;
  double peak = 0.0;
  for (const auto& z : latents) {
    for (std::size_t k = 0; k < dz; ++k) peak = std::max(peak, std::abs(double(z.data()[k]) - mu[k]) / sd);
  }
  auto set = [&](const char* name, const std::vector<double>& v) {
    Tensor<float> t = latent.get(name);
    auto d = t.mutable_data();
    for (std::size_t i = 0; i < v.size(); ++i) d[i] = float(v[i]);
  };
  set("latent.mean", mu);
  set("latent.scale", {sd});
  set("latent.bound", {config_.prior_clamp * std::max(peak, 1.0)});
}

Tensor<float> Pipeline::normalize(const Tensor<float>& z) const {
  return scale(sub(z, latent.get("latent.mean")), 1.0f / latent.get("latent.scale").data()[0]);
}

Tensor<float> Pipeline::denormalize(const Tensor<float>& u) const {
  return add(scale(u, latent.get("latent.scale").data()[0]), latent.get("latent.mean"));
}

Tensor<float> Pipeline::encode(const Image& image) const {
  return encoder.encode(image_to_tensor<float>(pad_to_multiple(image, 16)));
}

Image Pipeline::restore(const Image& degraded, const Tensor<float>& z) const {
  NoGradGuard no_grad;
  const Image padded = pad_to_multiple(degraded, backbone.config().size_multiple());
  const auto out = backbone.restore(image_to_tensor<float>(padded), z);
  return clamp01(crop(tensor_to_image(out, degraded.source_id), 0, 0, degraded.height, degraded.width));
}

Tensor<float> Pipeline::sample_prior(const Image& degraded, std::size_t steps, std::uint64_t seed) const {
  NoGradGuard no_grad;
  const float bound = latent_bound();
  const auto u = pptrn::sample_prior(schedule, estimator, normalize(encode(degraded)), steps, seed,
                                     bound > 0.0f ? std::optional<double>(bound) : std::nullopt);
  return denormalize(u);
}

std::vector<Pair> load_pairs(const std::vector<ManifestRow>& rows) {
  std::vector<Pair> pairs;
  pairs.reserve(rows.size());
  for (const auto& row : rows) {
    Pair p{row.pair_id, load_image(row.clean_path), load_image(row.degraded_path)};
    if (!p.clean.same_shape(p.degraded)) throw DimensionError("pair " + row.pair_id + ": clean and degraded differ in shape");
    p.clean.source_id = p.degraded.source_id = row.pair_id;
    pairs.push_back(std::move(p));
  }
  return pairs;
}

std::vector<Pair> load_pairs(const std::filesystem::path& manifest) { return load_pairs(read_manifest(manifest)); }

std::pair<std::vector<Pair>, std::vector<Pair>> split_validation(const std::vector<Pair>& pairs) {
  std::pair<std::vector<Pair>, std::vector<Pair>> out;
  for (const auto& p : pairs) {
    Fnv1a64 h;
    h.update(p.id);
    (h.value() % 10 == 0 ? out.second : out.first).push_back(p);
  }
  return out;
}

}  // namespace pptrn
