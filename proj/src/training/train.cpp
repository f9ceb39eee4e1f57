#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "pptrn/hash.hpp"
#include "pptrn/training.hpp"

namespace pptrn {

namespace {

std::size_t round_up(std::size_t v, std::size_t multiple) { return (v + multiple - 1) / multiple * multiple; }

Tensor<float> padded_tensor(const Image& image, std::size_t multiple) {
  const std::size_t h = round_up(image.height, multiple), w = round_up(image.width, multiple);
  return image_to_tensor<float>(h == image.height && w == image.width ? image : reflect_pad(image, h, w));
}

// Tensors for every training sample, padded once: backbone-sized and
// encoder-sized views. With augmentation each pair contributes 8 samples.
struct Prepared {
  std::vector<Tensor<float>> degraded, clean, degraded_enc, clean_enc;
  std::vector<std::string> ids;
};

Prepared prepare(const std::vector<Pair>& pairs, const Pipeline& p) {
  if (pairs.empty()) throw ConfigError("training: no pairs");
  Prepared out;
  const std::size_t multiple = p.backbone.config().size_multiple();
  const unsigned variants = p.config().augment ? 8 : 1;
  for (const auto& pair : pairs) {
    if (pair.clean.channels != p.config().in_channels) {
      throw ConfigError("pair " + pair.id + " has " + std::to_string(pair.clean.channels) +
                        " channels; configuration expects " + std::to_string(p.config().in_channels));
    }
    for (unsigned k = 0; k < variants; ++k) {
      const Image degraded = dihedral(pair.degraded, k), clean = dihedral(pair.clean, k);
      out.degraded.push_back(padded_tensor(degraded, multiple));
      out.clean.push_back(padded_tensor(clean, multiple));
      out.degraded_enc.push_back(padded_tensor(degraded, 16));
      out.clean_enc.push_back(padded_tensor(clean, 16));
      out.ids.push_back(variants == 1 ? pair.id : pair.id + "/" + std::to_string(k));
    }
  }
  return out;
}

Tensor<float> l1(const Tensor<float>& out, const Tensor<float>& target) { return mean(abs(sub(out, target))); }

Tensor<float> accumulate(const Tensor<float>& total, const Tensor<float>& term) {
  return total.defined() ? add(total, term) : term;
}

class Snapshot {
 public:
  void take(const Pipeline& p) {
    values_.clear();
    for (const auto* store : p.stores()) {
      for (const auto& e : store->entries()) values_.emplace_back(e.value.data().begin(), e.value.data().end());
    }
  }
  void restore(Pipeline& p) const {
    std::size_t i = 0;
    for (auto* store : p.stores()) {
      for (auto& e : store->entries()) {
        auto dst = e.value.mutable_data();
        std::copy(values_[i].begin(), values_[i].end(), dst.begin());
        ++i;
      }
    }
  }
  bool empty() const { return values_.empty(); }

 private:
  std::vector<std::vector<float>> values_;
};

struct LoopContext {
  const TrainConfig& config;
  Pipeline& pipeline;
  AdamW<float>& optimizer;
  Philox& rng;
  std::size_t train_count;
  const std::vector<Pair>& validation;
  PriorMode val_mode;
  int stage;
  const TrainHooks& hooks;
};

// Runs config.steps optimisation steps. `step_fn` builds the batch loss,
// calls backward and fills the loss fields of the row.
template <typename StepFn>
std::vector<CurveRow> run_loop(LoopContext ctx, const std::vector<std::string>& ids, StepFn step_fn) {
  std::vector<CurveRow> curve;
  Snapshot best;
  double best_psnr = -std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  const bool validating = ctx.config.eval_every > 0;

  auto abort = [&](std::size_t step, const std::vector<std::size_t>& batch, const std::string& what) {
    if (!ctx.hooks.curve_path.empty()) write_curve(ctx.hooks.curve_path, curve, ctx.stage);
    std::string names;
    for (std::size_t i : batch) names += (names.empty() ? "" : ",") + ids[i];
    throw NumericError("stage " + std::to_string(ctx.stage) + " step " + std::to_string(step) + " (pairs " + names +
                       "): " + what);
  };

  for (std::size_t step = 1; step <= ctx.config.steps; ++step) {
    std::vector<std::size_t> batch(ctx.config.batch_size);
    for (auto& i : batch) i = std::size_t(ctx.rng.below(ctx.train_count));
    CurveRow row;
    row.step = step;
    if (ctx.config.lr_schedule == "cosine") {
      ctx.optimizer.set_lr_scale(0.5 * (1.0 + std::cos(std::numbers::pi * double(step - 1) / double(ctx.config.steps))));
    }
    try {
      step_fn(batch, row);
    } catch (const NumericError& e) {
      abort(step, batch, e.what());
    }
    if (!std::isfinite(row.loss)) abort(step, batch, "non-finite loss " + std::to_string(row.loss));
    ctx.optimizer.step();

    if (validating && step % ctx.config.eval_every == 0) {
      EvalOptions opts;
      opts.mode = ctx.val_mode;
      opts.sampling_steps = ctx.config.val_sampling_steps;
      opts.seed = derive_seed(ctx.config.seed, 3);
      row.val_psnr = evaluate(ctx.pipeline, ctx.validation, opts).restored.psnr_db;
      if (row.val_psnr > best_psnr) {
        best_psnr = row.val_psnr;
        since_best = 0;
        if (ctx.config.patience > 0) best.take(ctx.pipeline);
      } else {
        ++since_best;
      }
    }
    curve.push_back(row);
    if (ctx.hooks.on_step) ctx.hooks.on_step(row);
    if (ctx.config.patience > 0 && since_best >= ctx.config.patience) break;
  }
  if (!best.empty()) best.restore(ctx.pipeline);
  if (!ctx.hooks.curve_path.empty()) write_curve(ctx.hooks.curve_path, curve, ctx.stage);
  return curve;
}

std::pair<std::vector<Pair>, std::vector<Pair>> training_split(const std::vector<Pair>& pairs, const TrainConfig& c) {
  if (c.eval_every == 0) return {pairs, {}};
  auto split = split_validation(pairs);
  if (split.second.empty() || split.first.empty()) throw ConfigError("training: validation split leaves an empty side");
  return split;
}

}  // namespace

void write_curve(const std::filesystem::path& path, const std::vector<CurveRow>& curve, int stage) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "# stage\t" << stage << '\n' << "step\tloss\tl_rec\tl_diff\tval_psnr\n";
  char buf[160];
  for (const auto& r : curve) {
    std::snprintf(buf, sizeof buf, "%zu\t%.9g\t%.9g\t%.9g\t%.9g\n", r.step, r.loss, r.l_rec, r.l_diff, r.val_psnr);
    out << buf;
  }
  if (!out) throw IoError("write failed for " + path.string());
}

TrainOutput train_stage1(const std::vector<Pair>& pairs, const TrainConfig& config, const Checkpoint* init,
                         const TrainHooks& hooks) {
  config.validate();
  Pipeline p(config);
  Philox rng(derive_seed(config.seed, 1), 0);
  std::uint64_t start = 0;
  if (init) {
    if (init->stage != 1) throw ConfigError("stage 1 can only warm-start from a stage-1 checkpoint");
    apply(*init, p);
    rng = Philox::from_state(init->rng);
    start = init->step;
  }
  const auto [train, val] = training_split(pairs, config);
  const Prepared data = prepare(train, p);

  AdamW<float> opt(config.optimizer());
  opt.add(p.encoder.params());
  opt.add(p.backbone.params());
  const float inv_b = 1.0f / float(config.batch_size);

  auto step_fn = [&](const std::vector<std::size_t>& batch, CurveRow& row) {
    Tensor<float> total;
    for (std::size_t i : batch) {
      const auto z = p.encoder.encode(data.clean_enc[i]);
      total = accumulate(total, l1(p.backbone.restore(data.degraded[i], z), data.clean[i]));
    }
    const auto loss = scale(total, inv_b);
    loss.backward();
    row.loss = row.l_rec = double(loss.item());
  };
  LoopContext ctx{config, p, opt, rng, data.ids.size(), val, PriorMode::kOracle, 1, hooks};
  auto curve = run_loop(ctx, data.ids, step_fn);
  return {capture(p, 1, start + curve.size(), rng), std::move(curve)};
}

TrainOutput train_stage2(const Checkpoint& stage1, const std::vector<Pair>& pairs, const TrainConfig& config,
                         const TrainHooks& hooks) {
  config.validate();
  if (stage1.stage != 1) throw ConfigError("stage 2 requires a stage-1 checkpoint (got stage " +
                                           std::to_string(stage1.stage) + ")");
  Pipeline p(config);
  apply(stage1, p);
  p.encoder.freeze();
  const std::uint64_t encoder_hash = p.encoder.params().hash();
  if (!config.joint) p.backbone.params().set_frozen(true);
  p.estimator.set_trained(true);

  const auto [train, val] = training_split(pairs, config);
  const Prepared data = prepare(train, p);
  // The encoder is frozen, so its latents are fixed for the whole stage.
  // Diffusion runs on standardised latents.
  std::vector<Tensor<float>> z0, cond;
  {
    NoGradGuard no_grad;
    std::vector<Tensor<float>> raw;
    for (const auto& x : data.clean_enc) raw.push_back(p.encoder.encode(x));
    p.fit_latent_stats(raw);
    for (std::size_t i = 0; i < raw.size(); ++i) {
      z0.push_back(p.normalize(raw[i]));
      cond.push_back(p.normalize(p.encoder.encode(data.degraded_enc[i])));
    }
  }
  const float bound = p.latent_bound();

  AdamW<float> opt(config.optimizer());
  opt.add(p.encoder.params());
  opt.add(p.backbone.params());
  opt.add(p.estimator.params());
  Philox rng(derive_seed(config.seed, 2), 0);
  const std::size_t dz = config.d_z, T = p.schedule.T;
  const bool use_rec = config.joint && config.lambda_rec > 0.0;
  const bool any_loss = config.lambda_diff > 0.0 || use_rec;
  const float inv_b = 1.0f / float(config.batch_size);

  auto step_fn = [&](const std::vector<std::size_t>& batch, CurveRow& row) {
    const std::size_t b = batch.size();
    std::vector<std::size_t> ts(b);
    std::vector<Tensor<float>> zt_rows(b), c_rows(b);
    std::vector<float> eps_all(b * dz);
    for (std::size_t r = 0; r < b; ++r) {
      ts[r] = 1 + std::size_t(rng.below(T));
      for (std::size_t k = 0; k < dz; ++k) eps_all[r * dz + k] = float(rng.normal());
    }
    if (!any_loss) return;
    const auto eps = Tensor<float>::from_data({b, dz}, eps_all);
    for (std::size_t r = 0; r < b; ++r) {
      const auto eps_r = reshape(slice(eps, 0, r, r + 1), {dz});
      zt_rows[r] = reshape(forward_marginal(p.schedule, z0[batch[r]], ts[r], eps_r), {1, dz});
      c_rows[r] = reshape(cond[batch[r]], {1, dz});
    }
    const auto zt = concat(zt_rows, 0);
    const auto pred = p.estimator(zt, ts, concat(c_rows, 0));
    const auto l_diff = eps_mse(eps, pred);
    row.l_diff = double(l_diff.item());
    Tensor<float> loss;
    if (config.lambda_diff > 0.0) loss = scale(l_diff, float(config.lambda_diff));
    if (use_rec) {
      Tensor<float> rec;
      for (std::size_t r = 0; r < b; ++r) {
        const auto pred_r = reshape(slice(pred, 0, r, r + 1), {dz});
        const auto u_hat = clamp(predict_z0(p.schedule, reshape(zt_rows[r], {dz}), ts[r], pred_r), -bound, bound);
        rec = accumulate(rec, l1(p.backbone.restore(data.degraded[batch[r]], p.denormalize(u_hat)), data.clean[batch[r]]));
      }
      rec = scale(rec, inv_b);
      row.l_rec = double(rec.item());
      loss = accumulate(loss, scale(rec, float(config.lambda_rec)));
    }
    if (!loss.defined()) return;
    loss.backward();
    row.loss = double(loss.item());
  };
  LoopContext ctx{config, p, opt, rng, data.ids.size(), val, PriorMode::kSampled, 2, hooks};
  auto curve = run_loop(ctx, data.ids, step_fn);

  if (p.encoder.params().hash() != encoder_hash) {
    throw ContractViolation("stage 2 modified the frozen encoder weights");
  }
  p.estimator.set_trained(!curve.empty() || stage1.estimator_trained);
  p.backbone.params().set_frozen(false);
  return {capture(p, 2, curve.size(), rng), std::move(curve)};
}

}  // namespace pptrn
