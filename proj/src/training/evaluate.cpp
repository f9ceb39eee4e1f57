#include <fstream>
#include <sstream>

#include "pptrn/hash.hpp"
#include "pptrn/training.hpp"

namespace pptrn {

namespace fs = std::filesystem;

namespace {

std::uint64_t pair_seed(std::uint64_t seed, const std::string& id) {
  Fnv1a64 h;
  h.update(id);
  return derive_seed(seed, h.value());
}

ImageMetrics score(const std::string& id, const Image& a, const Image& b) { return {id, psnr(a, b), ssim(a, b)}; }

void write_pairs(const fs::path& dir, const std::vector<Pair>& pairs) {
  // Inputs are re-saved next to the outputs so the report directory is self-contained.
  fs::create_directories(dir / "inputs");
  std::ofstream out(dir / "pairs.tsv");
  if (!out) throw IoError("cannot write " + (dir / "pairs.tsv").string());
  out << "pair_id\tclean_path\tdegraded_path\trestored_path\n";
  for (const auto& p : pairs) {
    const std::string clean = "inputs/" + p.id + "_clean.png", degraded = "inputs/" + p.id + "_degraded.png";
    save_image(p.clean, dir / clean);
    save_image(p.degraded, dir / degraded);
    out << p.id << '\t' << clean << '\t' << degraded << "\trestored/" << p.id << ".png\n";
  }
  if (!out) throw IoError("write failed for " + (dir / "pairs.tsv").string());
}

}  // namespace

EvalResult evaluate(const Pipeline& pipeline, const std::vector<Pair>& pairs, const EvalOptions& options) {
  if (pairs.empty()) throw ConfigError("evaluate: no pairs");
  std::vector<ImageMetrics> restored_rows, degraded_rows;
  EvalResult result;
  for (const auto& pair : pairs) {
    if (pair.degraded.channels != pipeline.config().in_channels) {
      throw ConfigError("evaluate: pair " + pair.id + " has " + std::to_string(pair.degraded.channels) +
                        " channels; checkpoint expects " + std::to_string(pipeline.config().in_channels));
    }
    const auto z = options.mode == PriorMode::kOracle
                       ? pipeline.encode(pair.clean)
                       : pipeline.sample_prior(pair.degraded, options.sampling_steps, pair_seed(options.seed, pair.id));
    Image out = pipeline.restore(pair.degraded, z);
    out.source_id = pair.id;
    restored_rows.push_back(score(pair.id, out, pair.clean));
    degraded_rows.push_back(score(pair.id, pair.degraded, pair.clean));
    result.outputs.push_back(std::move(out));
  }
  result.restored = MetricsReport::from(std::move(restored_rows));
  result.degraded = MetricsReport::from(std::move(degraded_rows));

  if (!options.report_dir.empty()) {
    const fs::path& dir = options.report_dir;
    fs::create_directories(dir / "restored");
    result.restored.write_tsv(dir / "metrics.tsv");
    result.degraded.write_tsv(dir / "baseline.tsv");
    for (const auto& img : result.outputs) save_image(img, dir / "restored" / (img.source_id + ".png"));
    write_pairs(dir, pairs);
    if (options.panels) render_report(dir);
  }
  return result;
}

EvalResult evaluate(const Checkpoint& checkpoint, const std::vector<Pair>& pairs, const EvalOptions& options) {
  if (options.mode == PriorMode::kSampled && checkpoint.stage != 2) {
    throw ContractViolation("evaluate: sampled priors need a stage-2 checkpoint; use the oracle prior for stage 1");
  }
  return evaluate(load_pipeline(checkpoint), pairs, options);
}

void render_report(const fs::path& dir) {
  std::ifstream in(dir / "pairs.tsv");
  if (!in) throw IoError("cannot open " + (dir / "pairs.tsv").string());
  std::string line;
  if (!std::getline(in, line) || line != "pair_id\tclean_path\tdegraded_path\trestored_path") {
    throw ParseError((dir / "pairs.tsv").string() + ": unexpected header");
  }
  fs::create_directories(dir / "panels");
  fs::create_directories(dir / "error_maps");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string id, clean, degraded, restored;
    if (!std::getline(ls, id, '\t') || !std::getline(ls, clean, '\t') || !std::getline(ls, degraded, '\t') ||
        !std::getline(ls, restored)) {
      throw ParseError((dir / "pairs.tsv").string() + ": malformed row");
    }
    const Image c = load_image(dir / clean), d = load_image(dir / degraded), r = load_image(dir / restored);
    save_image(side_by_side({d, r, c}), dir / "panels" / (id + ".png"));
    save_image(error_heatmap(r, c), dir / "error_maps" / (id + ".png"));
    save_image(error_heatmap(d, c), dir / "error_maps" / (id + "_degraded.png"));
  }
}

}  // namespace pptrn
