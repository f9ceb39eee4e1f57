// Command-line entry point: dataset simulation, two-stage training,
// restoration, evaluation and report rendering.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

#include "pptrn/hash.hpp"
#include "pptrn/training.hpp"

namespace fs = std::filesystem;
using namespace pptrn;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;
constexpr int kExitContract = 4;

std::string file_hash(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  Fnv1a64 h;
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), std::streamsize(buf.size()));
    h.update({reinterpret_cast<const std::uint8_t*>(buf.data()), std::size_t(in.gcount())});
  }
  return hex64(h.value());
}

// Record of one invocation: command, flags and hashes of the files it read.
class RunManifest {
 public:
  explicit RunManifest(std::string command) { doc_["command"] = std::move(command); }

  template <typename V>
  void flag(const std::string& name, const V& value) {
    doc_["flags"][name] = value;
  }
  void input(const fs::path& path) { doc_["inputs"][path.string()] = file_hash(path); }
  void write(const fs::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << doc_.dump(2) << '\n';
  }

 private:
  nlohmann::ordered_json doc_;
};

void input_manifest_files(RunManifest& run, const fs::path& manifest) {
  run.input(manifest);
  for (const auto& row : read_manifest(manifest)) {
    run.input(row.clean_path);
    run.input(row.degraded_path);
  }
}

fs::path sidecar(const fs::path& output) {
  fs::path p = output;
  p += ".run.json";
  return p;
}

void progress(const CurveRow& row) {
  if (row.step % 100 == 0 || row.step == 1) {
    std::fprintf(stderr, "step %zu loss %.6f l_rec %.6f l_diff %.6f\n", row.step, row.loss, row.l_rec, row.l_diff);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prior-driven turbulence restoration"};
  app.require_subcommand(1);

  // simulate
  auto* sim = app.add_subcommand("simulate", "Degrade clean images into a paired dataset");
  fs::path clean_dir, out_dir;
  TurbulenceParams tp;
  std::size_t count = 0, patterns = 0, pattern_size = 32;
  std::uint64_t sim_seed = 0;
  sim->add_option("--clean-dir", clean_dir, "Directory of clean images");
  sim->add_option("--patterns", patterns, "Write this many synthetic pattern images to <out-dir>/sources first");
  sim->add_option("--pattern-size", pattern_size, "Side length of synthetic patterns");
  sim->add_option("--out-dir", out_dir, "Output directory")->required();
  sim->add_option("--tilt", tp.tilt_strength, "Maximum tilt displacement (px)")->required();
  sim->add_option("--tilt-corr", tp.tilt_correlation, "Tilt correlation length (px)");
  sim->add_option("--sigma-min", tp.sigma_min, "Minimum blur sigma")->required();
  sim->add_option("--sigma-max", tp.sigma_max, "Maximum blur sigma")->required();
  sim->add_option("--noise", tp.noise_std, "Additive noise standard deviation")->required();
  sim->add_option("--count", count, "Number of pairs")->required();
  sim->add_option("--seed", sim_seed, "Random seed")->required();

  // train-stage1 / train-stage2
  fs::path manifest, config_path, out_ckpt, init_ckpt, curve_path;
  std::uint64_t train_seed = 0;
  auto* s1 = app.add_subcommand("train-stage1", "Train encoder and backbone with clean-image priors");
  auto* s2 = app.add_subcommand("train-stage2", "Train the diffusion prior with a frozen encoder");
  for (auto* cmd : {s1, s2}) {
    cmd->add_option("--manifest", manifest, "Dataset manifest")->required();
    cmd->add_option("--config", config_path, "key = value training configuration")->required();
    cmd->add_option("--out-ckpt", out_ckpt, "Checkpoint to write")->required();
    cmd->add_option("--curve", curve_path, "Loss curve TSV (default <out-ckpt>.curve.tsv)");
    cmd->add_option("--seed", train_seed, "Random seed")->required();
  }
  s1->add_option("--init-ckpt", init_ckpt, "Stage-1 checkpoint to warm-start from");
  s2->add_option("--init-ckpt", init_ckpt, "Stage-1 checkpoint")->required();

  // restore
  auto* rs = app.add_subcommand("restore", "Restore one image");
  fs::path ckpt_path, input_path, output_path;
  std::size_t steps = 50;
  std::uint64_t seed = 0;
  rs->add_option("--ckpt", ckpt_path, "Stage-2 checkpoint")->required();
  rs->add_option("--input", input_path, "Degraded image")->required();
  rs->add_option("--output", output_path, "Restored image")->required();
  rs->add_option("--steps", steps, "Reverse diffusion steps");
  rs->add_option("--seed", seed, "Random seed")->required();

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Score a checkpoint on a dataset");
  fs::path report_dir;
  bool oracle = false, panels = false;
  ev->add_option("--ckpt", ckpt_path, "Checkpoint")->required();
  ev->add_option("--manifest", manifest, "Dataset manifest")->required();
  ev->add_option("--steps", steps, "Reverse diffusion steps");
  ev->add_option("--seed", seed, "Random seed")->required();
  ev->add_option("--report-dir", report_dir, "Output directory")->required();
  ev->add_flag("--oracle", oracle, "Use the clean image's latent as the prior (diagnostics)");
  ev->add_flag("--panels", panels, "Also render panels and error maps");

  // report
  auto* rp = app.add_subcommand("report", "Render panels and error maps from an evaluation directory");
  rp->add_option("--report-dir", report_dir, "Directory written by evaluate")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (sim->parsed()) {
      tp.seed = sim_seed;
      tp.validate();
      if (count == 0) throw ConfigError("--count must be positive");
      RunManifest run("simulate");
      fs::create_directories(out_dir);
      fs::path sources = clean_dir;
      if (patterns > 0) {
        if (!clean_dir.empty()) throw ConfigError("--patterns and --clean-dir are mutually exclusive");
        sources = out_dir / "sources";
        fs::create_directories(sources);
        for (std::size_t i = 0; i < patterns; ++i) {
          char name[32];
          std::snprintf(name, sizeof name, "pattern_%05zu.png", i);
          save_image(synthesize_pattern(pattern_size, pattern_size, 1, derive_seed(sim_seed, 1000000 + i)),
                     sources / name);
        }
      } else if (clean_dir.empty()) {
        throw ConfigError("one of --clean-dir or --patterns is required");
      } else {
        for (const auto& p : list_images(clean_dir)) run.input(p);
      }
      const auto m = make_dataset(sources, out_dir, tp, count);
      run.flag("clean_dir", sources.string());
      run.flag("patterns", patterns);
      run.flag("pattern_size", pattern_size);
      run.flag("tilt", tp.tilt_strength);
      run.flag("tilt_corr", tp.tilt_correlation);
      run.flag("sigma_min", tp.sigma_min);
      run.flag("sigma_max", tp.sigma_max);
      run.flag("noise", tp.noise_std);
      run.flag("count", count);
      run.flag("seed", sim_seed);
      run.write(out_dir / "run.json");
      std::cout << m.string() << '\n';
    } else if (s1->parsed() || s2->parsed()) {
      const int stage = s1->parsed() ? 1 : 2;
      TrainConfig config = TrainConfig::load(config_path);
      config.seed = train_seed;
      config.stage = stage;
      config.validate();
      RunManifest run(stage == 1 ? "train-stage1" : "train-stage2");
      run.flag("seed", train_seed);
      run.flag("config_text", config.to_text());
      input_manifest_files(run, manifest);
      run.input(config_path);
      const auto pairs = load_pairs(manifest);
      TrainHooks hooks{curve_path.empty() ? fs::path(out_ckpt.string() + ".curve.tsv") : curve_path, progress};
      TrainOutput out;
      if (stage == 1) {
        std::optional<Checkpoint> init;
        if (!init_ckpt.empty()) {
          run.input(init_ckpt);
          init = load_checkpoint(init_ckpt);
        }
        out = train_stage1(pairs, config, init ? &*init : nullptr, hooks);
      } else {
        run.input(init_ckpt);
        out = train_stage2(load_checkpoint(init_ckpt), pairs, config, hooks);
      }
      save_checkpoint(out.checkpoint, out_ckpt);
      run.write(sidecar(out_ckpt));
    } else if (rs->parsed()) {
      RunManifest run("restore");
      run.input(ckpt_path);
      run.input(input_path);
      run.flag("steps", steps);
      run.flag("seed", seed);
      const Checkpoint ck = load_checkpoint(ckpt_path);
      if (ck.stage != 2) throw ContractViolation("restore needs a stage-2 checkpoint with a trained prior");
      const Pipeline p = load_pipeline(ck);
      const Image degraded = load_image(input_path);
      save_image(p.restore(degraded, p.sample_prior(degraded, steps, seed)), output_path);
      run.write(sidecar(output_path));
    } else if (ev->parsed()) {
      RunManifest run("evaluate");
      run.input(ckpt_path);
      input_manifest_files(run, manifest);
      run.flag("steps", steps);
      run.flag("seed", seed);
      run.flag("oracle", oracle);
      EvalOptions opts;
      opts.sampling_steps = steps;
      opts.seed = seed;
      opts.mode = oracle ? PriorMode::kOracle : PriorMode::kSampled;
      opts.report_dir = report_dir;
      opts.panels = panels;
      const auto r = evaluate(load_checkpoint(ckpt_path), load_pairs(manifest), opts);
      run.write(report_dir / "run.json");
      std::printf("restored\tpsnr %.4f\tssim %.4f\n", r.restored.psnr_db, r.restored.ssim);
      std::printf("degraded\tpsnr %.4f\tssim %.4f\n", r.degraded.psnr_db, r.degraded.ssim);
    } else if (rp->parsed()) {
      RunManifest run("report");
      run.input(report_dir / "pairs.tsv");
      render_report(report_dir);
      run.write(report_dir / "report_run.json");
    }
  } catch (const ContractViolation& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitContract;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const CorruptCheckpoint& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const VersionMismatch& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DimensionError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const SizeError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
