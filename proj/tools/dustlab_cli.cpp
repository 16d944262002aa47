// Copyright 2026 The dustlab Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// dustlab: command-line front end.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 I/O or data error,
// 3 numeric failure, 4 verification failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "dustlab/checkpoint.hpp"
#include "dustlab/config.hpp"
#include "dustlab/dust_synth.hpp"
#include "dustlab/image_io.hpp"
#include "dustlab/network.hpp"
#include "dustlab/runtime.hpp"
#include "dustlab/trainer.hpp"
#include "dustlab/verify.hpp"

namespace fs = std::filesystem;
using namespace dustlab;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitIo = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitVerify = 4;

// Published reference model: 1.866M parameters, 4.08 GFLOPs at 256×256.
constexpr double kTargetParams = 1.866e6;
constexpr double kTargetFlops = 4.08e9;

class UsageError : public Error {
 public:
  using Error::Error;
};

std::array<double, 3> parse_rgb(const std::string& flag, const std::string& text) {
  const auto parts = config_text::split_list(text);
  if (parts.size() != 3) throw UsageError(flag + ": expected r,g,b, got '" + text + "'");
  std::array<double, 3> out{};
  for (std::size_t i = 0; i < 3; ++i) out[i] = config_text::parse_double(flag, parts[i]);
  return out;
}

std::pair<Index, Index> parse_resolution(const std::string& text) {
  const auto x = text.find('x');
  if (x == std::string::npos) throw UsageError("--resolution: expected HxW, got '" + text + "'");
  const Index h = config_text::parse_int("--resolution", text.substr(0, x));
  const Index w = config_text::parse_int("--resolution", text.substr(x + 1));
  if (h < 1 || w < 1) throw UsageError("--resolution: extents must be positive");
  return {h, w};
}

/// Preset/config file plus `--set key=value` overrides, validated.
RunConfig resolve_config(const std::string& name, const std::vector<std::string>& sets) {
  RunConfig rc = load_run_config(name);
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set: expected key=value, got '" + kv + "'");
    const std::string key = config_text::trim(kv.substr(0, eq)), value = kv.substr(eq + 1);
    if (!apply_model_key(rc.model, key, value) && !apply_train_key(rc.train, key, value))
      throw UsageError("--set: unknown config key '" + key + "'");
  }
  rc.model.validate();
  rc.train.validate();
  return rc;
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string signed_percent(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%+.2f%%", v);
  return buf;
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  std::string clean_dir;
  std::string out;
  Index count = 16;
  std::uint64_t seed = 0;
  Index patch = 64;
  double beta_min = 0.4;
  double beta_max = 2.0;
  std::string ambient = "0.82,0.78,0.72";
  double smoothness = 0.75;
  bool no_augment = false;
};

int run_synth(const SynthArgs& a) {
  SynthConfig cfg;
  cfg.ambient = parse_rgb("--ambient", a.ambient);
  cfg.beta_min = a.beta_min;
  cfg.beta_max = a.beta_max;
  cfg.smoothness = a.smoothness;
  cfg.augment = !a.no_augment;
  for (double v : cfg.ambient)
    if (!(v >= 0 && v <= 1)) throw UsageError("--ambient: components must lie in [0, 1], got '" + a.ambient + "'");
  if (!(cfg.beta_min >= 0)) throw UsageError("--beta-min: must be >= 0");
  if (!(cfg.beta_max >= cfg.beta_min)) throw UsageError("--beta-max: must be >= --beta-min");
  if (!(cfg.smoothness >= 0 && cfg.smoothness <= 1)) throw UsageError("--smoothness: must lie in [0, 1]");
  if (a.count < 0) throw UsageError("--count: must be >= 0");
  if (a.patch < 2) throw UsageError("--patch: must be >= 2");

  SampleGenerator<float> gen(cfg, a.seed, a.patch);
  if (!a.clean_dir.empty()) {
    std::vector<Tensor<float>> images;
    for (const auto& name : list_images(a.clean_dir)) images.push_back(read_image<float>((fs::path(a.clean_dir) / name).string()));
    if (images.empty()) throw IoError("no .png/.ppm images in '" + a.clean_dir + "'");
    for (std::size_t i = 0; i < images.size(); ++i) {
      if (images[i].dim(2) < a.patch || images[i].dim(3) < a.patch)
        throw GeometryError("clean image " + std::to_string(i) + " is smaller than --patch " + std::to_string(a.patch));
    }
    gen.set_clean_images(std::move(images));
  }

  const fs::path out(a.out);
  fs::create_directories(out / "clean");
  fs::create_directories(out / "dusty");
  std::ofstream sidecar(out / "provenance.txt");
  if (!sidecar) throw IoError("cannot write '" + (out / "provenance.txt").string() + "'");
  sidecar << "# dustlab synth; one line per sample: seed=<u64> epoch=<u32> idx=<u32> A=<r,g,b> beta=<f> "
             "transform=<code>; files are sample_<idx>.png\n";
  sidecar << "# source=" << (a.clean_dir.empty() ? "procedural" : "clean-dir") << " patch=" << a.patch
          << " smoothness=" << config_text::format(cfg.smoothness) << " augment=" << (cfg.augment ? "true" : "false")
          << "\n";
  for (Index i = 0; i < a.count; ++i) {
    const auto s = gen.sample(0, static_cast<std::uint32_t>(i));
    char name[32];
    std::snprintf(name, sizeof name, "sample_%05lld.png", static_cast<long long>(i));
    write_image(s.clean, (out / "clean" / name).string());
    write_image(s.degraded, (out / "dusty" / name).string());
    sidecar << s.provenance.to_line() << "\n";
  }
  if (!sidecar) throw IoError("short write to provenance sidecar");
  std::cout << "wrote " << a.count << " pairs to " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string data;
  std::string config = "default";
  std::vector<std::string> sets;
  std::string out;
  std::uint64_t seed = 0;
  bool seed_given = false;
  Index log_every = 10;
  bool quiet = false;
};

template <class T>
int run_train(RunConfig rc, const TrainArgs& a) {
  SynthConfig synth;
  SampleGenerator<T> gen(synth, rc.train.seed, rc.train.patch);
  std::vector<ImagePair<T>> holdout;
  if (a.data.empty()) {
    holdout = synthetic_holdout<T>(rc.train.seed, rc.train.eval_count, rc.train.eval_patch);
  } else {
    auto pairs = load_pair_dir<T>(a.data);
    if (pairs.empty()) throw IoError("no images under '" + a.data + "/clean'");
    const auto reserve = static_cast<std::size_t>(rc.train.holdout);
    if (pairs.size() <= reserve)
      throw IoError("'" + a.data + "' has " + std::to_string(pairs.size()) + " images; need more than holdout = " +
                    std::to_string(reserve));
    const bool paired = pairs.front().dusty.defined();
    if (paired) {
      std::vector<std::pair<Tensor<T>, Tensor<T>>> train_pairs;
      for (std::size_t i = 0; i < pairs.size(); ++i) {
        if (i < reserve) holdout.push_back({pairs[i].name, pairs[i].clean, pairs[i].dusty});
        else train_pairs.emplace_back(pairs[i].clean, pairs[i].dusty);
      }
      gen.set_pairs(std::move(train_pairs));
    } else {
      std::vector<Tensor<T>> clean;
      for (std::size_t i = reserve; i < pairs.size(); ++i) clean.push_back(pairs[i].clean);
      gen.set_clean_images(std::move(clean));
      SynthConfig fixed_synth = synth;
      fixed_synth.augment = false;
      for (std::size_t i = 0; i < reserve; ++i) {
        SampleGenerator<T> one(fixed_synth, mix_seed(rc.train.seed, 0x686f6c64ULL), rc.train.eval_patch);
        one.set_clean_images({pairs[i].clean});
        const auto s = one.sample(0, static_cast<std::uint32_t>(i));
        holdout.push_back({pairs[i].name, quantize_like_io(s.clean), quantize_like_io(s.degraded)});
      }
    }
  }
  Model<T> model(rc.model);
  TrainOptions opts;
  opts.out_dir = a.out;
  Index seen = 0;
  opts.on_line = [&](const std::string& line) {
    if (a.quiet) return;
    const bool is_eval = line.rfind("eval", 0) == 0;
    if (is_eval || (++seen % a.log_every) == 0 || seen == 1) std::cout << line << "\n" << std::flush;
  };
  std::cout << "params=" << model.count_params() << " holdout=" << holdout.size() << "\n";
  const auto result = train(model, gen, holdout, rc.train, opts);
  const auto& log = result.log;
  std::cout << "baseline psnr=" << format_metric(log.baseline_psnr) << " ssim=" << format_metric(log.baseline_ssim)
            << "\n";
  if (const auto* best = log.best_eval())
    std::cout << "best step=" << best->step << " psnr=" << format_metric(best->psnr)
              << " ssim=" << format_metric(best->ssim) << "\n";
  std::cerr << "wall_seconds=" << fixed(log.wall_seconds, 1) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// infer / eval

template <class T>
int run_infer(const CheckpointFile& ckpt, const std::string& in, const std::string& out) {
  const Model<T> model = load_model<T>(ckpt);
  const Tensor<T> image = read_image<T>(in);
  write_image(restore(model, image), out);
  std::cout << "wrote " << out << " (" << image.dim(2) << "x" << image.dim(3) << ")\n";
  return 0;
}

template <class T>
int run_eval(const std::string& ckpt_path, const std::string& pairs_dir, bool baseline, const std::string& format) {
  const auto pairs = load_pair_dir<T>(pairs_dir);
  for (const auto& p : pairs)
    if (!p.dusty.defined()) throw IoError("'" + pairs_dir + "' has no dusty/ counterpart for " + p.name);
  EvalSummary summary;
  if (baseline) {
    summary = evaluate_identity(pairs);
  } else {
    const Model<T> model = load_model<T>(ckpt_path);
    summary = evaluate(model, pairs);
  }
  std::cout << (format == "tsv" ? metrics_report_table(summary.rows) : metrics_report_kv(summary.rows));
  return 0;
}

// ---------------------------------------------------------------------------
// info

int run_info(const std::string& config_name, const std::vector<std::string>& sets, const std::string& resolution) {
  const auto [h, w] = parse_resolution(resolution);
  RunConfig rc = resolve_config(config_name, sets);
  const Model<float> model(rc.model);
  const Index m = rc.model.input_multiple();
  if (h % m || w % m)
    throw UsageError("--resolution " + resolution + " must be a multiple of " + std::to_string(m) + " per side");
  const double params = static_cast<double>(model.count_params());
  const double flops = static_cast<double>(model.count_flops(h, w));
  std::cout << "config=" << config_name << "\n"
            << "resolution=" << h << "x" << w << "\n"
            << "params=" << model.count_params() << "\n"
            << "flops=" << model.count_flops(h, w) << "\n"
            << "gflops=" << fixed(flops / 1e9, 3) << "\n"
            << "flop_convention=2 per multiply-add; conv 2*k*k*Cin*Cout*H'*W', linear 2*Din*Dout per token, "
               "attention 2*L*L*d per head per window for scores and again for the weighted sum; biases, norms, "
               "activations, softmax and wavelet filtering excluded\n"
            << "target_params=1866000\n"
            << "target_flops=4080000000 (at 256x256)\n"
            << "params_deviation=" << signed_percent(100.0 * (params - kTargetParams) / kTargetParams) << "\n";
  if (h == 256 && w == 256)
    std::cout << "flops_deviation=" << signed_percent(100.0 * (flops - kTargetFlops) / kTargetFlops) << "\n";
  else
    std::cout << "flops_deviation=n/a (targets refer to 256x256)\n";
  return 0;
}

// ---------------------------------------------------------------------------
// ablate

int run_ablate(const std::string& config_name, const std::vector<std::string>& sets, const std::vector<std::string>& toggles,
               const std::vector<std::uint64_t>& seeds, const std::string& out) {
  RunConfig rc = resolve_config(config_name, sets);
  for (const auto& t : toggles) apply_toggles(rc, t);  // fail fast on unknown toggles
  std::cout << "variant\tseed\tparams\tpsnr_db\tssim\n" << std::flush;
  auto on_row = [](const AblationRow& r) {
    std::cout << r.variant << "\t" << r.seed << "\t" << r.params << "\t" << format_metric(r.psnr) << "\t"
              << format_metric(r.ssim) << "\n"
              << std::flush;
  };
  const auto rows = rc.model.precision == 64 ? ablate<double>(rc, toggles, seeds, on_row)
                                             : ablate<float>(rc, toggles, seeds, on_row);
  if (!out.empty()) {
    std::ofstream f(out);
    if (!f) throw IoError("cannot write '" + out + "'");
    f << ablation_table(rows);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dustlab: wavelet/attention image dedusting"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "Worker threads (default: DUSTLAB_THREADS, else 1)")->check(CLI::NonNegativeNumber);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Write synthetic dusty/clean pairs with provenance");
  synth->add_option("--clean-dir", sa.clean_dir, "Directory of clean .png/.ppm images (default: procedural scenes)")
      ->check(CLI::ExistingDirectory);
  synth->add_option("--out", sa.out, "Output directory")->required();
  synth->add_option("--count", sa.count, "Number of pairs")->capture_default_str();
  synth->add_option("--seed", sa.seed, "Random seed")->capture_default_str();
  synth->add_option("--patch", sa.patch, "Square sample extent in pixels")->capture_default_str();
  synth->add_option("--beta-min", sa.beta_min, "Smallest scattering coefficient")->capture_default_str();
  synth->add_option("--beta-max", sa.beta_max, "Largest scattering coefficient")->capture_default_str();
  synth->add_option("--ambient", sa.ambient, "Ambient light r,g,b in [0,1]")->capture_default_str();
  synth->add_option("--smoothness", sa.smoothness, "Depth-field smoothness in [0,1]")->capture_default_str();
  synth->add_flag("--no-augment", sa.no_augment, "Disable rotations/flips");

  TrainArgs ta;
  auto* trainc = app.add_subcommand("train", "Train a model and write checkpoints and logs");
  trainc->add_option("--data", ta.data, "Pair directory (clean/ and optionally dusty/); default: procedural")
      ->check(CLI::ExistingDirectory);
  trainc->add_option("--config", ta.config, "Preset (tiny, default, table2, paper) or config file")->capture_default_str();
  trainc->add_option("--set", ta.sets, "Override a config key: key=value (repeatable)");
  trainc->add_option("--out", ta.out, "Checkpoint/log directory")->required();
  auto* seed_opt = trainc->add_option("--seed", ta.seed, "Seed for initialization and data (overrides config)");
  trainc->add_option("--log-every", ta.log_every, "Print every n-th step record")->check(CLI::PositiveNumber);
  trainc->add_flag("--quiet", ta.quiet, "Suppress per-step output");

  std::string ckpt, in_path, out_path;
  auto* infer = app.add_subcommand("infer", "Restore one image");
  infer->add_option("--ckpt", ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  infer->add_option("--in", in_path, "Input image (.png/.ppm)")->required()->check(CLI::ExistingFile);
  infer->add_option("--out", out_path, "Output image (.png/.ppm)")->required();

  std::string pairs_dir, format = "kv";
  bool baseline = false;
  auto* evalc = app.add_subcommand("eval", "Print PSNR/SSIM/entropy of restored pairs");
  evalc->add_option("--ckpt", ckpt, "Checkpoint file")->check(CLI::ExistingFile);
  evalc->add_option("--pairs", pairs_dir, "Directory with clean/ and dusty/")->required()->check(CLI::ExistingDirectory);
  evalc->add_flag("--baseline", baseline, "Score the dusty images themselves (no model)");
  evalc->add_option("--format", format, "kv or tsv")->check(CLI::IsMember({"kv", "tsv"}))->capture_default_str();

  std::string module = "all";
  auto* grad = app.add_subcommand("gradcheck", "Run the verification suite");
  grad->add_option("--module", module, "Suite name or all")
      ->check(CLI::IsMember([] {
        auto m = verification_modules();
        m.insert(m.begin(), "all");
        return m;
      }()))
      ->capture_default_str();

  std::string info_config = "default", resolution = "256x256";
  std::vector<std::string> info_sets;
  auto* info = app.add_subcommand("info", "Parameter and FLOP accounting");
  info->add_option("--config", info_config, "Preset or config file")->capture_default_str();
  info->add_option("--set", info_sets, "Override a config key: key=value (repeatable)");
  info->add_option("--resolution", resolution, "HxW")->capture_default_str();

  std::string ablate_config = "default", ablate_out;
  std::vector<std::string> ablate_sets, toggles{"ms_ssim_term+perceptual_term"};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  auto* ablatec = app.add_subcommand("ablate", "Train toggled variants against the full model");
  ablatec->add_option("--config", ablate_config, "Preset or config file")->capture_default_str();
  ablatec->add_option("--set", ablate_sets, "Override a config key: key=value (repeatable)");
  ablatec->add_option("--toggles", toggles, "Comma-separated; join with + to disable together")
      ->delimiter(',')
      ->capture_default_str();
  ablatec->add_option("--seed,--seeds", seeds, "Comma-separated seeds")->delimiter(',')->capture_default_str();
  ablatec->add_option("--out", ablate_out, "Also write the table to this file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    set_num_threads(resolve_thread_count(threads));
    if (*synth) return run_synth(sa);
    if (*trainc) {
      RunConfig rc = resolve_config(ta.config, ta.sets);
      if (seed_opt->count()) rc.model.seed = rc.train.seed = ta.seed;
      return rc.model.precision == 64 ? run_train<double>(rc, ta) : run_train<float>(rc, ta);
    }
    if (*infer) {
      const std::string ext = detail::lower_ext(out_path);
      if (ext != ".png" && ext != ".ppm") throw UsageError("--out: unsupported image extension '" + ext + "' (use .png or .ppm)");
      const auto file = read_checkpoint(ckpt);
      return file.scalar_bytes == 8 ? run_infer<double>(file, in_path, out_path)
                                    : run_infer<float>(file, in_path, out_path);
    }
    if (*evalc) {
      if (ckpt.empty() && !baseline) throw UsageError("eval: --ckpt is required unless --baseline is given");
      const bool wide = !baseline && read_checkpoint(ckpt).scalar_bytes == 8;
      return wide ? run_eval<double>(ckpt, pairs_dir, baseline, format)
                  : run_eval<float>(ckpt, pairs_dir, baseline, format);
    }
    if (*grad) {
      const auto report = run_verification(module);
      std::cout << report.summary();
      return report.passed() ? 0 : kExitVerify;
    }
    if (*info) return run_info(info_config, info_sets, resolution);
    if (*ablatec) return run_ablate(ablate_config, ablate_sets, toggles, seeds, ablate_out);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ParameterError& e) {
    std::cerr << "parameter error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  }
  return kExitUsage;
}
