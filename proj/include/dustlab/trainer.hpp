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

#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "dustlab/checkpoint.hpp"
#include "dustlab/config.hpp"
#include "dustlab/dust_synth.hpp"
#include "dustlab/image_io.hpp"
#include "dustlab/network.hpp"
#include "dustlab/objectives.hpp"
#include "dustlab/optim.hpp"

namespace dustlab {

// ---------------------------------------------------------------------------
// Inference and evaluation

/// Restores one image of any extent: symmetric padding up to the model's input
/// multiple, forward, crop back.
template <class T>
Tensor<T> restore(const Model<T>& model, const Tensor<T>& dusty) {
  if (dusty.rank() != 4 || dusty.dim(1) != 3) throw DimensionError("restore: expected [N,3,H,W], got " + to_string(dusty.shape()));
  NoGradGuard no_grad;
  const Index m = model.config().input_multiple();
  const Index h = dusty.dim(2), w = dusty.dim(3);
  const Index ph = (m - h % m) % m, pw = (m - w % m) % m;
  Tensor<T> x = dusty;
  if (ph) x = pad(x, 2, 0, ph, PadMode::kSymmetric);
  if (pw) x = pad(x, 3, 0, pw, PadMode::kSymmetric);
  Tensor<T> y = model.forward(x);
  if (ph) y = slice(y, 2, 0, h);
  if (pw) y = slice(y, 3, 0, w);
  return y;
}

struct EvalSummary {
  std::vector<MetricRow> rows;
  double psnr = 0;
  double ssim = 0;
  double entropy = 0;
};

inline EvalSummary summarize(std::vector<MetricRow> rows) {
  EvalSummary s;
  for (const auto& r : rows) {
    s.psnr += r.psnr_db;
    s.ssim += r.ssim;
    s.entropy += r.entropy_bits;
  }
  if (!rows.empty()) {
    const double n = static_cast<double>(rows.size());
    s.psnr /= n;
    s.ssim /= n;
    s.entropy /= n;
  }
  s.rows = std::move(rows);
  return s;
}

/// Per-image metrics of the restored holdout images against their clean references.
template <class T>
EvalSummary evaluate(const Model<T>& model, const std::vector<ImagePair<T>>& pairs) {
  std::vector<MetricRow> rows;
  for (const auto& p : pairs) {
    if (!p.dusty.defined()) throw IoError("evaluate: pair '" + p.name + "' has no degraded image");
    const Tensor<T> out = restore(model, p.dusty);
    rows.push_back({p.name, psnr(out, p.clean), ssim(out, p.clean), entropy(out)});
  }
  return summarize(std::move(rows));
}

/// Metrics of the degraded inputs themselves (the no-op baseline).
template <class T>
EvalSummary evaluate_identity(const std::vector<ImagePair<T>>& pairs) {
  std::vector<MetricRow> rows;
  for (const auto& p : pairs) rows.push_back({p.name, psnr(p.dusty, p.clean), ssim(p.dusty, p.clean), entropy(p.dusty)});
  return summarize(std::move(rows));
}

/// Synthetic evaluation pairs from a stream independent of the training one.
/// Images are quantized to 8 bits so a copy written to disk reloads exactly.
template <class T>
std::vector<ImagePair<T>> synthetic_holdout(std::uint64_t seed, Index count, Index patch, SynthConfig synth = {}) {
  synth.augment = false;
  SampleGenerator<T> gen(synth, mix_seed(seed, 0x686f6c64ULL), patch);
  std::vector<ImagePair<T>> out;
  for (Index i = 0; i < count; ++i) {
    auto s = gen.sample(0, static_cast<std::uint32_t>(i));
    char name[32];
    std::snprintf(name, sizeof name, "holdout_%03lld.png", static_cast<long long>(i));
    out.push_back({name, quantize_like_io(s.clean), quantize_like_io(s.degraded)});
  }
  return out;
}

template <class T>
void write_pair_dir(const std::vector<ImagePair<T>>& pairs, const std::string& root) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(root) / "clean");
  fs::create_directories(fs::path(root) / "dusty");
  for (const auto& p : pairs) {
    write_image(p.clean, (fs::path(root) / "clean" / p.name).string());
    write_image(p.dusty, (fs::path(root) / "dusty" / p.name).string());
  }
}

// ---------------------------------------------------------------------------
// Run log

struct StepRecord {
  Index step = 0;
  double loss = 0;
  double l1 = 0;
  double msssim = 0;
  double perc = 0;
  double gnorm = 0;
};

struct EvalRecord {
  Index step = 0;
  double psnr = 0;
  double ssim = 0;
  double entropy = 0;
  std::uint64_t config_hash = 0;
};

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

struct RunLog {
  std::string config_text;
  std::uint64_t config_hash = 0;
  double baseline_psnr = 0;
  double baseline_ssim = 0;
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;
  // Not written to any artifact, so reruns stay byte-identical.
  double wall_seconds = 0;

  static std::string step_line(const StepRecord& r) {
    return "step=" + std::to_string(r.step) + " loss=" + format_metric(r.loss) + " l1=" + format_metric(r.l1) +
           " msssim=" + format_metric(r.msssim) + " perc=" + format_metric(r.perc) + " gnorm=" + format_metric(r.gnorm);
  }
  static std::string eval_line(const EvalRecord& r) {
    return "eval step=" + std::to_string(r.step) + " psnr=" + format_metric(r.psnr) + " ssim=" + format_metric(r.ssim) +
           " entropy=" + format_metric(r.entropy) + " config=" + hex64(r.config_hash);
  }

  /// Line-oriented log: a `config=<hash>` header, a baseline line, then records in step order.
  std::string text() const {
    std::ostringstream os;
    os << "config=" << hex64(config_hash) << "\n";
    os << "baseline psnr=" << format_metric(baseline_psnr) << " ssim=" << format_metric(baseline_ssim) << "\n";
    std::size_t e = 0;
    for (const auto& s : steps) {
      while (e < evals.size() && evals[e].step < s.step) os << eval_line(evals[e++]) << "\n";
      os << step_line(s) << "\n";
    }
    while (e < evals.size()) os << eval_line(evals[e++]) << "\n";
    return os.str();
  }

  /// Tab-separated copy; `kind` is `step` or `eval`, columns not applicable to a kind are empty.
  std::string table() const {
    std::ostringstream os;
    os << "kind\tstep\tloss\tl1\tmsssim\tperc\tgnorm\tpsnr\tssim\tentropy\n";
    for (const auto& s : steps) {
      os << "step\t" << s.step << "\t" << format_metric(s.loss) << "\t" << format_metric(s.l1) << "\t"
         << format_metric(s.msssim) << "\t" << format_metric(s.perc) << "\t" << format_metric(s.gnorm) << "\t\t\t\n";
    }
    for (const auto& r : evals) {
      os << "eval\t" << r.step << "\t\t\t\t\t\t" << format_metric(r.psnr) << "\t" << format_metric(r.ssim) << "\t"
         << format_metric(r.entropy) << "\n";
    }
    return os.str();
  }

  const EvalRecord* best_eval() const {
    const EvalRecord* best = nullptr;
    for (const auto& r : evals)
      if (!best || r.psnr > best->psnr) best = &r;
    return best;
  }
};

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
  // Directory for checkpoints, logs and the holdout copy; empty keeps everything in memory.
  std::string out_dir;
  // Called with every finished record; used for console progress.
  std::function<void(const std::string&)> on_line;
};

template <class T>
struct TrainResult {
  RunLog log;
  AdamState<T> optimizer;
};

/// Trains `model` in place. Batch entry b of step s (1-based) is sample
/// (epoch = s − 1, idx = b) of `data`; the next batch is generated
/// concurrently with the current step.
template <class T>
TrainResult<T> train(Model<T>& model, const SampleGenerator<T>& data, const std::vector<ImagePair<T>>& holdout,
                     const TrainConfig& cfg, const PerceptualExtractor<T>& extractor,
                     const TrainOptions& options = {}) {
  namespace fs = std::filesystem;
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const ModelConfig& mc = model.config();
  const int scales = ms_ssim_scale_count(cfg.patch, cfg.patch, 5);

  TrainResult<T> result;
  RunLog& log = result.log;
  log.config_text = to_text(mc) + to_text(cfg);
  log.config_hash = config_hash(log.config_text);
  const auto baseline = evaluate_identity(holdout);
  log.baseline_psnr = baseline.psnr;
  log.baseline_ssim = baseline.ssim;

  const bool to_disk = !options.out_dir.empty();
  const fs::path out(options.out_dir);
  if (to_disk) {
    fs::create_directories(out);
    write_pair_dir(holdout, (out / "holdout").string());
    std::ofstream(out / "config.txt") << log.config_text;
  }
  auto emit = [&](const std::string& line) {
    if (options.on_line) options.on_line(line);
  };
  auto checkpoint_meta_text = [&](const EvalRecord& r) {
    return "step=" + std::to_string(r.step) + "\npsnr=" + format_metric(r.psnr) + "\nssim=" + format_metric(r.ssim) +
           "\nconfig=" + hex64(r.config_hash) + "\n";
  };

  auto make_batch = [&data, batch = cfg.batch_size](Index step) {
    std::vector<PairedSample<T>> samples;
    for (Index b = 0; b < batch; ++b)
      samples.push_back(data.sample(static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(b)));
    return samples;
  };

  double best_psnr = -std::numeric_limits<double>::infinity();
  std::future<std::vector<PairedSample<T>>> next;
  if (cfg.steps > 0) next = std::async(std::launch::async, make_batch, Index{0});
  for (Index step = 1; step <= cfg.steps; ++step) {
    std::vector<PairedSample<T>> samples;
    try {
      samples = next.get();
    } catch (const NumericError& e) {
      std::ostringstream os;
      os << "non-finite data for step " << step << " (" << e.what() << "); batch provenance:\n";
      for (Index b = 0; b < cfg.batch_size; ++b)
        os << "seed=" << data.seed() << " epoch=" << step - 1 << " idx=" << b << "\n";
      if (to_disk) std::ofstream(out / "nan_batch.txt") << os.str();
      throw NumericError(os.str());
    }
    if (step < cfg.steps) next = std::async(std::launch::async, make_batch, step);
    auto [clean, dusty] = stack_batch(samples);

    model.params().zero_grad();
    LossTerms<T> terms;
    double loss = 0;
    try {
      Tensor<T> pred = model.forward(dusty);
      terms = total_loss(pred, clean, mc.loss_weights, extractor, scales);
      loss = static_cast<double>(terms.total.item());
      if (!std::isfinite(loss)) throw NumericError("loss is " + std::to_string(loss));
    } catch (const NumericError& e) {
      std::ostringstream os;
      os << "non-finite loss at step " << step << " (" << e.what() << "); batch provenance:\n";
      for (const auto& s : samples) os << s.provenance.to_line() << "\n";
      if (to_disk) std::ofstream(out / "nan_batch.txt") << os.str();
      if (next.valid()) next.wait();
      throw NumericError(os.str());
    }
    terms.total.backward();
    double gnorm = 0;
    try {
      gnorm = adam_step(model.params(), result.optimizer, cfg);
    } catch (...) {
      if (next.valid()) next.wait();
      throw;
    }
    log.steps.push_back({step, loss, terms.l1, terms.ms_ssim, terms.perceptual, gnorm});
    emit(RunLog::step_line(log.steps.back()));

    if (step % cfg.eval_every == 0 || step == cfg.steps) {
      model.params().zero_grad();
      const auto summary = evaluate(model, holdout);
      EvalRecord rec{step, summary.psnr, summary.ssim, summary.entropy, log.config_hash};
      log.evals.push_back(rec);
      emit(RunLog::eval_line(rec));
      if (to_disk && summary.psnr > best_psnr) {
        save_checkpoint((out / "best.ckpt").string(), model, &result.optimizer, checkpoint_meta_text(rec));
      }
      best_psnr = std::max(best_psnr, summary.psnr);
    }
  }
  model.params().zero_grad();
  if (to_disk) {
    std::string meta = "step=" + std::to_string(cfg.steps) + "\n";
    if (!log.evals.empty()) meta = checkpoint_meta_text(log.evals.back());
    save_checkpoint((out / "last.ckpt").string(), model, &result.optimizer, meta);
    std::ofstream(out / "run.log") << log.text();
    std::ofstream(out / "run.tsv") << log.table();
  }
  log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

/// Trains with the frozen extractor derived from the model config.
template <class T>
TrainResult<T> train(Model<T>& model, const SampleGenerator<T>& data, const std::vector<ImagePair<T>>& holdout,
                     const TrainConfig& cfg, const TrainOptions& options = {}) {
  const PerceptualExtractor<T> extractor(model.config().perceptual_seed);
  return train(model, data, holdout, cfg, extractor, options);
}

// ---------------------------------------------------------------------------
// Ablation

/// Applies a `+`-joined list of toggles (sfas, cifm, dcm, rel_bias, ms_ssim_term,
/// perceptual_term) to a copy of `base`.
inline RunConfig apply_toggles(RunConfig base, const std::string& toggles) {
  std::stringstream ss(toggles);
  std::string t;
  while (std::getline(ss, t, '+')) {
    t = config_text::trim(t);
    if (t == "sfas") base.model.sfas_enabled = false;
    else if (t == "cifm") base.model.cifm_enabled = false;
    else if (t == "dcm") base.model.dcm_enabled = false;
    else if (t == "rel_bias") base.model.rel_bias_enabled = false;
    else if (t == "ms_ssim_term") base.model.loss_weights.ms_ssim = 0;
    else if (t == "perceptual_term") base.model.loss_weights.perceptual = 0;
    else throw ConfigError("unknown ablation toggle '" + t + "'");
  }
  base.model.validate();
  return base;
}

struct AblationRow {
  std::string variant;
  std::uint64_t seed = 0;
  Index params = 0;
  double psnr = 0;
  double ssim = 0;
};

/// Final-eval metrics of the full model and of each toggled variant, trained
/// from the same seed on the same synthetic stream.
template <class T>
std::vector<AblationRow> ablate(const RunConfig& base, const std::vector<std::string>& toggles,
                                const std::vector<std::uint64_t>& seeds,
                                const std::function<void(const AblationRow&)>& on_row = {}) {
  std::vector<std::pair<std::string, RunConfig>> variants{{"full", base}};
  for (const auto& t : toggles) variants.emplace_back("-" + t, apply_toggles(base, t));
  std::vector<AblationRow> rows;
  for (std::uint64_t seed : seeds) {
    const auto holdout = synthetic_holdout<T>(seed, base.train.eval_count, base.train.eval_patch);
    for (const auto& [name, rc] : variants) {
      ModelConfig mc = rc.model;
      mc.seed = seed;
      TrainConfig tc = rc.train;
      tc.eval_every = std::max<Index>(tc.steps, 1);
      tc.seed = seed;
      Model<T> model(mc);
      SampleGenerator<T> data(SynthConfig{}, seed, tc.patch);
      train(model, data, holdout, tc);
      const auto final_eval = evaluate(model, holdout);
      rows.push_back({name, seed, model.count_params(), final_eval.psnr, final_eval.ssim});
      if (on_row) on_row(rows.back());
    }
  }
  return rows;
}

inline std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "variant\tseed\tparams\tpsnr_db\tssim\n";
  for (const auto& r : rows)
    os << r.variant << "\t" << r.seed << "\t" << r.params << "\t" << format_metric(r.psnr) << "\t"
       << format_metric(r.ssim) << "\n";
  return os.str();
}

}  // namespace dustlab
