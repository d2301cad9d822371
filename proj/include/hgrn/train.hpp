#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <optional>

#include "hgrn/checkpoint.hpp"
#include "hgrn/optim.hpp"
#include "hgrn/tasks.hpp"

namespace hgrn {

struct MetricsRecord {
  std::size_t step = 0;
  double train_loss = std::numeric_limits<double>::quiet_NaN();  // nats/token
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  double val_ppl = std::numeric_limits<double>::quiet_NaN();
  double val_acc = std::numeric_limits<double>::quiet_NaN();
  double lr = 0;
  double wall_ms = 0;
};

struct EvalResult {
  double loss = 0;  // mean nats per predicted token
  double ppl = 1;
  double accuracy = 0;
  std::size_t tokens = 0;
};

/// Logits and masked cross-entropy of one sample on `tape`.
template <typename T>
Tensor<T> sample_loss(Tape<T>& tape, const ModelParams<T>& params, const ModelConfig& cfg, const Sample& s,
                      std::type_identity_t<ForwardTrace<T>>* trace = nullptr, const ForwardOptions& opt = {}, std::type_identity_t<Tensor<T>>* logits_out = nullptr) {
  Tensor<T> logits = model_forward(tape, params, cfg, s.tokens, trace, opt);
  if (logits_out) *logits_out = logits;
  return cross_entropy(tape, logits, s.targets, s.mask);
}

/// Per-token mean cross-entropy and argmax accuracy over every unmasked
/// position of the samples. `on_trace` sees the decay record of each forward.
template <typename T>
EvalResult evaluate_samples(const ModelParams<T>& params, const ModelConfig& cfg, std::span<const Sample> samples,
                            const ForwardOptions& opt = {},
                            const std::function<void(const ForwardTrace<T>&)>& on_trace = {}) {
  if (samples.empty()) throw TaskError("evaluation set is empty");
  double nll = 0;
  std::size_t count = 0, correct = 0;
  ForwardTrace<T> trace;
  for (const auto& s : samples) {
    Tape<T> tape(false);
    Tensor<T> logits;
    const Tensor<T> loss = sample_loss(tape, params, cfg, s, on_trace ? &trace : nullptr, opt, &logits);
    std::size_t m = 0;
    const std::size_t V = logits.cols();
    for (std::size_t i = 0; i < s.tokens.size(); ++i) {
      if (!s.mask[i]) continue;
      ++m;
      const auto row = logits.values().subspan(i * V, V);
      const auto best = std::size_t(std::max_element(row.begin(), row.end()) - row.begin());
      correct += best == std::size_t(s.targets[i]);
    }
    nll += double(loss.item()) * double(m);
    count += m;
    if (on_trace) on_trace(trace);
  }
  EvalResult r;
  r.tokens = count;
  r.loss = nll / double(count);
  r.ppl = std::exp(r.loss);
  r.accuracy = double(correct) / double(count);
  return r;
}

/// Perplexity over non-overlapping windows of length seq_len.
template <typename T>
EvalResult evaluate_ppl(const ModelParams<T>& params, const ModelConfig& cfg, std::span<const std::int32_t> corpus,
                        std::size_t seq_len, const ForwardOptions& opt = {}) {
  if (corpus.size() < 2) throw TaskError("evaluate_ppl: empty corpus");
  const auto windows = lm_windows(corpus, seq_len);
  return evaluate_samples(params, cfg, std::span<const Sample>(windows), opt);
}

/// Training and validation data for a run.
class DataSource {
 public:
  static DataSource from_config(const RunConfig& cfg) {
    DataSource src;
    src.spec_ = task_spec(cfg);
    const std::size_t n_val = std::max<std::size_t>(1, cfg.train.eval_batches * cfg.train.batch_size);
    if (cfg.task.kind == TaskKind::byte_lm) {
      if (cfg.task.corpus.empty()) throw TaskError("task.corpus must name a file for byte_lm");
      src.corpus_ = load_byte_corpus(cfg.task.corpus, cfg.task.split_ratio);
      src.stream_.emplace(src.corpus_.train, cfg.train.seq_len, cfg.data_seed());
      const auto& val = src.corpus_.val.size() >= 2 ? src.corpus_.val : src.corpus_.train;
      auto windows = lm_windows(val, cfg.train.seq_len);
      if (windows.size() > n_val) windows.resize(n_val);
      src.validation_ = std::move(windows);
    } else {
      for (std::size_t i = 0; i < n_val; ++i) src.validation_.push_back(gen_sample(src.spec_, kValidationBase + i));
    }
    return src;
  }

  /// Builds a byte-LM source directly from token streams.
  static DataSource from_streams(std::vector<std::int32_t> train, std::vector<std::int32_t> val, std::size_t seq_len,
                                 std::uint64_t seed, std::size_t n_val) {
    DataSource src;
    src.spec_ = {TaskKind::byte_lm, seq_len, 0, 256, seed};
    src.corpus_ = {std::move(train), std::move(val)};
    src.stream_.emplace(src.corpus_.train, seq_len, seed);
    const auto& v = src.corpus_.val.size() >= 2 ? src.corpus_.val : src.corpus_.train;
    auto windows = lm_windows(v, seq_len);
    if (windows.size() > n_val) windows.resize(n_val);
    src.validation_ = std::move(windows);
    return src;
  }

  Sample train_sample(std::uint64_t index) const {
    if (stream_) return stream_->at(index);
    return gen_sample(spec_, index);
  }
  const std::vector<Sample>& validation() const { return validation_; }
  const ByteCorpus& corpus() const { return corpus_; }
  const TaskSpec& spec() const { return spec_; }

  // Validation samples come from a disjoint index range of the generator.
  static constexpr std::uint64_t kValidationBase = std::uint64_t{1} << 40;

 private:
  TaskSpec spec_;
  ByteCorpus corpus_;
  std::optional<WindowStream> stream_;
  std::vector<Sample> validation_;
};

template <typename T>
struct TrainResult {
  ModelParams<T> params;
  std::vector<MetricsRecord> metrics;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::size_t best_step = 0;
};

struct TrainOptions {
  std::string out_dir;          // empty: no files written
  std::ostream* log = nullptr;  // human-readable progress table
  ForwardOptions forward;
};

namespace detail {

template <typename T>
std::string decay_diagnostic(const ForwardTrace<T>& trace) {
  std::ostringstream os;
  os << "last decay statistics:";
  for (std::size_t k = 0; k < trace.layers.size(); ++k) {
    const auto& L = trace.layers[k];
    double lmin = 1, lmax = 0, lsum = 0, gmin = 1, gmax = 0;
    for (T v : L.lambda) lmin = std::min(lmin, double(v)), lmax = std::max(lmax, double(v)), lsum += double(v);
    for (T v : L.gamma) gmin = std::min(gmin, double(v)), gmax = std::max(gmax, double(v));
    os << " layer " << k << " lambda[min " << lmin << " mean " << (L.lambda.empty() ? 0.0 : lsum / double(L.lambda.size()))
       << " max " << lmax << "] gamma[min " << gmin << " max " << gmax << "];";
  }
  return os.str();
}

inline std::string csv_num(double v) {
  if (std::isnan(v)) return "";
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace detail

inline const char* kMetricsHeader = "step,train_loss,val_loss,val_ppl,val_acc,lr";

inline void write_metrics_csv(const std::string& path, const std::vector<MetricsRecord>& records) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  os << kMetricsHeader << '\n';
  for (const auto& r : records)
    os << r.step << ',' << detail::csv_num(r.train_loss) << ',' << detail::csv_num(r.val_loss) << ','
       << detail::csv_num(r.val_ppl) << ',' << detail::csv_num(r.val_acc) << ',' << detail::csv_num(r.lr) << '\n';
}

inline void write_timing_csv(const std::string& path, const std::vector<MetricsRecord>& records) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  os << "step,wall_ms\n";
  for (const auto& r : records) os << r.step << ',' << detail::csv_num(r.wall_ms) << '\n';
}

namespace detail {

template <typename T>
TrainResult<T> train_stage(const RunConfig& cfg, const DataSource& data, std::optional<ModelParams<T>> init,
                           const TrainOptions& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult<T> result;
  result.params = init ? std::move(*init) : init_params<T>(cfg.model, cfg.train.seed);
  auto named = result.params.named();
  if (cfg.train.freeze_theta)
    for (auto& p : named)
      if (p.name.ends_with(".theta")) p.tensor.set_requires_grad(false);

  if (!opt.out_dir.empty()) std::filesystem::create_directories(opt.out_dir);
  auto ckpt = [&](const std::string& name) {
    if (!opt.out_dir.empty()) save_checkpoint(opt.out_dir + "/" + name, cfg.model, result.params);
  };
  if (opt.log)
    *opt.log << std::setw(8) << "step" << std::setw(12) << "train_loss" << std::setw(12) << "val_loss" << std::setw(12)
             << "val_ppl" << std::setw(10) << "val_acc" << std::setw(12) << "lr" << std::setw(12) << "wall_ms" << '\n';

  AdamW<T> optim(cfg.train);
  const std::size_t B = cfg.train.batch_size;
  double loss_acc = 0;
  std::size_t loss_count = 0;
  ForwardTrace<T> trace;
  for (std::size_t step = 1; step <= cfg.train.total_steps; ++step) {
    const double lr = lr_at(step, cfg.train);
    result.params.zero_grad();
    for (std::size_t b = 0; b < B; ++b) {
      const Sample s = data.train_sample((step - 1) * B + b);
      Tape<T> tape;
      const Tensor<T> loss = sample_loss(tape, result.params, cfg.model, s, &trace, opt.forward);
      if (!std::isfinite(double(loss.item())))
        throw NumericError("non-finite training loss at step " + std::to_string(step) + "; " +
                           detail::decay_diagnostic(trace));
      loss_acc += double(loss.item());
      ++loss_count;
      tape.backward(scale(tape, loss, T(1) / T(B)));
    }
    if (cfg.train.grad_clip > 0) clip_grad_norm(named, cfg.train.grad_clip);
    optim.step(named, lr, step);

    const bool last = step == cfg.train.total_steps;
    const bool do_eval = step % cfg.train.eval_interval == 0 || last;
    if (step % cfg.train.log_interval == 0 || do_eval) {
      MetricsRecord rec;
      rec.step = step;
      rec.train_loss = loss_acc / double(loss_count);
      rec.lr = lr;
      loss_acc = 0;
      loss_count = 0;
      if (do_eval) {
        const EvalResult ev = evaluate_samples(result.params, cfg.model, std::span<const Sample>(data.validation()), opt.forward);
        rec.val_loss = ev.loss;
        rec.val_ppl = ev.ppl;
        rec.val_acc = ev.accuracy;
        if (ev.loss < result.best_val_loss) {
          result.best_val_loss = ev.loss;
          result.best_step = step;
          ckpt("best.ckpt");
        }
      }
      rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      if (opt.log)
        *opt.log << std::setw(8) << rec.step << std::setw(12) << std::setprecision(5) << rec.train_loss << std::setw(12)
                 << rec.val_loss << std::setw(12) << rec.val_ppl << std::setw(10) << rec.val_acc << std::setw(12)
                 << rec.lr << std::setw(12) << std::setprecision(6) << rec.wall_ms << std::endl;
      result.metrics.push_back(rec);
    }
  }
  ckpt("final.ckpt");
  if (!opt.out_dir.empty()) {
    write_metrics_csv(opt.out_dir + "/metrics.csv", result.metrics);
    write_timing_csv(opt.out_dir + "/timing.csv", result.metrics);
  }
  return result;
}

}  // namespace detail

/// Runs total_steps of forward/backward/AdamW from `params` (or a fresh init
/// from train.seed), after any curriculum stages. Fully deterministic for a
/// fixed configuration.
///
/// Each curriculum stage restarts the optimizer and the schedule, with warmup
/// capped at a tenth of the stage. `data` serves the main stage only. Metrics
/// steps and wall times count from the start of the first stage, and best.ckpt
/// tracks the main stage.
template <typename T>
TrainResult<T> train(const RunConfig& cfg, const DataSource& data, std::optional<ModelParams<T>> init = std::nullopt,
                     const TrainOptions& opt = {}) {
  cfg.validate();
  const auto& stages = cfg.train.curriculum_lengths;
  if (stages.empty()) return detail::train_stage(cfg, data, std::move(init), opt);

  const auto t0 = std::chrono::steady_clock::now();
  std::vector<MetricsRecord> metrics;
  std::size_t step_offset = 0;
  double ms_offset = 0;
  auto absorb = [&](const std::vector<MetricsRecord>& recs, std::size_t steps) {
    for (auto r : recs) {
      r.step += step_offset;
      r.wall_ms += ms_offset;
      metrics.push_back(r);
    }
    step_offset += steps;
    ms_offset = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  };
  for (std::size_t i = 0; i < stages.size(); ++i) {
    RunConfig sc = cfg;
    sc.train.curriculum_lengths.clear();
    sc.train.curriculum_steps.clear();
    sc.train.seq_len = stages[i];
    sc.train.total_steps = cfg.train.curriculum_steps[i];
    sc.train.warmup_steps = std::min(cfg.train.warmup_steps, sc.train.total_steps / 10);
    TrainOptions so = opt;
    so.out_dir.clear();
    if (opt.log) *opt.log << "curriculum stage " << i + 1 << ": seq_len " << stages[i] << '\n';
    auto r = detail::train_stage(sc, DataSource::from_config(sc), std::move(init), so);
    absorb(r.metrics, sc.train.total_steps);
    init = std::move(r.params);
  }
  RunConfig main = cfg;
  main.train.curriculum_lengths.clear();
  main.train.curriculum_steps.clear();
  if (opt.log) *opt.log << "main stage: seq_len " << cfg.train.seq_len << '\n';
  TrainResult<T> result = detail::train_stage(main, data, std::move(init), opt);
  result.best_step += step_offset;
  absorb(result.metrics, 0);
  result.metrics = std::move(metrics);
  if (!opt.out_dir.empty()) {
    write_metrics_csv(opt.out_dir + "/metrics.csv", result.metrics);
    write_timing_csv(opt.out_dir + "/timing.csv", result.metrics);
  }
  return result;
}

struct GradcheckEntry {
  std::string name;
  std::size_t count = 0;
  double max_rel_err = 0;
  bool frozen = false;
  bool pass = true;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double max_rel_err = 0;
  double tolerance = 0;
  bool pass = true;
};

struct GradcheckOptions {
  double tolerance = 1e-4;
  double step = 1e-5;
  std::size_t n = 6;
  std::uint64_t seed = 7;
  std::vector<std::string> frozen;  // parameter names excluded from differentiation
  std::string corrupt;              // parameter whose analytic gradient is perturbed (fault injection)
};

/// Relative error with a floor so gradients that vanish in both routes compare as equal.
inline double grad_rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

/// Central finite differences against the analytic gradient for every element
/// of every parameter of a randomized model, in 64-bit.
inline GradcheckReport gradient_check_model(const ModelConfig& cfg, const GradcheckOptions& opt = {}) {
  using T = double;
  ModelParams<T> params = init_params<T>(cfg, opt.seed);
  Rng rng(opt.seed * 7919 + 1);
  // move off the symmetric init so every path carries signal
  for (auto& p : params.named()) {
    const double spread = p.name == "Gamma" ? 1.0 : 0.3;
    for (auto& v : p.tensor.values()) v += T(rng.uniform(-spread, spread));
  }
  Sample s;
  for (std::size_t i = 0; i < opt.n; ++i) {
    s.tokens.push_back(std::int32_t(rng.below(cfg.vocab_size)));
    s.targets.push_back(std::int32_t(rng.below(cfg.vocab_size)));
    s.mask.push_back(1);
  }
  auto named = params.named();
  for (auto& p : named)
    if (std::find(opt.frozen.begin(), opt.frozen.end(), p.name) != opt.frozen.end()) p.tensor.set_requires_grad(false);

  ForwardOptions fwd;
  fwd.scan.parallel_threshold = std::numeric_limits<std::size_t>::max();
  {
    Tape<T> tape;
    params.zero_grad();
    tape.backward(sample_loss<T>(tape, params, cfg, s, nullptr, fwd));
  }
  auto loss_at = [&] {
    Tape<T> tape(false);
    return sample_loss<T>(tape, params, cfg, s, nullptr, fwd).item();
  };

  GradcheckReport report;
  report.tolerance = opt.tolerance;
  for (auto& p : named) {
    GradcheckEntry e;
    e.name = p.name;
    e.count = p.tensor.size();
    if (!p.tensor.requires_grad()) {
      e.frozen = true;
      report.entries.push_back(e);
      continue;
    }
    std::vector<T> analytic(p.tensor.grad().begin(), p.tensor.grad().end());
    if (p.name == opt.corrupt)
      for (auto& g : analytic) g = g * 1.01 + 1e-3;
    auto w = p.tensor.values();
    for (std::size_t k = 0; k < w.size(); ++k) {
      const T orig = w[k];
      w[k] = orig + opt.step;
      const double up = loss_at();
      w[k] = orig - opt.step;
      const double down = loss_at();
      w[k] = orig;
      e.max_rel_err = std::max(e.max_rel_err, grad_rel_err(analytic[k], (up - down) / (2 * opt.step)));
    }
    e.pass = e.max_rel_err < opt.tolerance;
    report.max_rel_err = std::max(report.max_rel_err, e.max_rel_err);
    report.pass = report.pass && e.pass;
    report.entries.push_back(e);
  }
  return report;
}

/// Small fixture used by the gradient check: H=2, d=4, vocab 11.
inline ModelConfig gradcheck_fixture() {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.d = 4;
  cfg.vocab_size = 11;
  return cfg;
}

}  // namespace hgrn
