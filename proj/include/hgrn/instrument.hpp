#pragma once

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <numbers>

#include "hgrn/train.hpp"

namespace hgrn {

inline constexpr std::size_t kGateBins = 64;

/// Forget-gate values of one layer pooled over time, lanes and samples.
struct GateLayerStats {
  std::size_t layer = 0;
  double mean = 0;
  double median = 0;
  double gamma_mean = 0;  // mean lower bound of the layer
  double gamma_min = 0;
  std::size_t count = 0;
  std::array<std::size_t, kGateBins> hist{};
};

namespace detail {

inline std::size_t gate_bin(double v) {
  return std::min(kGateBins - 1, std::size_t(std::max(0.0, v) * double(kGateBins)));
}

inline double median_of(std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + std::ptrdiff_t(mid), v.end());
  const double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + std::ptrdiff_t(mid));
  return 0.5 * (lo + hi);
}

}  // namespace detail

/// Runs evaluation forwards over `samples` and summarizes lambda per layer.
template <typename T>
std::vector<GateLayerStats> gate_stats(const ModelParams<T>& params, const ModelConfig& cfg,
                                       std::span<const Sample> samples, const ForwardOptions& opt = {}) {
  if (samples.empty()) throw TaskError("gate_stats: no samples");
  std::vector<std::vector<double>> pooled(cfg.layers);
  std::vector<GateLayerStats> out(cfg.layers);
  evaluate_samples<T>(params, cfg, samples, opt, [&](const ForwardTrace<T>& tr) {
    for (std::size_t k = 0; k < tr.layers.size(); ++k)
      for (T v : tr.layers[k].lambda) pooled[k].push_back(double(v));
  });
  const auto gamma = lower_bound_values(params, cfg.lower_bound_mode);
  for (std::size_t k = 0; k < cfg.layers; ++k) {
    auto& s = out[k];
    s.layer = k;
    s.count = pooled[k].size();
    long double sum = 0;
    for (double v : pooled[k]) {
      sum += v;
      ++s.hist[detail::gate_bin(v)];
    }
    s.mean = double(sum / static_cast<long double>(s.count));
    s.median = detail::median_of(pooled[k]);
    double gs = 0, gmin = 1;
    for (std::size_t j = 0; j < cfg.d; ++j) gs += double(gamma[k * cfg.d + j]), gmin = std::min(gmin, double(gamma[k * cfg.d + j]));
    s.gamma_mean = gs / double(cfg.d);
    s.gamma_min = gmin;
  }
  return out;
}

inline std::string gate_stats_header() {
  std::string h = "layer,mean,median";
  for (std::size_t b = 0; b < kGateBins; ++b) h += ",bin_" + std::to_string(b);
  return h;
}

inline void write_gate_stats_csv(const std::string& path, const std::vector<GateLayerStats>& stats) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  os << gate_stats_header() << '\n';
  for (const auto& s : stats) {
    os << s.layer << ',' << detail::csv_num(s.mean) << ',' << detail::csv_num(s.median);
    for (auto c : s.hist) os << ',' << c;
    os << '\n';
  }
}

struct ExtrapolationRow {
  std::size_t length = 0;
  double ppl = 0;
  double loss = 0;
  std::size_t tokens = 0;
};

/// Perplexity of one model at each inference length, in the given order.
template <typename T>
std::vector<ExtrapolationRow> extrapolate(const ModelParams<T>& params, const ModelConfig& cfg,
                                          std::span<const std::int32_t> corpus, std::span<const std::size_t> lengths,
                                          const ForwardOptions& opt = {}) {
  std::vector<ExtrapolationRow> rows;
  for (std::size_t L : lengths) {
    if (L == 0) throw ContractError("extrapolate: lengths must be >= 1");
    const EvalResult ev = evaluate_ppl(params, cfg, corpus, L, opt);
    rows.push_back({L, ev.ppl, ev.loss, ev.tokens});
  }
  return rows;
}

inline void write_extrapolation_csv(const std::string& path, const std::vector<ExtrapolationRow>& rows) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  os << "length,ppl\n";
  for (const auto& r : rows) os << r.length << ',' << detail::csv_num(r.ppl) << '\n';
}

struct ScanBenchRow {
  std::size_t length = 0;
  double sequential_ms = 0;
  double parallel_ms = 0;
};

namespace detail {

template <typename T>
double max_rel_diff(const ComplexSeq<T>& a, const ComplexSeq<T>& b) {
  double diff = 0, scale = 0;
  auto acc = [&](const std::vector<T>& x, const std::vector<T>& y) {
    for (std::size_t k = 0; k < x.size(); ++k) {
      diff = std::max(diff, std::abs(double(x[k]) - double(y[k])));
      scale = std::max(scale, std::abs(double(x[k])));
    }
  };
  acc(a.re, b.re);
  acc(a.im, b.im);
  return diff / std::max(scale, std::numeric_limits<double>::min());
}

template <typename F>
double median_ms(std::size_t repeats, F&& f) {
  std::vector<double> ms;
  for (std::size_t r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  return median_of(ms);
}

}  // namespace detail

/// Times the fused sequential kernel against the parallel scan on random
/// complex inputs. Each length is first checked for agreement; a mismatch
/// throws before any row is produced.
template <typename T>
std::vector<ScanBenchRow> scan_bench(std::span<const std::size_t> lengths, std::size_t d, std::size_t repeats,
                                     std::size_t threads, std::uint64_t seed) {
  if (repeats == 0) throw ContractError("scan_bench: repeats must be >= 1");
  const double tol = std::is_same_v<T, float> ? 1e-4 : 1e-10;
  Rng rng(seed);
  std::vector<std::pair<DecaySeq<T>, ComplexSeq<T>>> inputs;
  for (std::size_t n : lengths) {
    if (n == 0) throw ContractError("scan_bench: lengths must be >= 1");
    DecaySeq<T> dec{n, d, std::vector<T>(n * d), std::vector<T>(d), false};
    ComplexSeq<T> c = ComplexSeq<T>::zeros(n, d);
    for (auto& v : dec.lambda) v = T(rng.uniform());
    for (auto& v : dec.theta) v = T(rng.uniform(-std::numbers::pi, std::numbers::pi));
    for (auto& v : c.re) v = T(rng.uniform(-1, 1));
    for (auto& v : c.im) v = T(rng.uniform(-1, 1));
    const double err = detail::max_rel_diff(sequential_scan(dec, c), parallel_scan<T>(dec, c, std::nullopt, threads));
    if (!(err <= tol))
      throw NumericError("scan_bench: sequential and parallel scans disagree at n = " + std::to_string(n) +
                         " (relative difference " + std::to_string(err) + ")");
    inputs.emplace_back(std::move(dec), std::move(c));
  }
  std::vector<ScanBenchRow> rows;
  for (const auto& [dec, c] : inputs) {
    ScanBenchRow r;
    r.length = dec.n;
    r.sequential_ms = detail::median_ms(repeats, [&] { (void)sequential_scan(dec, c); });
    r.parallel_ms = detail::median_ms(repeats, [&] { (void)parallel_scan<T>(dec, c, std::nullopt, threads); });
    rows.push_back(r);
  }
  return rows;
}

inline void write_scan_bench_csv(const std::string& path, const std::vector<ScanBenchRow>& rows) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  os << "length,sequential_ms,parallel_ms\n";
  for (const auto& r : rows)
    os << r.length << ',' << detail::csv_num(r.sequential_ms) << ',' << detail::csv_num(r.parallel_ms) << '\n';
}

/// Decay record of layer k as scan input.
template <typename T>
DecaySeq<T> layer_decay(const ForwardTrace<T>& trace, std::size_t k) {
  if (k >= trace.layers.size()) throw ContractError("layer " + std::to_string(k) + " out of range");
  const auto& L = trace.layers[k];
  return {trace.n, trace.d, L.lambda, L.theta, L.per_step_theta};
}

/// Largest Toeplitz deviation of Theta over the given lanes of layer k.
template <typename T>
double theta_toeplitz_deviation(const ForwardTrace<T>& trace, std::size_t k, std::size_t cap = kDefaultMixingCap) {
  const DecaySeq<T> dec = layer_decay(trace, k);
  if (!dec.has_phase()) return 0;
  double worst = 0;
  for (std::size_t j = 0; j < dec.d; ++j) worst = std::max(worst, double(toeplitz_deviation(mixing_matrix(dec, j, cap))));
  return worst;
}

/// Writes one mixing-matrix CSV per lane for layer k of the forward over `tokens`.
template <typename T>
std::vector<std::string> export_mixing(const ModelParams<T>& params, const ModelConfig& cfg,
                                       std::span<const std::int32_t> tokens, std::size_t layer,
                                       std::span<const std::size_t> dims, std::size_t cap, const std::string& out_dir) {
  if (!cfg.tie_input_gate) throw ContractError("export_mixing: the mixing matrix assumes the tied input gate");
  if (layer >= cfg.layers)
    throw ContractError("export_mixing: layer " + std::to_string(layer) + " of " + std::to_string(cfg.layers));
  Tape<T> tape(false);
  ForwardTrace<T> trace;
  model_forward(tape, params, cfg, tokens, &trace);
  const DecaySeq<T> dec = layer_decay(trace, layer);
  std::filesystem::create_directories(out_dir);
  std::vector<std::string> paths;
  for (std::size_t j : dims) {
    const auto path = out_dir + "/mixing_layer" + std::to_string(layer) + "_dim" + std::to_string(j) + ".csv";
    write_mixing_csv(path, mixing_matrix(dec, j, cap));
    paths.push_back(path);
  }
  return paths;
}

struct AblationVariant {
  std::string name;
  RunConfig config;
};

inline std::vector<AblationVariant> ablation_variants(const RunConfig& base, const std::string& suite) {
  std::vector<AblationVariant> out;
  auto add = [&](std::string name, auto&& edit) {
    RunConfig c = base;
    edit(c.model);
    out.push_back({std::move(name), std::move(c)});
  };
  if (suite == "lower_bound") {
    for (auto [name, mode] : {std::pair{"monotone", LowerBoundMode::monotone}, {"none", LowerBoundMode::none},
                              {"random", LowerBoundMode::random}, {"decreasing", LowerBoundMode::decreasing},
                              {"only", LowerBoundMode::only}})
      add(name, [mode](ModelConfig& m) { m.lower_bound_mode = mode; });
  } else if (suite == "gates") {
    add("full", [](ModelConfig&) {});
    add("no_input_gate", [](ModelConfig& m) { m.tie_input_gate = false, m.untied_input = UntiedInput::one; });
    add("no_output_gate", [](ModelConfig& m) { m.use_output_gate = false; });
  } else if (suite == "complex") {
    add("full", [](ModelConfig& m) { m.use_complex = true, m.theta_data_dependent = false; });
    add("no_complex", [](ModelConfig& m) { m.use_complex = false, m.theta_data_dependent = false; });
    add("data_dependent_theta", [](ModelConfig& m) { m.use_complex = true, m.theta_data_dependent = true; });
  } else {
    throw ConfigError("unknown ablation suite '" + suite + "' (expected lower_bound, gates or complex)");
  }
  return out;
}

struct AblationRow {
  std::string variant;
  double val_loss = 0;
  double val_ppl = 0;
  double val_acc = 0;
  std::size_t num_params = 0;
  double toeplitz_dev = 0;  // Theta diagonal spread, layer 0, first validation sample
};

template <typename T>
std::size_t param_count(ModelParams<T>& params) {
  std::size_t n = 0;
  for (const auto& p : params.named()) n += p.tensor.size();
  return n;
}

inline constexpr double kToeplitzBreak = 1e-3;

/// Trains every variant of `suite` with the base seeds and budget and reports
/// final validation metrics. Each variant gets its own run directory under
/// out_dir when out_dir is set. The data-dependent phase variant must break
/// the Toeplitz structure of Theta; if it does not, this throws.
template <typename T>
std::vector<AblationRow> run_ablation(const RunConfig& base, const std::string& suite, const std::string& out_dir,
                                      std::ostream* log = nullptr) {
  std::vector<AblationRow> rows;
  for (auto& v : ablation_variants(base, suite)) {
    v.config.validate();
    const DataSource data = DataSource::from_config(v.config);
    TrainOptions opt;
    opt.log = log;
    opt.forward.scan.parallel_threshold = v.config.instrument.parallel_threshold;
    opt.forward.scan.threads = v.config.instrument.threads;
    if (!out_dir.empty()) {
      opt.out_dir = out_dir + "/" + v.name;
      std::filesystem::create_directories(opt.out_dir);
      std::ofstream(opt.out_dir + "/config.json") << config_to_text(v.config);
    }
    if (log) *log << "== variant " << v.name << '\n';
    TrainResult<T> r = train<T>(v.config, data, std::nullopt, opt);
    const EvalResult ev =
        evaluate_samples(r.params, v.config.model, std::span<const Sample>(data.validation()), opt.forward);
    AblationRow row{v.name, ev.loss, ev.ppl, ev.accuracy, param_count(r.params), 0.0};
    if (v.config.model.use_complex && !data.validation().empty()) {
      const auto& s = data.validation().front();
      const std::size_t n = std::min(s.tokens.size(), v.config.instrument.mixing_cap);
      Tape<T> tape(false);
      ForwardTrace<T> trace;
      model_forward(tape, r.params, v.config.model, std::span<const std::int32_t>(s.tokens).first(n), &trace);
      row.toeplitz_dev = theta_toeplitz_deviation(trace, 0, v.config.instrument.mixing_cap);
      if (v.config.model.theta_data_dependent && !(row.toeplitz_dev > kToeplitzBreak))
        throw NumericError("data-dependent theta produced a Toeplitz Theta (deviation " +
                           std::to_string(row.toeplitz_dev) + ")");
    }
    rows.push_back(row);
  }
  return rows;
}

inline void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  os << "variant,val_loss,val_ppl,val_acc,num_params,toeplitz_dev\n";
  for (const auto& r : rows)
    os << r.variant << ',' << detail::csv_num(r.val_loss) << ',' << detail::csv_num(r.val_ppl) << ','
       << detail::csv_num(r.val_acc) << ',' << r.num_params << ',' << detail::csv_num(r.toeplitz_dev) << '\n';
}

}  // namespace hgrn
