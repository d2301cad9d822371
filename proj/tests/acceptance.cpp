// Acceptance run: one PASS/FAIL line per criterion.
// Usage: acceptance [criterion numbers...]   (no arguments runs all of them)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include "hgrn/hgrn.hpp"

using namespace hgrn;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("hgrn_acceptance_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// ||x - y|| / max(||y||, tiny)
double normwise_rel(std::span<const double> x, std::span<const double> y) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    num += (x[i] - y[i]) * (x[i] - y[i]);
    den += y[i] * y[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

double rel_both(const ComplexSeq<double>& a, const ComplexSeq<double>& b) {
  return std::max(normwise_rel(a.re, b.re), normwise_rel(a.im, b.im));
}

// 1. sequential scan, parallel scan and H = A C agree.
Outcome scan_equivalence() {
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t ns[] = {1, 2, 3, 7, 64, 256, 1024};
  const std::size_t ds[] = {1, 4, 16};
  Rng rng(2024);
  double worst = 0;
  std::size_t mixing_checked = 0;
  for (std::size_t inst = 0; inst < 200; ++inst) {
    const std::size_t n = ns[inst % 7], d = ds[(inst / 7) % 3];
    DecaySeq<double> dec{n, d, std::vector<double>(n * d), std::vector<double>(d), false};
    for (auto& l : dec.lambda) l = rng.uniform();
    for (auto& th : dec.theta) th = rng.uniform(-std::numbers::pi, std::numbers::pi);
    auto c = ComplexSeq<double>::zeros(n, d);
    for (auto& v : c.re) v = rng.uniform(-1, 1);
    for (auto& v : c.im) v = rng.uniform(-1, 1);

    const auto seq = sequential_scan<double>(dec, c);
    const auto par = parallel_scan<double>(dec, c);
    worst = std::max(worst, rel_both(par, seq));
    if (n <= 256) {
      ++mixing_checked;
      for (std::size_t j = 0; j < d; ++j) {
        const auto [hr, hi] = apply_mixing(mixing_matrix(dec, j, 256), c, j);
        std::vector<double> sr(n), si(n);
        for (std::size_t t = 0; t < n; ++t) {
          sr[t] = seq.re[t * d + j];
          si[t] = seq.im[t * d + j];
        }
        worst = std::max({worst, normwise_rel(hr, sr), normwise_rel(hi, si)});
      }
    }
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-10 && secs < 60,
          "200 instances (" + std::to_string(mixing_checked) + " with mixing), max rel err " + fmt(worst) + ", " +
              fmt(secs) + " s"};
}

// 2. finite differences on every parameter of the small fixture.
Outcome gradient_fidelity() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto report = gradient_check_model(gradcheck_fixture(), GradcheckOptions{});
  const double secs = seconds_since(t0);
  bool has_theta = false, has_gamma = false, any_frozen = false;
  for (const auto& e : report.entries) {
    has_theta = has_theta || e.name.ends_with(".theta");
    has_gamma = has_gamma || e.name == "Gamma";
    any_frozen = any_frozen || e.frozen;
  }
  return {report.pass && report.max_rel_err < 1e-4 && has_theta && has_gamma && !any_frozen && secs < 120,
          std::to_string(report.entries.size()) + " parameters, max rel err " + fmt(report.max_rel_err) + ", " +
              fmt(secs) + " s"};
}

// 3. monotone lower bounds: first row zero, rows nondecreasing, top row below one.
Outcome lower_bound_schedule() {
  Rng rng(3);
  std::size_t bad = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t H = 1 + rng.below(8), d = 1 + rng.below(32);
    const double spread = trial % 2 ? 10.0 : 1.0;
    std::vector<double> raw(H * d);
    for (auto& v : raw) v = rng.uniform(-spread, spread);
    Tape<double> tape(false);
    const auto table = compute_lower_bounds(tape, Tensor<double>({H, d}, raw), LowerBoundMode::monotone);
    const auto g = table.gamma.values();
    for (std::size_t j = 0; j < d; ++j) {
      if (g[j] != 0.0) ++bad;
      for (std::size_t k = 1; k < H; ++k)
        if (g[k * d + j] < g[(k - 1) * d + j]) ++bad;
      if (!(g[(H - 1) * d + j] < 1.0)) ++bad;
    }
  }
  double uniform_err = 0;
  for (std::size_t H = 1; H <= 8; ++H) {
    const std::size_t d = 5;
    Tape<double> tape(false);
    const auto table = compute_lower_bounds(tape, Tensor<double>::zeros({H, d}), LowerBoundMode::monotone);
    const auto g = table.gamma.values();
    for (std::size_t k = 0; k < H; ++k)
      for (std::size_t j = 0; j < d; ++j) uniform_err = std::max(uniform_err, std::abs(g[k * d + j] - double(k) / double(H)));
  }
  return {bad == 0 && uniform_err <= 1e-12,
          "1000 random tables, " + std::to_string(bad) + " violations; uniform schedule max err " + fmt(uniform_err)};
}

// 4. mu = (target - gamma) / (1 - gamma) reconstructs the target and sits below it.
Outcome saturation_relief() {
  Rng rng(4);
  double worst = 0;
  std::size_t not_below = 0, samples = 0;
  while (samples < 100000) {
    const double gamma = rng.uniform(0, 0.999), target = rng.uniform(0, 1);
    if (!(gamma < target && target < 1)) continue;
    ++samples;
    const double mu = gate_for_decay(target, gamma);
    worst = std::max(worst, std::abs(gamma + (1 - gamma) * mu - target));
    if (!(mu < target)) ++not_below;
  }
  return {worst <= 1e-12 && not_below == 0,
          std::to_string(samples) + " samples, reconstruction err " + fmt(worst) + ", " + std::to_string(not_below) +
              " with mu >= target"};
}

ModelParams<double> jittered_params(const ModelConfig& cfg, std::uint64_t seed) {
  auto p = init_params<double>(cfg, seed);
  Rng rng(seed + 101);
  for (auto& np : p.named())
    for (auto& v : np.tensor.values()) v += rng.uniform(-0.3, 0.3);
  return p;
}

std::vector<std::int32_t> random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::int32_t> out(n);
  for (auto& t : out) t = std::int32_t(rng.below(vocab));
  return out;
}

// 5. Theta is Toeplitz with a shared phase and stops being so when the phase depends on the input.
Outcome toeplitz_property() {
  Rng rng(5);
  double shared_worst = 0;
  for (std::size_t n : {1, 2, 17, 64, 256}) {
    DecaySeq<double> dec{n, 3, std::vector<double>(n * 3), std::vector<double>(3), false};
    for (auto& l : dec.lambda) l = rng.uniform();
    for (auto& th : dec.theta) th = rng.uniform(-std::numbers::pi, std::numbers::pi);
    for (std::size_t j = 0; j < 3; ++j) shared_worst = std::max(shared_worst, toeplitz_deviation(mixing_matrix(dec, j, 256)));
  }
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.d = 8;
  cfg.vocab_size = 16;
  double model_shared = 0, dependent_min = std::numeric_limits<double>::infinity();
  for (bool dependent : {false, true}) {
    cfg.theta_data_dependent = dependent;
    const auto p = jittered_params(cfg, 9);
    const auto tokens = random_tokens(256, cfg.vocab_size, 10);
    Tape<double> tape(false);
    ForwardTrace<double> trace;
    model_forward(tape, p, cfg, tokens, &trace);
    for (std::size_t k = 0; k < cfg.layers; ++k) {
      const double dev = theta_toeplitz_deviation(trace, k);
      if (dependent)
        dependent_min = std::min(dependent_min, dev);
      else
        model_shared = std::max(model_shared, dev);
    }
  }
  shared_worst = std::max(shared_worst, model_shared);
  return {shared_worst < 1e-12 && dependent_min > 1e-3,
          "shared phase max diagonal spread " + fmt(shared_worst) + "; data-dependent min over layers " +
              fmt(dependent_min)};
}

// 6. changing token t leaves logits before t bit-for-bit unchanged.
Outcome causality() {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.d = 16;
  cfg.vocab_size = 32;
  const auto p = jittered_params(cfg, 6);
  const std::size_t n = 32;
  const auto base = random_tokens(n, cfg.vocab_size, 60);
  double leak = 0;
  std::size_t silent = 0;
  for (std::size_t threshold : {std::size_t(512), std::size_t(1)}) {
    ForwardOptions opt;
    opt.scan.parallel_threshold = threshold;
    Tape<double> t0(false);
    const auto ref = model_forward(t0, p, cfg, base, nullptr, opt);
    const std::size_t V = cfg.vocab_size;
    for (std::size_t t = 0; t < n; ++t) {
      auto tokens = base;
      tokens[t] = std::int32_t((std::size_t(tokens[t]) + 1 + t % (V - 1)) % V);
      Tape<double> t1(false);
      const auto out = model_forward(t1, p, cfg, tokens, nullptr, opt);
      double at_t = 0;
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t v = 0; v < V; ++v) {
          const double diff = std::abs(out.values()[s * V + v] - ref.values()[s * V + v]);
          if (s < t) leak = std::max(leak, diff);
          if (s == t) at_t = std::max(at_t, diff);
        }
      if (at_t == 0) ++silent;
    }
  }
  return {leak <= 1e-12 && silent == 0,
          "max change before the perturbed position " + fmt(leak) + "; " + std::to_string(silent) +
              " perturbations with no effect at their own position"};
}

// 7. memorize a fixed 512-byte string.
Outcome overfit() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(77);
  std::string text(512, ' ');
  for (auto& ch : text) ch = char(32 + rng.below(95));
  const auto tokens = tokenize(text);

  RunConfig cfg;
  cfg.model.layers = 2;
  cfg.model.d = 32;
  cfg.train.seq_len = 511;
  cfg.train.batch_size = 1;
  cfg.train.total_steps = 2000;
  cfg.train.warmup_steps = 100;
  cfg.train.peak_lr = 1e-2;
  cfg.train.weight_decay = 0;
  cfg.train.schedule = Schedule::cosine;
  cfg.train.eval_interval = 100;
  cfg.train.log_interval = 100;
  cfg.train.eval_batches = 1;
  cfg.train.seed = 7;
  const auto data = DataSource::from_streams(tokens, tokens, cfg.train.seq_len, 7, 1);
  const auto result = train<float>(cfg, data);
  std::size_t reached = 0;
  for (const auto& m : result.metrics)
    if (m.val_loss < 0.05) {
      reached = m.step;
      break;
    }
  const double final_loss = result.metrics.back().val_loss;
  const double secs = seconds_since(t0);
  return {reached > 0 && secs < 300,
          (reached ? "below 0.05 nats/token at step " + std::to_string(reached) : std::string("never below 0.05")) +
              ", final " + fmt(final_loss) + " nats/token, " + fmt(secs) + " s"};
}

// 8 and 9 share the selective-copy runs.
struct CopyRun {
  LowerBoundMode mode;
  std::uint64_t seed;
  double accuracy = 0;
  std::vector<GateLayerStats> gates;
};

RunConfig selective_copy_config(LowerBoundMode mode, std::uint64_t seed) {
  RunConfig cfg;
  cfg.task.kind = TaskKind::selective_copy;
  cfg.task.payload_len = 8;
  cfg.task.vocab_size = 10;
  cfg.model.vocab_size = 10;
  cfg.model.layers = 2;
  cfg.model.d = 32;
  cfg.model.lower_bound_mode = mode;
  cfg.train.seq_len = 512;
  // shorter sequences first; every run gets the same stages and step counts
  cfg.train.curriculum_lengths = {64, 128, 256};
  cfg.train.curriculum_steps = {2000, 1000, 800};
  cfg.train.batch_size = 8;
  cfg.train.total_steps = 800;
  cfg.train.warmup_steps = 100;
  cfg.train.peak_lr = 3e-3;
  cfg.train.weight_decay = 0.01;
  cfg.train.schedule = Schedule::cosine;
  cfg.train.eval_batches = 16;
  cfg.train.eval_interval = cfg.train.total_steps;
  cfg.train.log_interval = cfg.train.total_steps;
  cfg.train.seed = seed;
  return cfg;
}

struct CopyStudy {
  std::vector<CopyRun> runs;
  double seconds = 0;
};

const CopyStudy& copy_study() {
  static std::optional<CopyStudy> study;
  if (study) return *study;
  study.emplace();
  const auto t0 = std::chrono::steady_clock::now();
  for (auto mode : {LowerBoundMode::monotone, LowerBoundMode::none})
    for (std::uint64_t seed : {1, 2, 3}) {
      const RunConfig cfg = selective_copy_config(mode, seed);
      const auto data = DataSource::from_config(cfg);
      TrainOptions opt;
      opt.forward.scan.parallel_threshold = std::numeric_limits<std::size_t>::max();
      const auto result = train<float>(cfg, data, std::nullopt, opt);
      CopyRun run{mode, seed};
      run.accuracy = result.metrics.back().val_acc;
      run.gates = gate_stats(result.params, cfg.model, std::span<const Sample>(data.validation()));
      std::cerr << "  selective copy " << (mode == LowerBoundMode::monotone ? "monotone" : "none") << " seed " << seed
                << ": accuracy " << run.accuracy << " (" << fmt(seconds_since(t0)) << " s elapsed)\n";
      study->runs.push_back(std::move(run));
    }
  study->seconds = seconds_since(t0);
  return *study;
}

double median_accuracy(const CopyStudy& s, LowerBoundMode mode) {
  std::vector<double> acc;
  for (const auto& r : s.runs)
    if (r.mode == mode) acc.push_back(r.accuracy);
  std::sort(acc.begin(), acc.end());
  return acc[acc.size() / 2];
}

Outcome long_range_trend() {
  const auto& s = copy_study();
  const double mono = median_accuracy(s, LowerBoundMode::monotone), none = median_accuracy(s, LowerBoundMode::none);
  return {mono - none >= 0.10 && mono > 0.90 && s.seconds <= 1800,
          "median answer accuracy monotone " + fmt(mono) + " vs none " + fmt(none) + ", " + fmt(s.seconds) + " s"};
}

Outcome gate_trend() {
  const auto& s = copy_study();
  bool ordered = true, above_bound = true;
  std::ostringstream os;
  for (const auto& r : s.runs) {
    for (const auto& g : r.gates) above_bound = above_bound && g.mean >= g.gamma_mean - 1e-6;
    if (r.mode != LowerBoundMode::monotone) continue;
    ordered = ordered && r.gates.back().mean > r.gates.front().mean;
    os << " seed " << r.seed << ":";
    for (const auto& g : r.gates) os << ' ' << fmt(g.mean);
  }
  return {ordered && above_bound, "monotone mean decay per layer," + os.str()};
}

// Order-2 Markov source over a small alphabet with a fixed random transition table.
std::vector<std::int32_t> markov_stream(std::size_t length, std::uint64_t table_seed, std::uint64_t sample_seed) {
  constexpr std::size_t A = 12;
  Rng table_rng(table_seed);
  std::vector<double> probs(A * A * A);
  for (std::size_t ctx = 0; ctx < A * A; ++ctx) {
    double total = 0;
    for (std::size_t a = 0; a < A; ++a) total += probs[ctx * A + a] = std::pow(table_rng.uniform(), 4.0);
    for (std::size_t a = 0; a < A; ++a) probs[ctx * A + a] /= total;
  }
  Rng rng(sample_seed);
  std::vector<std::int32_t> out;
  std::size_t p1 = 0, p2 = 0;
  for (std::size_t i = 0; i < length; ++i) {
    double u = rng.uniform();
    std::size_t a = 0;
    const double* row = &probs[(p2 * A + p1) * A];
    while (a + 1 < A && u >= row[a]) u -= row[a++];
    out.push_back(std::int32_t('a' + a));
    p2 = p1;
    p1 = a;
  }
  return out;
}

// 10. trained at 256, evaluated at 1024.
Outcome extrapolation() {
  const auto t0 = std::chrono::steady_clock::now();
  RunConfig cfg;
  cfg.model.layers = 2;
  cfg.model.d = 16;
  cfg.train.seq_len = 256;
  cfg.train.batch_size = 8;
  cfg.train.total_steps = 600;
  cfg.train.warmup_steps = 50;
  cfg.train.peak_lr = 3e-3;
  cfg.train.weight_decay = 0.01;
  cfg.train.schedule = Schedule::cosine;
  cfg.train.eval_batches = 2;
  cfg.train.eval_interval = cfg.train.total_steps;
  cfg.train.log_interval = cfg.train.total_steps;
  const auto train_stream = markov_stream(200000, 10, 11);
  const auto val_stream = markov_stream(16 * 1024 + 1, 10, 12);
  const auto data = DataSource::from_streams(train_stream, val_stream, cfg.train.seq_len, 13, 16);
  const auto result = train<float>(cfg, data);
  std::vector<std::size_t> lengths{256, 1024};
  const auto rows = extrapolate(result.params, cfg.model, val_stream, lengths);
  const double ratio = rows[1].ppl / rows[0].ppl;
  return {std::abs(ratio - 1) <= 0.25,
          "ppl " + fmt(rows[0].ppl) + " at 256, " + fmt(rows[1].ppl) + " at 1024 (ratio " + fmt(ratio) + "), " +
              fmt(seconds_since(t0)) + " s"};
}

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof a) == 0; }

// 11. repeated runs are bit-identical and checkpoints round-trip exactly.
Outcome determinism() {
  RunConfig cfg;
  cfg.task.kind = TaskKind::selective_copy;
  cfg.task.payload_len = 3;
  cfg.model.vocab_size = 10;
  cfg.model.layers = 2;
  cfg.model.d = 8;
  cfg.train.seq_len = 24;
  cfg.train.batch_size = 2;
  cfg.train.total_steps = 20;
  cfg.train.warmup_steps = 4;
  cfg.train.eval_interval = 5;
  cfg.train.log_interval = 5;
  cfg.train.eval_batches = 2;
  cfg.train.precision = Precision::f64;
  const auto data = DataSource::from_config(cfg);
  const auto a = train<double>(cfg, data), b = train<double>(cfg, data);
  bool identical = a.metrics.size() == b.metrics.size();
  for (std::size_t i = 0; identical && i < a.metrics.size(); ++i) {
    const auto &x = a.metrics[i], &y = b.metrics[i];
    identical = x.step == y.step && same_bits(x.train_loss, y.train_loss) && same_bits(x.val_loss, y.val_loss) &&
                same_bits(x.val_acc, y.val_acc) && same_bits(x.lr, y.lr);
  }
  auto pa = a.params, pb = b.params;
  auto na = pa.named(), nb = pb.named();
  for (std::size_t i = 0; identical && i < na.size(); ++i)
    identical = std::ranges::equal(na[i].tensor.values(), nb[i].tensor.values(), same_bits);

  auto p32 = init_params<float>(cfg.model, 11);
  const auto dir = scratch("ckpt");
  const std::string path = (dir / "model.ckpt").string();
  save_checkpoint(path, cfg.model, p32);
  auto loaded = load_checkpoint<float>(path);
  const auto bytes = serialize_checkpoint(cfg.model, p32);
  const bool byte_exact = serialize_checkpoint(loaded.config, loaded.params) == bytes &&
                          std::vector<char>(bytes) == [&] {
                            std::ifstream is(path, std::ios::binary);
                            return std::vector<char>(std::istreambuf_iterator<char>(is), {});
                          }();
  const auto tokens = data.validation().front().tokens;
  Tape<float> t1(false), t2(false);
  const auto l1 = model_forward(t1, p32, cfg.model, tokens);
  const auto l2 = model_forward(t2, loaded.params, loaded.config, tokens);
  const bool forward_same = std::ranges::equal(l1.values(), l2.values(), [](float x, float y) {
    return std::memcmp(&x, &y, sizeof x) == 0;
  });
  return {identical && byte_exact && forward_same,
          std::string("64-bit reruns ") + (identical ? "bit-identical" : "DIFFER") + "; checkpoint " +
              (byte_exact ? "byte-exact" : "NOT byte-exact") + ", forward " + (forward_same ? "identical" : "DIFFERS")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::map<int, std::pair<const char*, std::function<Outcome()>>> criteria{
      {1, {"scan equivalence", scan_equivalence}},
      {2, {"gradient fidelity", gradient_fidelity}},
      {3, {"lower-bound schedule", lower_bound_schedule}},
      {4, {"saturation relief", saturation_relief}},
      {5, {"Toeplitz phase", toeplitz_property}},
      {6, {"causality", causality}},
      {7, {"overfit convergence", overfit}},
      {8, {"long-range trend", long_range_trend}},
      {9, {"gate-statistics trend", gate_trend}},
      {10, {"extrapolation stability", extrapolation}},
      {11, {"determinism and persistence", determinism}},
  };
  std::set<int> chosen;
  for (int i = 1; i < argc; ++i) chosen.insert(std::atoi(argv[i]));
  if (chosen.empty())
    for (const auto& [k, _] : criteria) chosen.insert(k);

  int failures = 0;
  for (int k : chosen) {
    const auto it = criteria.find(k);
    if (it == criteria.end()) {
      std::cerr << "unknown criterion " << k << '\n';
      return 2;
    }
    Outcome o;
    try {
      o = it->second.second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << "criterion " << k << " (" << it->second.first << "): " << (o.pass ? "PASS" : "FAIL") << ": "
              << o.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
