// hgrn: train, evaluate and instrument hierarchically gated recurrent models.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "hgrn/hgrn.hpp"

namespace fs = std::filesystem;
using namespace hgrn;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string precision;
  std::string out_dir;
  std::vector<std::string> overrides;
  std::vector<std::string> verb_overrides;
};

struct Resolved {
  RunConfig cfg;
  bool user_set_model = false;
  fs::path out;
};

std::string timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  localtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
  return buf;
}

Resolved resolve(const Globals& g, const std::string& verb) {
  Resolved r;
  if (!g.config_path.empty()) {
    if (!fs::exists(g.config_path)) throw ConfigError("config file not found: " + g.config_path);
    r.cfg = load_config(g.config_path);
    std::ifstream is(g.config_path);
    r.user_set_model = nlohmann::json::parse(is).contains("model");
  }
  std::vector<std::string> ov = g.overrides;
  ov.insert(ov.end(), g.verb_overrides.begin(), g.verb_overrides.end());
  if (g.seed) ov.push_back("train.seed=" + std::to_string(*g.seed));
  if (!g.precision.empty()) ov.push_back("train.precision=" + g.precision);
  for (const auto& o : ov) r.user_set_model = r.user_set_model || o.starts_with("model.");
  if (!ov.empty()) r.cfg = apply_overrides(r.cfg, ov);

  if (!g.out_dir.empty()) {
    r.out = g.out_dir;
  } else {
    const char* root = std::getenv("HGRN_OUT_ROOT");
    r.out = fs::path(root && *root ? root : "runs") / (verb + "-" + timestamp());
  }
  fs::create_directories(r.out);
  return r;
}

void write_config(const Resolved& r) { std::ofstream(r.out / "config.json") << config_to_text(r.cfg); }

ForwardOptions forward_options(const RunConfig& cfg) {
  ForwardOptions f;
  f.scan.parallel_threshold = cfg.instrument.parallel_threshold;
  f.scan.threads = cfg.instrument.threads;
  return f;
}

// Loads a checkpoint and reconciles its model section with the run config.
template <typename T>
ModelParams<T> load_model(Resolved& r, const std::string& path) {
  auto ck = load_checkpoint<T>(path);
  if (r.user_set_model) {
    const nlohmann::json want = r.cfg.model, have = ck.config;
    if (const auto patch = nlohmann::json::diff(have, want); !patch.empty()) {
      std::string key = patch[0]["path"].get<std::string>();
      std::replace(key.begin(), key.end(), '/', '.');
      throw CheckpointError("config/checkpoint mismatch at model" + key + ": checkpoint has " +
                            have[nlohmann::json::json_pointer(patch[0]["path"].get<std::string>())].dump());
    }
  }
  r.cfg.model = ck.config;
  return std::move(ck.params);
}

// Evaluation stream: the validation split of the corpus, or the train split if
// the validation part is too short.
std::vector<std::int32_t> eval_stream(const RunConfig& cfg, const std::string& corpus_flag) {
  const std::string path = corpus_flag.empty() ? cfg.task.corpus : corpus_flag;
  if (path.empty()) throw TaskError("no corpus: pass --corpus or set task.corpus");
  auto c = load_byte_corpus(path, cfg.task.split_ratio);
  return c.val.size() >= 2 ? std::move(c.val) : std::move(c.train);
}

std::vector<Sample> eval_samples(const RunConfig& cfg, const std::string& corpus_flag, std::size_t max_samples) {
  if (cfg.task.kind == TaskKind::byte_lm || !corpus_flag.empty()) {
    auto ws = lm_windows(eval_stream(cfg, corpus_flag), cfg.train.seq_len);
    if (max_samples && ws.size() > max_samples) ws.resize(max_samples);
    return ws;
  }
  std::vector<Sample> xs;
  const auto spec = task_spec(cfg);
  for (std::size_t i = 0; i < std::max<std::size_t>(1, max_samples); ++i)
    xs.push_back(gen_sample(spec, DataSource::kValidationBase + i));
  return xs;
}

template <typename T>
int cmd_train(Resolved& r) {
  write_config(r);
  const DataSource data = DataSource::from_config(r.cfg);
  TrainOptions opt;
  opt.out_dir = r.out.string();
  opt.log = &std::cout;
  opt.forward = forward_options(r.cfg);
  const auto res = train<T>(r.cfg, data, std::nullopt, opt);
  std::cout << "best val_loss " << res.best_val_loss << " at step " << res.best_step << "\nrun directory "
            << r.out.string() << '\n';
  return kExitOk;
}

template <typename T>
int cmd_eval(Resolved& r, const std::string& ckpt, const std::string& corpus) {
  auto params = load_model<T>(r, ckpt);
  write_config(r);
  const auto xs = eval_samples(r.cfg, corpus, r.cfg.task.kind == TaskKind::byte_lm
                                                  ? 0
                                                  : r.cfg.train.eval_batches * r.cfg.train.batch_size);
  const auto ev = evaluate_samples(params, r.cfg.model, std::span<const Sample>(xs), forward_options(r.cfg));
  std::ofstream os(r.out / "eval.csv");
  os << "loss,ppl,accuracy,tokens\n"
     << detail::csv_num(ev.loss) << ',' << detail::csv_num(ev.ppl) << ',' << detail::csv_num(ev.accuracy) << ','
     << ev.tokens << '\n';
  std::cout << "loss " << ev.loss << "  ppl " << ev.ppl << "  accuracy " << ev.accuracy << "  tokens " << ev.tokens
            << '\n';
  return kExitOk;
}

template <typename T>
int cmd_extrapolate(Resolved& r, const std::string& ckpt, const std::string& corpus) {
  auto params = load_model<T>(r, ckpt);
  write_config(r);
  const auto stream = eval_stream(r.cfg, corpus);
  const auto rows = extrapolate(params, r.cfg.model, stream, r.cfg.instrument.eval_lengths, forward_options(r.cfg));
  write_extrapolation_csv((r.out / "extrapolation.csv").string(), rows);
  for (const auto& row : rows) std::cout << "length " << row.length << "  ppl " << row.ppl << '\n';
  return kExitOk;
}

template <typename T>
int cmd_gate_stats(Resolved& r, const std::string& ckpt, const std::string& corpus) {
  auto params = load_model<T>(r, ckpt);
  write_config(r);
  const auto xs = eval_samples(r.cfg, corpus, r.cfg.instrument.stats_batches * r.cfg.train.batch_size);
  const auto stats = gate_stats(params, r.cfg.model, std::span<const Sample>(xs), forward_options(r.cfg));
  write_gate_stats_csv((r.out / "gate_stats.csv").string(), stats);
  if (r.cfg.model.lower_bound_mode == LowerBoundMode::only)
    std::cout << "(decay equals the lower bound in this mode; data-independent forget rates)\n";
  for (const auto& s : stats)
    std::cout << "layer " << s.layer << "  mean " << s.mean << "  median " << s.median << "  mean bound "
              << s.gamma_mean << '\n';
  return kExitOk;
}

template <typename T>
int cmd_scan_bench(Resolved& r) {
  write_config(r);
  const auto& in = r.cfg.instrument;
  const auto rows = scan_bench<T>(in.bench_lengths, in.bench_d, in.bench_repeats, in.threads, r.cfg.train.seed);
  write_scan_bench_csv((r.out / "scan_bench.csv").string(), rows);
  std::cout << "length  sequential_ms  parallel_ms\n";
  for (const auto& row : rows) std::cout << row.length << "  " << row.sequential_ms << "  " << row.parallel_ms << '\n';
  return kExitOk;
}

int cmd_gradcheck(Resolved& r, std::optional<double> tolerance, const std::string& corrupt,
                  const std::vector<std::string>& frozen) {
  write_config(r);
  GradcheckOptions opt;
  opt.tolerance = tolerance.value_or(r.cfg.instrument.gradcheck_tolerance);
  opt.seed = r.cfg.train.seed;
  opt.corrupt = corrupt;
  opt.frozen = frozen;
  ModelConfig fixture = gradcheck_fixture();
  fixture.lower_bound_mode = r.cfg.model.lower_bound_mode;
  fixture.use_complex = r.cfg.model.use_complex;
  fixture.theta_data_dependent = r.cfg.model.theta_data_dependent;
  fixture.tie_input_gate = r.cfg.model.tie_input_gate;
  fixture.untied_input = r.cfg.model.untied_input;
  fixture.use_output_gate = r.cfg.model.use_output_gate;
  const auto rep = gradient_check_model(fixture, opt);
  std::ofstream os(r.out / "gradcheck.csv");
  os << "name,count,max_rel_err,status\n";
  for (const auto& e : rep.entries) {
    const char* status = e.frozen ? "frozen" : e.pass ? "pass" : "fail";
    os << e.name << ',' << e.count << ',' << detail::csv_num(e.max_rel_err) << ',' << status << '\n';
    std::cout << std::left << std::setw(28) << e.name << std::setw(6) << e.count << std::setw(14) << e.max_rel_err
              << status << '\n';
  }
  std::cout << (rep.pass ? "PASS" : "FAIL") << "  max relative error " << rep.max_rel_err << " (tolerance "
            << rep.tolerance << ")\n";
  return rep.pass ? kExitOk : kExitFailure;
}

template <typename T>
int cmd_ablate(Resolved& r, const std::string& suite_flag) {
  if (!suite_flag.empty()) r.cfg.instrument.ablate_suite = suite_flag;
  write_config(r);
  const auto rows = run_ablation<T>(r.cfg, r.cfg.instrument.ablate_suite, r.out.string(), &std::cout);
  write_ablation_csv((r.out / "ablation.csv").string(), rows);
  for (const auto& row : rows)
    std::cout << std::left << std::setw(22) << row.variant << "val_loss " << row.val_loss << "  val_acc "
              << row.val_acc << '\n';
  return kExitOk;
}

template <typename T>
int cmd_export_mixing(Resolved& r, const std::string& ckpt, const std::string& corpus) {
  auto params = load_model<T>(r, ckpt);
  write_config(r);
  const auto xs = eval_samples(r.cfg, corpus, 1);
  const auto& in = r.cfg.instrument;
  std::span<const std::int32_t> tokens(xs.front().tokens);
  tokens = tokens.first(std::min(tokens.size(), in.mixing_cap));
  for (const auto& p : export_mixing(params, r.cfg.model, tokens, in.mixing_layer, in.mixing_dims, in.mixing_cap,
                                     r.out.string()))
    std::cout << p << '\n';
  return kExitOk;
}

template <typename F>
int dispatch_precision(const RunConfig& cfg, F&& f) {
  return cfg.train.precision == Precision::f64 ? f(double{}) : f(float{});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hgrn: hierarchically gated recurrent networks"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "JSON config file (missing keys take defaults)");
  app.add_option("--seed", g.seed, "sets train.seed");
  app.add_option("--precision", g.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
  app.add_option("--out", g.out_dir, "run directory (default $HGRN_OUT_ROOT/<verb>-<time>, root defaults to ./runs)");
  app.add_option("overrides", g.overrides, "dotted-key overrides, e.g. model.lower_bound_mode=none");

  std::string ckpt, corpus, suite, corrupt;
  std::optional<double> tolerance;
  std::vector<std::string> frozen;
  auto verb = [&](const char* name, const char* help) {
    auto* sc = app.add_subcommand(name, help);
    sc->fallthrough();
    sc->add_option("overrides", g.verb_overrides, "dotted-key overrides, e.g. model.lower_bound_mode=none");
    return sc;
  };
  auto* train_cmd = verb("train", "train a model; writes metrics.csv, timing.csv, best.ckpt, final.ckpt");
  auto* eval_cmd = verb("eval", "evaluate a checkpoint; writes eval.csv");
  auto* extra_cmd = verb("extrapolate", "perplexity at each instrument.eval_lengths; writes extrapolation.csv");
  auto* gates_cmd = verb("gate-stats", "forget-gate statistics per layer; writes gate_stats.csv");
  auto* bench_cmd = verb("scan-bench", "sequential vs parallel scan timing; writes scan_bench.csv");
  auto* grad_cmd = verb("gradcheck", "finite-difference check of every gradient; writes gradcheck.csv");
  auto* ablate_cmd = verb("ablate", "train each variant of a suite; writes ablation.csv");
  auto* mix_cmd = verb("export-mixing", "token-mixing matrices of one layer; one CSV per lane");
  for (auto* sc : {eval_cmd, extra_cmd, gates_cmd, mix_cmd}) {
    sc->add_option("--checkpoint", ckpt, "checkpoint file")->required();
    sc->add_option("--corpus", corpus, "byte corpus (default task.corpus)");
  }
  grad_cmd->add_option("--tolerance", tolerance, "max relative error (default instrument.gradcheck_tolerance)");
  grad_cmd->add_option("--corrupt", corrupt, "perturb this parameter's analytic gradient (fault injection)");
  grad_cmd->add_option("--freeze", frozen, "exclude these parameters from differentiation");
  ablate_cmd->add_option("--suite", suite, "lower_bound, gates or complex (default instrument.ablate_suite)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  Resolved r;
  try {
    r = resolve(g, name);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    auto with = [&](auto fn) { return dispatch_precision(r.cfg, fn); };
    if (*train_cmd) return with([&]<typename T>(T) { return cmd_train<T>(r); });
    if (*eval_cmd) return with([&]<typename T>(T) { return cmd_eval<T>(r, ckpt, corpus); });
    if (*extra_cmd) return with([&]<typename T>(T) { return cmd_extrapolate<T>(r, ckpt, corpus); });
    if (*gates_cmd) return with([&]<typename T>(T) { return cmd_gate_stats<T>(r, ckpt, corpus); });
    if (*bench_cmd) return with([&]<typename T>(T) { return cmd_scan_bench<T>(r); });
    if (*grad_cmd) return cmd_gradcheck(r, tolerance, corrupt, frozen);
    if (*ablate_cmd) return with([&]<typename T>(T) { return cmd_ablate<T>(r, suite); });
    if (*mix_cmd) return with([&]<typename T>(T) { return cmd_export_mixing<T>(r, ckpt, corpus); });
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}
