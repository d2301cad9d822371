#pragma once

#include <cstdint>
#include <random>

#include "hgrn/config.hpp"
#include "hgrn/ops.hpp"
#include "hgrn/recurrence.hpp"

namespace hgrn {

/// Uniform reals in [0, 1) with a platform-independent mapping from the engine.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  double uniform() { return double(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::uint64_t below(std::uint64_t bound) { return engine_() % bound; }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

/// A parameter with its stable name and whether weight decay applies to it.
template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
  bool decay = true;
};

/// Token mixer weights. Tensors a configuration does not use stay undefined.
template <typename T>
struct HGRULayerParams {
  Tensor<T> W_mu, b_mu;
  Tensor<T> W_cr, b_cr, W_ci, b_ci;
  Tensor<T> theta;
  Tensor<T> W_theta, b_theta;
  Tensor<T> W_i, b_i;
  Tensor<T> W_g, b_g;
  Tensor<T> norm_gain, norm_bias;
  Tensor<T> W_o, b_o;

  template <typename F>
  void visit(F&& f) {
    f("W_mu", W_mu, true), f("b_mu", b_mu, false);
    f("W_cr", W_cr, true), f("b_cr", b_cr, false);
    f("W_ci", W_ci, true), f("b_ci", b_ci, false);
    f("theta", theta, false);
    f("W_theta", W_theta, true), f("b_theta", b_theta, false);
    f("W_i", W_i, true), f("b_i", b_i, false);
    f("W_g", W_g, true), f("b_g", b_g, false);
    f("norm_gain", norm_gain, false), f("norm_bias", norm_bias, false);
    f("W_o", W_o, true), f("b_o", b_o, false);
  }
};

template <typename T>
struct GLUParams {
  Tensor<T> W_u, W_v, W_down;

  template <typename F>
  void visit(F&& f) {
    f("W_u", W_u, true), f("W_v", W_v, true), f("W_down", W_down, true);
  }
};

template <typename T>
struct LayerParams {
  Tensor<T> ln1_gain, ln1_bias;
  HGRULayerParams<T> hgru;
  Tensor<T> ln2_gain, ln2_bias;
  GLUParams<T> glu;
};

template <typename T>
struct ModelParams {
  Tensor<T> embedding;  // [V x d]
  Tensor<T> Gamma;      // [H x d] raw lower-bound parameter
  std::vector<LayerParams<T>> layers;
  Tensor<T> final_gain, final_bias;
  Tensor<T> head_W, head_b;

  /// Visits every parameter slot, defined or not, in the fixed checkpoint order.
  template <typename F>
  void for_each_slot(F&& f) {
    f(std::string("embedding"), embedding, true);
    f(std::string("Gamma"), Gamma, false);
    for (std::size_t k = 0; k < layers.size(); ++k) {
      const std::string p = "layers." + std::to_string(k) + ".";
      auto& L = layers[k];
      f(p + "ln1_gain", L.ln1_gain, false);
      f(p + "ln1_bias", L.ln1_bias, false);
      L.hgru.visit([&](const char* n, Tensor<T>& t, bool decay) { f(p + "hgru." + n, t, decay); });
      f(p + "ln2_gain", L.ln2_gain, false);
      f(p + "ln2_bias", L.ln2_bias, false);
      L.glu.visit([&](const char* n, Tensor<T>& t, bool decay) { f(p + "glu." + n, t, decay); });
    }
    f(std::string("final_gain"), final_gain, false);
    f(std::string("final_bias"), final_bias, false);
    f(std::string("head_W"), head_W, true);
    f(std::string("head_b"), head_b, false);
  }

  /// Every defined parameter in the fixed checkpoint order. The tensors alias
  /// the model's storage.
  std::vector<NamedParam<T>> named() {
    std::vector<NamedParam<T>> out;
    for_each_slot([&](const std::string& name, Tensor<T>& t, bool decay) {
      if (t.defined()) out.push_back({name, t, decay});
    });
    return out;
  }

  void zero_grad() {
    for (auto& p : named()) p.tensor.zero_grad();
  }

  /// Deep copy with fresh storage.
  ModelParams clone() const {
    ModelParams out = *this;
    out.for_each_slot([](const std::string&, Tensor<T>& t, bool) {
      if (t.defined()) t = t.clone();
    });
    return out;
  }
};

/// theta_j = base^{-2 floor(j/2) / d}, consecutive lanes sharing a frequency.
template <typename T>
std::vector<T> rope_ladder(std::size_t d, double base = 10000.0) {
  if (d % 2 != 0) throw ConfigError("rope_ladder: d must be even, got " + std::to_string(d));
  std::vector<T> theta(d);
  for (std::size_t j = 0; j < d; ++j) theta[j] = T(std::pow(base, -2.0 * double(j / 2) / double(d)));
  return theta;
}

/// Creates every parameter for `cfg`. Linear weights are U(-1/sqrt(fan_in),
/// 1/sqrt(fan_in)); biases zero; norm gains one; Gamma zero; theta on the
/// RoPE ladder.
template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const std::size_t d = cfg.d, V = cfg.vocab_size, w = cfg.mix_width(), e = cfg.glu_width();

  auto uniform = [&](Shape shape, double bound) {
    std::vector<T> v(shape_size(shape));
    for (auto& x : v) x = T(rng.uniform(-bound, bound));
    return Tensor<T>(std::move(shape), std::move(v), true);
  };
  auto linear = [&](std::size_t fan_in, std::size_t fan_out) {
    return uniform({fan_in, fan_out}, 1.0 / std::sqrt(double(fan_in)));
  };
  auto zeros = [](std::size_t n) { return Tensor<T>::zeros({n}, true); };
  auto ones = [](std::size_t n) { return Tensor<T>::full({n}, T(1), true); };

  ModelParams<T> p;
  p.embedding = uniform({V, d}, 1.0);
  p.Gamma = Tensor<T>::zeros({cfg.layers, d}, true);
  for (std::size_t k = 0; k < cfg.layers; ++k) {
    LayerParams<T> L;
    L.ln1_gain = ones(d), L.ln1_bias = zeros(d);
    auto& h = L.hgru;
    if (cfg.lower_bound_mode != LowerBoundMode::only) h.W_mu = linear(d, d), h.b_mu = zeros(d);
    h.W_cr = linear(d, d), h.b_cr = zeros(d);
    if (cfg.use_complex) {
      h.W_ci = linear(d, d), h.b_ci = zeros(d);
      const auto ladder = rope_ladder<T>(d, cfg.rope_base);
      if (cfg.theta_data_dependent) {
        h.W_theta = linear(d, d);
        h.b_theta = Tensor<T>({d}, ladder, true);
      } else {
        h.theta = Tensor<T>({d}, ladder, true);
      }
    }
    if (!cfg.tie_input_gate && cfg.untied_input == UntiedInput::sigmoid) h.W_i = linear(d, d), h.b_i = zeros(d);
    if (cfg.use_output_gate) h.W_g = linear(d, w), h.b_g = zeros(w);
    h.norm_gain = ones(w), h.norm_bias = zeros(w);
    h.W_o = linear(w, d), h.b_o = zeros(d);
    L.ln2_gain = ones(d), L.ln2_bias = zeros(d);
    L.glu.W_u = linear(d, e), L.glu.W_v = linear(d, e), L.glu.W_down = linear(e, d);
    p.layers.push_back(std::move(L));
  }
  p.final_gain = ones(d), p.final_bias = zeros(d);
  p.head_W = linear(d, V), p.head_b = zeros(V);
  return p;
}

template <typename T>
struct LowerBoundTable {
  Tensor<T> gamma;  // [H x d]
  LowerBoundMode mode = LowerBoundMode::monotone;
};

/// Per-layer lower bounds from the raw [H x d] parameter.
template <typename T>
LowerBoundTable<T> compute_lower_bounds(Tape<T>& tape, const Tensor<T>& Gamma, LowerBoundMode mode) {
  detail::require_rank(Gamma.shape(), 2, "compute_lower_bounds");
  switch (mode) {
    case LowerBoundMode::monotone:
    case LowerBoundMode::only:
      return {cumsum_shifted_dim0(tape, softmax_dim0(tape, Gamma)), mode};
    case LowerBoundMode::decreasing:
      return {reverse_rows(tape, cumsum_shifted_dim0(tape, softmax_dim0(tape, Gamma))), mode};
    case LowerBoundMode::random:
      return {sigmoid(tape, Gamma), mode};
    case LowerBoundMode::none:
      return {Tensor<T>::zeros(Gamma.shape()), mode};
  }
  throw ConfigError("compute_lower_bounds: unknown mode");
}

/// mu = (target - gamma) / (1 - gamma): the gate activation realizing decay
/// `target` above the bound `gamma`.
template <typename T>
T gate_for_decay(T target, T gamma) {
  return (target - gamma) / (T(1) - gamma);
}

struct ForwardOptions {
  ScanOptions scan;
  bool check_finite = true;
};

template <typename T>
struct HgruOut {
  Tensor<T> o;
  Tensor<T> lambda;
  Tensor<T> theta;  // [d] or [n x d]; undefined for the real-valued variant
};

namespace detail {

template <typename T>
void require_finite(const Tensor<T>& t, const char* stage) {
  if (!all_finite(t.values())) throw NumericError(std::string("non-finite values after ") + stage);
}

}  // namespace detail

/// HGRU token mixer for one layer on x[n x d] with lower bound gamma_k[d].
template <typename T>
HgruOut<T> hgru_forward(Tape<T>& tape, const Tensor<T>& x, const HGRULayerParams<T>& p, const Tensor<T>& gamma_k,
                        const ModelConfig& cfg, const ForwardOptions& opt = {}) {
  const std::size_t n = x.rows();
  const Tensor<T> G = broadcast_rows(tape, gamma_k, n);

  Tensor<T> lambda;
  if (cfg.lower_bound_mode == LowerBoundMode::only) {
    lambda = G;
  } else {
    const Tensor<T> mu = sigmoid(tape, affine(tape, x, p.W_mu, p.b_mu));
    lambda = add(tape, G, mul(tape, scale_shift(tape, G, T(-1), T(1)), mu));
  }
  if (opt.check_finite) detail::require_finite(lambda, "forget gate");

  const Tensor<T> c_re = silu(tape, affine(tape, x, p.W_cr, p.b_cr));
  const Tensor<T> c_im = cfg.use_complex ? silu(tape, affine(tape, x, p.W_ci, p.b_ci)) : Tensor<T>{};

  Tensor<T> b_re = c_re, b_im = c_im;
  Tensor<T> weight;
  if (cfg.tie_input_gate)
    weight = scale_shift(tape, lambda, T(-1), T(1));
  else if (cfg.untied_input == UntiedInput::sigmoid)
    weight = sigmoid(tape, affine(tape, x, p.W_i, p.b_i));
  if (weight.defined()) {
    b_re = mul(tape, weight, c_re);
    if (cfg.use_complex) b_im = mul(tape, weight, c_im);
  }

  Tensor<T> theta;
  if (cfg.use_complex) theta = cfg.theta_data_dependent ? affine(tape, x, p.W_theta, p.b_theta) : p.theta;

  const RecurrenceOut<T> h = recurrence(tape, lambda, theta, b_re, b_im, opt.scan);
  if (opt.check_finite) detail::require_finite(h.re, "recurrence");
  const Tensor<T> hcat = cfg.use_complex ? concat_cols(tape, h.re, h.im) : h.re;
  const Tensor<T> gated = cfg.use_output_gate ? mul(tape, sigmoid(tape, affine(tape, x, p.W_g, p.b_g)), hcat) : hcat;
  const Tensor<T> normed = layer_norm(tape, gated, p.norm_gain, p.norm_bias, T(cfg.norm_eps));
  Tensor<T> o = affine(tape, normed, p.W_o, p.b_o);
  if (opt.check_finite) detail::require_finite(o, "output projection");
  return {std::move(o), std::move(lambda), std::move(theta)};
}

/// (silu(x W_u) (.) x W_v) W_down
template <typename T>
Tensor<T> glu_forward(Tape<T>& tape, const Tensor<T>& x, const GLUParams<T>& p) {
  return affine(tape, mul(tape, silu(tape, affine(tape, x, p.W_u)), affine(tape, x, p.W_v)), p.W_down);
}

template <typename T>
struct BlockOut {
  Tensor<T> y;
  Tensor<T> lambda;
  Tensor<T> theta;
};

/// Pre-norm residual block: x + HGRU(LN(x)), then + GLU(LN(.)).
template <typename T>
BlockOut<T> hgrn_block_forward(Tape<T>& tape, const Tensor<T>& x, const LayerParams<T>& L, const Tensor<T>& gamma_k,
                               const ModelConfig& cfg, const ForwardOptions& opt = {}) {
  const T eps = T(cfg.norm_eps);
  HgruOut<T> mix = hgru_forward(tape, layer_norm(tape, x, L.ln1_gain, L.ln1_bias, eps), L.hgru, gamma_k, cfg, opt);
  const Tensor<T> x1 = add(tape, x, mix.o);
  Tensor<T> y = add(tape, x1, glu_forward(tape, layer_norm(tape, x1, L.ln2_gain, L.ln2_bias, eps), L.glu));
  return {std::move(y), std::move(mix.lambda), std::move(mix.theta)};
}

/// Decay record of one layer from the last forward pass.
template <typename T>
struct LayerTrace {
  std::vector<T> lambda;  // [n x d]
  std::vector<T> gamma;   // [d]
  std::vector<T> theta;   // [d] or [n x d]; empty when real-valued
  bool per_step_theta = false;
};

template <typename T>
struct ForwardTrace {
  std::size_t n = 0;
  std::size_t d = 0;
  std::vector<LayerTrace<T>> layers;
};

/// Logits [n x V] for a token sequence. Causal: position t only reads tokens <= t.
template <typename T>
Tensor<T> model_forward(Tape<T>& tape, const ModelParams<T>& params, const ModelConfig& cfg,
                        std::span<const std::int32_t> tokens, std::type_identity_t<ForwardTrace<T>>* trace = nullptr,
                        const ForwardOptions& opt = {}) {
  if (tokens.empty()) throw ContractError("model_forward: empty token sequence");
  for (auto t : tokens)
    if (t < 0 || std::size_t(t) >= cfg.vocab_size)
      throw ContractError("model_forward: token id " + std::to_string(t) + " out of range for vocabulary " +
                          std::to_string(cfg.vocab_size));
  if (params.layers.size() != cfg.layers) throw ConfigError("model_forward: parameter/config layer count mismatch");

  const LowerBoundTable<T> bounds = compute_lower_bounds(tape, params.Gamma, cfg.lower_bound_mode);
  Tensor<T> x = embedding(tape, params.embedding, tokens);
  if (trace) *trace = {tokens.size(), cfg.d, {}};
  for (std::size_t k = 0; k < cfg.layers; ++k) {
    const Tensor<T> gamma_k = select_row(tape, bounds.gamma, k);
    BlockOut<T> out = hgrn_block_forward(tape, x, params.layers[k], gamma_k, cfg, opt);
    if (trace) {
      LayerTrace<T> lt;
      lt.lambda.assign(out.lambda.values().begin(), out.lambda.values().end());
      lt.gamma.assign(gamma_k.values().begin(), gamma_k.values().end());
      if (out.theta.defined()) {
        lt.theta.assign(out.theta.values().begin(), out.theta.values().end());
        lt.per_step_theta = out.theta.rank() == 2;
      }
      trace->layers.push_back(std::move(lt));
    }
    x = std::move(out.y);
  }
  const Tensor<T> h = layer_norm(tape, x, params.final_gain, params.final_bias, T(cfg.norm_eps));
  return affine(tape, h, params.head_W, params.head_b);
}

/// Lower bounds as plain values, [H x d].
template <typename T>
std::vector<T> lower_bound_values(const ModelParams<T>& params, LowerBoundMode mode) {
  Tape<T> tape(false);
  const auto t = compute_lower_bounds(tape, params.Gamma, mode);
  return {t.gamma.values().begin(), t.gamma.values().end()};
}

/// Converts parameters between precisions.
template <typename To, typename From>
ModelParams<To> convert_params(const ModelConfig& cfg, ModelParams<From>& src) {
  ModelParams<To> dst = init_params<To>(cfg, 0);
  auto s = src.named();
  auto d = dst.named();
  for (std::size_t i = 0; i < d.size(); ++i) {
    auto out = d[i].tensor.values();
    auto in = s[i].tensor.values();
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = To(in[k]);
  }
  return dst;
}

}  // namespace hgrn
