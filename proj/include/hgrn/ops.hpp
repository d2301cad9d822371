#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <limits>
#include <string_view>

#include "hgrn/tensor.hpp"

namespace hgrn {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
ConstMatMap<T> as_matrix(std::span<const T> v, std::size_t r, std::size_t c) {
  return ConstMatMap<T>(v.data(), Eigen::Index(r), Eigen::Index(c));
}
template <typename T>
MatMap<T> as_matrix(std::span<T> v, std::size_t r, std::size_t c) {
  return MatMap<T>(v.data(), Eigen::Index(r), Eigen::Index(c));
}

template <typename T>
bool wants_grad(const Tensor<T>& t) {
  return t.defined() && t.requires_grad();
}

template <typename T, typename... Ts>
bool should_record(const Tape<T>& tape, const Ts&... ins) {
  return tape.recording() && (wants_grad(ins) || ...);
}

inline void require_rank(const Shape& s, std::size_t r, std::string_view op) {
  if (s.size() != r)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                         shape_str(s));
}

inline void require_same(const Shape& a, const Shape& b, std::string_view op) {
  if (a != b) throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

template <typename T>
T stable_sigmoid(T z) {
  if (z >= 0) return T(1) / (T(1) + std::exp(-z));
  const T e = std::exp(z);
  return e / (T(1) + e);
}

}  // namespace detail

/// out = x W + b for x[n x p], W[p x q], b[q]. Pass an undefined b for no bias.
template <typename T>
Tensor<T> affine(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& W, const Tensor<T>& b = {}) {
  detail::require_rank(x.shape(), 2, "affine x");
  detail::require_rank(W.shape(), 2, "affine W");
  const std::size_t n = x.shape()[0], p = x.shape()[1], q = W.shape()[1];
  if (W.shape()[0] != p)
    throw DimensionError("affine: inner dimensions disagree, x " + shape_str(x.shape()) + " vs W " +
                         shape_str(W.shape()));
  if (b.defined() && b.shape() != Shape{q})
    throw DimensionError("affine: bias " + shape_str(b.shape()) + " does not match W " + shape_str(W.shape()));

  std::vector<T> out(n * q);
  auto o = detail::as_matrix(std::span<T>(out), n, q);
  o.noalias() = detail::as_matrix(x.values(), n, p) * detail::as_matrix(W.values(), p, q);
  if (b.defined()) o.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.values().data(), Eigen::Index(q));

  Tensor<T> y({n, q}, std::move(out), detail::should_record(tape, x, W, b));
  if (y.requires_grad()) {
    auto xn = x.node(), wn = W.node(), bn = b.defined() ? b.node() : nullptr, yn = y.node();
    tape.record({yn}, [=] {
      auto gy = detail::as_matrix(std::span<const T>(yn->grad), n, q);
      if (xn->requires_grad)
        detail::as_matrix(xn->grad_buffer(), n, p).noalias() +=
            gy * detail::as_matrix(std::span<const T>(wn->value), p, q).transpose();
      if (wn->requires_grad)
        detail::as_matrix(wn->grad_buffer(), p, q).noalias() +=
            detail::as_matrix(std::span<const T>(xn->value), n, p).transpose() * gy;
      if (bn && bn->requires_grad) {
        auto gb = bn->grad_buffer();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < q; ++j) gb[j] += yn->grad[i * q + j];
      }
    });
  }
  return y;
}

namespace detail {

// Elementwise unary op: f gives value, df(x, y) gives the local derivative.
template <typename T, typename F, typename DF>
Tensor<T> unary(Tape<T>& tape, const Tensor<T>& x, F f, DF df) {
  std::vector<T> out(x.size());
  auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  Tensor<T> y(x.shape(), std::move(out), should_record(tape, x));
  if (y.requires_grad()) {
    auto xn = x.node(), yn = y.node();
    tape.record({yn}, [=] {
      const auto gx = xn->grad_buffer();
      const std::span<const T> gy = yn->grad, xv = xn->value, yv = yn->value;
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * df(xv[i], yv[i]);
    });
  }
  return y;
}

}  // namespace detail

template <typename T>
Tensor<T> sigmoid(Tape<T>& tape, const Tensor<T>& x) {
  return detail::unary(
      tape, x, [](T z) { return detail::stable_sigmoid(z); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> silu(Tape<T>& tape, const Tensor<T>& x) {
  return detail::unary(
      tape, x, [](T z) { return z * detail::stable_sigmoid(z); },
      [](T z, T) {
        const T s = detail::stable_sigmoid(z);
        return s * (T(1) + z * (T(1) - s));
      });
}

template <typename T>
Tensor<T> exp(Tape<T>& tape, const Tensor<T>& x) {
  return detail::unary(tape, x, [](T z) { return std::exp(z); }, [](T, T y) { return y; });
}

/// a * x + b with scalar a, b.
template <typename T>
Tensor<T> scale_shift(Tape<T>& tape, const Tensor<T>& x, T a, T b) {
  return detail::unary(tape, x, [=](T z) { return a * z + b; }, [=](T, T) { return a; });
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T a) {
  return scale_shift(tape, x, a, T(0));
}

namespace detail {

template <typename T, typename F, typename DA, typename DB>
Tensor<T> binary(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, std::string_view name, F f, DA da,
                 DB db) {
  require_same(a.shape(), b.shape(), name);
  std::vector<T> out(a.size());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
  Tensor<T> y(a.shape(), std::move(out), should_record(tape, a, b));
  if (y.requires_grad()) {
    auto an = a.node(), bn = b.node(), yn = y.node();
    tape.record({yn}, [=] {
      const std::span<const T> gy = yn->grad, av = an->value, bv = bn->value;
      if (an->requires_grad) {
        const auto g = an->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * da(av[i], bv[i]);
      }
      if (bn->requires_grad) {
        const auto g = bn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * db(av[i], bv[i]);
      }
    });
  }
  return y;
}

}  // namespace detail

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      tape, a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      tape, a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      tape, a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

/// Name-dispatched elementwise primitive: sigmoid, silu, exp (one argument) or
/// mul, add, sub (two arguments).
template <typename T>
Tensor<T> pointwise(Tape<T>& tape, std::string_view name, const Tensor<T>& a, const Tensor<T>& b = {}) {
  const bool binary = name == "mul" || name == "add" || name == "sub";
  if (binary != b.defined()) throw ContractError("pointwise " + std::string(name) + ": wrong argument count");
  if (name == "sigmoid") return sigmoid(tape, a);
  if (name == "silu") return silu(tape, a);
  if (name == "exp") return exp(tape, a);
  if (name == "mul") return mul(tape, a, b);
  if (name == "add") return add(tape, a, b);
  if (name == "sub") return sub(tape, a, b);
  throw ContractError("pointwise: unknown primitive " + std::string(name));
}

/// Column-wise softmax over the leading axis of X[H x d].
template <typename T>
Tensor<T> softmax_dim0(Tape<T>& tape, const Tensor<T>& X) {
  detail::require_rank(X.shape(), 2, "softmax_dim0");
  if (!all_finite(X.values())) throw NumericError("softmax_dim0: non-finite input");
  const std::size_t H = X.shape()[0], d = X.shape()[1];
  auto xv = X.values();
  std::vector<T> out(H * d);
  for (std::size_t j = 0; j < d; ++j) {
    T m = -std::numeric_limits<T>::infinity();
    for (std::size_t k = 0; k < H; ++k) m = std::max(m, xv[k * d + j]);
    T s = 0;
    for (std::size_t k = 0; k < H; ++k) s += (out[k * d + j] = std::exp(xv[k * d + j] - m));
    for (std::size_t k = 0; k < H; ++k) out[k * d + j] /= s;
  }
  Tensor<T> y(X.shape(), std::move(out), detail::should_record(tape, X));
  if (y.requires_grad()) {
    auto xn = X.node(), yn = y.node();
    tape.record({yn}, [=] {
      auto gx = xn->grad_buffer();
      const auto& p = yn->value;
      const auto& gy = yn->grad;
      for (std::size_t j = 0; j < d; ++j) {
        T dot = 0;
        for (std::size_t k = 0; k < H; ++k) dot += gy[k * d + j] * p[k * d + j];
        for (std::size_t k = 0; k < H; ++k) gx[k * d + j] += p[k * d + j] * (gy[k * d + j] - dot);
      }
    });
  }
  return y;
}

/// out[k] = sum_{i<=k} P[i] - P[0] along the leading axis; row 0 is exactly zero.
template <typename T>
Tensor<T> cumsum_shifted_dim0(Tape<T>& tape, const Tensor<T>& P) {
  detail::require_rank(P.shape(), 2, "cumsum_shifted_dim0");
  const std::size_t H = P.shape()[0], d = P.shape()[1];
  auto pv = P.values();
  std::vector<T> out(H * d, T(0));
  for (std::size_t j = 0; j < d; ++j) {
    T acc = 0;
    for (std::size_t k = 1; k < H; ++k) out[k * d + j] = (acc += pv[k * d + j]);
  }
  Tensor<T> y(P.shape(), std::move(out), detail::should_record(tape, P));
  if (y.requires_grad()) {
    auto pn = P.node(), yn = y.node();
    tape.record({yn}, [=] {
      auto gp = pn->grad_buffer();
      for (std::size_t j = 0; j < d; ++j) {
        T acc = 0;
        for (std::size_t k = H; k-- > 1;) gp[k * d + j] += (acc += yn->grad[k * d + j]);
      }
    });
  }
  return y;
}

/// Reverses the order of rows of M[H x d].
template <typename T>
Tensor<T> reverse_rows(Tape<T>& tape, const Tensor<T>& M) {
  detail::require_rank(M.shape(), 2, "reverse_rows");
  const std::size_t H = M.shape()[0], d = M.shape()[1];
  std::vector<T> out(H * d);
  for (std::size_t k = 0; k < H; ++k)
    std::copy_n(M.values().begin() + std::ptrdiff_t((H - 1 - k) * d), d, out.begin() + std::ptrdiff_t(k * d));
  Tensor<T> y(M.shape(), std::move(out), detail::should_record(tape, M));
  if (y.requires_grad()) {
    auto mn = M.node(), yn = y.node();
    tape.record({yn}, [=] {
      auto g = mn->grad_buffer();
      for (std::size_t k = 0; k < H; ++k)
        for (std::size_t j = 0; j < d; ++j) g[(H - 1 - k) * d + j] += yn->grad[k * d + j];
    });
  }
  return y;
}

/// Row k of M[H x d] as a rank-1 tensor [d].
template <typename T>
Tensor<T> select_row(Tape<T>& tape, const Tensor<T>& M, std::size_t k) {
  detail::require_rank(M.shape(), 2, "select_row");
  const std::size_t d = M.shape()[1];
  if (k >= M.shape()[0]) throw DimensionError("select_row: row " + std::to_string(k) + " of " + shape_str(M.shape()));
  std::vector<T> out(M.values().begin() + std::ptrdiff_t(k * d), M.values().begin() + std::ptrdiff_t((k + 1) * d));
  Tensor<T> y({d}, std::move(out), detail::should_record(tape, M));
  if (y.requires_grad()) {
    auto mn = M.node(), yn = y.node();
    tape.record({yn}, [=] {
      auto g = mn->grad_buffer();
      for (std::size_t j = 0; j < d; ++j) g[k * d + j] += yn->grad[j];
    });
  }
  return y;
}

/// Explicit broadcast of v[d] to [n x d].
template <typename T>
Tensor<T> broadcast_rows(Tape<T>& tape, const Tensor<T>& v, std::size_t n) {
  detail::require_rank(v.shape(), 1, "broadcast_rows");
  const std::size_t d = v.shape()[0];
  std::vector<T> out(n * d);
  for (std::size_t i = 0; i < n; ++i) std::copy(v.values().begin(), v.values().end(), out.begin() + std::ptrdiff_t(i * d));
  Tensor<T> y({n, d}, std::move(out), detail::should_record(tape, v));
  if (y.requires_grad()) {
    auto vn = v.node(), yn = y.node();
    tape.record({yn}, [=] {
      auto g = vn->grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) g[j] += yn->grad[i * d + j];
    });
  }
  return y;
}

/// [a | b] along columns.
template <typename T>
Tensor<T> concat_cols(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a.shape(), 2, "concat_cols");
  detail::require_rank(b.shape(), 2, "concat_cols");
  const std::size_t n = a.shape()[0], p = a.shape()[1], q = b.shape()[1];
  if (b.shape()[0] != n)
    throw DimensionError("concat_cols: row mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(n * (p + q));
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.values().begin() + std::ptrdiff_t(i * p), p, out.begin() + std::ptrdiff_t(i * (p + q)));
    std::copy_n(b.values().begin() + std::ptrdiff_t(i * q), q, out.begin() + std::ptrdiff_t(i * (p + q) + p));
  }
  Tensor<T> y({n, p + q}, std::move(out), detail::should_record(tape, a, b));
  if (y.requires_grad()) {
    auto an = a.node(), bn = b.node(), yn = y.node();
    tape.record({yn}, [=] {
      for (std::size_t i = 0; i < n; ++i) {
        if (an->requires_grad) {
          auto g = an->grad_buffer();
          for (std::size_t j = 0; j < p; ++j) g[i * p + j] += yn->grad[i * (p + q) + j];
        }
        if (bn->requires_grad) {
          auto g = bn->grad_buffer();
          for (std::size_t j = 0; j < q; ++j) g[i * q + j] += yn->grad[i * (p + q) + p + j];
        }
      }
    });
  }
  return y;
}

/// Row-wise layer normalization of x[n x q] with affine gain and bias.
template <typename T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  detail::require_rank(x.shape(), 2, "layer_norm");
  const std::size_t n = x.shape()[0], q = x.shape()[1];
  if (q < 2) throw DimensionError("layer_norm: needs at least 2 features, got " + shape_str(x.shape()));
  detail::require_same(gain.shape(), Shape{q}, "layer_norm gain");
  detail::require_same(bias.shape(), Shape{q}, "layer_norm bias");

  auto xv = x.values();
  auto gv = gain.values();
  auto bv = bias.values();
  std::vector<T> out(n * q);
  std::vector<T> xhat(n * q), rstd(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = xv.data() + i * q;
    T mean = 0;
    for (std::size_t j = 0; j < q; ++j) mean += row[j];
    mean /= T(q);
    T var = 0;
    for (std::size_t j = 0; j < q; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= T(q);
    const T r = T(1) / std::sqrt(var + eps);
    rstd[i] = r;
    for (std::size_t j = 0; j < q; ++j) {
      const T h = (row[j] - mean) * r;
      xhat[i * q + j] = h;
      out[i * q + j] = h * gv[j] + bv[j];
    }
  }
  Tensor<T> y(x.shape(), std::move(out), detail::should_record(tape, x, gain, bias));
  if (y.requires_grad()) {
    auto xn = x.node(), gn = gain.node(), bn = bias.node(), yn = y.node();
    tape.record({yn}, [=, xhat = std::move(xhat), rstd = std::move(rstd)] {
      const auto& gy = yn->grad;
      if (gn->requires_grad || bn->requires_grad) {
        auto gg = gn->requires_grad ? gn->grad_buffer() : std::span<T>{};
        auto gb = bn->requires_grad ? bn->grad_buffer() : std::span<T>{};
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < q; ++j) {
            if (!gg.empty()) gg[j] += gy[i * q + j] * xhat[i * q + j];
            if (!gb.empty()) gb[j] += gy[i * q + j];
          }
      }
      if (xn->requires_grad) {
        auto gx = xn->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) {
          T m1 = 0, m2 = 0;
          for (std::size_t j = 0; j < q; ++j) {
            const T dh = gy[i * q + j] * gn->value[j];
            m1 += dh;
            m2 += dh * xhat[i * q + j];
          }
          m1 /= T(q);
          m2 /= T(q);
          for (std::size_t j = 0; j < q; ++j) {
            const T dh = gy[i * q + j] * gn->value[j];
            gx[i * q + j] += rstd[i] * (dh - m1 - xhat[i * q + j] * m2);
          }
        }
      }
    });
  }
  return y;
}

/// Gathers rows of table[V x d] for each token id.
template <typename T>
Tensor<T> embedding(Tape<T>& tape, const Tensor<T>& table, std::span<const std::int32_t> tokens) {
  detail::require_rank(table.shape(), 2, "embedding");
  const std::size_t V = table.shape()[0], d = table.shape()[1], n = tokens.size();
  std::vector<T> out(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    if (tokens[i] < 0 || std::size_t(tokens[i]) >= V)
      throw ContractError("embedding: token id " + std::to_string(tokens[i]) + " outside vocabulary of " +
                          std::to_string(V));
    std::copy_n(table.values().begin() + std::ptrdiff_t(std::size_t(tokens[i]) * d), d,
                out.begin() + std::ptrdiff_t(i * d));
  }
  Tensor<T> y({n, d}, std::move(out), detail::should_record(tape, table));
  if (y.requires_grad()) {
    auto tn = table.node(), yn = y.node();
    std::vector<std::int32_t> ids(tokens.begin(), tokens.end());
    tape.record({yn}, [=, ids = std::move(ids)] {
      auto g = tn->grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) g[std::size_t(ids[i]) * d + j] += yn->grad[i * d + j];
    });
  }
  return y;
}

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
  T s = 0;
  for (T v : x.values()) s += v;
  Tensor<T> y = Tensor<T>::scalar(s, detail::should_record(tape, x));
  if (y.requires_grad()) {
    auto xn = x.node(), yn = y.node();
    tape.record({yn}, [=] {
      auto g = xn->grad_buffer();
      for (auto& v : g) v += yn->grad[0];
    });
  }
  return y;
}

/// Mean over unmasked positions of -log softmax(logits)[target]. An empty
/// mask means every position counts.
template <typename T>
Tensor<T> cross_entropy(Tape<T>& tape, const Tensor<T>& logits, std::span<const std::int32_t> targets,
                        std::span<const std::uint8_t> mask = {}) {
  detail::require_rank(logits.shape(), 2, "cross_entropy");
  const std::size_t n = logits.shape()[0], V = logits.shape()[1];
  if (targets.size() != n)
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_str(logits.shape()));
  if (!mask.empty() && mask.size() != n) throw DimensionError("cross_entropy: mask length mismatch");
  auto lv = logits.values();
  std::vector<T> probs(n * V, T(0));
  std::size_t count = 0;
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask.empty() && !mask[i]) continue;
    if (targets[i] < 0 || std::size_t(targets[i]) >= V)
      throw ContractError("cross_entropy: target id " + std::to_string(targets[i]) + " outside vocabulary of " +
                          std::to_string(V));
    const T* row = lv.data() + i * V;
    const T m = *std::max_element(row, row + V);
    T s = 0;
    for (std::size_t j = 0; j < V; ++j) s += (probs[i * V + j] = std::exp(row[j] - m));
    for (std::size_t j = 0; j < V; ++j) probs[i * V + j] /= s;
    total += (m + std::log(s)) - row[targets[i]];
    ++count;
  }
  if (count == 0) throw ContractError("cross_entropy: every position is masked");
  Tensor<T> y = Tensor<T>::scalar(total / T(count), detail::should_record(tape, logits));
  if (y.requires_grad()) {
    auto ln = logits.node(), yn = y.node();
    std::vector<std::int32_t> tg(targets.begin(), targets.end());
    std::vector<std::uint8_t> mk(mask.begin(), mask.end());
    tape.record({yn}, [=, probs = std::move(probs), tg = std::move(tg), mk = std::move(mk)] {
      auto g = ln->grad_buffer();
      const T s = yn->grad[0] / T(count);
      for (std::size_t i = 0; i < n; ++i) {
        if (!mk.empty() && !mk[i]) continue;
        for (std::size_t j = 0; j < V; ++j) g[i * V + j] += s * probs[i * V + j];
        g[i * V + std::size_t(tg[i])] -= s;
      }
    });
  }
  return y;
}

}  // namespace hgrn
