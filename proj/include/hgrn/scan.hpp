#pragma once

#include <bit>
#include <cmath>
#include <fstream>
#include <optional>
#include <thread>

#include "hgrn/tensor.hpp"

namespace hgrn {

/// Length-n, width-d complex sequence stored as two real planes. A sequence
/// with an empty imaginary plane is real-valued.
template <std::floating_point T>
struct ComplexSeq {
  std::size_t n = 0;
  std::size_t d = 0;
  std::vector<T> re;
  std::vector<T> im;

  static ComplexSeq zeros(std::size_t n, std::size_t d, bool complex = true) {
    return {n, d, std::vector<T>(n * d, T(0)), complex ? std::vector<T>(n * d, T(0)) : std::vector<T>{}};
  }
  bool is_complex() const { return !im.empty(); }
};

/// Decay magnitudes lambda[n x d] in [0,1] and phases theta, either shared
/// across time ([d]) or one per step ([n x d]). An empty theta means a
/// real-valued recurrence.
template <std::floating_point T>
struct DecaySeq {
  std::size_t n = 0;
  std::size_t d = 0;
  std::vector<T> lambda;
  std::vector<T> theta;
  bool per_step_theta = false;

  bool has_phase() const { return !theta.empty(); }
  T theta_at(std::size_t t, std::size_t j) const {
    if (theta.empty()) return T(0);
    return per_step_theta ? theta[t * d + j] : theta[j];
  }
};

/// Affine map h -> a * h + b over d complex lanes; the monoid element of the scan.
template <std::floating_point T>
struct ScanElement {
  std::vector<T> a_re, a_im, b_re, b_im;

  static ScanElement identity(std::size_t d) {
    return {std::vector<T>(d, T(1)), std::vector<T>(d, T(0)), std::vector<T>(d, T(0)), std::vector<T>(d, T(0))};
  }
  std::size_t width() const { return a_re.size(); }
};

/// Applies `earlier` first, then `later`.
template <std::floating_point T>
ScanElement<T> compose(const ScanElement<T>& later, const ScanElement<T>& earlier) {
  const std::size_t d = later.width();
  if (earlier.width() != d) throw DimensionError("compose: width mismatch");
  ScanElement<T> out{std::vector<T>(d), std::vector<T>(d), std::vector<T>(d), std::vector<T>(d)};
  for (std::size_t j = 0; j < d; ++j) {
    out.a_re[j] = later.a_re[j] * earlier.a_re[j] - later.a_im[j] * earlier.a_im[j];
    out.a_im[j] = later.a_re[j] * earlier.a_im[j] + later.a_im[j] * earlier.a_re[j];
    out.b_re[j] = later.a_re[j] * earlier.b_re[j] - later.a_im[j] * earlier.b_im[j] + later.b_re[j];
    out.b_im[j] = later.a_re[j] * earlier.b_im[j] + later.a_im[j] * earlier.b_re[j] + later.b_im[j];
  }
  return out;
}

/// Work-efficient two-phase inclusive scan. `combine(later, earlier)` must be
/// associative with `identity` as its unit; the input is padded to the next
/// power of two with identity elements.
template <typename Elem, typename Combine>
void blelloch_inclusive_scan(std::vector<Elem>& xs, const Elem& identity, Combine combine) {
  const std::size_t n = xs.size();
  if (n == 0) return;
  const std::size_t m = std::bit_ceil(n);
  std::vector<Elem> tree(xs);
  tree.resize(m, identity);

  for (std::size_t stride = 1; stride < m; stride *= 2)
    for (std::size_t i = 2 * stride - 1; i < m; i += 2 * stride) tree[i] = combine(tree[i], tree[i - stride]);

  tree[m - 1] = identity;
  for (std::size_t stride = m / 2; stride >= 1; stride /= 2) {
    for (std::size_t i = 2 * stride - 1; i < m; i += 2 * stride) {
      Elem left = tree[i - stride];
      tree[i - stride] = tree[i];
      tree[i] = combine(left, tree[i]);
    }
  }
  // tree now holds the exclusive prefix
  for (std::size_t i = 0; i < n; ++i) xs[i] = combine(xs[i], tree[i]);
}

struct ScanOptions {
  // sequences at least this long use the parallel scan
  std::size_t parallel_threshold = 512;
  std::size_t threads = 1;
};

namespace detail {

template <typename T>
void check_decay(const DecaySeq<T>& decay) {
  if (decay.lambda.size() != decay.n * decay.d)
    throw DimensionError("decay: lambda holds " + std::to_string(decay.lambda.size()) + " values for [" +
                         std::to_string(decay.n) + "x" + std::to_string(decay.d) + "]");
  if (decay.has_phase()) {
    const std::size_t want = decay.per_step_theta ? decay.n * decay.d : decay.d;
    if (decay.theta.size() != want) throw DimensionError("decay: theta size mismatch");
  }
  for (T l : decay.lambda)
    if (!(l >= T(0) && l <= T(1))) throw ContractError("decay: lambda " + std::to_string(double(l)) + " outside [0,1]");
}

template <typename T>
void check_input(const DecaySeq<T>& decay, const ComplexSeq<T>& c) {
  if (c.n != decay.n || c.d != decay.d || c.re.size() != c.n * c.d ||
      (c.is_complex() && c.im.size() != c.n * c.d))
    throw DimensionError("scan: input [" + std::to_string(c.n) + "x" + std::to_string(c.d) +
                         "] does not match decay [" + std::to_string(decay.n) + "x" + std::to_string(decay.d) + "]");
  if (!c.is_complex() && decay.has_phase()) throw DimensionError("scan: real input with a phased decay");
}

// One complex lane of the scan monoid.
template <typename T>
struct Lane {
  T ar = 1, ai = 0, br = 0, bi = 0;
};

template <typename T>
Lane<T> compose_lane(const Lane<T>& later, const Lane<T>& earlier) {
  return {later.ar * earlier.ar - later.ai * earlier.ai, later.ar * earlier.ai + later.ai * earlier.ar,
          later.ar * earlier.br - later.ai * earlier.bi + later.br, later.ar * earlier.bi + later.ai * earlier.br + later.bi};
}

template <typename F>
void for_each_lane(std::size_t d, std::size_t threads, F&& f) {
  if (threads <= 1 || d < 2) {
    for (std::size_t j = 0; j < d; ++j) f(j);
    return;
  }
  threads = std::min(threads, d);
  std::vector<std::jthread> pool;
  for (std::size_t w = 0; w < threads; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t j = w; j < d; j += threads) f(j);
    });
}

}  // namespace detail

/// Generic element-wise linear recurrence h_t = lambda_t e^{i theta_t} h_{t-1} + b_t,
/// run as one fused pass over time.
template <std::floating_point T>
ComplexSeq<T> recur_sequential(const DecaySeq<T>& decay, const ComplexSeq<T>& b,
                               const std::optional<ComplexSeq<T>>& h0 = std::nullopt) {
  detail::check_decay(decay);
  detail::check_input(decay, b);
  const std::size_t n = decay.n, d = decay.d;
  const bool cx = b.is_complex();
  ComplexSeq<T> h = ComplexSeq<T>::zeros(n, d, cx);
  std::vector<T> sr(d, T(0)), si(d, T(0));
  if (h0) {
    std::copy(h0->re.begin(), h0->re.end(), sr.begin());
    if (cx && h0->is_complex()) std::copy(h0->im.begin(), h0->im.end(), si.begin());
  }
  if (!cx) {
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t j = 0; j < d; ++j) {
        const std::size_t k = t * d + j;
        h.re[k] = sr[j] = decay.lambda[k] * sr[j] + b.re[k];
      }
    return h;
  }
  std::vector<T> cs(d, T(1)), sn(d, T(0));
  auto load_phase = [&](std::size_t t) {
    for (std::size_t j = 0; j < d; ++j) {
      const T th = decay.theta_at(t, j);
      cs[j] = std::cos(th);
      sn[j] = std::sin(th);
    }
  };
  if (decay.has_phase() && !decay.per_step_theta) load_phase(0);
  for (std::size_t t = 0; t < n; ++t) {
    if (decay.per_step_theta) load_phase(t);
    for (std::size_t j = 0; j < d; ++j) {
      const std::size_t k = t * d + j;
      const T l = decay.lambda[k];
      const T r = l * (cs[j] * sr[j] - sn[j] * si[j]) + b.re[k];
      const T i = l * (sn[j] * sr[j] + cs[j] * si[j]) + b.im[k];
      h.re[k] = sr[j] = r;
      h.im[k] = si[j] = i;
    }
  }
  return h;
}

/// Same recurrence as recur_sequential, evaluated as an inclusive prefix
/// composition of affine maps with a work-efficient tree per lane.
template <std::floating_point T>
ComplexSeq<T> recur_parallel(const DecaySeq<T>& decay, const ComplexSeq<T>& b,
                             const std::optional<ComplexSeq<T>>& h0 = std::nullopt, std::size_t threads = 1) {
  detail::check_decay(decay);
  detail::check_input(decay, b);
  const std::size_t n = decay.n, d = decay.d;
  const bool cx = b.is_complex();
  ComplexSeq<T> h = ComplexSeq<T>::zeros(n, d, cx);
  if (n == 0) return h;
  detail::for_each_lane(d, threads, [&](std::size_t j) {
    std::vector<detail::Lane<T>> lanes(n);
    for (std::size_t t = 0; t < n; ++t) {
      const std::size_t k = t * d + j;
      const T l = decay.lambda[k], th = decay.theta_at(t, j);
      lanes[t] = {l * std::cos(th), l * std::sin(th), b.re[k], cx ? b.im[k] : T(0)};
    }
    blelloch_inclusive_scan(lanes, detail::Lane<T>{}, detail::compose_lane<T>);
    const T h0r = h0 ? h0->re[j] : T(0);
    const T h0i = (h0 && h0->is_complex()) ? h0->im[j] : T(0);
    for (std::size_t t = 0; t < n; ++t) {
      const auto& p = lanes[t];
      h.re[t * d + j] = p.ar * h0r - p.ai * h0i + p.br;
      if (cx) h.im[t * d + j] = p.ar * h0i + p.ai * h0r + p.bi;
    }
  });
  return h;
}

/// Input term (1 - lambda_t) c_t of the tied-gate recurrence.
template <std::floating_point T>
ComplexSeq<T> tied_input(const DecaySeq<T>& decay, const ComplexSeq<T>& c) {
  detail::check_input(decay, c);
  ComplexSeq<T> b = c;
  for (std::size_t k = 0; k < b.re.size(); ++k) {
    const T w = T(1) - decay.lambda[k];
    b.re[k] *= w;
    if (b.is_complex()) b.im[k] *= w;
  }
  return b;
}

/// a_t = lambda_t e^{i theta}, b_t = (1 - lambda_t) c_t.
template <std::floating_point T>
std::vector<ScanElement<T>> make_elements(const DecaySeq<T>& decay, const ComplexSeq<T>& c) {
  detail::check_decay(decay);
  detail::check_input(decay, c);
  const std::size_t n = decay.n, d = decay.d;
  std::vector<ScanElement<T>> out;
  out.reserve(n);
  for (std::size_t t = 0; t < n; ++t) {
    ScanElement<T> e = ScanElement<T>::identity(d);
    for (std::size_t j = 0; j < d; ++j) {
      const std::size_t k = t * d + j;
      const T l = decay.lambda[k], th = decay.theta_at(t, j);
      e.a_re[j] = l * std::cos(th);
      e.a_im[j] = l * std::sin(th);
      e.b_re[j] = (T(1) - l) * c.re[k];
      e.b_im[j] = c.is_complex() ? (T(1) - l) * c.im[k] : T(0);
    }
    out.push_back(std::move(e));
  }
  return out;
}

/// h_t = lambda_t e^{i theta} h_{t-1} + (1 - lambda_t) c_t, fused sequential pass.
template <std::floating_point T>
ComplexSeq<T> sequential_scan(const DecaySeq<T>& decay, const ComplexSeq<T>& c,
                              const std::optional<ComplexSeq<T>>& h0 = std::nullopt) {
  detail::check_decay(decay);
  return recur_sequential(decay, tied_input(decay, c), h0);
}

template <std::floating_point T>
ComplexSeq<T> parallel_scan(const DecaySeq<T>& decay, const ComplexSeq<T>& c,
                            const std::optional<ComplexSeq<T>>& h0 = std::nullopt, std::size_t threads = 1) {
  detail::check_decay(decay);
  if (decay.n == 0) throw ContractError("parallel_scan: empty sequence");
  return recur_parallel(decay, tied_input(decay, c), h0, threads);
}

/// Dispatches to the sequential kernel below the length threshold and the
/// parallel scan at or above it.
template <std::floating_point T>
ComplexSeq<T> recur(const DecaySeq<T>& decay, const ComplexSeq<T>& b, const ScanOptions& opt = {},
                    const std::optional<ComplexSeq<T>>& h0 = std::nullopt) {
  if (decay.n >= opt.parallel_threshold) return recur_parallel(decay, b, h0, opt.threads);
  return recur_sequential(decay, b, h0);
}

/// Materialized token-mixing matrix of one hidden lane: A = Lambda (.) Theta,
/// lower triangular, n x n, row t and column s.
template <std::floating_point T>
struct MixingMatrix {
  std::size_t n = 0;
  std::vector<T> lambda;  // (1 - l_s) prod_{k=s+1}^{t} l_k
  std::vector<T> theta_re, theta_im;  // e^{i phase(t, s)}

  T a_re(std::size_t t, std::size_t s) const { return lambda[t * n + s] * theta_re[t * n + s]; }
  T a_im(std::size_t t, std::size_t s) const { return lambda[t * n + s] * theta_im[t * n + s]; }
};

inline constexpr std::size_t kDefaultMixingCap = 512;

template <std::floating_point T>
MixingMatrix<T> mixing_matrix(const DecaySeq<T>& decay, std::size_t dim, std::size_t cap = kDefaultMixingCap) {
  detail::check_decay(decay);
  const std::size_t n = decay.n, d = decay.d;
  if (n > cap)
    throw DimensionError("mixing_matrix: n = " + std::to_string(n) + " exceeds materialization cap " +
                         std::to_string(cap));
  if (dim >= d) throw DimensionError("mixing_matrix: lane " + std::to_string(dim) + " of width " + std::to_string(d));
  MixingMatrix<T> m{n, std::vector<T>(n * n, T(0)), std::vector<T>(n * n, T(0)), std::vector<T>(n * n, T(0))};
  for (std::size_t s = 0; s < n; ++s) {
    T prod = T(1) - decay.lambda[s * d + dim];
    T phase = 0;
    for (std::size_t t = s; t < n; ++t) {
      if (t > s) {
        prod *= decay.lambda[t * d + dim];
        phase = decay.per_step_theta ? phase + decay.theta_at(t, dim) : T(t - s) * decay.theta_at(0, dim);
      }
      m.lambda[t * n + s] = prod;
      m.theta_re[t * n + s] = std::cos(phase);
      m.theta_im[t * n + s] = std::sin(phase);
    }
  }
  return m;
}

/// H = A C for one lane.
template <std::floating_point T>
std::pair<std::vector<T>, std::vector<T>> apply_mixing(const MixingMatrix<T>& m, const ComplexSeq<T>& c,
                                                       std::size_t dim) {
  if (c.n != m.n) throw DimensionError("apply_mixing: length mismatch");
  std::vector<T> hr(m.n, T(0)), hi(m.n, T(0));
  for (std::size_t t = 0; t < m.n; ++t)
    for (std::size_t s = 0; s <= t; ++s) {
      const T cr = c.re[s * c.d + dim], ci = c.is_complex() ? c.im[s * c.d + dim] : T(0);
      hr[t] += m.a_re(t, s) * cr - m.a_im(t, s) * ci;
      hi[t] += m.a_re(t, s) * ci + m.a_im(t, s) * cr;
    }
  return {std::move(hr), std::move(hi)};
}

/// Largest spread of Theta along any diagonal t - s = const.
template <std::floating_point T>
T toeplitz_deviation(const MixingMatrix<T>& m) {
  T worst = 0;
  for (std::size_t off = 0; off < m.n; ++off)
    for (std::size_t t = off + 1; t < m.n; ++t) {
      const std::size_t k0 = off * m.n, k = t * m.n + (t - off);
      worst = std::max(worst, std::hypot(m.theta_re[k] - m.theta_re[k0], m.theta_im[k] - m.theta_im[k0]));
    }
  return worst;
}

/// One CSV per lane: row per t, columns s0_re,s0_im,... holding A[t][s].
template <std::floating_point T>
void write_mixing_csv(const std::string& path, const MixingMatrix<T>& m) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  os.precision(17);
  os << "t";
  for (std::size_t s = 0; s < m.n; ++s) os << ",s" << s << "_re,s" << s << "_im";
  os << '\n';
  for (std::size_t t = 0; t < m.n; ++t) {
    os << t;
    for (std::size_t s = 0; s < m.n; ++s) os << ',' << m.a_re(t, s) << ',' << m.a_im(t, s);
    os << '\n';
  }
}

/// Gradients of the generic recurrence.
template <std::floating_point T>
struct RecurGrads {
  std::vector<T> lambda;  // [n x d]
  std::vector<T> theta;   // same layout as the decay's theta
  ComplexSeq<T> input;
};

/// Reverse-time adjoint sweep for h_t = lambda_t e^{i theta_t} h_{t-1} + b_t.
/// `h` is the stored forward output; h_0 is zero unless given.
template <std::floating_point T>
RecurGrads<T> recur_backward(const DecaySeq<T>& decay, const ComplexSeq<T>& h, const ComplexSeq<T>& grad_h,
                             const std::optional<ComplexSeq<T>>& h0 = std::nullopt) {
  const std::size_t n = decay.n, d = decay.d;
  const bool cx = h.is_complex();
  if (h.n != n || h.d != d || grad_h.n != n || grad_h.d != d || grad_h.is_complex() != cx)
    throw DimensionError("recur_backward: shapes disagree with the forward record");
  RecurGrads<T> g{std::vector<T>(n * d, T(0)), std::vector<T>(decay.theta.size(), T(0)),
                  ComplexSeq<T>::zeros(n, d, cx)};
  std::vector<T> ar(d, T(0)), ai(d, T(0));  // adjoint of h_t
  std::vector<T> cs(d, T(1)), sn(d, T(0));
  auto load_phase = [&](std::size_t t) {
    for (std::size_t j = 0; j < d; ++j) {
      const T th = decay.theta_at(t, j);
      cs[j] = std::cos(th);
      sn[j] = std::sin(th);
    }
  };
  if (decay.has_phase() && !decay.per_step_theta) load_phase(0);
  for (std::size_t t = n; t-- > 0;) {
    if (decay.per_step_theta) load_phase(t);
    for (std::size_t j = 0; j < d; ++j) {
      const std::size_t k = t * d + j;
      const T gr = grad_h.re[k] + ar[j];
      const T gi = cx ? grad_h.im[k] + ai[j] : T(0);
      g.input.re[k] = gr;
      if (cx) g.input.im[k] = gi;

      const T pr = t > 0 ? h.re[k - d] : (h0 ? h0->re[j] : T(0));
      const T pi = cx ? (t > 0 ? h.im[k - d] : (h0 && h0->is_complex() ? h0->im[j] : T(0))) : T(0);
      const T c = cs[j], s = sn[j], l = decay.lambda[k];
      // rotated previous state e^{i theta} h_{t-1}
      const T rr = c * pr - s * pi, ri = s * pr + c * pi;
      g.lambda[k] = gr * rr + gi * ri;
      if (decay.has_phase()) {
        const T dth = l * (gr * -ri + gi * rr);
        if (decay.per_step_theta)
          g.theta[k] = dth;
        else
          g.theta[j] += dth;
      }
      // adjoint flowing to h_{t-1}: lambda e^{-i theta} G
      ar[j] = l * (c * gr + s * gi);
      ai[j] = l * (c * gi - s * gr);
    }
  }
  return g;
}

template <std::floating_point T>
struct ScanGrads {
  std::vector<T> lambda;
  std::vector<T> theta;
  ComplexSeq<T> c;
};

/// Exact backward of the tied-gate scan: grad_c = (1 - lambda) G and the
/// lambda gradient includes the -c_t term of the input weight.
template <std::floating_point T>
ScanGrads<T> scan_backward(const DecaySeq<T>& decay, const ComplexSeq<T>& c, const ComplexSeq<T>& h,
                           const ComplexSeq<T>& grad_h) {
  detail::check_decay(decay);
  detail::check_input(decay, c);
  RecurGrads<T> r = recur_backward(decay, h, grad_h);
  ScanGrads<T> out{std::move(r.lambda), std::move(r.theta), std::move(r.input)};
  for (std::size_t k = 0; k < out.lambda.size(); ++k) {
    const T w = T(1) - decay.lambda[k];
    out.lambda[k] -= out.c.re[k] * c.re[k] + (c.is_complex() ? out.c.im[k] * c.im[k] : T(0));
    out.c.re[k] *= w;
    if (out.c.is_complex()) out.c.im[k] *= w;
  }
  return out;
}

}  // namespace hgrn
