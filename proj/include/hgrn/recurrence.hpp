#pragma once

#include "hgrn/ops.hpp"
#include "hgrn/scan.hpp"

namespace hgrn {

template <typename T>
struct RecurrenceOut {
  Tensor<T> re;
  Tensor<T> im;  // undefined for a real-valued recurrence
};

/// h_t = lambda_t e^{i theta} h_{t-1} + b_t as a single differentiable
/// primitive. theta is [d] (shared over time), [n x d] (per step) or undefined
/// together with b_im for the real-valued variant. The backward pass is the
/// hand-derived adjoint sweep, so the tape holds one entry per call.
template <typename T>
RecurrenceOut<T> recurrence(Tape<T>& tape, const Tensor<T>& lambda, const Tensor<T>& theta, const Tensor<T>& b_re,
                            const Tensor<T>& b_im, const ScanOptions& opt = {}) {
  detail::require_rank(lambda.shape(), 2, "recurrence lambda");
  detail::require_same(lambda.shape(), b_re.shape(), "recurrence input");
  const std::size_t n = lambda.shape()[0], d = lambda.shape()[1];
  const bool cx = b_im.defined();
  if (cx) detail::require_same(lambda.shape(), b_im.shape(), "recurrence input");
  if (theta.defined() && !cx) throw DimensionError("recurrence: phase given for a real-valued input");

  DecaySeq<T> decay{n, d, std::vector<T>(lambda.values().begin(), lambda.values().end()), {}, false};
  if (theta.defined()) {
    if (theta.shape() == Shape{d}) {
      decay.per_step_theta = false;
    } else if (theta.shape() == Shape{n, d}) {
      decay.per_step_theta = true;
    } else {
      throw DimensionError("recurrence: theta " + shape_str(theta.shape()) + " for lambda " + shape_str(lambda.shape()));
    }
    decay.theta.assign(theta.values().begin(), theta.values().end());
  }
  ComplexSeq<T> b{n, d, std::vector<T>(b_re.values().begin(), b_re.values().end()),
                  cx ? std::vector<T>(b_im.values().begin(), b_im.values().end()) : std::vector<T>{}};
  ComplexSeq<T> h = recur(decay, b, opt);

  const bool rg = detail::should_record(tape, lambda, theta, b_re, b_im);
  RecurrenceOut<T> out{Tensor<T>({n, d}, std::move(h.re), rg), cx ? Tensor<T>({n, d}, std::move(h.im), rg) : Tensor<T>{}};
  if (rg) {
    auto ln = lambda.node(), tn = theta.defined() ? theta.node() : nullptr, brn = b_re.node(),
         bin = cx ? b_im.node() : nullptr, hrn = out.re.node(), hin = cx ? out.im.node() : nullptr;
    std::vector<std::shared_ptr<Node<T>>> outs{hrn};
    if (cx) outs.push_back(hin);
    tape.record(std::move(outs), [=, decay = std::move(decay)] {
      ComplexSeq<T> hs{n, d, hrn->value, cx ? hin->value : std::vector<T>{}};
      ComplexSeq<T> gh{n, d, hrn->grad, cx ? hin->grad : std::vector<T>{}};
      RecurGrads<T> g = recur_backward(decay, hs, gh);
      auto acc = [](const std::shared_ptr<Node<T>>& node, const std::vector<T>& src) {
        if (!node || !node->requires_grad) return;
        auto dst = node->grad_buffer();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
      };
      acc(ln, g.lambda);
      acc(tn, g.theta);
      acc(brn, g.input.re);
      acc(bin, g.input.im);
    });
  }
  return out;
}

}  // namespace hgrn
