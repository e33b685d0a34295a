#pragma once

#include "metabev/tensor.hpp"

#include <functional>

namespace metabev {

// Central finite differences of a pure scalar function over a flat buffer.
template <typename S>
ArrayX<S> finite_difference_grad(const std::function<S(const ArrayX<S>&)>& f, const ArrayX<S>& x,
                                 S eps) {
  if (!(eps > S(0))) throw std::invalid_argument("finite_difference_grad: eps must be positive");
  ArrayX<S> g(x.size());
  ArrayX<S> probe = x;
  for (long i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + eps;
    S hi = f(probe);
    probe[i] = x[i] - eps;
    S lo = f(probe);
    probe[i] = x[i];
    if (!std::isfinite(hi) || !std::isfinite(lo))
      throw std::runtime_error("finite_difference_grad: non-finite evaluation");
    g[i] = (hi - lo) / (S(2) * eps);
  }
  return g;
}

// max_i |a_i - b_i| / max(1, |a_i|, |b_i|)
template <typename S>
S max_rel_error(const ArrayX<S>& a, const ArrayX<S>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("max_rel_error: size mismatch");
  S worst = S(0);
  for (long i = 0; i < a.size(); ++i) {
    S denom = std::max(S(1), std::max(std::abs(a[i]), std::abs(b[i])));
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

}  // namespace metabev
