#pragma once

#include "metabev/tensor.hpp"

#include <Eigen/Dense>

namespace metabev {

template <typename S>
using MatrixX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {
template <typename S>
Eigen::Map<const MatrixX<S>> as_matrix(const ArrayX<S>& a, long rows, long cols) {
  return Eigen::Map<const MatrixX<S>>(a.data(), rows, cols);
}
template <typename S>
Eigen::Map<MatrixX<S>> as_matrix(ArrayX<S>& a, long rows, long cols) {
  return Eigen::Map<MatrixX<S>>(a.data(), rows, cols);
}
}  // namespace detail

// y = x W^T + b with x:[T,in], W:[out,in], b:[out]
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias) {
  if (x.shape().size() != 2 || weight.shape().size() != 2)
    throw std::invalid_argument("linear: x and weight must be rank 2");
  long t = x.dim(0), in = x.dim(1), out = weight.dim(0);
  if (weight.dim(1) != in || bias.size() != out)
    throw std::invalid_argument("linear: dimension mismatch x" + shape_str(x.shape()) + " W" +
                                shape_str(weight.shape()));
  ArrayX<S> v(t * out);
  {
    auto X = detail::as_matrix(x.value(), t, in);
    auto W = detail::as_matrix(weight.value(), out, in);
    auto Y = detail::as_matrix(v, t, out);
    Y.noalias() = X * W.transpose();
    Y.rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(bias.value().data(), out);
  }
  return detail::op<S>({static_cast<int>(t), static_cast<int>(out)}, std::move(v),
                       {x, weight, bias}, [t, in, out](TensorNode<S>& n) {
                         auto G = detail::as_matrix(n.grad, t, out);
                         auto& px = n.parents[0];
                         auto& pw = n.parents[1];
                         auto& pb = n.parents[2];
                         auto X = detail::as_matrix(px->value, t, in);
                         auto W = detail::as_matrix(pw->value, out, in);
                         if (px->requires_grad) {
                           px->ensure_grad();
                           detail::as_matrix(px->grad, t, in).noalias() += G * W;
                         }
                         if (pw->requires_grad) {
                           pw->ensure_grad();
                           detail::as_matrix(pw->grad, out, in).noalias() += G.transpose() * X;
                         }
                         if (pb->requires_grad) {
                           pb->ensure_grad();
                           Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>(pb->grad.data(), out) +=
                               G.colwise().sum().transpose();
                         }
                       });
}

// softmax along one axis; shift-invariant by construction
template <typename S>
Tensor<S> softmax(const Tensor<S>& x, int axis) {
  int nd = static_cast<int>(x.shape().size());
  if (nd == 0) throw std::invalid_argument("softmax: scalar input");
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) throw std::invalid_argument("softmax: bad axis");
  long outer = 1, k = x.dim(axis), inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < nd; ++i) inner *= x.dim(i);
  ArrayX<S> v(x.size());
  for (long o = 0; o < outer; ++o)
    for (long in = 0; in < inner; ++in) {
      long base = o * k * inner + in;
      S mx = x.value()[base];
      for (long j = 1; j < k; ++j) mx = std::max(mx, x.value()[base + j * inner]);
      S z = S(0);
      for (long j = 0; j < k; ++j) {
        S e = std::exp(x.value()[base + j * inner] - mx);
        v[base + j * inner] = e;
        z += e;
      }
      for (long j = 0; j < k; ++j) v[base + j * inner] /= z;
    }
  ArrayX<S> saved = v;
  return detail::op<S>(x.shape(), std::move(v), {x},
                       [outer, k, inner, saved](TensorNode<S>& n) {
                         auto& p = n.parents[0];
                         if (!p->requires_grad) return;
                         p->ensure_grad();
                         for (long o = 0; o < outer; ++o)
                           for (long in = 0; in < inner; ++in) {
                             long base = o * k * inner + in;
                             S dot = S(0);
                             for (long j = 0; j < k; ++j)
                               dot += n.grad[base + j * inner] * saved[base + j * inner];
                             for (long j = 0; j < k; ++j)
                               p->grad[base + j * inner] +=
                                   saved[base + j * inner] * (n.grad[base + j * inner] - dot);
                           }
                       });
}

// per-vector standardization over the last axis, then affine
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias,
                     S eps = S(1e-6)) {
  int nd = static_cast<int>(x.shape().size());
  if (nd == 0) throw std::invalid_argument("layer_norm: scalar input");
  long d = x.dim(nd - 1);
  long rows = x.size() / d;
  if (gain.size() != d || bias.size() != d)
    throw std::invalid_argument("layer_norm: gain/bias must match last axis");
  ArrayX<S> norm(x.size());
  ArrayX<S> inv_std(rows);
  for (long r = 0; r < rows; ++r) {
    auto seg = x.value().segment(r * d, d);
    S mu = seg.mean();
    S var = (seg - mu).square().mean();
    S is = S(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    norm.segment(r * d, d) = (seg - mu) * is;
  }
  ArrayX<S> v(x.size());
  for (long r = 0; r < rows; ++r)
    v.segment(r * d, d) = norm.segment(r * d, d) * gain.value() + bias.value();
  return detail::op<S>(x.shape(), std::move(v), {x, gain, bias},
                       [rows, d, norm, inv_std](TensorNode<S>& n) {
                         auto& px = n.parents[0];
                         auto& pg = n.parents[1];
                         auto& pb = n.parents[2];
                         for (long r = 0; r < rows; ++r) {
                           auto g = n.grad.segment(r * d, d);
                           auto h = norm.segment(r * d, d);
                           if (pg->requires_grad) {
                             pg->ensure_grad();
                             pg->grad += g * h;
                           }
                           if (pb->requires_grad) {
                             pb->ensure_grad();
                             pb->grad += g;
                           }
                           if (px->requires_grad) {
                             px->ensure_grad();
                             ArrayX<S> gh = (g * pg->value).eval();  // dL/dnorm
                             S m1 = gh.mean();
                             S m2 = (gh * h).mean();
                             px->grad.segment(r * d, d) += inv_std[r] * (gh - m1 - h * m2);
                           }
                         }
                       });
}

// Standalone pre-affine layer norm statistics check helper
template <typename S>
Tensor<S> layer_norm_unit(const Tensor<S>& x, S eps = S(1e-6)) {
  long d = x.dim(static_cast<int>(x.shape().size()) - 1);
  Tensor<S> g = Tensor<S>::from_array({static_cast<int>(d)}, ArrayX<S>::Ones(d));
  Tensor<S> b = Tensor<S>::zeros({static_cast<int>(d)});
  return layer_norm(x, g, b, eps);
}

namespace detail {
// shared bilinear kernel: value and partials at (px, py) on channel plane
template <typename S>
struct BilinearTap {
  long i0, j0;     // top-left lattice corner
  S fx, fy;        // fractional position inside the cell
  bool any = false;
  S w00 = 0, w01 = 0, w10 = 0, w11 = 0;
  bool in00 = false, in01 = false, in10 = false, in11 = false;
};

template <typename S>
BilinearTap<S> bilinear_tap(S px, S py, long h, long w) {
  BilinearTap<S> t;
  S fx0 = std::floor(px), fy0 = std::floor(py);
  t.j0 = static_cast<long>(fx0);
  t.i0 = static_cast<long>(fy0);
  t.fx = px - fx0;
  t.fy = py - fy0;
  auto in = [&](long i, long j) { return i >= 0 && i < h && j >= 0 && j < w; };
  t.in00 = in(t.i0, t.j0);
  t.in01 = in(t.i0, t.j0 + 1);
  t.in10 = in(t.i0 + 1, t.j0);
  t.in11 = in(t.i0 + 1, t.j0 + 1);
  t.w00 = (S(1) - t.fx) * (S(1) - t.fy);
  t.w01 = t.fx * (S(1) - t.fy);
  t.w10 = (S(1) - t.fx) * t.fy;
  t.w11 = t.fx * t.fy;
  t.any = t.in00 || t.in01 || t.in10 || t.in11;
  return t;
}
}  // namespace detail

// grid:[C,H,W], points:[P,2] as (x,y) pixel coordinates, cell (i,j) at
// (x=j, y=i); reads outside the grid are zero. Differentiable in both
// arguments. Output [C,P].
template <typename S>
Tensor<S> bilinear_sample(const Tensor<S>& grid, const Tensor<S>& points) {
  if (grid.shape().size() != 3) throw std::invalid_argument("bilinear_sample: grid must be [C,H,W]");
  if (points.shape().size() != 2 || points.dim(1) != 2)
    throw std::invalid_argument("bilinear_sample: points must be [P,2]");
  if (!points.value().allFinite())
    throw std::invalid_argument("bilinear_sample: non-finite point coordinate");
  long c = grid.dim(0), h = grid.dim(1), w = grid.dim(2);
  long p = points.dim(0);
  ArrayX<S> v = ArrayX<S>::Zero(c * p);
  const S* g = grid.value().data();
  for (long k = 0; k < p; ++k) {
    auto t = detail::bilinear_tap<S>(points.value()[2 * k], points.value()[2 * k + 1], h, w);
    if (!t.any) continue;
    for (long ch = 0; ch < c; ++ch) {
      const S* plane = g + ch * h * w;
      S acc = S(0);
      if (t.in00) acc += t.w00 * plane[t.i0 * w + t.j0];
      if (t.in01) acc += t.w01 * plane[t.i0 * w + t.j0 + 1];
      if (t.in10) acc += t.w10 * plane[(t.i0 + 1) * w + t.j0];
      if (t.in11) acc += t.w11 * plane[(t.i0 + 1) * w + t.j0 + 1];
      v[ch * p + k] = acc;
    }
  }
  return detail::op<S>({static_cast<int>(c), static_cast<int>(p)}, std::move(v), {grid, points},
                       [c, h, w, p](TensorNode<S>& n) {
                         auto& pg = n.parents[0];
                         auto& pp = n.parents[1];
                         const S* gval = pg->value.data();
                         if (pg->requires_grad) pg->ensure_grad();
                         if (pp->requires_grad) pp->ensure_grad();
                         for (long k = 0; k < p; ++k) {
                           auto t = detail::bilinear_tap<S>(pp->value[2 * k], pp->value[2 * k + 1],
                                                            h, w);
                           if (!t.any) continue;
                           S dx = S(0), dy = S(0);
                           for (long ch = 0; ch < c; ++ch) {
                             S go = n.grad[ch * p + k];
                             if (go == S(0) && !pp->requires_grad) continue;
                             const S* plane = gval + ch * h * w;
                             S f00 = t.in00 ? plane[t.i0 * w + t.j0] : S(0);
                             S f01 = t.in01 ? plane[t.i0 * w + t.j0 + 1] : S(0);
                             S f10 = t.in10 ? plane[(t.i0 + 1) * w + t.j0] : S(0);
                             S f11 = t.in11 ? plane[(t.i0 + 1) * w + t.j0 + 1] : S(0);
                             if (pg->requires_grad) {
                               S* gplane = pg->grad.data() + ch * h * w;
                               if (t.in00) gplane[t.i0 * w + t.j0] += go * t.w00;
                               if (t.in01) gplane[t.i0 * w + t.j0 + 1] += go * t.w01;
                               if (t.in10) gplane[(t.i0 + 1) * w + t.j0] += go * t.w10;
                               if (t.in11) gplane[(t.i0 + 1) * w + t.j0 + 1] += go * t.w11;
                             }
                             dx += go * ((f01 - f00) * (S(1) - t.fy) + (f11 - f10) * t.fy);
                             dy += go * ((f10 - f00) * (S(1) - t.fx) + (f11 - f01) * t.fx);
                           }
                           if (pp->requires_grad) {
                             pp->grad[2 * k] += dx;
                             pp->grad[2 * k + 1] += dy;
                           }
                         }
                       });
}

// convenience overload for fixed sample locations
template <typename S>
Tensor<S> bilinear_sample(const Tensor<S>& grid, const std::vector<std::pair<S, S>>& pts) {
  ArrayX<S> p(2 * static_cast<long>(pts.size()));
  for (size_t i = 0; i < pts.size(); ++i) {
    p[2 * static_cast<long>(i)] = pts[i].first;
    p[2 * static_cast<long>(i) + 1] = pts[i].second;
  }
  return bilinear_sample(grid, Tensor<S>::from_array({static_cast<int>(pts.size()), 2}, std::move(p)));
}

// Fused multi-head deformable aggregation.
//   values:  one [D,Hm,Wm] tensor per active modality (D split into `heads`)
//   locs:    [n_mods,Q,M,K,2] pixel sampling locations
//   weights: [Q,M,n_mods*K] softmaxed weights, modality-major along the
//            last axis (mod*K + k), matching concatenated-logit order
// Returns [Q,D] with head h occupying channels [h*D/M, (h+1)*D/M).
template <typename S>
Tensor<S> deform_attn_core(const std::vector<Tensor<S>>& values, const Tensor<S>& locs,
                           const Tensor<S>& weights, int heads) {
  if (values.empty()) throw std::invalid_argument("deform_attn_core: no modality");
  const int n_mods = static_cast<int>(values.size());
  const long d = values[0].dim(0);
  if (d % heads != 0) throw std::invalid_argument("deform_attn_core: channels not divisible by heads");
  const long dh = d / heads;
  if (locs.shape().size() != 5 || locs.dim(0) != n_mods || locs.dim(4) != 2)
    throw std::invalid_argument("deform_attn_core: locs must be [n_mods,Q,M,K,2]");
  const long q = locs.dim(1);
  const long m = locs.dim(2);
  const long k = locs.dim(3);
  if (m != heads) throw std::invalid_argument("deform_attn_core: head count mismatch");
  if (weights.shape().size() != 3 || weights.dim(0) != q || weights.dim(1) != m ||
      weights.dim(2) != n_mods * k)
    throw std::invalid_argument("deform_attn_core: weights must be [Q,M,n_mods*K]");
  std::vector<long> hh(values.size()), ww(values.size());
  for (int mod = 0; mod < n_mods; ++mod) {
    if (values[static_cast<size_t>(mod)].shape().size() != 3 ||
        values[static_cast<size_t>(mod)].dim(0) != d)
      throw std::invalid_argument("deform_attn_core: modality value grids must share channels");
    hh[static_cast<size_t>(mod)] = values[static_cast<size_t>(mod)].dim(1);
    ww[static_cast<size_t>(mod)] = values[static_cast<size_t>(mod)].dim(2);
  }

  ArrayX<S> out = ArrayX<S>::Zero(q * d);
  const S* lp = locs.value().data();
  const S* wp = weights.value().data();
  for (long qi = 0; qi < q; ++qi)
    for (long h = 0; h < m; ++h)
      for (int mod = 0; mod < n_mods; ++mod) {
        const S* vp = values[static_cast<size_t>(mod)].value().data();
        long vh = hh[static_cast<size_t>(mod)], vw = ww[static_cast<size_t>(mod)];
        for (long kk = 0; kk < k; ++kk) {
          long li = (((static_cast<long>(mod) * q + qi) * m + h) * k + kk) * 2;
          S wgt = wp[(qi * m + h) * (n_mods * k) + mod * k + kk];
          auto tap = detail::bilinear_tap<S>(lp[li], lp[li + 1], vh, vw);
          if (!tap.any) continue;
          for (long c = 0; c < dh; ++c) {
            const S* plane = vp + (h * dh + c) * vh * vw;
            S acc = S(0);
            if (tap.in00) acc += tap.w00 * plane[tap.i0 * vw + tap.j0];
            if (tap.in01) acc += tap.w01 * plane[tap.i0 * vw + tap.j0 + 1];
            if (tap.in10) acc += tap.w10 * plane[(tap.i0 + 1) * vw + tap.j0];
            if (tap.in11) acc += tap.w11 * plane[(tap.i0 + 1) * vw + tap.j0 + 1];
            out[qi * d + h * dh + c] += wgt * acc;
          }
        }
      }

  std::vector<Tensor<S>> inputs = values;
  inputs.push_back(locs);
  inputs.push_back(weights);
  return detail::op<S>(
      {static_cast<int>(q), static_cast<int>(d)}, std::move(out), inputs,
      [n_mods, q, m, k, d, dh, hh, ww](TensorNode<S>& n) {
        auto& plocs = n.parents[static_cast<size_t>(n_mods)];
        auto& pwts = n.parents[static_cast<size_t>(n_mods) + 1];
        for (int mod = 0; mod < n_mods; ++mod)
          if (n.parents[static_cast<size_t>(mod)]->requires_grad)
            n.parents[static_cast<size_t>(mod)]->ensure_grad();
        if (plocs->requires_grad) plocs->ensure_grad();
        if (pwts->requires_grad) pwts->ensure_grad();
        const S* lp = plocs->value.data();
        const S* wp = pwts->value.data();
        for (long qi = 0; qi < q; ++qi)
          for (long h = 0; h < m; ++h)
            for (int mod = 0; mod < n_mods; ++mod) {
              auto& pval = n.parents[static_cast<size_t>(mod)];
              const S* vp = pval->value.data();
              long vh = hh[static_cast<size_t>(mod)], vw = ww[static_cast<size_t>(mod)];
              for (long kk = 0; kk < k; ++kk) {
                long li = (((static_cast<long>(mod) * q + qi) * m + h) * k + kk) * 2;
                long wi = (qi * m + h) * (n_mods * k) + mod * k + kk;
                S wgt = wp[wi];
                auto tap = detail::bilinear_tap<S>(lp[li], lp[li + 1], vh, vw);
                if (!tap.any) continue;
                S dw = S(0), dx = S(0), dy = S(0);
                for (long c = 0; c < dh; ++c) {
                  S go = n.grad[qi * d + h * dh + c];
                  const S* plane = vp + (h * dh + c) * vh * vw;
                  S f00 = tap.in00 ? plane[tap.i0 * vw + tap.j0] : S(0);
                  S f01 = tap.in01 ? plane[tap.i0 * vw + tap.j0 + 1] : S(0);
                  S f10 = tap.in10 ? plane[(tap.i0 + 1) * vw + tap.j0] : S(0);
                  S f11 = tap.in11 ? plane[(tap.i0 + 1) * vw + tap.j0 + 1] : S(0);
                  S sampled = tap.w00 * f00 + tap.w01 * f01 + tap.w10 * f10 + tap.w11 * f11;
                  dw += go * sampled;
                  dx += go * wgt * ((f01 - f00) * (S(1) - tap.fy) + (f11 - f10) * tap.fy);
                  dy += go * wgt * ((f10 - f00) * (S(1) - tap.fx) + (f11 - f01) * tap.fx);
                  if (pval->requires_grad) {
                    S* gplane = pval->grad.data() + (h * dh + c) * vh * vw;
                    S gw = go * wgt;
                    if (tap.in00) gplane[tap.i0 * vw + tap.j0] += gw * tap.w00;
                    if (tap.in01) gplane[tap.i0 * vw + tap.j0 + 1] += gw * tap.w01;
                    if (tap.in10) gplane[(tap.i0 + 1) * vw + tap.j0] += gw * tap.w10;
                    if (tap.in11) gplane[(tap.i0 + 1) * vw + tap.j0 + 1] += gw * tap.w11;
                  }
                }
                if (pwts->requires_grad) pwts->grad[wi] += dw;
                if (plocs->requires_grad) {
                  plocs->grad[li] += dx;
                  plocs->grad[li + 1] += dy;
                }
              }
            }
      });
}

}  // namespace metabev
