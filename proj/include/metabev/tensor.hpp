#pragma once

#include "metabev/core.hpp"

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>

namespace metabev {

// Reverse-mode node. Values are immutable after the forward op that
// produced them; grads are written only inside a single backward() pass.
template <typename S>
struct TensorNode {
  Shape shape;
  ArrayX<S> value;
  ArrayX<S> grad;  // lazily allocated, same size as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode<S>>> parents;
  std::function<void()> backward_fn;  // accumulates this->grad into parents

  void ensure_grad() {
    if (grad.size() != value.size()) grad = ArrayX<S>::Zero(value.size());
  }
};

template <typename S>
class Tensor {
 public:
  using Scalar = S;
  using Array = ArrayX<S>;

  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    return from_array(shape, Array::Zero(shape_size(shape)), requires_grad);
  }

  static Tensor from_array(const Shape& shape, Array data, bool requires_grad = false) {
    if (data.size() != shape_size(shape))
      throw std::invalid_argument("tensor data size does not match shape " + shape_str(shape));
    auto n = std::make_shared<TensorNode<S>>();
    n->shape = shape;
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

  static Tensor from_values(const Shape& shape, const std::vector<S>& v, bool requires_grad = false) {
    Array a(static_cast<long>(v.size()));
    for (size_t i = 0; i < v.size(); ++i) a[static_cast<long>(i)] = v[i];
    return from_array(shape, std::move(a), requires_grad);
  }

  static Tensor scalar(S v, bool requires_grad = false) {
    Array a(1);
    a[0] = v;
    return from_array({}, std::move(a), requires_grad);
  }

  bool valid() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  long size() const { return node_->value.size(); }
  int dim(int i) const { return node_->shape.at(static_cast<size_t>(i)); }
  bool requires_grad() const { return node_->requires_grad; }
  const Array& value() const { return node_->value; }
  S item() const {
    if (size() != 1) throw std::invalid_argument("item() on non-scalar tensor");
    return node_->value[0];
  }

  // Parameter mutation, for the optimizer only. Invalidates nothing because
  // parameter nodes have no recorded parents.
  Array& mutable_value() { return node_->value; }

  const Array& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (node_->grad.size()) node_->grad.setZero();
  }

  std::shared_ptr<TensorNode<S>> node() const { return node_; }

  // Reverse pass from this scalar (or from a caller-supplied seed).
  void backward(const Array* seed = nullptr) const {
    if (!seed && size() != 1)
      throw std::invalid_argument("backward() without seed requires a scalar output");
    std::vector<TensorNode<S>*> order;
    std::unordered_set<TensorNode<S>*> seen;
    topo(node_.get(), seen, order);
    node_->ensure_grad();
    if (seed) {
      if (seed->size() != size()) throw std::invalid_argument("backward seed shape mismatch");
      node_->grad += *seed;
    } else {
      node_->grad[0] += S(1);
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if ((*it)->backward_fn) (*it)->backward_fn();
    }
  }

 private:
  static void topo(TensorNode<S>* n, std::unordered_set<TensorNode<S>*>& seen,
                   std::vector<TensorNode<S>*>& order) {
    if (!n->requires_grad || seen.count(n)) return;
    seen.insert(n);
    // iterative DFS; graphs can be deep in long unrolled programs
    struct Frame {
      TensorNode<S>* node;
      size_t next;
    };
    std::vector<Frame> stack{{n, 0}};
    seen.insert(n);
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next < f.node->parents.size()) {
        TensorNode<S>* p = f.node->parents[f.next++].get();
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(f.node);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<TensorNode<S>> node_;
};

namespace detail {

template <typename S, typename F>
Tensor<S> op(const Shape& shape, ArrayX<S> value, std::vector<Tensor<S>> inputs, F backward) {
  bool rg = false;
  for (const auto& t : inputs) rg = rg || t.requires_grad();
  Tensor<S> out = Tensor<S>::from_array(shape, std::move(value), rg);
  if (rg) {
    auto node = out.node();
    for (const auto& t : inputs) node->parents.push_back(t.node());
    TensorNode<S>* raw = node.get();
    node->backward_fn = [raw, backward = std::move(backward)]() mutable { backward(*raw); };
  }
  return out;
}

template <typename S>
void accum(const std::shared_ptr<TensorNode<S>>& p, const ArrayX<S>& g) {
  if (!p->requires_grad) return;
  p->ensure_grad();
  p->grad += g;
}

}  // namespace detail

template <typename S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* what) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a, b, "add");
  return detail::op<S>(a.shape(), a.value() + b.value(), {a, b}, [](TensorNode<S>& n) {
    detail::accum(n.parents[0], n.grad);
    detail::accum(n.parents[1], n.grad);
  });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a, b, "sub");
  return detail::op<S>(a.shape(), a.value() - b.value(), {a, b}, [](TensorNode<S>& n) {
    detail::accum(n.parents[0], n.grad);
    detail::accum<S>(n.parents[1], (-n.grad).eval());
  });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a, b, "mul");
  return detail::op<S>(a.shape(), a.value() * b.value(), {a, b}, [](TensorNode<S>& n) {
    detail::accum<S>(n.parents[0], (n.grad * n.parents[1]->value).eval());
    detail::accum<S>(n.parents[1], (n.grad * n.parents[0]->value).eval());
  });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  return detail::op<S>(a.shape(), (a.value() * c).eval(), {a}, [c](TensorNode<S>& n) {
    detail::accum<S>(n.parents[0], (n.grad * c).eval());
  });
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S c) {
  return detail::op<S>(a.shape(), (a.value() + c).eval(), {a}, [](TensorNode<S>& n) {
    detail::accum(n.parents[0], n.grad);
  });
}

template <typename S>
Tensor<S> neg(const Tensor<S>& a) {
  return scale(a, S(-1));
}

template <typename S>
Tensor<S> exp(const Tensor<S>& a) {
  ArrayX<S> v = a.value().exp();
  return detail::op<S>(a.shape(), v, {a}, [v](TensorNode<S>& n) {
    detail::accum<S>(n.parents[0], (n.grad * v).eval());
  });
}

template <typename S>
Tensor<S> log(const Tensor<S>& a) {
  return detail::op<S>(a.shape(), a.value().log().eval(), {a}, [](TensorNode<S>& n) {
    detail::accum<S>(n.parents[0], (n.grad / n.parents[0]->value).eval());
  });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  ArrayX<S> v = (S(1) / (S(1) + (-a.value()).exp())).eval();
  return detail::op<S>(a.shape(), v, {a}, [v](TensorNode<S>& n) {
    detail::accum<S>(n.parents[0], (n.grad * v * (S(1) - v)).eval());
  });
}

// log(1 + e^x), overflow-safe
template <typename S>
Tensor<S> softplus(const Tensor<S>& a) {
  ArrayX<S> v = (a.value() > S(0)).select(a.value() + (S(1) + (-a.value()).exp()).log(),
                                          (S(1) + a.value().exp()).log());
  return detail::op<S>(a.shape(), v, {a}, [](TensorNode<S>& n) {
    ArrayX<S> sig = S(1) / (S(1) + (-n.parents[0]->value).exp());
    detail::accum<S>(n.parents[0], (n.grad * sig).eval());
  });
}

template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
  return detail::op<S>(a.shape(), a.value().max(S(0)).eval(), {a}, [](TensorNode<S>& n) {
    ArrayX<S> m = (n.parents[0]->value > S(0)).template cast<S>();
    detail::accum<S>(n.parents[0], (n.grad * m).eval());
  });
}

// exact GELU: x * Phi(x)
template <typename S>
Tensor<S> gelu(const Tensor<S>& a) {
  const S inv_sqrt2 = S(0.70710678118654752440);
  ArrayX<S> phi = a.value().unaryExpr(
      [inv_sqrt2](S x) { return S(0.5) * (S(1) + std::erf(x * inv_sqrt2)); });
  ArrayX<S> v = a.value() * phi;
  return detail::op<S>(a.shape(), v, {a}, [phi](TensorNode<S>& n) {
    const S inv_sqrt_2pi = S(0.39894228040143267794);
    ArrayX<S> x = n.parents[0]->value;
    ArrayX<S> pdf = inv_sqrt_2pi * (-S(0.5) * x.square()).exp();
    detail::accum<S>(n.parents[0], (n.grad * (phi + x * pdf)).eval());
  });
}

template <typename S>
Tensor<S> abs(const Tensor<S>& a) {
  return detail::op<S>(a.shape(), a.value().abs().eval(), {a}, [](TensorNode<S>& n) {
    ArrayX<S> sgn = n.parents[0]->value.sign();
    detail::accum<S>(n.parents[0], (n.grad * sgn).eval());
  });
}

template <typename S>
Tensor<S> square(const Tensor<S>& a) {
  return mul(a, a);
}

// element-wise power with a constant exponent; input must stay nonnegative
// when p is non-integral (focal-loss usage keeps it in [0,1])
template <typename S>
Tensor<S> pow_const(const Tensor<S>& a, S p) {
  ArrayX<S> v = a.value().pow(p);
  return detail::op<S>(a.shape(), v, {a}, [p](TensorNode<S>& n) {
    ArrayX<S> d = p * n.parents[0]->value.pow(p - S(1));
    detail::accum<S>(n.parents[0], (n.grad * d).eval());
  });
}

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  ArrayX<S> v(1);
  v[0] = a.value().sum();
  return detail::op<S>(Shape{}, v, {a}, [](TensorNode<S>& n) {
    detail::accum<S>(n.parents[0],
                     ArrayX<S>::Constant(n.parents[0]->value.size(), n.grad[0]).eval());
  });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
  if (a.size() == 0) throw std::invalid_argument("mean of empty tensor");
  return scale(sum(a), S(1) / static_cast<S>(a.size()));
}

// identity with a new shape; same element count
template <typename S>
Tensor<S> reshape(const Tensor<S>& a, const Shape& shape) {
  if (shape_size(shape) != a.size())
    throw std::invalid_argument("reshape: size mismatch " + shape_str(a.shape()) + " -> " +
                                shape_str(shape));
  return detail::op<S>(shape, a.value(), {a},
                       [](TensorNode<S>& n) { detail::accum(n.parents[0], n.grad); });
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat of nothing");
  const Shape& s0 = parts[0].shape();
  int nd = static_cast<int>(s0.size());
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) throw std::invalid_argument("concat: bad axis");
  long outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s0[static_cast<size_t>(i)];
  for (int i = axis + 1; i < nd; ++i) inner *= s0[static_cast<size_t>(i)];
  int cat = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (static_cast<int>(s.size()) != nd) throw std::invalid_argument("concat: rank mismatch");
    for (int i = 0; i < nd; ++i)
      if (i != axis && s[static_cast<size_t>(i)] != s0[static_cast<size_t>(i)])
        throw std::invalid_argument("concat: extent mismatch off-axis");
    cat += s[static_cast<size_t>(axis)];
  }
  Shape out_shape = s0;
  out_shape[static_cast<size_t>(axis)] = cat;
  ArrayX<S> v(outer * cat * inner);
  long off = 0;
  std::vector<long> piece(parts.size());
  for (size_t pi = 0; pi < parts.size(); ++pi) {
    long block = parts[pi].dim(axis) * inner;
    piece[pi] = block;
    for (long o = 0; o < outer; ++o)
      v.segment(o * cat * inner + off, block) = parts[pi].value().segment(o * block, block);
    off += block;
  }
  return detail::op<S>(out_shape, std::move(v), parts,
                       [outer, inner, cat, piece](TensorNode<S>& n) {
                         long off2 = 0;
                         for (size_t pi = 0; pi < n.parents.size(); ++pi) {
                           auto& p = n.parents[pi];
                           long block = piece[pi];
                           if (p->requires_grad) {
                             p->ensure_grad();
                             for (long o = 0; o < outer; ++o)
                               p->grad.segment(o * block, block) +=
                                   n.grad.segment(o * cat * inner + off2, block);
                           }
                           off2 += block;
                         }
                       });
}

// out[i, :] = x[idx[i], :]
template <typename S>
Tensor<S> gather_rows(const Tensor<S>& x, const std::vector<int>& idx) {
  if (x.shape().size() != 2) throw std::invalid_argument("gather_rows: rank-2 input required");
  long rows = x.dim(0), cols = x.dim(1);
  ArrayX<S> v(static_cast<long>(idx.size()) * cols);
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= rows) throw std::invalid_argument("gather_rows: index out of range");
    v.segment(static_cast<long>(i) * cols, cols) = x.value().segment(idx[i] * cols, cols);
  }
  return detail::op<S>({static_cast<int>(idx.size()), static_cast<int>(cols)}, std::move(v), {x},
                       [idx, cols](TensorNode<S>& n) {
                         auto& p = n.parents[0];
                         if (!p->requires_grad) return;
                         p->ensure_grad();
                         for (size_t i = 0; i < idx.size(); ++i)
                           p->grad.segment(idx[i] * cols, cols) +=
                               n.grad.segment(static_cast<long>(i) * cols, cols);
                       });
}

// inverse of gather_rows: out[idx[i], :] += x[i, :], output has n_rows rows
template <typename S>
Tensor<S> scatter_add_rows(const Tensor<S>& x, const std::vector<int>& idx, int n_rows) {
  if (x.shape().size() != 2) throw std::invalid_argument("scatter_add_rows: rank-2 input required");
  if (static_cast<long>(idx.size()) != x.dim(0))
    throw std::invalid_argument("scatter_add_rows: index count != rows");
  long cols = x.dim(1);
  ArrayX<S> v = ArrayX<S>::Zero(static_cast<long>(n_rows) * cols);
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= n_rows)
      throw std::invalid_argument("scatter_add_rows: index out of range");
    v.segment(idx[i] * cols, cols) += x.value().segment(static_cast<long>(i) * cols, cols);
  }
  return detail::op<S>({n_rows, static_cast<int>(cols)}, std::move(v), {x},
                       [idx, cols](TensorNode<S>& n) {
                         auto& p = n.parents[0];
                         if (!p->requires_grad) return;
                         p->ensure_grad();
                         for (size_t i = 0; i < idx.size(); ++i)
                           p->grad.segment(static_cast<long>(i) * cols, cols) +=
                               n.grad.segment(idx[i] * cols, cols);
                       });
}

// per-row selection: out[i, j] = x[i, idx[i][j]]
template <typename S>
Tensor<S> gather_cols_per_row(const Tensor<S>& x, const std::vector<std::vector<int>>& idx) {
  if (x.shape().size() != 2) throw std::invalid_argument("gather_cols_per_row: rank-2 input");
  long rows = x.dim(0), cols = x.dim(1);
  if (static_cast<long>(idx.size()) != rows)
    throw std::invalid_argument("gather_cols_per_row: one index list per row required");
  int k = idx.empty() ? 0 : static_cast<int>(idx[0].size());
  ArrayX<S> v(rows * k);
  for (long i = 0; i < rows; ++i) {
    if (static_cast<int>(idx[static_cast<size_t>(i)].size()) != k)
      throw std::invalid_argument("gather_cols_per_row: ragged index lists");
    for (int j = 0; j < k; ++j) {
      int c = idx[static_cast<size_t>(i)][static_cast<size_t>(j)];
      if (c < 0 || c >= cols) throw std::invalid_argument("gather_cols_per_row: index out of range");
      v[i * k + j] = x.value()[i * cols + c];
    }
  }
  return detail::op<S>({static_cast<int>(rows), k}, std::move(v), {x},
                       [idx, cols, k](TensorNode<S>& n) {
                         auto& p = n.parents[0];
                         if (!p->requires_grad) return;
                         p->ensure_grad();
                         for (size_t i = 0; i < idx.size(); ++i)
                           for (int j = 0; j < k; ++j)
                             p->grad[static_cast<long>(i) * cols + idx[i][static_cast<size_t>(j)]] +=
                                 n.grad[static_cast<long>(i) * k + j];
                       });
}

// out[i, :] = x[i, :] * g[i]
template <typename S>
Tensor<S> row_scale(const Tensor<S>& x, const Tensor<S>& g) {
  if (x.shape().size() != 2 || g.size() != x.dim(0))
    throw std::invalid_argument("row_scale: need [R,C] and [R]");
  long rows = x.dim(0), cols = x.dim(1);
  ArrayX<S> v(rows * cols);
  for (long i = 0; i < rows; ++i)
    v.segment(i * cols, cols) = x.value().segment(i * cols, cols) * g.value()[i];
  return detail::op<S>(x.shape(), std::move(v), {x, g}, [rows, cols](TensorNode<S>& n) {
    auto& px = n.parents[0];
    auto& pg = n.parents[1];
    if (px->requires_grad) {
      px->ensure_grad();
      for (long i = 0; i < rows; ++i)
        px->grad.segment(i * cols, cols) += n.grad.segment(i * cols, cols) * pg->value[i];
    }
    if (pg->requires_grad) {
      pg->ensure_grad();
      for (long i = 0; i < rows; ++i)
        pg->grad[i] += (n.grad.segment(i * cols, cols) * px->value.segment(i * cols, cols)).sum();
    }
  });
}

}  // namespace metabev
