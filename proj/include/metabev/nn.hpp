#pragma once

#include "metabev/ops.hpp"

#include <map>

namespace metabev {

// Ordered, name-indexed parameter table. Checkpoints and the optimizer walk
// this in registration order.
template <typename S>
class ParamStore {
 public:
  Tensor<S> make(const std::string& name, const Shape& shape, ArrayX<S> init) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
    Tensor<S> t = Tensor<S>::from_array(shape, std::move(init), true);
    index_[name] = params_.size();
    params_.push_back({name, t});
    return t;
  }

  // uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) from a name-salted seed
  Tensor<S> make_uniform(const std::string& name, const Shape& shape, int fan_in, Rng& rng) {
    S bound = fan_in > 0 ? S(1) / std::sqrt(static_cast<S>(fan_in)) : S(0);
    long n = shape_size(shape);
    ArrayX<S> a(n);
    for (long i = 0; i < n; ++i) a[i] = static_cast<S>(rng.uniform(-bound, bound));
    return make(name, shape, std::move(a));
  }

  Tensor<S> make_zero(const std::string& name, const Shape& shape) {
    return make(name, shape, ArrayX<S>::Zero(shape_size(shape)));
  }

  Tensor<S> make_const(const std::string& name, const Shape& shape, S v) {
    return make(name, shape, ArrayX<S>::Constant(shape_size(shape), v));
  }

  size_t size() const { return params_.size(); }
  const std::pair<std::string, Tensor<S>>& at(size_t i) const { return params_[i]; }
  Tensor<S> by_name(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("unknown parameter: " + name);
    return params_[it->second].second;
  }
  bool has(const std::string& name) const { return index_.count(name) != 0; }

  void zero_grads() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

  long total_scalars() const {
    long n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
  }

  std::vector<std::pair<std::string, Tensor<S>>>& entries() { return params_; }
  const std::vector<std::pair<std::string, Tensor<S>>>& entries() const { return params_; }

 private:
  std::vector<std::pair<std::string, Tensor<S>>> params_;
  std::map<std::string, size_t> index_;
};

template <typename S>
struct LinearLayer {
  Tensor<S> weight;  // [out, in]
  Tensor<S> bias;    // [out]

  LinearLayer() = default;

  static LinearLayer create(ParamStore<S>& ps, const std::string& name, int in, int out, Rng& rng) {
    LinearLayer l;
    l.weight = ps.make_uniform(name + ".weight", {out, in}, in, rng);
    l.bias = ps.make_uniform(name + ".bias", {out}, in, rng);
    return l;
  }

  // zero init, used by offset / attention-weight heads
  static LinearLayer create_zero(ParamStore<S>& ps, const std::string& name, int in, int out) {
    LinearLayer l;
    l.weight = ps.make_zero(name + ".weight", {out, in});
    l.bias = ps.make_zero(name + ".bias", {out});
    return l;
  }

  Tensor<S> operator()(const Tensor<S>& x) const { return linear(x, weight, bias); }
  int in_features() const { return weight.dim(1); }
  int out_features() const { return weight.dim(0); }
};

template <typename S>
struct LayerNormParams {
  Tensor<S> gain;
  Tensor<S> bias;

  static LayerNormParams create(ParamStore<S>& ps, const std::string& name, int d) {
    LayerNormParams n;
    n.gain = ps.make_const(name + ".gain", {d}, S(1));
    n.bias = ps.make_zero(name + ".bias", {d});
    return n;
  }

  Tensor<S> operator()(const Tensor<S>& x) const { return layer_norm(x, gain, bias); }
};

// two-layer FFN with GELU, the expert / plain-FFN building block
template <typename S>
struct Ffn {
  LinearLayer<S> up, down;

  static Ffn create(ParamStore<S>& ps, const std::string& name, int d, int hidden, Rng& rng) {
    Ffn f;
    f.up = LinearLayer<S>::create(ps, name + ".up", d, hidden, rng);
    f.down = LinearLayer<S>::create(ps, name + ".down", hidden, d, rng);
    return f;
  }

  Tensor<S> operator()(const Tensor<S>& x) const { return down(gelu(up(x))); }
};

// Per-cell MLP over channels, i.e. a stack of 1x1 stages. Input/output
// layout [C, X, Y].
template <typename S>
struct ChannelMlp {
  std::vector<LinearLayer<S>> stages;

  static ChannelMlp create(ParamStore<S>& ps, const std::string& name,
                           const std::vector<int>& widths, Rng& rng) {
    if (widths.size() < 2) throw std::invalid_argument("ChannelMlp needs >=1 stage");
    ChannelMlp m;
    for (size_t i = 0; i + 1 < widths.size(); ++i)
      m.stages.push_back(LinearLayer<S>::create(ps, name + ".stage" + std::to_string(i),
                                                widths[i], widths[i + 1], rng));
    return m;
  }

  Tensor<S> operator()(const Tensor<S>& grid) const {
    if (grid.shape().size() != 3) throw std::invalid_argument("ChannelMlp: input must be [C,X,Y]");
    int c = grid.dim(0), x = grid.dim(1), y = grid.dim(2);
    if (c != stages.front().in_features())
      throw std::invalid_argument("ChannelMlp: channel mismatch, got " + std::to_string(c));
    // [C,X,Y] -> tokens [X*Y, C]
    Tensor<S> tok = channels_to_tokens(grid);
    for (size_t i = 0; i < stages.size(); ++i) {
      tok = stages[i](tok);
      if (i + 1 < stages.size()) tok = gelu(tok);
    }
    return tokens_to_channels(tok, x, y);
  }

  static Tensor<S> channels_to_tokens(const Tensor<S>& grid) {
    int c = grid.dim(0), x = grid.dim(1), y = grid.dim(2);
    long cells = static_cast<long>(x) * y;
    ArrayX<S> v(cells * c);
    for (long cell = 0; cell < cells; ++cell)
      for (long ch = 0; ch < c; ++ch) v[cell * c + ch] = grid.value()[ch * cells + cell];
    return detail::op<S>({static_cast<int>(cells), c}, std::move(v), {grid},
                         [c, cells](TensorNode<S>& n) {
                           auto& p = n.parents[0];
                           if (!p->requires_grad) return;
                           p->ensure_grad();
                           for (long cell = 0; cell < cells; ++cell)
                             for (long ch = 0; ch < c; ++ch)
                               p->grad[ch * cells + cell] += n.grad[cell * c + ch];
                         });
  }

  static Tensor<S> tokens_to_channels(const Tensor<S>& tok, int x, int y) {
    long cells = static_cast<long>(x) * y;
    if (tok.dim(0) != cells) throw std::invalid_argument("tokens_to_channels: cell count mismatch");
    int c = tok.dim(1);
    ArrayX<S> v(cells * c);
    for (long cell = 0; cell < cells; ++cell)
      for (long ch = 0; ch < c; ++ch) v[ch * cells + cell] = tok.value()[cell * c + ch];
    return detail::op<S>({c, x, y}, std::move(v), {tok}, [c, cells](TensorNode<S>& n) {
      auto& p = n.parents[0];
      if (!p->requires_grad) return;
      p->ensure_grad();
      for (long cell = 0; cell < cells; ++cell)
        for (long ch = 0; ch < c; ++ch) p->grad[cell * c + ch] += n.grad[ch * cells + cell];
    });
  }

  int out_features() const { return stages.back().out_features(); }
};

}  // namespace metabev
