#pragma once

#include "metabev/encoders.hpp"
#include "metabev/moe.hpp"

#include <set>

namespace metabev {

// row-major cell centers, normalized to (0,1)^2
inline std::vector<std::pair<double, double>> make_reference_points(int x_cells, int y_cells) {
  if (x_cells < 1 || y_cells < 1) throw std::invalid_argument("make_reference_points: X,Y >= 1");
  std::vector<std::pair<double, double>> pts;
  pts.reserve(static_cast<size_t>(x_cells) * y_cells);
  for (int i = 0; i < x_cells; ++i)
    for (int j = 0; j < y_cells; ++j)
      pts.emplace_back((j + 0.5) / y_cells, (i + 0.5) / x_cells);
  return pts;
}

template <typename S>
struct MetaBEVQueries {
  Tensor<S> queries;    // [Q, Dm], learnable
  Tensor<S> pos_embed;  // [Q, Dm], learnable
  std::vector<std::pair<double, double>> ref_points;  // normalized (x,y)
  int x_cells = 0, y_cells = 0;

  int count() const { return queries.dim(0); }
  int dm() const { return queries.dim(1); }

  static MetaBEVQueries create(ParamStore<S>& ps, const std::string& name, int x_cells,
                               int y_cells, int dm, Rng& rng) {
    MetaBEVQueries q;
    q.x_cells = x_cells;
    q.y_cells = y_cells;
    q.queries = ps.make_uniform(name + ".queries", {x_cells * y_cells, dm}, dm, rng);
    q.pos_embed = ps.make_uniform(name + ".pos_embed", {x_cells * y_cells, dm}, dm, rng);
    q.ref_points = make_reference_points(x_cells, y_cells);
    return q;
  }
};

enum class FfnKind { Plain, RM2oE, HM2oE };

template <typename S>
struct FfnSlot {
  FfnKind kind = FfnKind::Plain;
  Ffn<S> plain;
  ExpertBank<S> bank;
  HardMoE<S> hard;

  Tensor<S> operator()(const Tensor<S>& x, TaskFlags tasks) const {
    switch (kind) {
      case FfnKind::Plain:
        return plain(x);
      case FfnKind::RM2oE:
        return rm2oe_forward(x, bank);
      case FfnKind::HM2oE:
        return hm2oe_forward(x, hard, tasks);
    }
    throw std::logic_error("unreachable");
  }
};

// One attention layer: modality-specific offset/weight heads (C-MLP, L-MLP),
// a shared per-head value projection, output projection, pre-norm wiring and
// an FFN slot. Self-attention layers hold a single unified head set keyed by
// "self".
template <typename S>
struct DeformAttnLayer {
  int heads = 8;
  int points = 8;
  std::map<std::string, LinearLayer<S>> offset_heads;  // Dm -> M*K*2, zero init
  std::map<std::string, LinearLayer<S>> weight_heads;  // Dm -> M*K, zero init
  LinearLayer<S> value_proj;   // value channels -> Dm
  LinearLayer<S> output_proj;  // Dm -> Dm
  LayerNormParams<S> attn_norm;
  LayerNormParams<S> ffn_norm;
  FfnSlot<S> ffn;

  static DeformAttnLayer create(ParamStore<S>& ps, const std::string& name, int dm,
                                int value_channels, int heads, int points,
                                const std::vector<std::string>& modalities, FfnKind ffn_kind,
                                int ffn_hidden, int experts, int active, Rng& rng) {
    DeformAttnLayer l;
    l.heads = heads;
    l.points = points;
    if (dm % heads != 0) throw std::invalid_argument("DeformAttnLayer: Dm must divide into heads");
    for (const auto& m : modalities) {
      l.offset_heads[m] =
          LinearLayer<S>::create_zero(ps, name + "." + m + ".offset", dm, heads * points * 2);
      l.weight_heads[m] =
          LinearLayer<S>::create_zero(ps, name + "." + m + ".weight", dm, heads * points);
    }
    l.value_proj = LinearLayer<S>::create(ps, name + ".value_proj", value_channels, dm, rng);
    l.output_proj = LinearLayer<S>::create(ps, name + ".output_proj", dm, dm, rng);
    l.attn_norm = LayerNormParams<S>::create(ps, name + ".attn_norm", dm);
    l.ffn_norm = LayerNormParams<S>::create(ps, name + ".ffn_norm", dm);
    l.ffn.kind = ffn_kind;
    switch (ffn_kind) {
      case FfnKind::Plain:
        l.ffn.plain = Ffn<S>::create(ps, name + ".ffn", dm, ffn_hidden, rng);
        break;
      case FfnKind::RM2oE:
        l.ffn.bank = ExpertBank<S>::create(ps, name + ".moe", dm, ffn_hidden, experts, active, rng);
        break;
      case FfnKind::HM2oE:
        l.ffn.hard = HardMoE<S>::create(ps, name + ".hmoe", dm, ffn_hidden, rng);
        break;
    }
    return l;
  }
};

namespace detail {

// reference points tiled to [Q, M*K*2] in the pixel frame of an HxW grid
template <typename S>
Tensor<S> ref_pixel_tile(const std::vector<std::pair<double, double>>& refs, int m, int k, int h,
                         int w) {
  long q = static_cast<long>(refs.size());
  long mk = static_cast<long>(m) * k;
  ArrayX<S> a(q * mk * 2);
  for (long qi = 0; qi < q; ++qi) {
    S px = static_cast<S>(refs[static_cast<size_t>(qi)].first * w - 0.5);
    S py = static_cast<S>(refs[static_cast<size_t>(qi)].second * h - 0.5);
    for (long j = 0; j < mk; ++j) {
      a[qi * mk * 2 + 2 * j] = px;
      a[qi * mk * 2 + 2 * j + 1] = py;
    }
  }
  return Tensor<S>::from_array({static_cast<int>(q), static_cast<int>(mk) * 2}, std::move(a));
}

template <typename S>
Tensor<S> project_values(const DeformAttnLayer<S>& layer, const Tensor<S>& grid) {
  int c = grid.dim(0), x = grid.dim(1), y = grid.dim(2);
  Tensor<S> tok = ChannelMlp<S>::channels_to_tokens(grid);
  return ChannelMlp<S>::tokens_to_channels(layer.value_proj(tok), x, y);
}

}  // namespace detail

// Attention sublayer of Eq. 1 over whichever modalities are present:
// per-modality offsets and logits from (normed query + PE), one joint
// softmax over the concatenated logits, bilinear value sampling, projection,
// residual add. Absent modalities contribute no terms and their parameters
// are never touched.
template <typename S>
Tensor<S> cross_modal_deform_attn(const MetaBEVQueries<S>& q,
                                  const std::map<std::string, BEVGrid<S>>& feats,
                                  const DeformAttnLayer<S>& layer,
                                  const std::set<std::string>* active = nullptr) {
  std::vector<std::string> mods;
  for (const auto& [name, grid] : feats) {
    if (active && !active->count(name)) continue;
    if (!layer.offset_heads.count(name))
      throw std::invalid_argument("cross_modal_deform_attn: unknown modality '" + name + "'");
    mods.push_back(name);
  }
  if (active)
    for (const auto& name : *active)
      if (!feats.count(name))
        throw std::invalid_argument("cross_modal_deform_attn: active modality '" + name +
                                    "' has no features");
  if (mods.empty()) throw std::invalid_argument("cross_modal_deform_attn: no modality");

  const int m = layer.heads, k = layer.points;
  const int qn = q.count();
  Tensor<S> h = layer.attn_norm(q.queries);
  Tensor<S> qpe = add(h, q.pos_embed);

  std::vector<Tensor<S>> values, locs, logits;
  for (const auto& name : mods) {
    const BEVGrid<S>& grid = feats.at(name);
    Tensor<S> off = layer.offset_heads.at(name)(qpe);  // [Q, M*K*2], offsets in cells
    Tensor<S> ref = detail::ref_pixel_tile<S>(q.ref_points, m, k, grid.data.dim(1),
                                              grid.data.dim(2));
    locs.push_back(reshape(add(off, ref), {1, qn, m, k, 2}));
    logits.push_back(reshape(layer.weight_heads.at(name)(qpe), {qn, m, k}));
    values.push_back(detail::project_values(layer, grid.data));
  }
  Tensor<S> weights = softmax(logits.size() == 1 ? logits[0] : concat(logits, 2), 2);
  Tensor<S> loc = locs.size() == 1 ? locs[0] : concat(locs, 0);
  Tensor<S> attn = deform_attn_core(values, loc, weights, m);
  return add(q.queries, layer.output_proj(attn));
}

// DAttn(B_m, p, B_m): the unified head set, values from the normed query
// raster itself.
template <typename S>
Tensor<S> self_deform_attn(const MetaBEVQueries<S>& q, const DeformAttnLayer<S>& layer) {
  const int m = layer.heads, k = layer.points;
  const int qn = q.count();
  Tensor<S> h = layer.attn_norm(q.queries);
  Tensor<S> qpe = add(h, q.pos_embed);
  Tensor<S> value_grid = detail::project_values(
      layer, ChannelMlp<S>::tokens_to_channels(h, q.x_cells, q.y_cells));
  Tensor<S> off = layer.offset_heads.at("self")(qpe);
  Tensor<S> ref = detail::ref_pixel_tile<S>(q.ref_points, m, k, q.x_cells, q.y_cells);
  Tensor<S> loc = reshape(add(off, ref), {1, qn, m, k, 2});
  Tensor<S> weights = softmax(reshape(layer.weight_heads.at("self")(qpe), {qn, m, k}), 2);
  Tensor<S> attn = deform_attn_core<S>({value_grid}, loc, weights, m);
  return add(q.queries, layer.output_proj(attn));
}

template <typename S>
struct DecoderStack {
  std::vector<DeformAttnLayer<S>> cross_layers;
  std::vector<DeformAttnLayer<S>> self_layers;

  static DecoderStack create(ParamStore<S>& ps, const std::string& name, int dm,
                             int feat_channels, int n_cross, int n_self, int heads, int points,
                             FfnKind ffn_kind, int ffn_hidden, int experts, int active, Rng& rng) {
    if (n_cross < 1) throw std::invalid_argument("DecoderStack: at least one cross layer");
    DecoderStack s;
    for (int i = 0; i < n_cross; ++i)
      s.cross_layers.push_back(DeformAttnLayer<S>::create(
          ps, name + ".cross" + std::to_string(i), dm, feat_channels, heads, points,
          {kCamera, kLidar}, ffn_kind, ffn_hidden, experts, active, rng));
    for (int i = 0; i < n_self; ++i)
      s.self_layers.push_back(DeformAttnLayer<S>::create(
          ps, name + ".self" + std::to_string(i), dm, dm, heads, points, {"self"}, ffn_kind,
          ffn_hidden, experts, active, rng));
    return s;
  }
};

template <typename S>
Tensor<S> ffn_sublayer(const Tensor<S>& x, const DeformAttnLayer<S>& layer, TaskFlags tasks) {
  return add(x, layer.ffn(layer.ffn_norm(x), tasks));
}

// N cross layers then M self layers; queries reshaped to a [Dm, X, Y] fused
// BEV grid.
template <typename S>
BEVGrid<S> decoder_forward(const MetaBEVQueries<S>& q0,
                           const std::map<std::string, BEVGrid<S>>& feats,
                           const DecoderStack<S>& stack, const GridSpec& grid_spec,
                           TaskFlags tasks = {true, true},
                           const std::set<std::string>* active = nullptr) {
  MetaBEVQueries<S> q = q0;
  for (const auto& layer : stack.cross_layers) {
    q.queries = cross_modal_deform_attn(q, feats, layer, active);
    q.queries = ffn_sublayer(q.queries, layer, tasks);
  }
  for (const auto& layer : stack.self_layers) {
    q.queries = self_deform_attn(q, layer);
    q.queries = ffn_sublayer(q.queries, layer, tasks);
  }
  return {grid_spec, ChannelMlp<S>::tokens_to_channels(q.queries, q.x_cells, q.y_cells)};
}

}  // namespace metabev
