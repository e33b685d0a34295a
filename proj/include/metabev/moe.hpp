#pragma once

#include "metabev/nn.hpp"

namespace metabev {

// top-t selection with lower-index tie break; gates are the softmax of the
// selected logits only, so they always form a convex combination
template <typename S>
std::pair<std::vector<int>, std::vector<S>> route_top_t(const ArrayX<S>& logits, int t) {
  int e = static_cast<int>(logits.size());
  if (t < 1 || t > e) throw std::invalid_argument("route_top_t: need 1 <= t <= E");
  if (!logits.allFinite()) throw std::invalid_argument("route_top_t: non-finite logits");
  std::vector<int> order(static_cast<size_t>(e));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return logits[a] > logits[b]; });
  std::vector<int> idx(order.begin(), order.begin() + t);
  S mx = logits[idx[0]];
  S z = S(0);
  std::vector<S> gates(static_cast<size_t>(t));
  for (int i = 0; i < t; ++i) {
    gates[static_cast<size_t>(i)] = std::exp(logits[idx[static_cast<size_t>(i)]] - mx);
    z += gates[static_cast<size_t>(i)];
  }
  for (auto& g : gates) g /= z;
  return {std::move(idx), std::move(gates)};
}

// Routed sparse expert bank (RM2oE): router -> top-t -> gated expert sum.
template <typename S>
struct ExpertBank {
  int n_experts = 8;
  int active = 2;  // t
  LinearLayer<S> router;       // Dm -> E
  std::vector<Ffn<S>> experts;

  static ExpertBank create(ParamStore<S>& ps, const std::string& name, int d, int hidden,
                           int n_experts, int active, Rng& rng) {
    if (active < 1 || active > n_experts) throw std::invalid_argument("ExpertBank: bad t/E");
    ExpertBank b;
    b.n_experts = n_experts;
    b.active = active;
    b.router = LinearLayer<S>::create(ps, name + ".router", d, n_experts, rng);
    for (int e = 0; e < n_experts; ++e)
      b.experts.push_back(Ffn<S>::create(ps, name + ".expert" + std::to_string(e), d, hidden, rng));
    return b;
  }
};

// y = sum_i gate_i * expert_{idx_i}(x), evaluated sparsely: tokens are
// grouped per selected expert, unselected experts never run.
template <typename S>
Tensor<S> rm2oe_forward(const Tensor<S>& x, const ExpertBank<S>& bank) {
  if (x.shape().size() != 2) throw std::invalid_argument("rm2oe_forward: tokens [T,Dm] required");
  int tokens = x.dim(0);
  int t = bank.active;
  Tensor<S> logits = bank.router(x);  // [T,E]

  // hard top-t selection (constant), then differentiable gates via softmax
  // over the gathered logits
  std::vector<std::vector<int>> sel(static_cast<size_t>(tokens));
  for (int i = 0; i < tokens; ++i) {
    ArrayX<S> row = logits.value().segment(static_cast<long>(i) * bank.n_experts, bank.n_experts);
    sel[static_cast<size_t>(i)] = route_top_t(row, t).first;
  }
  Tensor<S> gates = softmax(gather_cols_per_row(logits, sel), 1);  // [T,t]

  // group tokens by expert
  std::vector<std::vector<int>> token_of(static_cast<size_t>(bank.n_experts));
  std::vector<std::vector<int>> slot_of(static_cast<size_t>(bank.n_experts));
  for (int i = 0; i < tokens; ++i)
    for (int j = 0; j < t; ++j) {
      int e = sel[static_cast<size_t>(i)][static_cast<size_t>(j)];
      token_of[static_cast<size_t>(e)].push_back(i);
      slot_of[static_cast<size_t>(e)].push_back(i * t + j);
    }

  Tensor<S> gates_flat = reshape(gates, {tokens * t});
  Tensor<S> out;
  for (int e = 0; e < bank.n_experts; ++e) {
    const auto& toks = token_of[static_cast<size_t>(e)];
    if (toks.empty()) continue;
    Tensor<S> xe = gather_rows(x, toks);
    Tensor<S> ye = bank.experts[static_cast<size_t>(e)](xe);
    Tensor<S> ge = gather_rows(reshape(gates_flat, {tokens * t, 1}), slot_of[static_cast<size_t>(e)]);
    Tensor<S> contrib = scatter_add_rows(row_scale(ye, reshape(ge, {static_cast<int>(toks.size())})),
                                         toks, tokens);
    out = out.valid() ? add(out, contrib) : contrib;
  }
  return out;
}

// Hard two-expert block (HM2oE): task-specific FFNs, fused when both tasks
// are active.
template <typename S>
struct HardMoE {
  Ffn<S> det_expert;
  Ffn<S> seg_expert;
  LinearLayer<S> fusion;       // 2*Dm -> Dm
  LayerNormParams<S> norm;

  static HardMoE create(ParamStore<S>& ps, const std::string& name, int d, int hidden, Rng& rng) {
    HardMoE h;
    h.det_expert = Ffn<S>::create(ps, name + ".det", d, hidden, rng);
    h.seg_expert = Ffn<S>::create(ps, name + ".seg", d, hidden, rng);
    h.fusion = LinearLayer<S>::create(ps, name + ".fuse", 2 * d, d, rng);
    h.norm = LayerNormParams<S>::create(ps, name + ".norm", d);
    return h;
  }
};

struct TaskFlags {
  bool det = false;
  bool seg = false;
};

template <typename S>
Tensor<S> hm2oe_forward(const Tensor<S>& x, const HardMoE<S>& hmoe, TaskFlags tasks) {
  if (!tasks.det && !tasks.seg) throw std::invalid_argument("hm2oe_forward: no task flag set");
  if (tasks.det && !tasks.seg) return hmoe.det_expert(x);
  if (tasks.seg && !tasks.det) return hmoe.seg_expert(x);
  Tensor<S> det = hmoe.det_expert(x);
  Tensor<S> seg = hmoe.seg_expert(x);
  return hmoe.norm(hmoe.fusion(concat<S>({det, seg}, 1)));
}

}  // namespace metabev
