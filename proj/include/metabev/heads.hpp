#pragma once

#include "metabev/encoders.hpp"

namespace metabev {

// per-class logits [n_classes, X, Y]; classes may overlap, so losses and
// thresholds are per-class sigmoid rather than softmax
template <typename S>
struct SegHead {
  ChannelMlp<S> mlp;

  static SegHead create(ParamStore<S>& ps, const std::string& name, int dm, int hidden,
                        int n_classes, Rng& rng) {
    return {ChannelMlp<S>::create(ps, name, {dm, hidden, n_classes}, rng)};
  }

  Tensor<S> operator()(const BEVGrid<S>& fused) const { return mlp(fused.data); }
};

template <typename S>
struct DetPrediction {
  Tensor<S> heatmap;     // [n_box_classes, X, Y] logits
  Tensor<S> regression;  // [5, X, Y]: dx, dy (cells), w, l (cells), yaw
};

// simplified center head: class heatmap + box regression per cell
template <typename S>
struct DetHead {
  ChannelMlp<S> heat_mlp;
  ChannelMlp<S> reg_mlp;

  static DetHead create(ParamStore<S>& ps, const std::string& name, int dm, int hidden,
                        int n_box_classes, Rng& rng) {
    DetHead h;
    h.heat_mlp = ChannelMlp<S>::create(ps, name + ".heat", {dm, hidden, n_box_classes}, rng);
    h.reg_mlp = ChannelMlp<S>::create(ps, name + ".reg", {dm, hidden, 5}, rng);
    return h;
  }

  DetPrediction<S> operator()(const BEVGrid<S>& fused) const {
    return {heat_mlp(fused.data), reg_mlp(fused.data)};
  }
};

// mean per-cell per-class binary cross-entropy on logits:
// bce(x, y) = softplus(x) - x*y
template <typename S>
Tensor<S> seg_loss(const Tensor<S>& logits, const std::vector<std::uint8_t>& gt) {
  if (static_cast<long>(gt.size()) != logits.size())
    throw std::invalid_argument("seg_loss: logits " + shape_str(logits.shape()) +
                                " vs ground truth of " + std::to_string(gt.size()));
  ArrayX<S> y(logits.size());
  for (long i = 0; i < y.size(); ++i) y[i] = gt[static_cast<size_t>(i)] ? S(1) : S(0);
  Tensor<S> yt = Tensor<S>::from_array(logits.shape(), std::move(y));
  return mean(sub(softplus(logits), mul(logits, yt)));
}

constexpr double kFocalAlpha = 2.0;
constexpr double kFocalBeta = 4.0;

// CenterNet-style penalty-reduced focal loss on the heatmap plus L1 on the
// regression channels at positive (object-center) cells; both normalized by
// the positive count. With no positives the L1 term is exactly zero.
template <typename S>
Tensor<S> det_loss(const DetPrediction<S>& pred, const GroundTruth& gt) {
  long cells = gt.grid.cells();
  if (pred.heatmap.size() != gt.heatmap.size() || pred.regression.size() != 5 * cells)
    throw std::invalid_argument("det_loss: prediction/target shape mismatch");

  long n_pos = 0;
  ArrayX<S> pos(pred.heatmap.size()), wneg(pred.heatmap.size());
  int n_hm = pred.heatmap.dim(0);
  for (long c = 0; c < n_hm; ++c)
    for (long i = 0; i < cells; ++i) {
      double h = gt.heatmap[c * cells + i];
      bool p = h == 1.0;
      pos[c * cells + i] = p ? S(1) : S(0);
      wneg[c * cells + i] = p ? S(0) : static_cast<S>(std::pow(1.0 - h, kFocalBeta));
      if (p) ++n_pos;
    }
  S norm = S(1) / static_cast<S>(std::max<long>(1, n_pos));

  Tensor<S> post = Tensor<S>::from_array(pred.heatmap.shape(), std::move(pos));
  Tensor<S> wnegt = Tensor<S>::from_array(pred.heatmap.shape(), std::move(wneg));
  Tensor<S> p = sigmoid(pred.heatmap);
  Tensor<S> one = Tensor<S>::from_array(pred.heatmap.shape(),
                                        ArrayX<S>::Ones(pred.heatmap.size()));
  // -log p and -log(1-p) via softplus for stability
  Tensor<S> focal_pos = mul(post, mul(square(sub(one, p)), softplus(neg(pred.heatmap))));
  Tensor<S> focal_neg = mul(wnegt, mul(square(p), softplus(pred.heatmap)));
  Tensor<S> focal = scale(sum(add(focal_pos, focal_neg)), norm);

  ArrayX<S> reg_mask(5 * cells), reg_target(5 * cells);
  for (long ch = 0; ch < 5; ++ch)
    for (long i = 0; i < cells; ++i) {
      reg_mask[ch * cells + i] = gt.pos[static_cast<size_t>(i)] ? S(1) : S(0);
      reg_target[ch * cells + i] = static_cast<S>(gt.regression[ch * cells + i]);
    }
  Tensor<S> maskt = Tensor<S>::from_array(pred.regression.shape(), std::move(reg_mask));
  Tensor<S> targett = Tensor<S>::from_array(pred.regression.shape(), std::move(reg_target));
  Tensor<S> l1 = scale(sum(mul(maskt, abs(sub(pred.regression, targett)))), norm);
  return add(focal, l1);
}

constexpr double kDetWeight = 10.0;
constexpr double kSegWeight = 1.0;

template <typename S>
Tensor<S> joint_loss(const Tensor<S>& det, const Tensor<S>& seg) {
  return add(scale(det, static_cast<S>(kDetWeight)), scale(seg, static_cast<S>(kSegWeight)));
}

}  // namespace metabev
