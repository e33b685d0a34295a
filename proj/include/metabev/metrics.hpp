#pragma once

#include "metabev/heads.hpp"

#include <json.hpp>

#include <sstream>

namespace metabev {

// per-class logits -> boolean masks at sigmoid threshold 0.5 (logit > 0)
template <typename S>
std::vector<std::uint8_t> seg_masks(const Tensor<S>& logits) {
  std::vector<std::uint8_t> m(static_cast<size_t>(logits.size()));
  for (long i = 0; i < logits.size(); ++i) m[static_cast<size_t>(i)] = logits.value()[i] > S(0);
  return m;
}

// IoU per class plus mean; an empty-vs-empty class scores 1 by convention
inline std::pair<std::vector<double>, double> miou(const std::vector<std::uint8_t>& pred,
                                                   const std::vector<std::uint8_t>& gt,
                                                   int n_classes) {
  if (pred.size() != gt.size() || n_classes < 1 ||
      pred.size() % static_cast<size_t>(n_classes) != 0)
    throw std::invalid_argument("miou: mask shape mismatch");
  size_t cells = pred.size() / static_cast<size_t>(n_classes);
  std::vector<double> per_class;
  double total = 0;
  for (int c = 0; c < n_classes; ++c) {
    long inter = 0, uni = 0;
    for (size_t i = 0; i < cells; ++i) {
      bool p = pred[static_cast<size_t>(c) * cells + i] != 0;
      bool g = gt[static_cast<size_t>(c) * cells + i] != 0;
      inter += p && g;
      uni += p || g;
    }
    double iou = uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
    per_class.push_back(iou);
    total += iou;
  }
  return {per_class, total / n_classes};
}

struct DetBox {
  Box box;
  double score = 0;
};

// peak cells (3x3 local maxima above threshold) decoded back to world boxes
template <typename S>
std::vector<DetBox> decode_detections(const DetPrediction<S>& pred, const GridSpec& grid,
                                      double score_thresh = 0.3) {
  long cells = grid.cells();
  int n_cls = pred.heatmap.dim(0);
  std::vector<DetBox> out;
  for (int c = 0; c < n_cls; ++c)
    for (int i = 0; i < grid.x_cells; ++i)
      for (int j = 0; j < grid.y_cells; ++j) {
        long cell = static_cast<long>(i) * grid.y_cells + j;
        S logit = pred.heatmap.value()[c * cells + cell];
        double score = 1.0 / (1.0 + std::exp(-static_cast<double>(logit)));
        if (score < score_thresh) continue;
        bool peak = true;
        for (int di = -1; di <= 1 && peak; ++di)
          for (int dj = -1; dj <= 1 && peak; ++dj) {
            int ni = i + di, nj = j + dj;
            if (ni < 0 || ni >= grid.x_cells || nj < 0 || nj >= grid.y_cells) continue;
            if (pred.heatmap.value()[c * cells + static_cast<long>(ni) * grid.y_cells + nj] >
                logit)
              peak = false;
          }
        if (!peak) continue;
        DetBox d;
        d.score = score;
        d.box.class_id = c + 1;  // heatmap class 0 is box class 1
        d.box.cx = grid.cell_center_x(j) +
                   static_cast<double>(pred.regression.value()[0 * cells + cell]) * grid.cell_size;
        d.box.cy = grid.cell_center_y(i) +
                   static_cast<double>(pred.regression.value()[1 * cells + cell]) * grid.cell_size;
        d.box.w = static_cast<double>(pred.regression.value()[2 * cells + cell]) * grid.cell_size;
        d.box.l = static_cast<double>(pred.regression.value()[3 * cells + cell]) * grid.cell_size;
        d.box.yaw = static_cast<double>(pred.regression.value()[4 * cells + cell]);
        out.push_back(d);
      }
  std::sort(out.begin(), out.end(), [](const DetBox& a, const DetBox& b) {
    return a.score > b.score;
  });
  return out;
}

namespace detail {

struct Aabb {
  double x0, y0, x1, y1;
};

// axis-aligned bounding box of the yawed footprint
inline Aabb box_aabb(const Box& b) {
  double c = std::abs(std::cos(b.yaw)), s = std::abs(std::sin(b.yaw));
  double hx = (c * b.l + s * b.w) / 2, hy = (s * b.l + c * b.w) / 2;
  return {b.cx - hx, b.cy - hy, b.cx + hx, b.cy + hy};
}

inline double aabb_iou(const Aabb& a, const Aabb& b) {
  double ix = std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
  double iy = std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
  double inter = ix * iy;
  double area_a = (a.x1 - a.x0) * (a.y1 - a.y0);
  double area_b = (b.x1 - b.x0) * (b.y1 - b.y0);
  double uni = area_a + area_b - inter;
  return uni <= 0 ? 0.0 : inter / uni;
}

}  // namespace detail

// 11-point interpolated AP with greedy matching by descending score and
// axis-aligned BEV IoU
inline double bev_ap(std::vector<DetBox> pred, const std::vector<Box>& gt,
                     double iou_thresh = 0.5) {
  if (gt.empty()) return pred.empty() ? 1.0 : 0.0;
  std::sort(pred.begin(), pred.end(), [](const DetBox& a, const DetBox& b) {
    return a.score > b.score;
  });
  std::vector<bool> used(gt.size(), false);
  std::vector<bool> tp(pred.size(), false);
  for (size_t p = 0; p < pred.size(); ++p) {
    detail::Aabb pa = detail::box_aabb(pred[p].box);
    double best = iou_thresh;
    int match = -1;
    for (size_t g = 0; g < gt.size(); ++g) {
      if (used[g] || gt[g].class_id != pred[p].box.class_id) continue;
      double iou = detail::aabb_iou(pa, detail::box_aabb(gt[g]));
      if (iou >= best) {
        best = iou;
        match = static_cast<int>(g);
      }
    }
    if (match >= 0) {
      used[static_cast<size_t>(match)] = true;
      tp[p] = true;
    }
  }
  // precision/recall curve in score order
  std::vector<double> precision, recall;
  int hits = 0;
  for (size_t p = 0; p < pred.size(); ++p) {
    if (tp[p]) ++hits;
    precision.push_back(static_cast<double>(hits) / static_cast<double>(p + 1));
    recall.push_back(static_cast<double>(hits) / static_cast<double>(gt.size()));
  }
  double ap = 0;
  for (int k = 0; k <= 10; ++k) {
    double r = k / 10.0;
    double best_p = 0;
    for (size_t p = 0; p < pred.size(); ++p)
      if (recall[p] >= r) best_p = std::max(best_p, precision[p]);
    ap += best_p / 11.0;
  }
  return ap;
}

// Table-7 convention: how much of the clean score survives the corruption
inline double retention(double full_miou, double corrupted_miou) {
  if (!(full_miou > 0)) throw std::invalid_argument("retention: full mIoU must be positive");
  return corrupted_miou / full_miou;
}

struct MetricsReport {
  std::vector<double> per_class_iou;
  double miou = 0;
  double ap = 0;
  double retention = 1.0;
  std::string modality_subset;  // "camera" / "lidar" / "camera+lidar"
  std::string corruption = "none";
  double degree = 0;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const {
    return {{"per_class_iou", per_class_iou}, {"miou", miou},       {"ap", ap},
            {"retention", retention},         {"modality", modality_subset},
            {"corruption", corruption},       {"degree", degree},   {"seed", seed}};
  }

  static std::string csv_header() {
    return "modality,corruption,degree,seed,miou,ap,retention";
  }

  std::string csv_row() const {
    std::ostringstream os;
    os << modality_subset << ',' << corruption << ',' << degree << ',' << seed << ',' << miou
       << ',' << ap << ',' << retention;
    return os.str();
  }
};

}  // namespace metabev
