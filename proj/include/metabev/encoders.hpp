#pragma once

#include "metabev/nn.hpp"
#include "metabev/world.hpp"

namespace metabev {

template <typename S>
struct BEVGrid {
  GridSpec spec;
  Tensor<S> data;  // [C, X, Y]

  int channels() const { return data.dim(0); }
};

constexpr int kPillarChannels = 5;  // count, mean intensity, mean height, mean dx, mean dy

// LiDAR points to pillar features. Out-of-bounds points are ignored; a point
// exactly on a cell boundary goes to the lower-index cell (GridSpec rule).
template <typename S>
BEVGrid<S> pillarize(const PointCloud& pc, const GridSpec& grid) {
  long cells = grid.cells();
  ArrayX<S> data = ArrayX<S>::Zero(kPillarChannels * cells);
  for (const LidarPoint& p : pc.points) {
    auto cell = grid.cell_of(p.x, p.y);
    if (!cell) continue;
    long idx = static_cast<long>(cell->first) * grid.y_cells + cell->second;
    data[0 * cells + idx] += S(1);
    data[1 * cells + idx] += static_cast<S>(p.intensity);
    data[2 * cells + idx] += static_cast<S>(p.z);
    data[3 * cells + idx] += static_cast<S>((p.x - grid.cell_center_x(cell->second)) / grid.cell_size);
    data[4 * cells + idx] += static_cast<S>((p.y - grid.cell_center_y(cell->first)) / grid.cell_size);
  }
  for (long i = 0; i < cells; ++i) {
    S n = data[i];
    if (n > S(0))
      for (int c = 1; c < kPillarChannels; ++c) data[c * cells + i] /= n;
  }
  return {grid, Tensor<S>::from_array({kPillarChannels, grid.x_cells, grid.y_cells},
                                      std::move(data))};
}

template <typename S>
struct DepthDistribution {
  int bins = 16;
  double near = 1.0, far = 40.0;            // bin edges in meters
  std::vector<Tensor<S>> weights;           // per view, [D, H, W], nonnegative, sum <= 1

  double bin_center(int d) const { return near + (far - near) * (d + 0.5) / bins; }
};

namespace detail {

// (view pixel, depth bin) -> flat BEV cell, or -1 out of bounds. Geometry is
// fixed per (rig, grid, depth binning); features and weights stay
// differentiable through the scatter.
inline std::vector<int> pixel_depth_cells(const CameraSpec& cam, int bins, double near, double far,
                                          const GridSpec& grid) {
  std::vector<int> idx(static_cast<size_t>(bins) * cam.height * cam.width, -1);
  for (int i = 0; i < cam.height; ++i)
    for (int j = 0; j < cam.width; ++j) {
      double u = (j + 0.5 - cam.intrinsics(0, 2)) / cam.intrinsics(0, 0);
      double v = (i + 0.5 - cam.intrinsics(1, 2)) / cam.intrinsics(1, 1);
      Eigen::Vector3d dir = cam.forward() + u * cam.right() + v * cam.down();
      for (int d = 0; d < bins; ++d) {
        double z = near + (far - near) * (d + 0.5) / bins;
        Eigen::Vector3d p = cam.position + z * dir;
        auto cell = grid.cell_of(p.x(), p.y());
        if (cell)
          idx[(static_cast<size_t>(d) * cam.height + i) * cam.width + j] =
              cell->first * grid.y_cells + cell->second;
      }
    }
  return idx;
}

// out[c, cell] = sum over (pix, d) with cell_idx[d,pix] == cell of
// w[d,pix] * f[c,pix]
template <typename S>
Tensor<S> depth_scatter(const Tensor<S>& feat, const Tensor<S>& depth_w,
                        const std::vector<int>& cell_idx, long cells) {
  if (feat.shape().size() != 2 || depth_w.shape().size() != 2)
    throw std::invalid_argument("depth_scatter: feat [C,P] and weights [D,P] required");
  long c = feat.dim(0), p = feat.dim(1), d = depth_w.dim(0);
  if (depth_w.dim(1) != p || static_cast<long>(cell_idx.size()) != d * p)
    throw std::invalid_argument("depth_scatter: table size mismatch");
  ArrayX<S> out = ArrayX<S>::Zero(c * cells);
  for (long dd = 0; dd < d; ++dd)
    for (long pp = 0; pp < p; ++pp) {
      int cell = cell_idx[static_cast<size_t>(dd * p + pp)];
      if (cell < 0) continue;
      S w = depth_w.value()[dd * p + pp];
      if (w == S(0)) continue;
      for (long cc = 0; cc < c; ++cc) out[cc * cells + cell] += w * feat.value()[cc * p + pp];
    }
  return detail::op<S>({static_cast<int>(c), static_cast<int>(cells)}, std::move(out),
                       {feat, depth_w}, [c, p, d, cells, cell_idx](TensorNode<S>& n) {
                         auto& pf = n.parents[0];
                         auto& pw = n.parents[1];
                         if (pf->requires_grad) pf->ensure_grad();
                         if (pw->requires_grad) pw->ensure_grad();
                         for (long dd = 0; dd < d; ++dd)
                           for (long pp = 0; pp < p; ++pp) {
                             int cell = cell_idx[static_cast<size_t>(dd * p + pp)];
                             if (cell < 0) continue;
                             S w = pw->value[dd * p + pp];
                             S dw = S(0);
                             for (long cc = 0; cc < c; ++cc) {
                               S go = n.grad[cc * cells + cell];
                               if (pf->requires_grad) pf->grad[cc * p + pp] += w * go;
                               dw += pf->value[cc * p + pp] * go;
                             }
                             if (pw->requires_grad) pw->grad[dd * p + pp] += dw;
                           }
                       });
}

}  // namespace detail

// Lift-splat: distribute every pixel feature along its back-projected ray,
// weighted by the depth distribution, then sum depth slices into pillars.
template <typename S>
BEVGrid<S> lift_splat(const std::vector<Tensor<S>>& view_feats, const DepthDistribution<S>& depth,
                      const SensorRig& rig, const GridSpec& grid) {
  if (view_feats.size() != rig.cameras.size() || depth.weights.size() != rig.cameras.size())
    throw std::invalid_argument("lift_splat: one feature map and one depth map per camera");
  long cells = grid.cells();
  Tensor<S> acc;
  for (size_t v = 0; v < view_feats.size(); ++v) {
    const CameraSpec& cam = rig.cameras[v];
    const Tensor<S>& f = view_feats[v];
    if (f.shape().size() != 3 || f.dim(1) != cam.height || f.dim(2) != cam.width)
      throw std::invalid_argument("lift_splat: feature map does not match camera resolution");
    const Tensor<S>& w = depth.weights[v];
    if (w.shape().size() != 3 || w.dim(0) != depth.bins || w.dim(1) != cam.height ||
        w.dim(2) != cam.width)
      throw std::invalid_argument("lift_splat: depth weights must be [D,H,W]");
    auto idx = detail::pixel_depth_cells(cam, depth.bins, depth.near, depth.far, grid);
    long pix = static_cast<long>(cam.height) * cam.width;
    Tensor<S> part = detail::depth_scatter(reshape(f, {f.dim(0), static_cast<int>(pix)}),
                                           reshape(w, {depth.bins, static_cast<int>(pix)}), idx,
                                           cells);
    acc = acc.valid() ? add(acc, part) : part;
  }
  return {grid, reshape(acc, {acc.dim(0), grid.x_cells, grid.y_cells})};
}

// convenience: raw (non-learned) view features straight from the renderer
template <typename S>
std::vector<Tensor<S>> views_as_tensors(const MultiViewSet& mv, bool requires_grad = false) {
  std::vector<Tensor<S>> out;
  for (const ViewImage& v : mv.views) {
    ArrayX<S> a = v.data.template cast<S>();
    out.push_back(
        Tensor<S>::from_array({v.channels, v.height, v.width}, std::move(a), requires_grad));
  }
  return out;
}

// phi_c / phi_l desk-scale stand-in: per-cell channel MLP
template <typename S>
BEVGrid<S> encode(const BEVGrid<S>& grid, const ChannelMlp<S>& encoder) {
  return {grid.spec, encoder(grid.data)};
}

}  // namespace metabev
