#pragma once

#include "metabev/core.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <map>
#include <optional>

namespace metabev {

// Class ids: 0 is the drivable map layer, 1.. are box classes.
constexpr int kClassDrivable = 0;
constexpr int kClassVehicle = 1;

inline const std::string kCamera = "camera";
inline const std::string kLidar = "lidar";

struct Box {
  double cx = 0, cy = 0;   // meters
  double w = 0, l = 0;     // width (across), length (along heading)
  double yaw = 0;          // radians
  int class_id = kClassVehicle;

  // 2D footprint test
  bool contains(double x, double y) const {
    double dx = x - cx, dy = y - cy;
    double c = std::cos(yaw), s = std::sin(yaw);
    double lx = c * dx + s * dy;   // along heading
    double ly = -s * dx + c * dy;  // across
    return std::abs(lx) <= l / 2 && std::abs(ly) <= w / 2;
  }
};

using Polygon = std::vector<std::array<double, 2>>;

inline bool point_in_polygon(const Polygon& poly, double x, double y) {
  bool inside = false;
  size_t n = poly.size();
  for (size_t i = 0, j = n - 1; i < n; j = i++) {
    double xi = poly[i][0], yi = poly[i][1], xj = poly[j][0], yj = poly[j][1];
    if ((yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi) inside = !inside;
  }
  return inside;
}

struct Scene {
  std::vector<Box> boxes;
  std::map<int, std::vector<Polygon>> map_layers;  // class_id -> polygons
  double bound = 50.0;                             // half extent, meters
};

struct SceneSpec {
  double bound = 20.0;
  int min_boxes = 2;
  int max_boxes = 6;
  std::vector<int> box_classes = {kClassVehicle};
  bool drivable_layer = true;
};

inline Scene generate_scene(std::uint64_t seed, const SceneSpec& spec) {
  if (!(spec.bound > 0)) throw std::invalid_argument("generate_scene: zero bounds");
  if (spec.min_boxes < 0 || spec.max_boxes < spec.min_boxes)
    throw std::invalid_argument("generate_scene: bad box count range");
  Rng rng(seed);
  Scene scene;
  scene.bound = spec.bound;
  if (spec.drivable_layer) {
    // irregular blob around a seeded center
    double cx = rng.uniform(-0.25, 0.25) * spec.bound;
    double cy = rng.uniform(-0.25, 0.25) * spec.bound;
    double r0 = rng.uniform(0.35, 0.6) * spec.bound;
    Polygon poly;
    const int n = 16;
    std::array<double, 4> wob{rng.uniform(-0.25, 0.25), rng.uniform(-0.25, 0.25),
                              rng.uniform(-0.25, 0.25), rng.uniform(-0.25, 0.25)};
    for (int i = 0; i < n; ++i) {
      double a = 2 * M_PI * i / n;
      double r = r0 * (1 + wob[0] * std::cos(a) + wob[1] * std::sin(a) + wob[2] * std::cos(2 * a) +
                       wob[3] * std::sin(2 * a));
      r = std::min(r, 0.92 * spec.bound);
      poly.push_back({cx + r * std::cos(a), cy + r * std::sin(a)});
    }
    scene.map_layers[kClassDrivable].push_back(std::move(poly));
  }
  int n_boxes = spec.min_boxes + rng.uniform_int(spec.max_boxes - spec.min_boxes + 1);
  for (int b = 0; b < n_boxes; ++b) {
    Box box;
    box.w = rng.uniform(1.6, 2.8);
    box.l = rng.uniform(3.2, 5.5);
    box.yaw = rng.uniform(-M_PI, M_PI);
    double margin = std::max(box.w, box.l);
    if (spec.bound <= margin)
      throw std::invalid_argument("generate_scene: bounds too small to place a box");
    box.cx = rng.uniform(-(spec.bound - margin), spec.bound - margin);
    box.cy = rng.uniform(-(spec.bound - margin), spec.bound - margin);
    box.class_id = spec.box_classes[static_cast<size_t>(rng.uniform_int(
        static_cast<int>(spec.box_classes.size())))];
    scene.boxes.push_back(box);
  }
  return scene;
}

struct CameraSpec {
  Eigen::Matrix3d intrinsics;       // fx 0 cx / 0 fy cy / 0 0 1
  Eigen::Vector3d position;         // meters, world frame
  double yaw = 0;                   // optical axis heading, radians
  int height = 0, width = 0;        // pixels

  Eigen::Vector3d forward() const { return {std::cos(yaw), std::sin(yaw), 0.0}; }
  Eigen::Vector3d right() const { return {std::sin(yaw), -std::cos(yaw), 0.0}; }
  Eigen::Vector3d down() const { return {0.0, 0.0, -1.0}; }

  // returns (px, py, depth) or nullopt when behind the camera
  std::optional<Eigen::Vector3d> project(const Eigen::Vector3d& p) const {
    Eigen::Vector3d rel = p - position;
    double z = rel.dot(forward());
    if (z < 0.1) return std::nullopt;
    double u = rel.dot(right()), v = rel.dot(down());
    double px = intrinsics(0, 0) * u / z + intrinsics(0, 2);
    double py = intrinsics(1, 1) * v / z + intrinsics(1, 2);
    return Eigen::Vector3d{px, py, z};
  }
};

struct LidarSpec {
  int n_beams = 32;
  int azimuth_steps = 120;
  double max_range = 60.0;
  double mount_height = 1.8;
  std::vector<double> elevations_deg;  // one per beam

  static LidarSpec standard(int beams = 32, int steps = 120) {
    LidarSpec l;
    l.n_beams = beams;
    l.azimuth_steps = steps;
    // spread over [-25, +5] degrees, loosely a spinning 32-beam unit
    for (int b = 0; b < beams; ++b)
      l.elevations_deg.push_back(-25.0 + 30.0 * b / std::max(1, beams - 1));
    return l;
  }
};

struct SensorRig {
  std::vector<CameraSpec> cameras;
  LidarSpec lidar;

  static SensorRig standard(int n_views = 6, int img_h = 24, int img_w = 40,
                            int lidar_beams = 32, int azimuth_steps = 120) {
    SensorRig rig;
    rig.lidar = LidarSpec::standard(lidar_beams, azimuth_steps);
    double hfov = 70.0 * M_PI / 180.0;
    for (int v = 0; v < n_views; ++v) {
      CameraSpec cam;
      cam.width = img_w;
      cam.height = img_h;
      double f = img_w / (2.0 * std::tan(hfov / 2));
      cam.intrinsics.setIdentity();
      cam.intrinsics(0, 0) = f;
      cam.intrinsics(1, 1) = f;
      cam.intrinsics(0, 2) = img_w / 2.0;
      cam.intrinsics(1, 2) = img_h / 2.0;
      cam.yaw = 2 * M_PI * v / n_views;
      cam.position = {0.0, 0.0, 1.6};
      rig.cameras.push_back(cam);
    }
    return rig;
  }
};

struct LidarPoint {
  double x = 0, y = 0, z = 0;
  double intensity = 0;
  int beam_id = 0;
  double azimuth_deg = 0;  // [-180, 180)
};

struct PointCloud {
  std::vector<LidarPoint> points;
};

constexpr double kBoxHeight = 1.6;

namespace detail {

// slab test against a yawed box extruded to [0, kBoxHeight]
inline std::optional<double> ray_box(const Eigen::Vector3d& o, const Eigen::Vector3d& d,
                                     const Box& box) {
  double c = std::cos(box.yaw), s = std::sin(box.yaw);
  // into box frame (x along heading)
  auto to_local = [&](const Eigen::Vector3d& p) {
    double dx = p.x() - box.cx, dy = p.y() - box.cy;
    return Eigen::Vector3d{c * dx + s * dy, -s * dx + c * dy, p.z()};
  };
  Eigen::Vector3d lo = to_local(o);
  Eigen::Vector3d ld{c * d.x() + s * d.y(), -s * d.x() + c * d.y(), d.z()};
  Eigen::Vector3d bmin{-box.l / 2, -box.w / 2, 0.0};
  Eigen::Vector3d bmax{box.l / 2, box.w / 2, kBoxHeight};
  double t0 = 0, t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (std::abs(ld[a]) < 1e-12) {
      if (lo[a] < bmin[a] || lo[a] > bmax[a]) return std::nullopt;
      continue;
    }
    double ta = (bmin[a] - lo[a]) / ld[a];
    double tb = (bmax[a] - lo[a]) / ld[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
    if (t0 > t1) return std::nullopt;
  }
  if (t0 <= 1e-9) return std::nullopt;
  return t0;
}

}  // namespace detail

inline PointCloud raycast_lidar(const Scene& scene, const SensorRig& rig, std::uint64_t seed) {
  const LidarSpec& l = rig.lidar;
  Rng rng(seed);
  PointCloud pc;
  Eigen::Vector3d origin{0, 0, l.mount_height};
  const auto* drivable = scene.map_layers.count(kClassDrivable)
                             ? &scene.map_layers.at(kClassDrivable)
                             : nullptr;
  for (int b = 0; b < l.n_beams; ++b) {
    double elev = l.elevations_deg[static_cast<size_t>(b)] * M_PI / 180.0;
    for (int a = 0; a < l.azimuth_steps; ++a) {
      double az_deg = -180.0 + 360.0 * a / l.azimuth_steps;
      double az = az_deg * M_PI / 180.0;
      Eigen::Vector3d dir{std::cos(elev) * std::cos(az), std::cos(elev) * std::sin(az),
                          std::sin(elev)};
      double best = l.max_range;
      int hit_class = -1;  // -1 none, -2 ground
      for (const Box& box : scene.boxes) {
        auto t = detail::ray_box(origin, dir, box);
        if (t && *t < best) {
          best = *t;
          hit_class = box.class_id;
        }
      }
      if (dir.z() < -1e-9) {
        double tg = -origin.z() / dir.z();
        if (tg > 0 && tg < best) {
          best = tg;
          hit_class = -2;
        }
      }
      if (hit_class == -1) continue;  // no return
      LidarPoint p;
      Eigen::Vector3d hit = origin + best * dir;
      p.x = hit.x();
      p.y = hit.y();
      p.z = hit.z();
      p.beam_id = b;
      p.azimuth_deg = az_deg;
      if (hit_class == -2) {
        bool on_drivable = false;
        if (drivable)
          for (const auto& poly : *drivable)
            if (point_in_polygon(poly, p.x, p.y)) {
              on_drivable = true;
              break;
            }
        p.intensity = on_drivable ? 0.8 : 0.2;
      } else {
        p.intensity = 0.5;
      }
      p.intensity += 0.02 * rng.uniform(-1.0, 1.0);
      pc.points.push_back(p);
    }
  }
  return pc;
}

struct ViewImage {
  int channels = 0, height = 0, width = 0;
  ArrayX<double> data;  // [C,H,W] row-major

  double& at(int c, int i, int j) {
    return data[(static_cast<long>(c) * height + i) * width + j];
  }
  double at(int c, int i, int j) const {
    return data[(static_cast<long>(c) * height + i) * width + j];
  }
};

struct MultiViewSet {
  std::vector<ViewImage> views;  // calibration lives in the rig, index-aligned
};

// Feature-map layout: channels [0, n_classes) one-hot class, then inverse
// depth, then occupancy. Total n_classes + 2.
inline int view_channels(int n_classes) { return n_classes + 2; }

inline MultiViewSet render_views(const Scene& scene, const SensorRig& rig, int n_classes = 2) {
  MultiViewSet out;
  const int c_img = view_channels(n_classes);
  for (const CameraSpec& cam : rig.cameras) {
    ViewImage img;
    img.channels = c_img;
    img.height = cam.height;
    img.width = cam.width;
    img.data = ArrayX<double>::Zero(static_cast<long>(c_img) * cam.height * cam.width);
    ArrayX<double> zbuf =
        ArrayX<double>::Constant(static_cast<long>(cam.height) * cam.width, 1e18);

    auto splat = [&](const Eigen::Vector3d& p, int class_id) {
      auto proj = cam.project(p);
      if (!proj) return;
      int px = static_cast<int>(std::floor((*proj)[0]));
      int py = static_cast<int>(std::floor((*proj)[1]));
      double z = (*proj)[2];
      if (px < 0 || px >= cam.width || py < 0 || py >= cam.height) return;
      long pix = static_cast<long>(py) * cam.width + px;
      if (z >= zbuf[pix]) return;
      zbuf[pix] = z;
      for (int ch = 0; ch < n_classes; ++ch) img.at(ch, py, px) = ch == class_id ? 1.0 : 0.0;
      img.at(n_classes, py, px) = 1.0 / z;
      img.at(n_classes + 1, py, px) = 1.0;
    };

    // box surfaces: dense grid on each vertical face and the top
    for (const Box& box : scene.boxes) {
      double c = std::cos(box.yaw), s = std::sin(box.yaw);
      auto world = [&](double lx, double ly, double z) {
        return Eigen::Vector3d{box.cx + c * lx - s * ly, box.cy + s * lx + c * ly, z};
      };
      const int n = 24;
      for (int i = 0; i <= n; ++i)
        for (int j = 0; j <= n; ++j) {
          double u = -0.5 + static_cast<double>(i) / n;
          double v = static_cast<double>(j) / n;
          splat(world(u * box.l, -box.w / 2, v * kBoxHeight), box.class_id);
          splat(world(u * box.l, box.w / 2, v * kBoxHeight), box.class_id);
          splat(world(-box.l / 2, u * box.w, v * kBoxHeight), box.class_id);
          splat(world(box.l / 2, u * box.w, v * kBoxHeight), box.class_id);
          splat(world(u * box.l, (v - 0.5) * box.w, kBoxHeight), box.class_id);
        }
    }
    // map layers on the ground plane
    for (const auto& [class_id, polys] : scene.map_layers)
      for (const Polygon& poly : polys) {
        double step = scene.bound / 60.0;
        for (double x = -scene.bound; x <= scene.bound; x += step)
          for (double y = -scene.bound; y <= scene.bound; y += step)
            if (point_in_polygon(poly, x, y)) splat({x, y, 0.0}, class_id);
      }
    out.views.push_back(std::move(img));
  }
  return out;
}

struct GridSpec {
  int x_cells = 40, y_cells = 40;
  double cell_size = 1.0;  // meters
  double origin_x = -20.0, origin_y = -20.0;  // world coords of the low corner

  static GridSpec square(int cells, double extent) {
    GridSpec g;
    g.x_cells = g.y_cells = cells;
    g.cell_size = 2 * extent / cells;
    g.origin_x = g.origin_y = -extent;
    return g;
  }

  // boundary points belong to the lower-index cell
  std::optional<std::pair<int, int>> cell_of(double x, double y) const {
    double fx = (x - origin_x) / cell_size;
    double fy = (y - origin_y) / cell_size;
    int j = static_cast<int>(std::floor(fx));
    int i = static_cast<int>(std::floor(fy));
    if (fx == std::floor(fx) && j > 0) j -= 1;
    if (fy == std::floor(fy) && i > 0) i -= 1;
    if (i < 0 || i >= x_cells || j < 0 || j >= y_cells) return std::nullopt;
    return std::make_pair(i, j);
  }

  double cell_center_x(int j) const { return origin_x + (j + 0.5) * cell_size; }
  double cell_center_y(int i) const { return origin_y + (i + 0.5) * cell_size; }
  long cells() const { return static_cast<long>(x_cells) * y_cells; }
};

struct GroundTruth {
  int n_classes = 0;
  GridSpec grid;
  std::vector<std::uint8_t> seg;   // [n_classes, X, Y]
  ArrayX<double> heatmap;          // [n_box_classes, X, Y], gaussian peaks
  ArrayX<double> regression;       // [5, X, Y]: dx, dy (cells), w, l (cells), yaw
  std::vector<std::uint8_t> pos;   // [X, Y] positive (center) cells

  bool seg_at(int cls, int i, int j) const {
    return seg[(static_cast<size_t>(cls) * grid.x_cells + i) * grid.y_cells + j] != 0;
  }
};

inline GroundTruth rasterize_ground_truth(const Scene& scene, const GridSpec& grid,
                                          int n_classes = 2) {
  GroundTruth gt;
  gt.n_classes = n_classes;
  gt.grid = grid;
  long cells = grid.cells();
  gt.seg.assign(static_cast<size_t>(n_classes * cells), 0);
  int n_box_classes = n_classes - 1;  // class 0 is the map layer
  gt.heatmap = ArrayX<double>::Zero(n_box_classes * cells);
  gt.regression = ArrayX<double>::Zero(5 * cells);
  gt.pos.assign(static_cast<size_t>(cells), 0);

  for (int i = 0; i < grid.x_cells; ++i)
    for (int j = 0; j < grid.y_cells; ++j) {
      double x = grid.cell_center_x(j), y = grid.cell_center_y(i);
      long cell = static_cast<long>(i) * grid.y_cells + j;
      for (const auto& [class_id, polys] : scene.map_layers) {
        if (class_id >= n_classes) continue;
        for (const Polygon& poly : polys)
          if (point_in_polygon(poly, x, y)) {
            gt.seg[static_cast<size_t>(class_id * cells + cell)] = 1;
            break;
          }
      }
      for (const Box& box : scene.boxes)
        if (box.class_id < n_classes && box.contains(x, y))
          gt.seg[static_cast<size_t>(box.class_id * cells + cell)] = 1;
    }

  for (const Box& box : scene.boxes) {
    int hm_cls = box.class_id - 1;
    if (hm_cls < 0 || hm_cls >= n_box_classes) continue;
    auto cc = grid.cell_of(box.cx, box.cy);
    if (!cc) continue;
    auto [ci, cj] = *cc;
    double fx = (box.cx - grid.origin_x) / grid.cell_size;
    double fy = (box.cy - grid.origin_y) / grid.cell_size;
    double sigma = std::max(1.0, 0.2 * std::max(box.w, box.l) / grid.cell_size);
    int rad = static_cast<int>(std::ceil(3 * sigma));
    for (int i = std::max(0, ci - rad); i <= std::min(grid.x_cells - 1, ci + rad); ++i)
      for (int j = std::max(0, cj - rad); j <= std::min(grid.y_cells - 1, cj + rad); ++j) {
        // integer-center gaussian: the peak cell carries exactly 1, the
        // fractional part lives in the dx/dy regression channels
        double d2 = static_cast<double>((i - ci) * (i - ci) + (j - cj) * (j - cj));
        double g = std::exp(-d2 / (2 * sigma * sigma));
        long cell = static_cast<long>(i) * grid.y_cells + j;
        double& h = gt.heatmap[hm_cls * cells + cell];
        h = std::max(h, g);
      }
    long cell = static_cast<long>(ci) * grid.y_cells + cj;
    gt.pos[static_cast<size_t>(cell)] = 1;
    gt.regression[0 * cells + cell] = fx - (cj + 0.5);
    gt.regression[1 * cells + cell] = fy - (ci + 0.5);
    gt.regression[2 * cells + cell] = box.w / grid.cell_size;
    gt.regression[3 * cells + cell] = box.l / grid.cell_size;
    gt.regression[4 * cells + cell] = box.yaw;
  }
  return gt;
}

// ---- serialization (documented schema: see README) ----

inline nlohmann::json to_json(const Scene& s) {
  nlohmann::json j;
  j["bound"] = s.bound;
  j["boxes"] = nlohmann::json::array();
  for (const Box& b : s.boxes)
    j["boxes"].push_back({{"cx", b.cx}, {"cy", b.cy}, {"w", b.w}, {"l", b.l},
                          {"yaw", b.yaw}, {"class_id", b.class_id}});
  j["map_layers"] = nlohmann::json::object();
  for (const auto& [cls, polys] : s.map_layers) {
    nlohmann::json jp = nlohmann::json::array();
    for (const Polygon& p : polys) jp.push_back(p);
    j["map_layers"][std::to_string(cls)] = jp;
  }
  return j;
}

inline Scene scene_from_json(const nlohmann::json& j) {
  Scene s;
  s.bound = j.at("bound").get<double>();
  for (const auto& jb : j.at("boxes"))
    s.boxes.push_back({jb.at("cx"), jb.at("cy"), jb.at("w"), jb.at("l"), jb.at("yaw"),
                       jb.at("class_id")});
  for (const auto& [key, jp] : j.at("map_layers").items()) {
    int cls = std::stoi(key);
    for (const auto& poly : jp) s.map_layers[cls].push_back(poly.get<Polygon>());
  }
  return s;
}

inline nlohmann::json to_json(const PointCloud& pc) {
  nlohmann::json j = nlohmann::json::array();
  for (const LidarPoint& p : pc.points)
    j.push_back({p.x, p.y, p.z, p.intensity, p.beam_id, p.azimuth_deg});
  return j;
}

inline PointCloud pointcloud_from_json(const nlohmann::json& j) {
  PointCloud pc;
  for (const auto& jp : j) {
    LidarPoint p;
    p.x = jp.at(0);
    p.y = jp.at(1);
    p.z = jp.at(2);
    p.intensity = jp.at(3);
    p.beam_id = jp.at(4);
    p.azimuth_deg = jp.at(5);
    pc.points.push_back(p);
  }
  return pc;
}

inline nlohmann::json to_json(const MultiViewSet& mv) {
  nlohmann::json j = nlohmann::json::array();
  for (const ViewImage& v : mv.views) {
    nlohmann::json jv;
    jv["channels"] = v.channels;
    jv["height"] = v.height;
    jv["width"] = v.width;
    jv["data"] = std::vector<double>(v.data.data(), v.data.data() + v.data.size());
    j.push_back(jv);
  }
  return j;
}

inline MultiViewSet views_from_json(const nlohmann::json& j) {
  MultiViewSet mv;
  for (const auto& jv : j) {
    ViewImage v;
    v.channels = jv.at("channels");
    v.height = jv.at("height");
    v.width = jv.at("width");
    auto d = jv.at("data").get<std::vector<double>>();
    v.data = Eigen::Map<const ArrayX<double>>(d.data(), static_cast<long>(d.size()));
    mv.views.push_back(std::move(v));
  }
  return mv;
}

}  // namespace metabev
