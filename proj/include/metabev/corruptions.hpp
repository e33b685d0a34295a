#pragma once

#include "metabev/world.hpp"

#include <algorithm>
#include <set>

namespace metabev {

enum class CorruptionKind {
  LimitedField,
  MissingObjects,
  BeamReduction,
  ViewDrop,
  ViewNoise,
  ObstacleOcclusion,
  MissingCamera,
  MissingLidar,
};

inline const char* kind_name(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::LimitedField: return "limited_field";
    case CorruptionKind::MissingObjects: return "missing_objects";
    case CorruptionKind::BeamReduction: return "beam_reduction";
    case CorruptionKind::ViewDrop: return "view_drop";
    case CorruptionKind::ViewNoise: return "view_noise";
    case CorruptionKind::ObstacleOcclusion: return "obstacle_occlusion";
    case CorruptionKind::MissingCamera: return "missing_camera";
    case CorruptionKind::MissingLidar: return "missing_lidar";
  }
  return "?";
}

inline CorruptionKind kind_from_name(const std::string& s) {
  for (CorruptionKind k :
       {CorruptionKind::LimitedField, CorruptionKind::MissingObjects, CorruptionKind::BeamReduction,
        CorruptionKind::ViewDrop, CorruptionKind::ViewNoise, CorruptionKind::ObstacleOcclusion,
        CorruptionKind::MissingCamera, CorruptionKind::MissingLidar})
    if (s == kind_name(k)) return k;
  throw std::invalid_argument("unknown corruption kind: " + s);
}

// kind + degree + seed, the unit of the failure simulator; degrees outside
// each kind's enumerated ladder are rejected up front
struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::LimitedField;
  double degree = 360;
  std::uint64_t seed = 0;

  void validate() const {
    auto in = [&](std::initializer_list<double> set) {
      for (double v : set)
        if (degree == v) return true;
      return false;
    };
    bool ok = true;
    switch (kind) {
      case CorruptionKind::LimitedField: ok = in({360, 240, 180, 120}); break;
      case CorruptionKind::MissingObjects: ok = in({0.0, 0.1, 0.3, 0.5, 0.7, 1.0}); break;
      case CorruptionKind::BeamReduction: ok = in({1, 4, 8, 16, 32}); break;
      case CorruptionKind::ViewDrop:
      case CorruptionKind::ViewNoise:
        ok = degree == std::floor(degree) && degree >= 0 && degree <= 6;
        break;
      case CorruptionKind::ObstacleOcclusion: ok = degree >= 0 && degree <= 1; break;
      case CorruptionKind::MissingCamera:
      case CorruptionKind::MissingLidar: ok = true; break;
    }
    if (!ok)
      throw std::invalid_argument(std::string("invalid degree ") + std::to_string(degree) +
                                  " for corruption " + kind_name(kind));
  }
};

// azimuthal FoV restriction: keep azimuth in [-fov/2, +fov/2)
inline PointCloud limited_field(const PointCloud& pc, double fov_deg) {
  if (fov_deg != 360 && fov_deg != 240 && fov_deg != 180 && fov_deg != 120)
    throw std::invalid_argument("limited_field: fov must be one of 360/240/180/120");
  if (fov_deg == 360) return pc;
  PointCloud out;
  for (const LidarPoint& p : pc.points)
    if (p.azimuth_deg >= -fov_deg / 2 && p.azimuth_deg < fov_deg / 2) out.points.push_back(p);
  return out;
}

// one seeded coin per box; heads removes every point inside that box
inline PointCloud missing_objects(const PointCloud& pc, const std::vector<Box>& boxes, double rate,
                                  std::uint64_t seed) {
  if (rate != 0.0 && rate != 0.1 && rate != 0.3 && rate != 0.5 && rate != 0.7 && rate != 1.0)
    throw std::invalid_argument("missing_objects: rate outside the enumerated set");
  std::vector<bool> removed(boxes.size());
  Rng rng(seed);
  for (size_t b = 0; b < boxes.size(); ++b)
    removed[b] = rng.fork(b + 1).uniform() < rate;
  PointCloud out;
  for (const LidarPoint& p : pc.points) {
    bool drop = false;
    for (size_t b = 0; b < boxes.size(); ++b)
      if (removed[b] && boxes[b].contains(p.x, p.y)) {
        drop = true;
        break;
      }
    if (!drop) out.points.push_back(p);
  }
  return out;
}

// keep the evenly strided beam subset {0, 32/n, 2*32/n, ...}
inline PointCloud beam_reduction(const PointCloud& pc, int target_beams) {
  if (target_beams != 1 && target_beams != 4 && target_beams != 8 && target_beams != 16 &&
      target_beams != 32)
    throw std::invalid_argument("beam_reduction: target must be one of 1/4/8/16/32");
  if (target_beams == 32) return pc;
  int stride = 32 / target_beams;
  PointCloud out;
  for (const LidarPoint& p : pc.points)
    if (p.beam_id % stride == 0) out.points.push_back(p);
  return out;
}

namespace detail {
inline std::vector<int> choose_views(int n, int count, std::uint64_t seed) {
  if (n < 0 || n > count)
    throw std::invalid_argument("view corruption: need 0 <= n <= " + std::to_string(count));
  Rng rng(seed);
  return rng.choose_distinct(n, count);
}
}  // namespace detail

// n seeded-chosen views zeroed; calibration (rig indexing) untouched
inline MultiViewSet view_drop(const MultiViewSet& views, int n, std::uint64_t seed) {
  auto chosen = detail::choose_views(n, static_cast<int>(views.views.size()), seed);
  MultiViewSet out = views;
  for (int v : chosen) out.views[static_cast<size_t>(v)].data.setZero();
  return out;
}

// n seeded-chosen views replaced by uniform noise over the feature range
inline MultiViewSet view_noise(const MultiViewSet& views, int n, std::uint64_t seed) {
  auto chosen = detail::choose_views(n, static_cast<int>(views.views.size()), seed);
  MultiViewSet out = views;
  Rng rng(Rng(seed).next_u64());  // decorrelated from the choice stream
  for (int v : chosen) {
    auto& d = out.views[static_cast<size_t>(v)].data;
    Rng vr = rng.fork(static_cast<std::uint64_t>(v) + 1);
    for (long i = 0; i < d.size(); ++i) d[i] = vr.uniform();
  }
  return out;
}

constexpr double kOccluderValue = 0.5;  // mid-range gray in feature space

// four procedural soft blob masks in [0,1]; data-free stand-in for a bank of
// predefined occluder images
inline std::vector<ArrayX<double>> make_mask_bank(int height, int width) {
  if (height < 1 || width < 1) throw std::invalid_argument("make_mask_bank: empty image");
  std::vector<ArrayX<double>> bank;
  for (int m = 0; m < 4; ++m) {
    Rng rng(0xB10Bu + static_cast<std::uint64_t>(m));
    double cx = rng.uniform(0.25, 0.75) * width;
    double cy = rng.uniform(0.25, 0.75) * height;
    double rx = rng.uniform(0.2, 0.45) * width;
    double ry = rng.uniform(0.2, 0.45) * height;
    ArrayX<double> mask(static_cast<long>(height) * width);
    for (int i = 0; i < height; ++i)
      for (int j = 0; j < width; ++j) {
        double dx = (j + 0.5 - cx) / rx, dy = (i + 0.5 - cy) / ry;
        double d = dx * dx + dy * dy;
        mask[static_cast<long>(i) * width + j] = std::clamp(1.5 - d, 0.0, 1.0);
      }
    bank.push_back(std::move(mask));
  }
  return bank;
}

// per view: seeded mask choice, then (1 - alpha*mask)*view + alpha*mask*gray
inline MultiViewSet obstacle_occlusion(const MultiViewSet& views,
                                       const std::vector<ArrayX<double>>& mask_bank, double alpha,
                                       std::uint64_t seed) {
  if (mask_bank.empty()) throw std::invalid_argument("obstacle_occlusion: empty mask bank");
  if (!(alpha >= 0 && alpha <= 1))
    throw std::invalid_argument("obstacle_occlusion: alpha must be in [0,1]");
  MultiViewSet out = views;
  Rng rng(seed);
  for (ViewImage& v : out.views) {
    const ArrayX<double>& mask = mask_bank[static_cast<size_t>(
        rng.uniform_int(static_cast<int>(mask_bank.size())))];
    if (alpha == 0) continue;
    long pix = static_cast<long>(v.height) * v.width;
    if (mask.size() != pix)
      throw std::invalid_argument("obstacle_occlusion: mask resolution mismatch");
    for (int c = 0; c < v.channels; ++c)
      for (long p = 0; p < pix; ++p) {
        double& x = v.data[c * pix + p];
        x = (1 - alpha * mask[p]) * x + alpha * mask[p] * kOccluderValue;
      }
  }
  return out;
}

// One raw sample with its available-modality set; total-absence modes shrink
// the set rather than zero-stuffing the data.
struct ModalitySample {
  PointCloud cloud;
  MultiViewSet views;
  std::set<std::string> active{kCamera, kLidar};
};

inline ModalitySample drop_modality(const ModalitySample& sample, const std::string& which) {
  if (which != kCamera && which != kLidar)
    throw std::invalid_argument("drop_modality: unknown modality '" + which + "'");
  if (!sample.active.count(which))
    throw std::invalid_argument("drop_modality: modality '" + which + "' already absent");
  if (sample.active.size() <= 1)
    throw std::invalid_argument("drop_modality: cannot drop the last modality");
  ModalitySample out = sample;
  out.active.erase(which);
  return out;
}

// dispatcher used by the training/eval harness and the CLI
inline ModalitySample apply_corruption(const ModalitySample& sample, const std::vector<Box>& boxes,
                                       const CorruptionSpec& spec) {
  spec.validate();
  ModalitySample out = sample;
  switch (spec.kind) {
    case CorruptionKind::LimitedField:
      out.cloud = limited_field(sample.cloud, spec.degree);
      break;
    case CorruptionKind::MissingObjects:
      out.cloud = missing_objects(sample.cloud, boxes, spec.degree, spec.seed);
      break;
    case CorruptionKind::BeamReduction:
      out.cloud = beam_reduction(sample.cloud, static_cast<int>(spec.degree));
      break;
    case CorruptionKind::ViewDrop:
      out.views = view_drop(sample.views, static_cast<int>(spec.degree), spec.seed);
      break;
    case CorruptionKind::ViewNoise:
      out.views = view_noise(sample.views, static_cast<int>(spec.degree), spec.seed);
      break;
    case CorruptionKind::ObstacleOcclusion: {
      if (sample.views.views.empty()) break;
      auto bank = make_mask_bank(sample.views.views[0].height, sample.views.views[0].width);
      out.views = obstacle_occlusion(sample.views, bank, spec.degree, spec.seed);
      break;
    }
    case CorruptionKind::MissingCamera:
      out = drop_modality(sample, kCamera);
      break;
    case CorruptionKind::MissingLidar:
      out = drop_modality(sample, kLidar);
      break;
  }
  return out;
}

}  // namespace metabev
