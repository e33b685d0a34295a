#pragma once

#include "metabev/checkpoint.hpp"
#include "metabev/metrics.hpp"
#include "metabev/model.hpp"

#include <functional>
#include <iostream>

namespace metabev {

struct TrainConfig {
  ModelConfig model;
  SceneSpec scene;
  // modality switching probabilities: camera-only, lidar-only, both
  double r_cam = 1.0 / 3.0;
  double r_lidar = 1.0 / 3.0;
  double r_both = 1.0 / 3.0;
  // optimizer
  double lr_min = 2e-4;
  double lr_max = 2e-3;
  int cycle_steps = 100;
  double weight_decay = 0.05;
  // joint-loss weighting: detection 10, segmentation 1
  double w_det = kDetWeight;
  double w_seg = kSegWeight;
  // data
  int train_scenes = 256;
  int eval_scenes = 64;
  bool in_domain = false;  // randomized train-time corruption degrees
  std::uint64_t seed = 1;

  TrainConfig() {
    scene.bound = model.extent * 0.9;
    scene.min_boxes = 1;
    scene.max_boxes = 3;
  }

  void validate() const {
    model.validate();
    if (r_cam < 0 || r_lidar < 0 || r_both < 0 ||
        std::abs(r_cam + r_lidar + r_both - 1.0) > 1e-9)
      throw std::invalid_argument("modality ratios must be nonnegative and sum to 1");
    if (w_det < 0 || w_seg < 0) throw std::invalid_argument("negative loss weight");
    if (train_scenes < 1 || eval_scenes < 1) throw std::invalid_argument("empty dataset");
  }
};

inline std::string ffn_kind_name(FfnKind k) {
  switch (k) {
    case FfnKind::Plain: return "plain";
    case FfnKind::RM2oE: return "rm2oe";
    case FfnKind::HM2oE: return "hm2oe";
  }
  return "?";
}

inline FfnKind ffn_kind_from_name(const std::string& s) {
  if (s == "plain") return FfnKind::Plain;
  if (s == "rm2oe") return FfnKind::RM2oE;
  if (s == "hm2oe") return FfnKind::HM2oE;
  throw std::invalid_argument("unknown ffn kind: " + s);
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {
      {"model",
       {{"grid_cells", c.model.grid_cells}, {"extent", c.model.extent},
        {"n_views", c.model.n_views},       {"img_h", c.model.img_h},
        {"img_w", c.model.img_w},           {"lidar_beams", c.model.lidar_beams},
        {"azimuth_steps", c.model.azimuth_steps}, {"cam_feat", c.model.cam_feat},
        {"depth_bins", c.model.depth_bins}, {"depth_near", c.model.depth_near},
        {"depth_far", c.model.depth_far},   {"dm", c.model.dm},
        {"heads", c.model.heads},           {"points", c.model.points},
        {"n_cross", c.model.n_cross},       {"n_self", c.model.n_self},
        {"ffn_kind", ffn_kind_name(c.model.ffn_kind)}, {"ffn_hidden", c.model.ffn_hidden},
        {"experts", c.model.experts},       {"moe_active", c.model.moe_active},
        {"n_classes", c.model.n_classes},   {"seg_hidden", c.model.seg_hidden},
        {"det_hidden", c.model.det_hidden}}},
      {"scene",
       {{"bound", c.scene.bound}, {"min_boxes", c.scene.min_boxes},
        {"max_boxes", c.scene.max_boxes}}},
      {"ratios", {{"camera", c.r_cam}, {"lidar", c.r_lidar}, {"both", c.r_both}}},
      {"optimizer",
       {{"lr_min", c.lr_min}, {"lr_max", c.lr_max}, {"cycle_steps", c.cycle_steps},
        {"weight_decay", c.weight_decay}}},
      {"loss", {{"w_det", c.w_det}, {"w_seg", c.w_seg}}},
      {"data",
       {{"train_scenes", c.train_scenes}, {"eval_scenes", c.eval_scenes},
        {"in_domain", c.in_domain}}},
      {"seed", c.seed},
  };
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  auto get = [](const nlohmann::json& obj, const char* key, auto& out) {
    if (obj.contains(key)) out = obj.at(key).template get<std::decay_t<decltype(out)>>();
  };
  if (j.contains("model")) {
    const auto& m = j.at("model");
    get(m, "grid_cells", c.model.grid_cells);
    get(m, "extent", c.model.extent);
    get(m, "n_views", c.model.n_views);
    get(m, "img_h", c.model.img_h);
    get(m, "img_w", c.model.img_w);
    get(m, "lidar_beams", c.model.lidar_beams);
    get(m, "azimuth_steps", c.model.azimuth_steps);
    get(m, "cam_feat", c.model.cam_feat);
    get(m, "depth_bins", c.model.depth_bins);
    get(m, "depth_near", c.model.depth_near);
    get(m, "depth_far", c.model.depth_far);
    get(m, "dm", c.model.dm);
    get(m, "heads", c.model.heads);
    get(m, "points", c.model.points);
    get(m, "n_cross", c.model.n_cross);
    get(m, "n_self", c.model.n_self);
    if (m.contains("ffn_kind")) c.model.ffn_kind = ffn_kind_from_name(m.at("ffn_kind"));
    get(m, "ffn_hidden", c.model.ffn_hidden);
    get(m, "experts", c.model.experts);
    get(m, "moe_active", c.model.moe_active);
    get(m, "n_classes", c.model.n_classes);
    get(m, "seg_hidden", c.model.seg_hidden);
    get(m, "det_hidden", c.model.det_hidden);
  }
  if (j.contains("scene")) {
    get(j.at("scene"), "bound", c.scene.bound);
    get(j.at("scene"), "min_boxes", c.scene.min_boxes);
    get(j.at("scene"), "max_boxes", c.scene.max_boxes);
  }
  if (j.contains("ratios")) {
    get(j.at("ratios"), "camera", c.r_cam);
    get(j.at("ratios"), "lidar", c.r_lidar);
    get(j.at("ratios"), "both", c.r_both);
  }
  if (j.contains("optimizer")) {
    get(j.at("optimizer"), "lr_min", c.lr_min);
    get(j.at("optimizer"), "lr_max", c.lr_max);
    get(j.at("optimizer"), "cycle_steps", c.cycle_steps);
    get(j.at("optimizer"), "weight_decay", c.weight_decay);
  }
  if (j.contains("loss")) {
    get(j.at("loss"), "w_det", c.w_det);
    get(j.at("loss"), "w_seg", c.w_seg);
  }
  if (j.contains("data")) {
    get(j.at("data"), "train_scenes", c.train_scenes);
    get(j.at("data"), "eval_scenes", c.eval_scenes);
    get(j.at("data"), "in_domain", c.in_domain);
  }
  get(j, "seed", c.seed);
  c.validate();
  return c;
}

// i.i.d. seeded draws over {camera-only, lidar-only, both}
class SwitchedModalitySampler {
 public:
  SwitchedModalitySampler(double r_cam, double r_lidar, double r_both, std::uint64_t seed)
      : r_cam_(r_cam), r_lidar_(r_lidar), rng_(seed) {
    if (r_cam < 0 || r_lidar < 0 || r_both < 0 || std::abs(r_cam + r_lidar + r_both - 1.0) > 1e-9)
      throw std::invalid_argument("modality ratios must be nonnegative and sum to 1");
  }

  std::set<std::string> next() {
    double u = rng_.uniform();
    if (u < r_cam_) return {kCamera};
    if (u < r_cam_ + r_lidar_) return {kLidar};
    return {kCamera, kLidar};
  }

 private:
  double r_cam_, r_lidar_;
  Rng rng_;
};

inline std::string subset_name(const std::set<std::string>& subset) {
  std::string s;
  for (const auto& m : subset) s += (s.empty() ? "" : "+") + m;
  return s;
}

// fixed cache of fully generated synthetic samples
inline std::vector<WorldSample> build_dataset(const TrainConfig& cfg, int count,
                                              std::uint64_t salt) {
  SensorRig rig = SensorRig::standard(cfg.model.n_views, cfg.model.img_h, cfg.model.img_w,
                                      cfg.model.lidar_beams, cfg.model.azimuth_steps);
  GridSpec grid = GridSpec::square(cfg.model.grid_cells, cfg.model.extent);
  std::vector<WorldSample> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i)
    out.push_back(make_sample(cfg.seed ^ salt ^ (0x10000ULL + static_cast<std::uint64_t>(i)),
                              rig, grid, cfg.scene, cfg.model.n_classes));
  return out;
}

// randomized degree draw for in-domain training
inline CorruptionSpec random_corruption(Rng& rng) {
  CorruptionSpec spec;
  spec.seed = rng.next_u64();
  switch (rng.uniform_int(6)) {
    case 0:
      spec.kind = CorruptionKind::LimitedField;
      spec.degree = std::array<double, 4>{360, 240, 180, 120}[static_cast<size_t>(
          rng.uniform_int(4))];
      break;
    case 1:
      spec.kind = CorruptionKind::MissingObjects;
      spec.degree = std::array<double, 6>{0.0, 0.1, 0.3, 0.5, 0.7, 1.0}[static_cast<size_t>(
          rng.uniform_int(6))];
      break;
    case 2:
      spec.kind = CorruptionKind::BeamReduction;
      spec.degree = std::array<double, 5>{1, 4, 8, 16, 32}[static_cast<size_t>(rng.uniform_int(5))];
      break;
    case 3:
      spec.kind = CorruptionKind::ViewDrop;
      spec.degree = rng.uniform_int(7);
      break;
    case 4:
      spec.kind = CorruptionKind::ViewNoise;
      spec.degree = rng.uniform_int(7);
      break;
    default:
      spec.kind = CorruptionKind::ObstacleOcclusion;
      spec.degree = rng.uniform_int(2);  // clean or occluded
      break;
  }
  return spec;
}

template <typename S>
struct TrainResult {
  Model<S> model;
  AdamW<S> opt;
  std::vector<double> losses;  // one joint-loss value per step
};

// The switched-modality training loop: cached synthetic samples, optional
// train-time corruption, per-step modality subset, AdamW update. Fully
// deterministic per (config, n_steps).
template <typename S>
TrainResult<S> train(const TrainConfig& cfg, int n_steps,
                     const std::function<void(int, double)>& on_step = {}) {
  cfg.validate();
  TrainResult<S> res{Model<S>::create(cfg.model, cfg.seed), {}, {}};
  res.opt.lr_min = cfg.lr_min;
  res.opt.lr_max = cfg.lr_max;
  res.opt.cycle_steps = cfg.cycle_steps;
  res.opt.weight_decay = cfg.weight_decay;
  res.opt.init(res.model.params);

  std::vector<WorldSample> dataset = build_dataset(cfg, cfg.train_scenes, 0xA11CE);
  SwitchedModalitySampler sampler(cfg.r_cam, cfg.r_lidar, cfg.r_both, cfg.seed ^ 0x5A3Du);
  Rng step_rng(cfg.seed ^ 0xC0FFEEu);

  for (int step = 0; step < n_steps; ++step) {
    const WorldSample& base = dataset[static_cast<size_t>(
        step_rng.uniform_int(static_cast<int>(dataset.size())))];
    ModalitySample data = base.data;
    if (cfg.in_domain) {
      Rng cr(step_rng.next_u64());
      data = apply_corruption(data, base.scene.boxes, random_corruption(cr));
    }
    data.active = sampler.next();

    res.model.params.zero_grads();
    auto out = res.model.forward(data);
    Tensor<S> loss = add(scale(det_loss(out.det, base.gt), static_cast<S>(cfg.w_det)),
                         scale(seg_loss(out.seg_logits, base.gt.seg), static_cast<S>(cfg.w_seg)));
    double lv = static_cast<double>(loss.item());
    if (!std::isfinite(lv))
      throw std::runtime_error("training diverged: non-finite loss at step " +
                               std::to_string(step));
    loss.backward();
    res.opt.step(res.model.params);
    res.losses.push_back(lv);
    if (on_step) on_step(step, lv);
  }
  return res;
}

struct SuiteEntry {
  std::set<std::string> subset{kCamera, kLidar};
  CorruptionSpec spec{CorruptionKind::LimitedField, 360, 0};
};

// corrupt a fixed eval set, forward, score; the first pass with the entry's
// clean twin provides the retention denominator
template <typename S>
std::vector<MetricsReport> evaluate(const Model<S>& model,
                                    const std::vector<WorldSample>& eval_set,
                                    const std::vector<SuiteEntry>& suite) {
  auto run = [&](const SuiteEntry& e) {
    if (e.subset.empty()) throw std::invalid_argument("evaluate: empty modality subset");
    double miou_sum = 0, ap_sum = 0;
    std::vector<double> class_sum(static_cast<size_t>(model.cfg.n_classes), 0.0);
    for (const WorldSample& s : eval_set) {
      ModalitySample data = apply_corruption(s.data, s.scene.boxes, e.spec);
      for (const auto& mod : e.subset)
        if (!data.active.count(mod))
          throw std::invalid_argument("evaluate: subset requests a dropped modality");
      data.active = e.subset;
      auto out = model.forward(data);
      auto [per_class, mean] = miou(seg_masks(out.seg_logits), s.gt.seg, model.cfg.n_classes);
      miou_sum += mean;
      for (size_t c = 0; c < per_class.size(); ++c) class_sum[c] += per_class[c];
      ap_sum += bev_ap(decode_detections(out.det, model.grid), s.scene.boxes);
    }
    MetricsReport r;
    double n = static_cast<double>(eval_set.size());
    r.miou = miou_sum / n;
    r.ap = ap_sum / n;
    for (double c : class_sum) r.per_class_iou.push_back(c / n);
    r.modality_subset = subset_name(e.subset);
    r.corruption = kind_name(e.spec.kind);
    r.degree = e.spec.degree;
    r.seed = e.spec.seed;
    return r;
  };

  std::vector<MetricsReport> reports;
  std::map<std::string, double> clean_miou;  // per modality subset
  for (const SuiteEntry& e : suite) {
    MetricsReport r = run(e);
    std::string key = r.modality_subset;
    if (!clean_miou.count(key)) {
      SuiteEntry clean = e;
      clean.spec = {CorruptionKind::LimitedField, 360, 0};
      clean_miou[key] = run(clean).miou;
    }
    // a zero clean baseline (untrained model) makes rho undefined; report 1
    // rather than aborting the whole sweep
    r.retention = clean_miou[key] > 0 ? retention(clean_miou[key], r.miou) : 1.0;
    reports.push_back(std::move(r));
  }
  return reports;
}

}  // namespace metabev
