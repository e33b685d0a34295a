#pragma once

#include "metabev/corruptions.hpp"
#include "metabev/decoder.hpp"
#include "metabev/heads.hpp"

namespace metabev {

struct ModelConfig {
  // working grid
  int grid_cells = 24;
  double extent = 12.0;
  // sensor rig
  int n_views = 6;
  int img_h = 10;
  int img_w = 16;
  int lidar_beams = 32;
  int azimuth_steps = 90;
  // camera branch
  int cam_feat = 12;
  int depth_bins = 6;
  double depth_near = 1.0;
  double depth_far = 26.0;
  // decoder
  int dm = 32;
  int heads = 4;
  int points = 4;
  int n_cross = 2;
  int n_self = 1;
  FfnKind ffn_kind = FfnKind::RM2oE;
  int ffn_hidden = 48;
  int experts = 4;
  int moe_active = 2;
  // tasks
  int n_classes = 2;  // seg classes: drivable + vehicle
  int seg_hidden = 32;
  int det_hidden = 32;

  void validate() const {
    if (grid_cells < 2 || extent <= 0) throw std::invalid_argument("config: bad grid");
    if (dm % heads != 0) throw std::invalid_argument("config: dm must divide into heads");
    if (depth_bins < 1 || depth_far <= depth_near)
      throw std::invalid_argument("config: bad depth binning");
    if (n_classes < 2) throw std::invalid_argument("config: need at least 2 classes");
    if (ffn_kind == FfnKind::RM2oE && (moe_active < 1 || moe_active > experts))
      throw std::invalid_argument("config: bad expert counts");
  }

  std::uint64_t hash() const {
    std::string s;
    for (double v : {double(grid_cells), extent, double(n_views), double(img_h), double(img_w),
                     double(lidar_beams), double(azimuth_steps), double(cam_feat),
                     double(depth_bins), depth_near, depth_far, double(dm), double(heads),
                     double(points), double(n_cross), double(n_self),
                     double(static_cast<int>(ffn_kind)), double(ffn_hidden), double(experts),
                     double(moe_active), double(n_classes), double(seg_hidden),
                     double(det_hidden)})
      s += std::to_string(v) + "|";
    return fnv1a(s);
  }
};

template <typename S>
struct ModelOutput {
  BEVGrid<S> fused;
  Tensor<S> seg_logits;          // invalid when the seg task is off
  DetPrediction<S> det;          // tensors invalid when the det task is off
};

// The full pipeline: per-modality BEV encoders, shared queries, the evolving
// decoder, and both task heads. Camera parameters live under "cam.", LiDAR
// under "lidar.", so branch gradient isolation is checkable by name.
template <typename S>
struct Model {
  ModelConfig cfg;
  SensorRig rig;
  GridSpec grid;
  ParamStore<S> params;

  ChannelMlp<S> cam_view_mlp;     // view channels -> cam_feat, per pixel
  LinearLayer<S> cam_depth_head;  // cam_feat -> depth bins, per pixel
  ChannelMlp<S> cam_bev_encoder;  // cam_feat -> dm, per BEV cell
  ChannelMlp<S> lidar_encoder;    // pillar channels -> dm, per BEV cell
  MetaBEVQueries<S> queries;
  DecoderStack<S> decoder;
  SegHead<S> seg_head;
  DetHead<S> det_head;

  static Model create(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    m.rig = SensorRig::standard(cfg.n_views, cfg.img_h, cfg.img_w, cfg.lidar_beams,
                                cfg.azimuth_steps);
    m.grid = GridSpec::square(cfg.grid_cells, cfg.extent);
    Rng rng(seed);
    m.cam_view_mlp = ChannelMlp<S>::create(m.params, "cam.view_mlp",
                                           {view_channels(cfg.n_classes), cfg.cam_feat}, rng);
    m.cam_depth_head =
        LinearLayer<S>::create(m.params, "cam.depth_head", cfg.cam_feat, cfg.depth_bins, rng);
    m.cam_bev_encoder =
        ChannelMlp<S>::create(m.params, "cam.bev_encoder", {cfg.cam_feat, cfg.dm}, rng);
    m.lidar_encoder =
        ChannelMlp<S>::create(m.params, "lidar.encoder", {kPillarChannels, cfg.dm}, rng);
    m.queries = MetaBEVQueries<S>::create(m.params, "dec.queries", cfg.grid_cells,
                                          cfg.grid_cells, cfg.dm, rng);
    m.decoder = DecoderStack<S>::create(m.params, "dec", cfg.dm, cfg.dm, cfg.n_cross, cfg.n_self,
                                        cfg.heads, cfg.points, cfg.ffn_kind, cfg.ffn_hidden,
                                        cfg.experts, cfg.moe_active, rng);
    m.seg_head = SegHead<S>::create(m.params, "seg.head", cfg.dm, cfg.seg_hidden, cfg.n_classes,
                                    rng);
    m.det_head = DetHead<S>::create(m.params, "det.head", cfg.dm, cfg.det_hidden,
                                    cfg.n_classes - 1, rng);
    return m;
  }

  // camera pixels -> per-pixel features + unsupervised depth distribution ->
  // lift-splat -> per-cell encoder
  BEVGrid<S> encode_camera(const MultiViewSet& views) const {
    if (views.views.size() != rig.cameras.size())
      throw std::invalid_argument("encode_camera: view count does not match the rig");
    std::vector<Tensor<S>> feats;
    DepthDistribution<S> depth;
    depth.bins = cfg.depth_bins;
    depth.near = cfg.depth_near;
    depth.far = cfg.depth_far;
    auto raw = views_as_tensors<S>(views);
    for (size_t v = 0; v < raw.size(); ++v) {
      Tensor<S> f = cam_view_mlp(raw[v]);
      feats.push_back(f);
      Tensor<S> tok = ChannelMlp<S>::channels_to_tokens(f);  // [H*W, F]
      Tensor<S> w = softmax(cam_depth_head(tok), 1);         // [H*W, D]
      int h = f.dim(1), wd = f.dim(2);
      // [H*W, D] -> [D, H, W]
      depth.weights.push_back(
          reshape(ChannelMlp<S>::tokens_to_channels(w, h, wd), {cfg.depth_bins, h, wd}));
    }
    return encode(lift_splat(feats, depth, rig, grid), cam_bev_encoder);
  }

  BEVGrid<S> encode_lidar(const PointCloud& cloud) const {
    return encode(pillarize<S>(cloud, grid), lidar_encoder);
  }

  ModelOutput<S> forward(const ModalitySample& sample, TaskFlags tasks = {true, true}) const {
    if (sample.active.empty()) throw std::invalid_argument("forward: no active modality");
    std::map<std::string, BEVGrid<S>> feats;
    if (sample.active.count(kCamera)) feats.emplace(kCamera, encode_camera(sample.views));
    if (sample.active.count(kLidar)) feats.emplace(kLidar, encode_lidar(sample.cloud));
    ModelOutput<S> out{decoder_forward(queries, feats, decoder, grid, tasks), Tensor<S>(),
                       DetPrediction<S>{}};
    if (tasks.seg) out.seg_logits = seg_head(out.fused);
    if (tasks.det) out.det = det_head(out.fused);
    return out;
  }

  Tensor<S> loss(const ModelOutput<S>& out, const GroundTruth& gt, TaskFlags tasks = {true,
                                                                                      true}) const {
    if (tasks.det && tasks.seg)
      return joint_loss(det_loss(out.det, gt), seg_loss(out.seg_logits, gt.seg));
    if (tasks.det) return scale(det_loss(out.det, gt), static_cast<S>(kDetWeight));
    return scale(seg_loss(out.seg_logits, gt.seg), static_cast<S>(kSegWeight));
  }
};

// one fully generated synthetic training/eval item
struct WorldSample {
  Scene scene;
  ModalitySample data;
  GroundTruth gt;
};

inline WorldSample make_sample(std::uint64_t seed, const SensorRig& rig, const GridSpec& grid,
                               const SceneSpec& spec, int n_classes = 2) {
  WorldSample s;
  s.scene = generate_scene(seed, spec);
  s.data.cloud = raycast_lidar(s.scene, rig, seed ^ 0x5EEDu);
  s.data.views = render_views(s.scene, rig, n_classes);
  s.gt = rasterize_ground_truth(s.scene, grid, n_classes);
  return s;
}

}  // namespace metabev
