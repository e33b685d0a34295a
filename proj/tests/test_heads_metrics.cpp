#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "metabev/gradcheck.hpp"
#include "metabev/metrics.hpp"

using namespace metabev;
using T = Tensor<double>;

TEST_CASE("seg_loss closed forms and saturation") {
  std::vector<std::uint8_t> gt{1, 0, 0, 1};
  T zero = T::zeros({1, 2, 2});
  CHECK(seg_loss(zero, gt).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  ArrayX<double> sat(4);
  for (int i = 0; i < 4; ++i) sat[i] = gt[static_cast<size_t>(i)] ? 20.0 : -20.0;
  CHECK(seg_loss(T::from_array({1, 2, 2}, sat), gt).item() < 1e-3);

  std::vector<std::uint8_t> wrong{1, 0};
  CHECK_THROWS_AS(seg_loss(zero, wrong), std::invalid_argument);
}

TEST_CASE("seg_loss gradient vs finite differences on a 2x2 grid") {
  std::vector<std::uint8_t> gt{1, 0, 1, 1, 0, 0, 1, 0};
  Rng rng(3);
  ArrayX<double> x0(8);
  for (long i = 0; i < 8; ++i) x0[i] = rng.uniform(-2, 2);
  T x = T::from_array({2, 2, 2}, x0, true);
  seg_loss(x, gt).backward();
  auto fd = finite_difference_grad<double>(
      [&](const ArrayX<double>& v) { return seg_loss(T::from_array({2, 2, 2}, v), gt).item(); },
      x0, 1e-6);
  CHECK(max_rel_error<double>(x.grad(), fd) < 1e-6);
}

namespace {
GroundTruth one_box_gt(GridSpec grid) {
  Scene scene;
  scene.bound = 10;
  Box box;
  box.cx = 2.0;
  box.cy = -1.0;
  box.w = 2.0;
  box.l = 4.0;
  box.yaw = 0.4;
  scene.boxes.push_back(box);
  return rasterize_ground_truth(scene, grid);
}

DetPrediction<double> perfect_pred(const GroundTruth& gt) {
  long cells = gt.grid.cells();
  ArrayX<double> heat(cells);
  for (long i = 0; i < cells; ++i) heat[i] = gt.heatmap[i] == 1.0 ? 20.0 : -20.0;
  ArrayX<double> reg = gt.regression.cast<double>();
  return {T::from_array({1, gt.grid.x_cells, gt.grid.y_cells}, heat),
          T::from_array({5, gt.grid.x_cells, gt.grid.y_cells}, reg)};
}
}  // namespace

TEST_CASE("det_loss: perfect prediction scores near zero, empty scene kills the L1 term") {
  GridSpec grid = GridSpec::square(20, 10.0);
  GroundTruth gt = one_box_gt(grid);
  REQUIRE(gt.heatmap.maxCoeff() == 1.0);  // integer-center peak
  CHECK(det_loss(perfect_pred(gt), gt).item() < 1e-3);

  Scene empty;
  empty.bound = 10;
  GroundTruth egt = rasterize_ground_truth(empty, grid);
  Rng rng(5);
  ArrayX<double> heat(grid.cells()), ra(5 * grid.cells()), rb(5 * grid.cells());
  for (long i = 0; i < heat.size(); ++i) heat[i] = rng.uniform(-2, 2);
  for (long i = 0; i < ra.size(); ++i) ra[i] = rng.uniform(-2, 2), rb[i] = rng.uniform(-2, 2);
  DetPrediction<double> pa{T::from_array({1, 20, 20}, heat), T::from_array({5, 20, 20}, ra)};
  DetPrediction<double> pb{T::from_array({1, 20, 20}, heat), T::from_array({5, 20, 20}, rb)};
  // with no positive cell the regression channels are invisible to the loss
  CHECK(det_loss(pa, egt).item() == det_loss(pb, egt).item());
}

TEST_CASE("det_loss gradient vs finite differences on a 3x3 grid") {
  GridSpec grid = GridSpec::square(3, 3.0);
  Scene scene;
  scene.bound = 3;
  Box box;
  box.w = box.l = 1.5;
  scene.boxes.push_back(box);
  GroundTruth gt = rasterize_ground_truth(scene, grid);
  REQUIRE(std::count(gt.pos.begin(), gt.pos.end(), 1) == 1);

  Rng rng(7);
  ArrayX<double> h0(9), r0(45);
  for (long i = 0; i < 9; ++i) h0[i] = rng.uniform(-1.5, 1.5);
  for (long i = 0; i < 45; ++i) r0[i] = rng.uniform(-1, 1);

  T h = T::from_array({1, 3, 3}, h0, true);
  T r = T::from_array({5, 3, 3}, r0, true);
  det_loss(DetPrediction<double>{h, r}, gt).backward();
  auto fdh = finite_difference_grad<double>(
      [&](const ArrayX<double>& v) {
        return det_loss(DetPrediction<double>{T::from_array({1, 3, 3}, v),
                                              T::from_array({5, 3, 3}, r0)},
                        gt)
            .item();
      },
      h0, 1e-6);
  auto fdr = finite_difference_grad<double>(
      [&](const ArrayX<double>& v) {
        return det_loss(DetPrediction<double>{T::from_array({1, 3, 3}, h0),
                                              T::from_array({5, 3, 3}, v)},
                        gt)
            .item();
      },
      r0, 1e-6);
  CHECK(max_rel_error<double>(h.grad(), fdh) < 1e-4);
  CHECK(max_rel_error<double>(r.grad(), fdr) < 1e-4);
}

TEST_CASE("joint loss is 10*det + 1*seg and decomposes cleanly") {
  GridSpec grid = GridSpec::square(4, 4.0);
  GroundTruth gt = one_box_gt(grid);
  Rng rng(9);
  ArrayX<double> h(16), r(80), s(32);
  for (long i = 0; i < 16; ++i) h[i] = rng.uniform(-1, 1);
  for (long i = 0; i < 80; ++i) r[i] = rng.uniform(-1, 1);
  for (long i = 0; i < 32; ++i) s[i] = rng.uniform(-1, 1);
  DetPrediction<double> dp{T::from_array({1, 4, 4}, h), T::from_array({5, 4, 4}, r)};
  T det = det_loss(dp, gt);
  T seg = seg_loss(T::from_array({2, 4, 4}, s), gt.seg);
  CHECK(joint_loss(det, seg).item() ==
        doctest::Approx(10 * det.item() + seg.item()).epsilon(1e-12));
  // a different set of seg logits leaves the det term bit-unchanged
  ArrayX<double> s2 = s + 0.5;
  T det2 = det_loss(dp, gt);
  (void)seg_loss(T::from_array({2, 4, 4}, s2), gt.seg);
  CHECK(det2.item() == det.item());
}

TEST_CASE("miou counting conventions") {
  // 1 class, 8 cells
  std::vector<std::uint8_t> a{1, 1, 0, 0, 1, 0, 0, 1}, b = a;
  CHECK(miou(a, b, 1).second == 1.0);
  std::vector<std::uint8_t> c{0, 0, 1, 1, 0, 1, 0, 0};
  CHECK(miou(a, c, 1).second == 0.0);

  // pred covers 2 of 4 gt cells, no false positives
  std::vector<std::uint8_t> gt4{1, 1, 1, 1, 0, 0, 0, 0}, pred2{1, 1, 0, 0, 0, 0, 0, 0};
  CHECK(miou(pred2, gt4, 1).second == doctest::Approx(0.5));

  // empty-vs-empty class scores 1, and mixes into the mean
  std::vector<std::uint8_t> two_cls_pred{1, 0, 0, 0, 0, 0, 0, 0};
  std::vector<std::uint8_t> two_cls_gt{1, 0, 0, 0, 0, 0, 0, 0};
  auto [per, mean] = miou(two_cls_pred, two_cls_gt, 2);
  CHECK(per[0] == 1.0);
  CHECK(per[1] == 1.0);
  CHECK(mean == 1.0);

  // symmetry on random masks
  Rng rng(11);
  for (int t = 0; t < 20; ++t) {
    std::vector<std::uint8_t> x(24), y(24);
    for (auto& v : x) v = rng.uniform_int(2);
    for (auto& v : y) v = rng.uniform_int(2);
    CHECK(miou(x, y, 3).second == miou(y, x, 3).second);
  }
  CHECK_THROWS_AS(miou(a, gt4, 3), std::invalid_argument);
}

TEST_CASE("bev_ap closed cases") {
  std::vector<Box> gt;
  Box b1;
  b1.cx = 2;
  b1.cy = 3;
  b1.w = 2;
  b1.l = 4;
  Box b2 = b1;
  b2.cx = -5;
  b2.yaw = 1.0;
  gt = {b1, b2};

  std::vector<DetBox> exact{{b1, 0.9}, {b2, 0.8}};
  CHECK(bev_ap(exact, gt) == doctest::Approx(1.0));
  CHECK(bev_ap({}, gt) == 0.0);
  CHECK(bev_ap({}, {}) == 1.0);

  // 1 correct + 1 spurious higher-scored prediction over 1 gt -> 0.5
  Box far = b1;
  far.cx = 40;
  std::vector<DetBox> mixed{{far, 0.95}, {b1, 0.8}};
  CHECK(bev_ap(mixed, {b1}) == doctest::Approx(0.5));

  // removing the false positive cannot lower AP
  CHECK(bev_ap({{b1, 0.8}}, {b1}) >= bev_ap(mixed, {b1}));
  // class mismatch never matches
  Box other = b1;
  other.class_id = 2;
  CHECK(bev_ap({{other, 0.9}}, {b1}) == 0.0);
}

TEST_CASE("retention follows the corrupted/full table convention") {
  CHECK(retention(1.0, 1.0) == 1.0);
  CHECK(retention(0.4, 0.0) == 0.0);
  CHECK_THROWS_AS(retention(0.0, 0.1), std::invalid_argument);
  // published percentages are truncated prints of corrupted/full
  CHECK(std::abs(100 * retention(0.629, 0.371) - 58.9) <= 0.1);
  CHECK(std::abs(100 * retention(0.704, 0.496) - 70.4) <= 0.1);
}

TEST_CASE("decode_detections recovers rasterized boxes and closes the AP loop") {
  GridSpec grid = GridSpec::square(24, 12.0);
  Scene scene;
  scene.bound = 12;
  Box b1;
  b1.cx = 3.2;
  b1.cy = -4.1;
  b1.w = 2.0;
  b1.l = 4.5;
  b1.yaw = 0.7;
  Box b2;
  b2.cx = -6.0;
  b2.cy = 5.5;
  b2.w = 2.4;
  b2.l = 3.6;
  b2.yaw = -1.2;
  scene.boxes = {b1, b2};
  GroundTruth gt = rasterize_ground_truth(scene, grid);

  long cells = grid.cells();
  ArrayX<double> heat(cells);
  for (long i = 0; i < cells; ++i) heat[i] = gt.heatmap[i] == 1.0 ? 10.0 : -10.0;
  DetPrediction<double> pred{T::from_array({1, 24, 24}, heat),
                             T::from_array({5, 24, 24}, gt.regression.cast<double>())};
  auto boxes = decode_detections(pred, grid);
  REQUIRE(boxes.size() == 2);
  for (const DetBox& d : boxes) {
    const Box& ref = std::abs(d.box.cx - b1.cx) < 1 ? b1 : b2;
    CHECK(d.box.cx == doctest::Approx(ref.cx).epsilon(1e-9));
    CHECK(d.box.cy == doctest::Approx(ref.cy).epsilon(1e-9));
    CHECK(d.box.w == doctest::Approx(ref.w).epsilon(1e-9));
    CHECK(d.box.l == doctest::Approx(ref.l).epsilon(1e-9));
    CHECK(d.box.yaw == doctest::Approx(ref.yaw).epsilon(1e-9));
  }
  CHECK(bev_ap(boxes, scene.boxes) == doctest::Approx(1.0));
}

TEST_CASE("head shapes and report serialization") {
  ParamStore<double> ps;
  Rng rng(13);
  int dm = 8;
  auto seg_head = SegHead<double>::create(ps, "seg", dm, 16, 2, rng);
  auto det_head = DetHead<double>::create(ps, "det", dm, 16, 1, rng);
  GridSpec grid = GridSpec::square(6, 6.0);
  BEVGrid<double> fused{grid, T::zeros({dm, 6, 6})};
  CHECK(seg_head(fused).shape() == Shape{2, 6, 6});
  auto dp = det_head(fused);
  CHECK(dp.heatmap.shape() == Shape{1, 6, 6});
  CHECK(dp.regression.shape() == Shape{5, 6, 6});

  MetricsReport r;
  r.per_class_iou = {0.5, 0.7};
  r.miou = 0.6;
  r.ap = 0.4;
  r.retention = 0.9;
  r.modality_subset = "camera+lidar";
  r.corruption = "limited_field";
  r.degree = 180;
  auto j = r.to_json();
  CHECK(j["miou"] == 0.6);
  CHECK(j["corruption"] == "limited_field");
  CHECK(r.csv_row() == "camera+lidar,limited_field,180,0,0.6,0.4,0.9");
  CHECK(MetricsReport::csv_header() == "modality,corruption,degree,seed,miou,ap,retention");
}
