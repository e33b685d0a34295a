#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "metabev/decoder.hpp"
#include "metabev/gradcheck.hpp"

using namespace metabev;
using T = Tensor<double>;
using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

namespace {

Mat as_mat(const T& t) {
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      t.value().data(), t.dim(0), t.dim(1));
}

Vec as_vec(const ArrayX<double>& a) { return Eigen::Map<const Vec>(a.data(), a.size()); }

void randomize(ParamStore<double>& ps, Rng& rng, double scale) {
  for (auto& [name, p] : ps.entries()) {
    ArrayX<double> v(p.size());
    for (long i = 0; i < v.size(); ++i) v[i] = rng.uniform(-scale, scale);
    p.mutable_value() = v;
  }
}

Vec norm_row(const Vec& x, const Vec& gain, const Vec& bias, double eps = 1e-6) {
  double mu = x.mean();
  Vec c = x.array() - mu;
  double var = c.squaredNorm() / x.size();
  return ((c / std::sqrt(var + eps)).array() * gain.array() + bias.array()).matrix();
}

double bilinear_at(const Mat& plane, double px, double py) {
  long j0 = static_cast<long>(std::floor(px)), i0 = static_cast<long>(std::floor(py));
  double fx = px - j0, fy = py - i0;
  auto at = [&](long i, long j) {
    return (i >= 0 && i < plane.rows() && j >= 0 && j < plane.cols()) ? plane(i, j) : 0.0;
  };
  return (1 - fx) * (1 - fy) * at(i0, j0) + fx * (1 - fy) * at(i0, j0 + 1) +
         (1 - fx) * fy * at(i0 + 1, j0) + fx * fy * at(i0 + 1, j0 + 1);
}

// plain-Eigen loop reimplementation of the cross-attention sublayer
Mat oracle_cross_attn(const MetaBEVQueries<double>& q,
                      const std::map<std::string, BEVGrid<double>>& feats,
                      const std::vector<std::string>& mods, const DeformAttnLayer<double>& layer) {
  int dm = q.dm(), qn = q.count(), m = layer.heads, k = layer.points, dh = dm / m;
  int nm = static_cast<int>(mods.size());
  Mat wout = as_mat(layer.output_proj.weight);
  Vec bout = as_vec(layer.output_proj.bias.value());
  Mat wval = as_mat(layer.value_proj.weight);
  Vec bval = as_vec(layer.value_proj.bias.value());
  Vec gain = as_vec(layer.attn_norm.gain.value());
  Vec nbias = as_vec(layer.attn_norm.bias.value());

  // projected value planes per modality: dm planes of [H, W]
  std::map<std::string, std::vector<Mat>> planes;
  for (const auto& name : mods) {
    const T& g = feats.at(name).data;
    int c = g.dim(0), h = g.dim(1), w = g.dim(2);
    long cells = static_cast<long>(h) * w;
    std::vector<Mat> pl(static_cast<size_t>(dm), Mat::Zero(h, w));
    for (long cell = 0; cell < cells; ++cell) {
      Vec in(c);
      for (int ch = 0; ch < c; ++ch) in[ch] = g.value()[ch * cells + cell];
      Vec out = wval * in + bval;
      for (int ch = 0; ch < dm; ++ch) pl[static_cast<size_t>(ch)](cell / w, cell % w) = out[ch];
    }
    planes[name] = std::move(pl);
  }

  Mat result(qn, dm);
  for (int qi = 0; qi < qn; ++qi) {
    Vec qrow(dm), pe(dm);
    for (int c = 0; c < dm; ++c) {
      qrow[c] = q.queries.value()[static_cast<long>(qi) * dm + c];
      pe[c] = q.pos_embed.value()[static_cast<long>(qi) * dm + c];
    }
    Vec qpe = norm_row(qrow, gain, nbias) + pe;

    std::map<std::string, Vec> offs, logits;
    for (const auto& name : mods) {
      offs[name] = as_mat(layer.offset_heads.at(name).weight) * qpe +
                   as_vec(layer.offset_heads.at(name).bias.value());
      logits[name] = as_mat(layer.weight_heads.at(name).weight) * qpe +
                     as_vec(layer.weight_heads.at(name).bias.value());
    }

    Vec acc = Vec::Zero(dm);
    for (int h = 0; h < m; ++h) {
      // joint softmax over this head's logits across all present modalities
      Vec joint(nm * k);
      for (int mi = 0; mi < nm; ++mi)
        for (int kk = 0; kk < k; ++kk) joint[mi * k + kk] = logits[mods[mi]][h * k + kk];
      Vec w = (joint.array() - joint.maxCoeff()).exp();
      w /= w.sum();

      for (int mi = 0; mi < nm; ++mi) {
        const auto& name = mods[static_cast<size_t>(mi)];
        const T& g = feats.at(name).data;
        double gw = g.dim(2), gh = g.dim(1);
        double rx = q.ref_points[static_cast<size_t>(qi)].first * gw - 0.5;
        double ry = q.ref_points[static_cast<size_t>(qi)].second * gh - 0.5;
        for (int kk = 0; kk < k; ++kk) {
          double px = rx + offs[name][(h * k + kk) * 2];
          double py = ry + offs[name][(h * k + kk) * 2 + 1];
          for (int c = 0; c < dh; ++c)
            acc[h * dh + c] +=
                w[mi * k + kk] * bilinear_at(planes[name][static_cast<size_t>(h * dh + c)], px, py);
        }
      }
    }
    result.row(qi) = (qrow + wout * acc + bout).transpose();
  }
  return result;
}

struct Setup {
  ParamStore<double> ps;
  MetaBEVQueries<double> q;
  DeformAttnLayer<double> layer;
};

}  // namespace

TEST_CASE("make_reference_points: row-major cell centers in (0,1)^2") {
  auto pts = make_reference_points(2, 3);
  REQUIRE(pts.size() == 6);
  CHECK(pts[0].first == doctest::Approx(0.5 / 3));   // x from the column index
  CHECK(pts[0].second == doctest::Approx(0.25));     // y from the row index
  CHECK(pts[1].first == doctest::Approx(1.5 / 3));
  CHECK(pts[1].second == doctest::Approx(0.25));
  CHECK(pts[3].second == doctest::Approx(0.75));
  CHECK_THROWS(make_reference_points(0, 3));
}

TEST_CASE("degenerate M=1 K=1 zero-init layer reads the value at the query center") {
  ParamStore<double> ps;
  Rng rng(11);
  int dm = 3, x = 4, y = 4, c = 2;
  auto q = MetaBEVQueries<double>::create(ps, "q", x, y, dm, rng);
  auto layer = DeformAttnLayer<double>::create(ps, "l", dm, c, 1, 1, {kCamera, kLidar},
                                               FfnKind::Plain, 4, 0, 0, rng);
  GridSpec spec = GridSpec::square(4, 2.0);
  ArrayX<double> gv(static_cast<long>(c) * x * y);
  Rng gr(3);
  for (long i = 0; i < gv.size(); ++i) gv[i] = gr.uniform(-1, 1);
  std::map<std::string, BEVGrid<double>> feats;
  feats.emplace(kCamera, BEVGrid<double>{spec, T::from_array({c, x, y}, gv)});

  T out = cross_modal_deform_attn(q, feats, layer);
  REQUIRE(out.shape() == Shape{x * y, dm});

  Mat wout = as_mat(layer.output_proj.weight);
  Vec bout = as_vec(layer.output_proj.bias.value());
  Mat wval = as_mat(layer.value_proj.weight);
  Vec bval = as_vec(layer.value_proj.bias.value());
  long cells = static_cast<long>(x) * y;
  for (long cell = 0; cell < cells; ++cell) {
    // zero offsets + cell-center references: the single sample sits exactly on
    // the query's own cell, and the lone softmax weight is 1
    Vec vin(c);
    for (int ch = 0; ch < c; ++ch) vin[ch] = gv[ch * cells + cell];
    Vec expected = wout * (wval * vin + bval) + bout;
    for (int ch = 0; ch < dm; ++ch)
      CHECK(out.value()[cell * dm + ch] ==
            doctest::Approx(q.queries.value()[cell * dm + ch] + expected[ch]).epsilon(1e-12));
  }
}

TEST_CASE("naive Eigen oracle matches the fused path on random tiny configs") {
  Rng rng(2024);
  int trials = 60;
  for (int trial = 0; trial < trials; ++trial) {
    int m = 1 << rng.uniform_int(3);            // 1, 2 or 4 heads
    int dm = m * (1 + rng.uniform_int(2));      // Dh of 1 or 2
    int k = 1 + rng.uniform_int(3);
    int x = 1 + rng.uniform_int(3), y = 1 + rng.uniform_int(3);
    int c = 1 + rng.uniform_int(3);

    ParamStore<double> ps;
    Rng prng(rng.uniform_int(1 << 20));
    auto q = MetaBEVQueries<double>::create(ps, "q", x, y, dm, prng);
    auto layer = DeformAttnLayer<double>::create(ps, "l", dm, c, m, k, {kCamera, kLidar},
                                                 FfnKind::Plain, 4, 0, 0, prng);
    randomize(ps, prng, 1.2);  // nonzero offset heads push samples off-lattice and off-grid

    std::map<std::string, BEVGrid<double>> feats;
    std::vector<std::string> mods;
    int subset = trial % 3;  // camera-only, lidar-only, both
    auto add_grid = [&](const std::string& name) {
      int h = 2 + prng.uniform_int(3), w = 2 + prng.uniform_int(3);
      ArrayX<double> gv(static_cast<long>(c) * h * w);
      for (long i = 0; i < gv.size(); ++i) gv[i] = prng.uniform(-1, 1);
      feats.emplace(name, BEVGrid<double>{GridSpec::square(std::max(h, w), 2.0),
                                          T::from_array({c, h, w}, gv)});
      mods.push_back(name);
    };
    if (subset != 1) add_grid(kCamera);
    if (subset != 0) add_grid(kLidar);
    std::sort(mods.begin(), mods.end());  // fused path iterates the map in key order

    T out = cross_modal_deform_attn(q, feats, layer);
    Mat expect = oracle_cross_attn(q, feats, mods, layer);
    double worst = 0;
    for (int qi = 0; qi < q.count(); ++qi)
      for (int ch = 0; ch < dm; ++ch)
        worst = std::max(worst,
                         std::abs(out.value()[static_cast<long>(qi) * dm + ch] - expect(qi, ch)));
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("tied heads on identical grids: dual-modality output equals single-modality") {
  ParamStore<double> ps;
  Rng rng(7);
  int dm = 4, m = 2, k = 2, c = 3;
  auto q = MetaBEVQueries<double>::create(ps, "q", 3, 3, dm, rng);
  auto layer = DeformAttnLayer<double>::create(ps, "l", dm, c, m, k, {kCamera, kLidar},
                                               FfnKind::Plain, 4, 0, 0, rng);
  randomize(ps, rng, 0.8);
  // tie the lidar heads to the camera heads
  layer.offset_heads.at(kLidar).weight.mutable_value() =
      layer.offset_heads.at(kCamera).weight.value();
  layer.offset_heads.at(kLidar).bias.mutable_value() = layer.offset_heads.at(kCamera).bias.value();
  layer.weight_heads.at(kLidar).weight.mutable_value() =
      layer.weight_heads.at(kCamera).weight.value();
  layer.weight_heads.at(kLidar).bias.mutable_value() = layer.weight_heads.at(kCamera).bias.value();

  ArrayX<double> gv(static_cast<long>(c) * 9);
  Rng gr(5);
  for (long i = 0; i < gv.size(); ++i) gv[i] = gr.uniform(-1, 1);
  BEVGrid<double> grid{GridSpec::square(3, 2.0), T::from_array({c, 3, 3}, gv)};

  std::map<std::string, BEVGrid<double>> both{{kCamera, grid}, {kLidar, grid}};
  std::map<std::string, BEVGrid<double>> single{{kCamera, grid}};
  T a = cross_modal_deform_attn(q, both, layer);
  T b = cross_modal_deform_attn(q, single, layer);
  // the joint softmax halves each duplicate weight, but the duplicate sample
  // pairs restore the single-modality sum exactly
  CHECK((a.value() - b.value()).abs().maxCoeff() < 1e-12);
}

TEST_CASE("camera-only result is bit-identical with the lidar grid absent or merely inactive") {
  ParamStore<double> ps;
  Rng rng(13);
  int dm = 4, c = 2;
  auto q = MetaBEVQueries<double>::create(ps, "q", 2, 2, dm, rng);
  auto layer = DeformAttnLayer<double>::create(ps, "l", dm, c, 2, 2, {kCamera, kLidar},
                                               FfnKind::Plain, 4, 0, 0, rng);
  randomize(ps, rng, 0.7);
  ArrayX<double> ga(static_cast<long>(c) * 4), gb(static_cast<long>(c) * 4);
  Rng gr(8);
  for (long i = 0; i < ga.size(); ++i) ga[i] = gr.uniform(-1, 1), gb[i] = gr.uniform(-1, 1);
  BEVGrid<double> cam{GridSpec::square(2, 2.0), T::from_array({c, 2, 2}, ga)};
  BEVGrid<double> lid{GridSpec::square(2, 2.0), T::from_array({c, 2, 2}, gb)};

  std::map<std::string, BEVGrid<double>> only{{kCamera, cam}};
  std::map<std::string, BEVGrid<double>> with_lidar{{kCamera, cam}, {kLidar, lid}};
  std::set<std::string> active{kCamera};
  T a = cross_modal_deform_attn(q, only, layer);
  T b = cross_modal_deform_attn(q, with_lidar, layer, &active);
  CHECK((a.value() - b.value()).abs().maxCoeff() == 0.0);
}

TEST_CASE("camera-only backward leaves every lidar head parameter at zero gradient") {
  ParamStore<double> ps;
  Rng rng(17);
  int dm = 4, c = 2;
  auto q = MetaBEVQueries<double>::create(ps, "q", 2, 3, dm, rng);
  auto layer = DeformAttnLayer<double>::create(ps, "l", dm, c, 2, 2, {kCamera, kLidar},
                                               FfnKind::Plain, 4, 0, 0, rng);
  randomize(ps, rng, 0.6);
  ArrayX<double> gv(static_cast<long>(c) * 6);
  for (long i = 0; i < gv.size(); ++i) gv[i] = rng.uniform(-1, 1);
  std::map<std::string, BEVGrid<double>> feats{
      {kCamera, BEVGrid<double>{GridSpec::square(3, 2.0), T::from_array({c, 2, 3}, gv)}}};

  ps.zero_grads();
  sum(square(cross_modal_deform_attn(q, feats, layer))).backward();
  CHECK(layer.offset_heads.at(kLidar).weight.grad().abs().maxCoeff() == 0.0);
  CHECK(layer.offset_heads.at(kLidar).bias.grad().abs().maxCoeff() == 0.0);
  CHECK(layer.weight_heads.at(kLidar).weight.grad().abs().maxCoeff() == 0.0);
  CHECK(layer.weight_heads.at(kLidar).bias.grad().abs().maxCoeff() == 0.0);
  // and the camera heads did receive signal
  CHECK(layer.weight_heads.at(kCamera).weight.grad().abs().maxCoeff() > 0.0);
}

TEST_CASE("cross attention input validation") {
  ParamStore<double> ps;
  Rng rng(19);
  auto q = MetaBEVQueries<double>::create(ps, "q", 2, 2, 4, rng);
  auto layer = DeformAttnLayer<double>::create(ps, "l", 4, 2, 2, 2, {kCamera, kLidar},
                                               FfnKind::Plain, 4, 0, 0, rng);
  std::map<std::string, BEVGrid<double>> empty;
  CHECK_THROWS_WITH_AS(cross_modal_deform_attn(q, empty, layer),
                       doctest::Contains("no modality"), std::invalid_argument);
  std::map<std::string, BEVGrid<double>> bogus{
      {"radar", BEVGrid<double>{GridSpec::square(2, 2.0), T::zeros({2, 2, 2})}}};
  CHECK_THROWS_WITH_AS(cross_modal_deform_attn(q, bogus, layer),
                       doctest::Contains("unknown modality"), std::invalid_argument);
  std::map<std::string, BEVGrid<double>> cam{
      {kCamera, BEVGrid<double>{GridSpec::square(2, 2.0), T::zeros({2, 2, 2})}}};
  std::set<std::string> want_lidar{kLidar};
  CHECK_THROWS_AS(cross_modal_deform_attn(q, cam, layer, &want_lidar), std::invalid_argument);
}

TEST_CASE("self attention with zero-init heads projects each query's own cell") {
  ParamStore<double> ps;
  Rng rng(23);
  int dm = 3, x = 3, y = 2;
  auto q = MetaBEVQueries<double>::create(ps, "q", x, y, dm, rng);
  auto layer = DeformAttnLayer<double>::create(ps, "l", dm, dm, 1, 1, {"self"}, FfnKind::Plain, 4,
                                               0, 0, rng);
  T out = self_deform_attn(q, layer);

  Mat wout = as_mat(layer.output_proj.weight);
  Vec bout = as_vec(layer.output_proj.bias.value());
  Mat wval = as_mat(layer.value_proj.weight);
  Vec bval = as_vec(layer.value_proj.bias.value());
  Vec gain = as_vec(layer.attn_norm.gain.value());
  Vec nbias = as_vec(layer.attn_norm.bias.value());
  for (int qi = 0; qi < x * y; ++qi) {
    Vec row(dm);
    for (int c = 0; c < dm; ++c) row[c] = q.queries.value()[static_cast<long>(qi) * dm + c];
    Vec expected = row + wout * (wval * norm_row(row, gain, nbias) + bval) + bout;
    for (int c = 0; c < dm; ++c)
      CHECK(out.value()[static_cast<long>(qi) * dm + c] ==
            doctest::Approx(expected[c]).epsilon(1e-10));
  }
}

TEST_CASE("self attention equivariance under a query/raster swap with on-lattice samples") {
  ParamStore<double> ps;
  Rng rng(29);
  int dm = 4, x = 3, y = 3, qn = x * y;
  auto q = MetaBEVQueries<double>::create(ps, "q", x, y, dm, rng);
  auto layer = DeformAttnLayer<double>::create(ps, "l", dm, dm, 2, 1, {"self"}, FfnKind::Plain, 4,
                                               0, 0, rng);
  // randomize everything except the offset heads, so every sample stays
  // pinned to its own cell and swapping two tokens relabels, not resamples
  randomize(ps, rng, 0.8);
  layer.offset_heads.at("self").weight.mutable_value().setZero();
  layer.offset_heads.at("self").bias.mutable_value().setZero();

  T base = self_deform_attn(q, layer);
  int a = 1, b = 7;
  MetaBEVQueries<double> qs = q;
  ArrayX<double> qv = q.queries.value(), pv = q.pos_embed.value();
  qv.segment(static_cast<long>(a) * dm, dm).swap(qv.segment(static_cast<long>(b) * dm, dm));
  pv.segment(static_cast<long>(a) * dm, dm).swap(pv.segment(static_cast<long>(b) * dm, dm));
  qs.queries = T::from_array({qn, dm}, qv);
  qs.pos_embed = T::from_array({qn, dm}, pv);
  T swapped = self_deform_attn(qs, layer);

  for (int qi = 0; qi < qn; ++qi) {
    int src = qi == a ? b : qi == b ? a : qi;
    for (int c = 0; c < dm; ++c)
      CHECK(swapped.value()[static_cast<long>(qi) * dm + c] ==
            doctest::Approx(base.value()[static_cast<long>(src) * dm + c]).epsilon(1e-12));
  }
}

TEST_CASE("cross attention gradients vs finite differences") {
  ParamStore<double> ps;
  Rng rng(31);
  int dm = 4, m = 2, k = 2, c = 2, x = 2, y = 2;
  auto q = MetaBEVQueries<double>::create(ps, "q", x, y, dm, rng);
  auto layer = DeformAttnLayer<double>::create(ps, "l", dm, c, m, k, {kCamera, kLidar},
                                               FfnKind::Plain, 4, 0, 0, rng);
  randomize(ps, rng, 0.5);

  ArrayX<double> gc(static_cast<long>(c) * 9), gl(static_cast<long>(c) * 4), mask(4 * dm);
  Rng dr(41);
  for (long i = 0; i < gc.size(); ++i) gc[i] = dr.uniform(-1, 1);
  for (long i = 0; i < gl.size(); ++i) gl[i] = dr.uniform(-1, 1);
  for (long i = 0; i < mask.size(); ++i) mask[i] = dr.uniform(-1, 1);

  auto loss_value = [&]() {
    std::map<std::string, BEVGrid<double>> feats;
    feats.emplace(kCamera,
                  BEVGrid<double>{GridSpec::square(3, 2.0), T::from_array({c, 3, 3}, gc)});
    feats.emplace(kLidar,
                  BEVGrid<double>{GridSpec::square(2, 2.0), T::from_array({c, 2, 2}, gl)});
    return sum(mul(cross_modal_deform_attn(q, feats, layer), T::from_array({4, dm}, mask)));
  };
  ps.zero_grads();
  loss_value().backward();
  for (auto& [name, param] : ps.entries()) {
    ArrayX<double> p0 = param.value();
    auto fd = finite_difference_grad<double>(
        [&](const ArrayX<double>& v) {
          param.mutable_value() = v;
          double r = loss_value().item();
          param.mutable_value() = p0;
          return r;
        },
        p0, 1e-6);
    INFO("param ", name);
    CHECK(max_rel_error<double>(param.grad(), fd) < 1e-4);
  }
}

TEST_CASE("self attention gradients vs finite differences") {
  ParamStore<double> ps;
  Rng rng(37);
  int dm = 4, x = 2, y = 2;
  auto q = MetaBEVQueries<double>::create(ps, "q", x, y, dm, rng);
  auto layer =
      DeformAttnLayer<double>::create(ps, "l", dm, dm, 2, 2, {"self"}, FfnKind::Plain, 4, 0, 0, rng);
  randomize(ps, rng, 0.5);
  ArrayX<double> mask(4 * dm);
  Rng dr(43);
  for (long i = 0; i < mask.size(); ++i) mask[i] = dr.uniform(-1, 1);

  auto loss_value = [&]() {
    return sum(mul(self_deform_attn(q, layer), T::from_array({4, dm}, mask)));
  };
  ps.zero_grads();
  loss_value().backward();
  for (auto& [name, param] : ps.entries()) {
    ArrayX<double> p0 = param.value();
    auto fd = finite_difference_grad<double>(
        [&](const ArrayX<double>& v) {
          param.mutable_value() = v;
          double r = loss_value().item();
          param.mutable_value() = p0;
          return r;
        },
        p0, 1e-6);
    INFO("param ", name);
    CHECK(max_rel_error<double>(param.grad(), fd) < 1e-4);
  }
}

namespace {
struct StackSetup {
  ParamStore<double> ps;
  MetaBEVQueries<double> q;
  DecoderStack<double> stack;
  GridSpec spec = GridSpec::square(3, 3.0);
  int dm = 4, c = 2;

  StackSetup(int n_cross, int n_self, FfnKind kind, unsigned seed) {
    Rng rng(seed);
    q = MetaBEVQueries<double>::create(ps, "q", 3, 3, dm, rng);
    stack = DecoderStack<double>::create(ps, "dec", dm, c, n_cross, n_self, 2, 2, kind, 6, 4, 2,
                                        rng);
  }

  std::map<std::string, BEVGrid<double>> random_feats(unsigned seed) const {
    Rng gr(seed);
    ArrayX<double> gc(static_cast<long>(c) * 9), gl(static_cast<long>(c) * 9);
    for (long i = 0; i < gc.size(); ++i) gc[i] = gr.uniform(-1, 1), gl[i] = gr.uniform(-1, 1);
    std::map<std::string, BEVGrid<double>> f;
    f.emplace(kCamera, BEVGrid<double>{spec, T::from_array({c, 3, 3}, gc)});
    f.emplace(kLidar, BEVGrid<double>{spec, T::from_array({c, 3, 3}, gl)});
    return f;
  }
};
}  // namespace

TEST_CASE("decoder_forward: shape, determinism, and every modality subset") {
  for (FfnKind kind : {FfnKind::Plain, FfnKind::RM2oE, FfnKind::HM2oE}) {
    StackSetup s(2, 1, kind, 51);
    auto feats = s.random_feats(9);
    for (auto subset :
         std::vector<std::set<std::string>>{{kCamera}, {kLidar}, {kCamera, kLidar}}) {
      auto a = decoder_forward(s.q, feats, s.stack, s.spec, {true, true}, &subset);
      auto b = decoder_forward(s.q, feats, s.stack, s.spec, {true, true}, &subset);
      CHECK(a.data.shape() == Shape{s.dm, 3, 3});
      CHECK((a.data.value() - b.data.value()).abs().maxCoeff() == 0.0);
    }
  }
}

TEST_CASE("zero feature grids erase the modality distinction entirely") {
  StackSetup s(2, 1, FfnKind::Plain, 57);
  std::map<std::string, BEVGrid<double>> zero;
  zero.emplace(kCamera, BEVGrid<double>{s.spec, T::zeros({s.c, 3, 3})});
  zero.emplace(kLidar, BEVGrid<double>{s.spec, T::zeros({s.c, 3, 3})});
  // with all-zero values every weighted sample is zero, so the camera-only,
  // lidar-only and fused paths collapse to the same bias-driven output
  std::set<std::string> cam{kCamera}, lid{kLidar};
  auto a = decoder_forward(s.q, zero, s.stack, s.spec, {true, true}, &cam);
  auto b = decoder_forward(s.q, zero, s.stack, s.spec, {true, true}, &lid);
  auto c = decoder_forward(s.q, zero, s.stack, s.spec);
  CHECK((a.data.value() - b.data.value()).abs().maxCoeff() == 0.0);
  CHECK((a.data.value() - c.data.value()).abs().maxCoeff() == 0.0);
}

TEST_CASE("queries stay independent through the cross-attention stage") {
  StackSetup s(2, 0, FfnKind::Plain, 61);
  Rng rr(5);
  randomize(s.ps, rr, 0.4);
  auto feats = s.random_feats(11);
  auto base = decoder_forward(s.q, feats, s.stack, s.spec);

  int target = 4;
  ArrayX<double> qv = s.q.queries.value();
  for (int c = 0; c < s.dm; ++c) qv[static_cast<long>(target) * s.dm + c] += 0.3;
  MetaBEVQueries<double> q2 = s.q;
  q2.queries = T::from_array({9, s.dm}, qv);
  auto bumped = decoder_forward(q2, feats, s.stack, s.spec);

  long cells = 9;
  for (long cell = 0; cell < cells; ++cell)
    for (int c = 0; c < s.dm; ++c) {
      double delta = std::abs(bumped.data.value()[c * cells + cell] -
                              base.data.value()[c * cells + cell]);
      if (cell == target)
        CHECK(delta > 0.0);
      else
        CHECK(delta == 0.0);  // no cross-query mixing before self-attention
    }
}
