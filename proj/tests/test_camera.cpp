#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "bevfuse/camera.hpp"

using namespace bevfuse;

namespace {

double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

struct ToyRig {
  CameraCalib calib = make_forward_calib(40.0, 64, 64, 1.2);
  DepthBins bins{1.0, 17.0, 8};
  BevGrid grid{-8.0, 8.0, 0.0, 16.0, 16, 16};
};

FrustumFeatures toy_frustum(Rng& rng, const ToyRig& rig, int c = 2, int hf = 4, int wf = 4) {
  Feature2D f{Tensor::randn({c, hf, wf}, rng), 16};
  Tensor logits = Tensor::randn({rig.bins.n_bins, hf, wf}, rng);
  Tensor depth = softmax(logits, 0);
  return lift(f, depth, rig.calib, rig.bins);
}

}  // namespace

TEST_SUITE("camera") {
  TEST_CASE("se_condition zero MLP gates every channel by 0.5") {
    Rng rng(2);
    Tensor f = Tensor::randn({4, 6, 6}, rng);
    SeParams p = SeParams::make(4, 8);
    std::vector<double> cv(21, 0.3);
    Tensor out = se_condition(f, cv, p);
    for (std::int64_t i = 0; i < f.size(); ++i) CHECK(out[i] == doctest::Approx(0.5 * f[i]));
  }

  TEST_CASE("se_condition saturates to identity for large gate logits") {
    Rng rng(3);
    Tensor f = Tensor::randn({4, 5, 5}, rng);
    SeParams p = SeParams::make(4, 8);
    p.fc2.b.fill(40.0);  // sigmoid -> 1
    std::vector<double> cv(21, 0.0);
    Tensor out = se_condition(f, cv, p);
    for (std::int64_t i = 0; i < f.size(); ++i)
      CHECK(out[i] == doctest::Approx(f[i]).epsilon(1e-12));
  }

  TEST_CASE("se_condition rejects wrong calibration vector length") {
    Tensor f({4, 5, 5});
    SeParams p = SeParams::make(4, 8);
    std::vector<double> cv(20, 0.0);
    CHECK_THROWS_AS(se_condition(f, cv, p), ShapeError);
  }

  TEST_CASE("se_condition gradient check on 4x6x6") {
    Rng rng(5);
    for (int rep = 0; rep < 20; ++rep) {
      Tensor f = Tensor::randn({4, 6, 6}, rng);
      SeParams p = SeParams::init(4, 8, rng);
      std::vector<double> cv(21);
      for (auto& v : cv) v = rng.normal();
      Tensor probe = Tensor::randn({4, 6, 6}, rng);

      SeCtx ctx;
      se_condition(f, cv, p, &ctx);
      Tensor gf = f.zeros_like();
      SeParams gp = SeParams::make(4, 8);
      se_condition_backward(probe, f, cv, p, ctx, gf, gp);

      CHECK(grad_check([&](const Tensor& t) { return dot(se_condition(t, cv, p), probe); }, f, gf,
                       1e-5) <= 1e-4);
      // parameter gradients
      std::vector<Tensor*> fields, grads;
      p.visit([&](const char*, Tensor& t) { fields.push_back(&t); });
      gp.visit([&](const char*, Tensor& t) { grads.push_back(&t); });
      for (std::size_t i = 0; i < fields.size(); ++i) {
        Tensor saved = *fields[i];
        const double err = grad_check(
            [&](const Tensor& t) {
              *fields[i] = t;
              const double loss = dot(se_condition(f, cv, p), probe);
              *fields[i] = saved;
              return loss;
            },
            saved, *grads[i], 1e-5);
        *fields[i] = saved;
        CHECK(err <= 1e-4);
      }
    }
  }

  TEST_CASE("depth head: zero weights give the uniform distribution") {
    Rng rng(7);
    Tensor f = Tensor::randn({3, 4, 4}, rng);
    DepthHeadParams p = DepthHeadParams::make(5, 3);
    Tensor d = depth_head(f, p);
    for (std::int64_t i = 0; i < d.size(); ++i) CHECK(d[i] == doctest::Approx(0.2).epsilon(1e-12));
  }

  TEST_CASE("depth head distributions sum to one per pixel") {
    Rng rng(9);
    Tensor f = Tensor::randn({3, 4, 5}, rng);
    DepthHeadParams p = DepthHeadParams::init(6, 3, rng);
    Tensor d = depth_head(f, p);
    for (int iy = 0; iy < 4; ++iy)
      for (int ix = 0; ix < 5; ++ix) {
        double s = 0.0;
        for (int b = 0; b < 6; ++b) s += d.at(b, iy, ix);
        CHECK(std::fabs(s - 1.0) <= 1e-9);
      }
  }

  TEST_CASE("depth head saturates on a dominating logit") {
    Tensor f = Tensor::full({1, 2, 2}, 1.0);
    DepthHeadParams p = DepthHeadParams::make(8, 1);
    p.w.at(5, 0) = 100.0;
    Tensor d = depth_head(f, p);
    for (int iy = 0; iy < 2; ++iy)
      for (int ix = 0; ix < 2; ++ix) CHECK(d.at(5, iy, ix) > 1.0 - 1e-9);
  }

  TEST_CASE("lift: one-hot depth lifts features into a single bin") {
    ToyRig rig;
    Rng rng(11);
    Feature2D f{Tensor::randn({2, 3, 3}, rng), 16};
    Tensor depth({rig.bins.n_bins, 3, 3});
    const int hot = 4;
    for (int iy = 0; iy < 3; ++iy)
      for (int ix = 0; ix < 3; ++ix) depth.at(hot, iy, ix) = 1.0;
    FrustumFeatures ff = lift(f, depth, rig.calib, rig.bins);
    for (int ch = 0; ch < 2; ++ch)
      for (int b = 0; b < rig.bins.n_bins; ++b)
        for (int iy = 0; iy < 3; ++iy)
          for (int ix = 0; ix < 3; ++ix) {
            const double want = b == hot ? f.t.at(ch, iy, ix) : 0.0;
            CHECK(ff.features.at(ch, b, iy, ix) == doctest::Approx(want));
          }
  }

  TEST_CASE("lift: uniform depth splits features evenly; depth sums recover features") {
    ToyRig rig;
    Rng rng(13);
    const int d = rig.bins.n_bins;
    Feature2D f{Tensor::randn({2, 3, 3}, rng), 16};
    Tensor depth = Tensor::full({d, 3, 3}, 1.0 / d);
    FrustumFeatures ff = lift(f, depth, rig.calib, rig.bins);
    for (int ch = 0; ch < 2; ++ch)
      for (int iy = 0; iy < 3; ++iy)
        for (int ix = 0; ix < 3; ++ix)
          CHECK(ff.features.at(ch, 0, iy, ix) == doctest::Approx(f.t.at(ch, iy, ix) / d));

    // sum over depth equals the feature map for any distribution
    Tensor logits = Tensor::randn({d, 3, 3}, rng);
    Tensor dist = softmax(logits, 0);
    FrustumFeatures ff2 = lift(f, dist, rig.calib, rig.bins);
    for (int ch = 0; ch < 2; ++ch)
      for (int iy = 0; iy < 3; ++iy)
        for (int ix = 0; ix < 3; ++ix) {
          double s = 0.0;
          for (int b = 0; b < d; ++b) s += ff2.features.at(ch, b, iy, ix);
          CHECK(s == doctest::Approx(f.t.at(ch, iy, ix)).epsilon(1e-12));
        }
  }

  TEST_CASE("pooling: single point lands in its cell; same-cell features add") {
    ToyRig rig;
    FrustumFeatures ff;
    ff.features = Tensor({2, 2, 1, 1});
    ff.features.at(0, 0, 0, 0) = 1.5;
    ff.features.at(1, 0, 0, 0) = -2.0;
    ff.features.at(0, 1, 0, 0) = 0.5;
    ff.features.at(1, 1, 0, 0) = 1.0;
    ff.ego = {{1.0, 3.0, 0.0}, {1.0, 3.0, 0.0}};  // same cell
    Tensor bev = voxel_pool_reference(ff, rig.grid);
    const auto cell = world_to_cell(1.0, 3.0, rig.grid);
    REQUIRE(cell.has_value());
    double total0 = 0.0;
    for (int iy = 0; iy < rig.grid.ny; ++iy)
      for (int ix = 0; ix < rig.grid.nx; ++ix) total0 += std::fabs(bev.at(0, iy, ix));
    CHECK(bev.at(0, cell->second, cell->first) == doctest::Approx(2.0));
    CHECK(bev.at(1, cell->second, cell->first) == doctest::Approx(-1.0));
    CHECK(total0 == doctest::Approx(2.0));  // nothing anywhere else
  }

  TEST_CASE("pooling is bit-identical under frustum point permutation") {
    ToyRig rig;
    Rng rng(15);
    FrustumFeatures ff = toy_frustum(rng, rig);
    Tensor a = voxel_pool_reference(ff, rig.grid);

    // permute the point storage order (channels move together)
    const int n = static_cast<int>(ff.ego.size());
    std::vector<int> perm(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
    for (int i = n - 1; i > 0; --i) std::swap(perm[static_cast<std::size_t>(i)],
                                              perm[static_cast<std::size_t>(rng.uniform_int(0, i))]);
    FrustumFeatures shuffled;
    shuffled.features = ff.features.zeros_like();
    shuffled.ego.resize(ff.ego.size());
    shuffled.point_id.resize(ff.ego.size());
    const int c = ff.features.extent(0);
    for (int i = 0; i < n; ++i) {
      shuffled.ego[static_cast<std::size_t>(i)] = ff.ego[static_cast<std::size_t>(perm[i])];
      shuffled.point_id[static_cast<std::size_t>(i)] = ff.point_id[static_cast<std::size_t>(perm[i])];
      for (int ch = 0; ch < c; ++ch)
        shuffled.features[static_cast<std::int64_t>(ch) * n + i] =
            ff.features[static_cast<std::int64_t>(ch) * n + perm[i]];
    }
    Tensor b = voxel_pool_reference(shuffled, rig.grid);
    for (std::int64_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);  // bitwise
    Tensor ae = voxel_pool_efficient(ff, rig.grid);
    Tensor be = voxel_pool_efficient(shuffled, rig.grid);
    for (std::int64_t i = 0; i < ae.size(); ++i) CHECK(ae[i] == be[i]);  // bitwise
  }

  TEST_CASE("efficient pooling equals the reference on random instances") {
    ToyRig rig;
    Rng rng(17);
    for (int rep = 0; rep < 10; ++rep) {
      FrustumFeatures ff = toy_frustum(rng, rig, 3, 5, 5);
      Tensor a = voxel_pool_reference(ff, rig.grid);
      Tensor b = voxel_pool_efficient(ff, rig.grid);
      for (std::int64_t i = 0; i < a.size(); ++i) CHECK(std::fabs(a[i] - b[i]) <= 1e-9);
    }
  }

  TEST_CASE("empty frustum pools to an all-zero map") {
    ToyRig rig;
    FrustumFeatures ff;
    ff.features = Tensor({2, 0, 1, 1});
    Tensor bev = voxel_pool_efficient(ff, rig.grid);
    for (std::int64_t i = 0; i < bev.size(); ++i) CHECK(bev[i] == 0.0);
  }

  TEST_CASE("pooling conserves in-grid feature mass per channel") {
    ToyRig rig;
    Rng rng(19);
    FrustumFeatures ff = toy_frustum(rng, rig, 3, 6, 6);
    const auto ids = frustum_cell_ids(ff, rig.grid);
    Tensor bev = voxel_pool_efficient(ff, rig.grid);
    const std::int64_t npts = static_cast<std::int64_t>(ff.ego.size());
    for (int ch = 0; ch < 3; ++ch) {
      double mass_in = 0.0;
      for (std::int64_t i = 0; i < npts; ++i)
        if (ids[static_cast<std::size_t>(i)] >= 0) mass_in += ff.features[ch * npts + i];
      double mass_bev = 0.0;
      for (std::int64_t i = 0; i < static_cast<std::int64_t>(rig.grid.nx) * rig.grid.ny; ++i)
        mass_bev += bev[static_cast<std::int64_t>(ch) * rig.grid.nx * rig.grid.ny + i];
      CHECK(std::fabs(mass_in - mass_bev) <= 1e-9);
    }
  }

  TEST_CASE("pool backward scatters cell gradients to points") {
    ToyRig rig;
    Rng rng(21);
    FrustumFeatures ff = toy_frustum(rng, rig);
    Tensor probe = Tensor::randn({2, rig.grid.ny, rig.grid.nx}, rng);
    Tensor gfeat = ff.features.zeros_like();
    voxel_pool_backward(probe, ff, rig.grid, gfeat);
    CHECK(grad_check(
              [&](const Tensor& t) {
                FrustumFeatures f2{t, ff.ego, ff.point_id};
                return dot(voxel_pool_efficient(f2, rig.grid), probe);
              },
              ff.features, gfeat, 1e-5) <= 1e-6);
  }

  TEST_CASE("depth loss: perfect one-hot prediction is ~zero") {
    Tensor gt({3, 2, 2});
    gt.at(0, 0, 0) = 1.0;
    gt.at(2, 1, 1) = 1.0;
    Tensor pred = gt;
    const auto res = depth_loss(pred, gt);
    CHECK(res.any_valid);
    CHECK(res.loss <= 1e-10);
  }

  TEST_CASE("depth loss: uniform over two bins is ln 2") {
    Tensor gt({2, 1, 1});
    gt.at(0, 0, 0) = 1.0;
    Tensor pred = Tensor::full({2, 1, 1}, 0.5);
    const auto res = depth_loss(pred, gt);
    CHECK(res.loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }

  TEST_CASE("depth loss: no valid pixels flags and returns zero") {
    Tensor gt({3, 2, 2});
    Tensor pred = Tensor::full({3, 2, 2}, 1.0 / 3);
    const auto res = depth_loss(pred, gt);
    CHECK_FALSE(res.any_valid);
    CHECK(res.loss == 0.0);
  }

  TEST_CASE("depth loss gradient on a 3-bin toy") {
    Rng rng(23);
    for (int rep = 0; rep < 20; ++rep) {
      Tensor gt({3, 2, 2});
      gt.at(rng.uniform_int(0, 2), 0, 0) = 1.0;
      gt.at(rng.uniform_int(0, 2), 1, 1) = 1.0;
      Tensor logits = Tensor::randn({3, 2, 2}, rng);
      Tensor pred = softmax(logits, 0);
      Tensor gpred = pred.zeros_like();
      depth_loss_backward(1.0, pred, gt, gpred);
      CHECK(grad_check([&](const Tensor& t) { return depth_loss(t, gt).loss; }, pred, gpred,
                       1e-6) <= 1e-4);
    }
  }

  TEST_CASE("end-to-end camera branch gradient on a 2-channel 4x4 toy") {
    ToyRig rig;
    Rng rng(25);
    const int c = 2, hf = 4, wf = 4;
    Feature2D feat{Tensor::randn({c, hf, wf}, rng), 16};
    SeParams se = SeParams::init(c, 6, rng);
    DepthHeadParams dh = DepthHeadParams::init(rig.bins.n_bins, c, rng);
    std::vector<double> cv = flatten_calib(rig.calib);
    Tensor probe = Tensor::randn({c, rig.grid.ny, rig.grid.nx}, rng);

    auto forward = [&]() {
      SeCtx se_ctx;
      Tensor cond = se_condition(feat.t, cv, se, &se_ctx);
      Tensor dist = depth_head(cond, dh);
      Feature2D f2{cond, feat.stride_pixels};
      FrustumFeatures ff = lift(f2, dist, rig.calib, rig.bins);
      return dot(voxel_pool_efficient(ff, rig.grid), probe);
    };

    // analytic gradient w.r.t. the input feature map
    SeCtx se_ctx;
    Tensor cond = se_condition(feat.t, cv, se, &se_ctx);
    Tensor dist = depth_head(cond, dh);
    Feature2D f2{cond, feat.stride_pixels};
    FrustumFeatures ff = lift(f2, dist, rig.calib, rig.bins);
    Tensor gff(ff.features.shape());
    voxel_pool_backward(probe, ff, rig.grid, gff);
    Tensor gcond(cond.shape());
    Tensor gdist(dist.shape());
    lift_backward(gff, f2, dist, gcond, gdist);
    DepthHeadParams gdh = DepthHeadParams::make(rig.bins.n_bins, c);
    depth_head_backward(gdist, cond, dh, dist, gcond, gdh);
    Tensor gfeat(feat.t.shape());
    SeParams gse = SeParams::make(c, 6);
    se_condition_backward(gcond, feat.t, cv, se, se_ctx, gfeat, gse);

    CHECK(grad_check(
              [&](const Tensor& t) {
                Tensor saved = feat.t;
                feat.t = t;
                const double loss = forward();
                feat.t = saved;
                return loss;
              },
              feat.t, gfeat, 1e-5) <= 1e-4);
  }
}
