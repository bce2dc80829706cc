#include <doctest.h>

#include <cmath>

#include "bevfuse/head.hpp"

using namespace bevfuse;

namespace {

const BevGrid kGrid{-8.0, 8.0, 0.0, 16.0, 16, 16};

Box3D make_box(double cx, double cy, int cls, double yaw = 0.3) {
  Box3D b;
  b.cx = cx;
  b.cy = cy;
  b.cz = 0.9;
  b.l = 3.8;
  b.w = 1.7;
  b.h = 1.5;
  b.yaw = yaw;
  b.vx = 1.2;
  b.vy = -0.4;
  b.class_id = cls;
  return b;
}

// exact head output for a box list: binary peaks plus exact regression values
HeadOutput exact_prediction(const std::vector<Box3D>& boxes, const BevGrid& grid) {
  HeadOutput out;
  out.heatmap = Tensor({kNumClasses, grid.ny, grid.nx});
  out.reg = Tensor({kRegChannels, grid.ny, grid.nx});
  out.vel = Tensor({kVelChannels, grid.ny, grid.nx});
  const std::int64_t hw = static_cast<std::int64_t>(grid.ny) * grid.nx;
  for (const Box3D& b : boxes) {
    const auto cell = world_to_cell(b.cx, b.cy, grid);
    if (!cell) continue;
    const std::int64_t idx = static_cast<std::int64_t>(cell->second) * grid.nx + cell->first;
    out.heatmap[b.class_id * hw + idx] = 1.0;
    const auto tgt = reg_targets(b, grid, cell->first, cell->second);
    for (int ch = 0; ch < kRegChannels; ++ch) out.reg[ch * hw + idx] = tgt[static_cast<std::size_t>(ch)];
    out.vel[idx] = b.vx;
    out.vel[hw + idx] = b.vy;
  }
  return out;
}

}  // namespace

TEST_SUITE("head") {
  TEST_CASE("render: no boxes gives an all-zero heatmap") {
    Tensor h = render_gt_heatmap({}, kGrid);
    for (std::int64_t i = 0; i < h.size(); ++i) CHECK(h[i] == 0.0);
  }

  TEST_CASE("render: a box peaks at exactly one at its center cell") {
    const Box3D b = make_box(kGrid.center_x(5), kGrid.center_y(7), kCar);
    Tensor h = render_gt_heatmap({b}, kGrid);
    CHECK(h.at(kCar, 7, 5) == doctest::Approx(1.0));
    double mx = 0.0;
    for (std::int64_t i = 0; i < h.size(); ++i) mx = std::max(mx, h[i]);
    CHECK(mx == doctest::Approx(1.0));
    // other class planes untouched
    for (int iy = 0; iy < kGrid.ny; ++iy)
      for (int ix = 0; ix < kGrid.nx; ++ix) {
        CHECK(h.at(kPedestrian, iy, ix) == 0.0);
        CHECK(h.at(kCyclist, iy, ix) == 0.0);
      }
  }

  TEST_CASE("render: coincident boxes are idempotent under max") {
    const Box3D b = make_box(1.0, 5.0, kCyclist);
    Tensor one = render_gt_heatmap({b}, kGrid);
    Tensor two = render_gt_heatmap({b, b}, kGrid);
    for (std::int64_t i = 0; i < one.size(); ++i) CHECK(one[i] == two[i]);
  }

  TEST_CASE("head_forward: zero weights give heatmap 0.5 and correct shapes") {
    Rng rng(2);
    Tensor f = Tensor::randn({6, kGrid.ny, kGrid.nx}, rng);
    HeadParams p = HeadParams::make(6);
    HeadOutput out = head_forward(f, p);
    CHECK(out.heatmap.shape() == std::vector<int>{kNumClasses, kGrid.ny, kGrid.nx});
    CHECK(out.reg.shape() == std::vector<int>{kRegChannels, kGrid.ny, kGrid.nx});
    CHECK(out.vel.shape() == std::vector<int>{kVelChannels, kGrid.ny, kGrid.nx});
    for (std::int64_t i = 0; i < out.heatmap.size(); ++i)
      CHECK(out.heatmap[i] == doctest::Approx(0.5));
  }

  TEST_CASE("head_forward gradient at toy scale") {
    Rng rng(4);
    BevGrid toy{-2.0, 2.0, 0.0, 4.0, 4, 4};
    for (int rep = 0; rep < 10; ++rep) {
      Tensor f = Tensor::randn({5, 4, 4}, rng);
      HeadParams p = HeadParams::init(5, rng);
      HeadOutput probe;
      probe.heatmap = Tensor::randn({kNumClasses, 4, 4}, rng);
      probe.reg = Tensor::randn({kRegChannels, 4, 4}, rng);
      probe.vel = Tensor::randn({kVelChannels, 4, 4}, rng);

      HeadCtx ctx;
      head_forward(f, p, &ctx);
      Tensor gf = f.zeros_like();
      HeadParams gp = HeadParams::make(5);
      head_backward(probe, f, p, ctx, gf, gp);

      auto loss = [&](const Tensor& t) {
        HeadOutput o = head_forward(t, p);
        double s = 0.0;
        for (std::int64_t i = 0; i < o.heatmap.size(); ++i) s += o.heatmap[i] * probe.heatmap[i];
        for (std::int64_t i = 0; i < o.reg.size(); ++i) s += o.reg[i] * probe.reg[i];
        for (std::int64_t i = 0; i < o.vel.size(); ++i) s += o.vel[i] * probe.vel[i];
        return s;
      };
      CHECK(grad_check(loss, f, gf, 1e-5) <= 1e-4);
    }
  }

  TEST_CASE("loss: exact prediction scores near zero") {
    const std::vector<Box3D> boxes = {make_box(-3.0, 4.0, kCar), make_box(4.0, 11.0, kPedestrian)};
    HeadOutput pred = exact_prediction(boxes, kGrid);
    const DetectionLoss loss = detection_loss(pred, boxes, kGrid);
    CHECK(loss.cls >= 0.0);
    CHECK(loss.box >= 0.0);
    CHECK(loss.vel >= 0.0);
    CHECK(loss.total() <= 1e-8);
  }

  TEST_CASE("loss: empty scene with silent heatmap is ~zero") {
    HeadOutput pred;
    pred.heatmap = Tensor({kNumClasses, kGrid.ny, kGrid.nx});
    pred.reg = Tensor({kRegChannels, kGrid.ny, kGrid.nx});
    pred.vel = Tensor({kVelChannels, kGrid.ny, kGrid.nx});
    const DetectionLoss loss = detection_loss(pred, {}, kGrid);
    CHECK(loss.cls <= 1e-10);
    CHECK(loss.box == 0.0);
    CHECK(loss.vel == 0.0);
  }

  TEST_CASE("loss components are nonnegative on random predictions") {
    Rng rng(6);
    for (int rep = 0; rep < 20; ++rep) {
      HeadOutput pred;
      pred.heatmap = sigmoid(Tensor::randn({kNumClasses, kGrid.ny, kGrid.nx}, rng));
      pred.reg = Tensor::randn({kRegChannels, kGrid.ny, kGrid.nx}, rng);
      pred.vel = Tensor::randn({kVelChannels, kGrid.ny, kGrid.nx}, rng);
      const std::vector<Box3D> boxes = {make_box(rng.uniform(-7, 7), rng.uniform(1, 15),
                                                 rng.uniform_int(0, 2))};
      const DetectionLoss loss = detection_loss(pred, boxes, kGrid);
      CHECK(loss.cls >= 0.0);
      CHECK(loss.box >= 0.0);
      CHECK(loss.vel >= 0.0);
    }
  }

  TEST_CASE("focal loss decreases monotonically toward the target on a 1-cell toy") {
    BevGrid toy{-0.5, 0.5, 0.0, 1.0, 1, 1};
    Box3D b = make_box(0.0, 0.5, kCar);
    b.l = 0.5;
    b.w = 0.5;
    double prev = 1e300;
    for (double p = 0.05; p < 0.999; p += 0.05) {
      HeadOutput pred;
      pred.heatmap = Tensor({kNumClasses, 1, 1});
      pred.heatmap.at(kCar, 0, 0) = p;
      pred.reg = Tensor({kRegChannels, 1, 1});
      pred.vel = Tensor({kVelChannels, 1, 1});
      const auto tgt = reg_targets(b, toy, 0, 0);
      for (int ch = 0; ch < kRegChannels; ++ch) pred.reg.at(ch, 0, 0) = tgt[static_cast<std::size_t>(ch)];
      pred.vel.at(0, 0, 0) = b.vx;
      pred.vel.at(1, 0, 0) = b.vy;
      const double loss = detection_loss(pred, {b}, toy).total();
      CHECK(loss < prev);
      prev = loss;
    }
  }

  TEST_CASE("loss gradient vs finite differences") {
    Rng rng(8);
    BevGrid toy{-2.0, 2.0, 0.0, 4.0, 8, 8};
    for (int rep = 0; rep < 10; ++rep) {
      std::vector<Box3D> boxes = {make_box(rng.uniform(-1.5, 1.5), rng.uniform(0.5, 3.5),
                                           rng.uniform_int(0, 2))};
      boxes[0].l = 1.0;
      boxes[0].w = 0.6;
      HeadOutput pred;
      pred.heatmap = sigmoid(Tensor::randn({kNumClasses, 8, 8}, rng));
      pred.reg = Tensor::randn({kRegChannels, 8, 8}, rng);
      pred.vel = Tensor::randn({kVelChannels, 8, 8}, rng);

      DetLossCtx ctx;
      detection_loss(pred, boxes, toy, &ctx);
      HeadOutput g;
      g.heatmap = pred.heatmap.zeros_like();
      g.reg = pred.reg.zeros_like();
      g.vel = pred.vel.zeros_like();
      detection_loss_backward(1.0, 1.0, 1.0, pred, boxes, toy, ctx, g);

      CHECK(grad_check(
                [&](const Tensor& t) {
                  HeadOutput p2{t, pred.reg, pred.vel};
                  return detection_loss(p2, boxes, toy).total();
                },
                pred.heatmap, g.heatmap, 1e-6) <= 1e-4);
      CHECK(grad_check(
                [&](const Tensor& t) {
                  HeadOutput p2{pred.heatmap, t, pred.vel};
                  return detection_loss(p2, boxes, toy).total();
                },
                pred.reg, g.reg, 1e-6) <= 1e-4);
      CHECK(grad_check(
                [&](const Tensor& t) {
                  HeadOutput p2{pred.heatmap, pred.reg, t};
                  return detection_loss(p2, boxes, toy).total();
                },
                pred.vel, g.vel, 1e-6) <= 1e-4);
    }
  }

  TEST_CASE("decode: all-zero heatmap yields nothing") {
    HeadOutput pred;
    pred.heatmap = Tensor({kNumClasses, kGrid.ny, kGrid.nx});
    pred.reg = Tensor({kRegChannels, kGrid.ny, kGrid.nx});
    pred.vel = Tensor({kVelChannels, kGrid.ny, kGrid.nx});
    CHECK(decode(pred, kGrid, 0.1, 10).empty());
  }

  TEST_CASE("decode: single synthetic peak reconstructs the hand-built box") {
    HeadOutput pred;
    pred.heatmap = Tensor({kNumClasses, kGrid.ny, kGrid.nx});
    pred.reg = Tensor({kRegChannels, kGrid.ny, kGrid.nx});
    pred.vel = Tensor({kVelChannels, kGrid.ny, kGrid.nx});
    const int ix = 9, iy = 4;
    const std::int64_t hw = static_cast<std::int64_t>(kGrid.ny) * kGrid.nx;
    const std::int64_t idx = static_cast<std::int64_t>(iy) * kGrid.nx + ix;
    pred.heatmap[kCyclist * hw + idx] = 0.84;
    const double regs[kRegChannels] = {0.25, 0.75, 1.1, std::log(1.9), std::log(0.6),
                                       std::log(1.6), std::sin(0.7), std::cos(0.7)};
    for (int ch = 0; ch < kRegChannels; ++ch) pred.reg[ch * hw + idx] = regs[ch];
    pred.vel[idx] = 2.0;
    pred.vel[hw + idx] = -1.0;

    const auto dets = decode(pred, kGrid, 0.5, 8);
    REQUIRE(dets.size() == 1);
    const Detection& d = dets[0];
    CHECK(d.score == doctest::Approx(0.84));
    CHECK(d.box.class_id == kCyclist);
    CHECK(d.box.cx == doctest::Approx(kGrid.x_min + (ix + 0.25) * kGrid.cell_x()));
    CHECK(d.box.cy == doctest::Approx(kGrid.y_min + (iy + 0.75) * kGrid.cell_y()));
    CHECK(d.box.cz == doctest::Approx(1.1));
    CHECK(d.box.l == doctest::Approx(1.9));
    CHECK(d.box.w == doctest::Approx(0.6));
    CHECK(d.box.h == doctest::Approx(1.6));
    CHECK(d.box.yaw == doctest::Approx(0.7));
    CHECK(d.box.vx == doctest::Approx(2.0));
    CHECK(d.box.vy == doctest::Approx(-1.0));
  }

  TEST_CASE("render + exact regression decodes back to the ground truth") {
    Rng rng(10);
    for (int rep = 0; rep < 10; ++rep) {
      // three boxes at least 3 cells apart
      std::vector<Box3D> boxes = {
          make_box(-5.0 + rng.uniform(-0.4, 0.4), 3.0 + rng.uniform(-0.4, 0.4), kCar,
                   rng.uniform(-3.0, 3.0)),
          make_box(3.0 + rng.uniform(-0.4, 0.4), 6.0 + rng.uniform(-0.4, 0.4), kPedestrian,
                   rng.uniform(-3.0, 3.0)),
          make_box(0.0 + rng.uniform(-0.4, 0.4), 13.0 + rng.uniform(-0.4, 0.4), kCyclist,
                   rng.uniform(-3.0, 3.0))};
      boxes[1].l = 0.7;
      boxes[1].w = 0.7;
      HeadOutput pred = exact_prediction(boxes, kGrid);
      // put the rendered gaussians underneath the exact peaks
      Tensor bumps = render_gt_heatmap(boxes, kGrid);
      for (std::int64_t i = 0; i < bumps.size(); ++i)
        pred.heatmap[i] = std::max(pred.heatmap[i], bumps[i] * 0.999);

      auto dets = decode(pred, kGrid, 0.5, 16);
      REQUIRE(dets.size() == boxes.size());
      for (const Box3D& b : boxes) {
        bool found = false;
        for (const Detection& d : dets) {
          if (d.box.class_id != b.class_id) continue;
          if (std::fabs(d.box.cx - b.cx) <= 1e-6 && std::fabs(d.box.cy - b.cy) <= 1e-6 &&
              std::fabs(d.box.l - b.l) <= 1e-6 && std::fabs(wrap_angle(d.box.yaw - b.yaw)) <= 1e-6)
            found = true;
        }
        CHECK(found);
      }
    }
  }
}
