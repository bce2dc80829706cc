#include <doctest.h>

#include <cmath>

#include "bevfuse/fusion.hpp"

using namespace bevfuse;

namespace {

double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// center-tap conv kernel that selects input channel `src` into output `dst`
void set_center_tap(Tensor& w, int dst, int src, double val) {
  const int k = w.extent(2);
  w.at(dst, src, k / 2, k / 2) = val;
}

FusionParams random_fusion(int c, int ny, int nx, Rng& rng) {
  FusionParams p = FusionParams::init(c, ny, nx, 1, 2, rng, 1.2);
  // nonzero heads so every gradient path is exercised at generic sample points
  for (DeformAttnParams* a : {&p.dsa_cam, &p.dsa_rad, &p.dca_c2r, &p.dca_r2c})
    a->visit([&rng](const char*, Tensor& t) {
      for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal() * 0.25;
    });
  return p;
}

}  // namespace

TEST_SUITE("fusion") {
  TEST_CASE("add_pos: zero encoding is the identity; encodings are per-modality") {
    Rng rng(2);
    Tensor f = Tensor::randn({3, 4, 4}, rng);
    Tensor zero({3, 4, 4});
    Tensor out = add_pos(f, zero);
    for (std::int64_t i = 0; i < f.size(); ++i) CHECK(out[i] == f[i]);

    FusionParams p = FusionParams::make(3, 4, 4, 1, 2);
    p.pos_cam.fill(1.0);
    CHECK(p.pos_rad[0] == 0.0);  // mutating one encoding leaves the other alone
    p.pos_rad.fill(-2.0);
    CHECK(p.pos_cam[0] == 1.0);
  }

  TEST_CASE("hybrid_fuse degenerate wiring with zero-init attention") {
    Rng rng(4);
    const int c = 2, ny = 5, nx = 5;
    FusionParams p = FusionParams::make(c, ny, nx, 1, 2);
    // positive inputs and encodings keep the relu transparent
    Tensor f_c({c, ny, nx}), f_r({c, ny, nx});
    for (std::int64_t i = 0; i < f_c.size(); ++i) {
      f_c[i] = 0.5 + rng.uniform();
      f_r[i] = 0.5 + rng.uniform();
    }
    for (std::int64_t i = 0; i < p.pos_cam.size(); ++i) {
      p.pos_cam[i] = 0.1 * rng.uniform();
      p.pos_rad[i] = 0.1 * rng.uniform();
    }
    // cbr0 routes A and B through; cbr1 averages them; cbr2 is identity
    for (int ch = 0; ch < c; ++ch) {
      set_center_tap(p.cbr0.conv_w, ch, ch, 1.0);              // A
      set_center_tap(p.cbr0.conv_w, c + ch, c + ch, 1.0);      // B
      set_center_tap(p.cbr1.conv_w, ch, ch, 0.5);
      set_center_tap(p.cbr1.conv_w, ch, c + ch, 0.5);
      set_center_tap(p.cbr2.conv_w, ch, ch, 1.0);
    }
    Tensor out = hybrid_fuse(f_c, f_r, p);
    for (int ch = 0; ch < c; ++ch)
      for (int iy = 0; iy < ny; ++iy)
        for (int ix = 0; ix < nx; ++ix) {
          const double a = f_c.at(ch, iy, ix) + p.pos_cam.at(ch, iy, ix);
          const double b = f_r.at(ch, iy, ix) + p.pos_rad.at(ch, iy, ix);
          CHECK(out.at(ch, iy, ix) == doctest::Approx((a + b) / 2).epsilon(1e-12));
        }
  }

  TEST_CASE("hybrid_fuse with a null radar map depends on the camera map only") {
    Rng rng(6);
    const int c = 2, ny = 4, nx = 4;
    FusionParams p = FusionParams::make(c, ny, nx, 1, 2);
    Rng wrng(7);
    p.cbr0 = CbrParams::init(2 * c, 4 * c, 3, wrng);
    p.cbr1 = CbrParams::init(c, 2 * c, 3, wrng);
    p.cbr2 = CbrParams::init(c, c, 1, wrng);
    Tensor f_c = Tensor::randn({c, ny, nx}, rng);
    Tensor zero({c, ny, nx});

    // expectation built by hand from the degenerate wiring
    Tensor a = add_pos(f_c, p.pos_cam);
    Tensor b = add_pos(zero, p.pos_rad);
    Tensor concat = concat_channels({&a, &b, &a, &b});
    Tensor want = cbr_block(cbr_block(cbr_block(concat, p.cbr0), p.cbr1), p.cbr2);

    Tensor got = hybrid_fuse(f_c, zero, p);
    for (std::int64_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
  }

  TEST_CASE("hybrid_fuse output keeps the BEV shape") {
    Rng rng(8);
    const int c = 4, ny = 6, nx = 5;
    FusionParams p = random_fusion(c, ny, nx, rng);
    Tensor f_c = Tensor::randn({c, ny, nx}, rng);
    Tensor f_r = Tensor::randn({c, ny, nx}, rng);
    Tensor out = hybrid_fuse(f_c, f_r, p);
    CHECK(out.shape() == f_c.shape());
    CHECK_THROWS_AS(hybrid_fuse(f_c, Tensor({c, ny, nx + 1}), p), ShapeError);
  }

  TEST_CASE("dropping the self-attended maps from the concat changes the output") {
    Rng rng(10);
    const int c = 2, ny = 4, nx = 4;
    FusionParams p = random_fusion(c, ny, nx, rng);
    Tensor f_c = Tensor::randn({c, ny, nx}, rng);
    Tensor f_r = Tensor::randn({c, ny, nx}, rng);
    FusionConfig with_self;
    FusionConfig without_self;
    without_self.concat_self = false;
    Tensor a = hybrid_fuse(f_c, f_r, p, with_self);
    Tensor b = hybrid_fuse(f_c, f_r, p, without_self);
    double diff = 0.0;
    for (std::int64_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::fabs(a[i] - b[i]));
    CHECK(diff > 1e-6);
  }

  TEST_CASE("zero-init heads still receive offset gradients after one step of training signal") {
    // with random projections the offset heads get nonzero gradients
    Rng rng(12);
    const int c = 2, ny = 4, nx = 4;
    FusionParams p = random_fusion(c, ny, nx, rng);
    Tensor f_c = Tensor::randn({c, ny, nx}, rng);
    Tensor f_r = Tensor::randn({c, ny, nx}, rng);
    Tensor probe = Tensor::randn({c, ny, nx}, rng);
    FusionCtx ctx;
    hybrid_fuse(f_c, f_r, p, {}, &ctx);
    Tensor gc = f_c.zeros_like(), gr = f_r.zeros_like();
    FusionParams gp = FusionParams::make(c, ny, nx, 1, 2);
    zero_fields(gp);
    hybrid_fuse_backward(probe, f_c, f_r, p, {}, ctx, gc, gr, gp);
    double off_norm = 0.0;
    for (std::int64_t i = 0; i < gp.dsa_cam.offset_w.size(); ++i)
      off_norm += std::fabs(gp.dsa_cam.offset_w[i]);
    CHECK(off_norm > 0.0);
  }

  TEST_CASE("hybrid_fuse full gradient check on C=4 6x6") {
    Rng rng(14);
    const int c = 4, ny = 6, nx = 6;
    FusionParams p = random_fusion(c, ny, nx, rng);
    Tensor f_c = Tensor::randn({c, ny, nx}, rng);
    Tensor f_r = Tensor::randn({c, ny, nx}, rng);
    Tensor probe = Tensor::randn({c, ny, nx}, rng);

    FusionCtx ctx;
    hybrid_fuse(f_c, f_r, p, {}, &ctx);
    Tensor gc = f_c.zeros_like(), gr = f_r.zeros_like();
    FusionParams gp = FusionParams::make(c, ny, nx, 1, 2);
    zero_fields(gp);
    hybrid_fuse_backward(probe, f_c, f_r, p, {}, ctx, gc, gr, gp);

    CHECK(grad_check([&](const Tensor& t) { return dot(hybrid_fuse(t, f_r, p), probe); }, f_c, gc,
                     1e-5) <= 1e-4);
    CHECK(grad_check([&](const Tensor& t) { return dot(hybrid_fuse(f_c, t, p), probe); }, f_r, gr,
                     1e-5) <= 1e-4);

    std::vector<Tensor*> fields, grads;
    p.visit([&](const char*, Tensor& t) { fields.push_back(&t); });
    gp.visit([&](const char*, Tensor& t) { grads.push_back(&t); });
    double worst = 0.0;
    for (std::size_t i = 0; i < fields.size(); ++i) {
      Tensor saved = *fields[i];
      const double err = grad_check(
          [&](const Tensor& t) {
            *fields[i] = t;
            const double loss = dot(hybrid_fuse(f_c, f_r, p), probe);
            *fields[i] = saved;
            return loss;
          },
          saved, *grads[i], 1e-5);
      *fields[i] = saved;
      worst = std::max(worst, err);
    }
    CHECK(worst <= 1e-4);
  }

  TEST_CASE("two fusion layers run forward and backward") {
    Rng rng(15);
    const int c = 2, ny = 4, nx = 4;
    FusionParams p = random_fusion(c, ny, nx, rng);
    Tensor f_c = Tensor::randn({c, ny, nx}, rng);
    Tensor f_r = Tensor::randn({c, ny, nx}, rng);
    Tensor probe = Tensor::randn({c, ny, nx}, rng);
    FusionConfig cfg;
    cfg.num_layers = 2;
    FusionCtx ctx;
    hybrid_fuse(f_c, f_r, p, cfg, &ctx);
    Tensor gc = f_c.zeros_like(), gr = f_r.zeros_like();
    FusionParams gp = FusionParams::make(c, ny, nx, 1, 2);
    zero_fields(gp);
    hybrid_fuse_backward(probe, f_c, f_r, p, cfg, ctx, gc, gr, gp);
    CHECK(grad_check([&](const Tensor& t) { return dot(hybrid_fuse(t, f_r, p, cfg), probe); }, f_c,
                     gc, 1e-5) <= 1e-4);
  }

  TEST_CASE("cbr_block clips negatives, passes identity, and has correct gradients") {
    // all-negative pre-activation -> zero output
    CbrParams p = CbrParams::make(2, 2, 3);
    p.conv_b.fill(-5.0);
    Tensor x({2, 4, 4});
    Tensor out = cbr_block(x, p);
    for (std::int64_t i = 0; i < out.size(); ++i) CHECK(out[i] == 0.0);

    // identity conv, identity norm, positive input -> unchanged
    CbrParams ident = CbrParams::make(2, 2, 3);
    set_center_tap(ident.conv_w, 0, 0, 1.0);
    set_center_tap(ident.conv_w, 1, 1, 1.0);
    Rng rng(16);
    Tensor pos({2, 4, 4});
    for (std::int64_t i = 0; i < pos.size(); ++i) pos[i] = 0.1 + rng.uniform();
    Tensor keep = cbr_block(pos, ident);
    for (std::int64_t i = 0; i < pos.size(); ++i) CHECK(keep[i] == doctest::Approx(pos[i]));

    // gradient
    for (int rep = 0; rep < 5; ++rep) {
      CbrParams q = CbrParams::init(3, 2, 3, rng);
      Tensor xin = Tensor::randn({2, 5, 5}, rng);
      Tensor probe = Tensor::randn({3, 5, 5}, rng);
      CbrCtx ctx;
      cbr_block(xin, q, &ctx);
      Tensor gx = xin.zeros_like();
      CbrParams gq = CbrParams::make(3, 2, 3);
      zero_fields(gq);
      cbr_block_backward(probe, xin, q, ctx, gx, gq);
      CHECK(grad_check([&](const Tensor& t) { return dot(cbr_block(t, q), probe); }, xin, gx,
                       1e-5) <= 1e-4);
    }
  }

  TEST_CASE("naive fusion forward/backward") {
    Rng rng(18);
    const int c = 3, ny = 4, nx = 4;
    NaiveFuseParams p = NaiveFuseParams::init(c, rng);
    Tensor f_c = Tensor::randn({c, ny, nx}, rng);
    Tensor f_r = Tensor::randn({c, ny, nx}, rng);
    Tensor probe = Tensor::randn({c, ny, nx}, rng);
    NaiveFuseCtx ctx;
    naive_fuse(f_c, f_r, p, &ctx);
    Tensor gc = f_c.zeros_like(), gr = f_r.zeros_like();
    NaiveFuseParams gp = NaiveFuseParams::make(c);
    zero_fields(gp);
    naive_fuse_backward(probe, f_c, f_r, p, ctx, gc, gr, gp);
    CHECK(grad_check([&](const Tensor& t) { return dot(naive_fuse(t, f_r, p), probe); }, f_c, gc,
                     1e-5) <= 1e-4);
    CHECK(grad_check([&](const Tensor& t) { return dot(naive_fuse(f_c, t, p), probe); }, f_r, gr,
                     1e-5) <= 1e-4);
  }
}
