#include <doctest.h>

#include <cmath>

#include "bevfuse/attention.hpp"

using namespace bevfuse;

namespace {

double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Random parameters with nonzero heads so sample locations sit at generic
// interior points where the bilinear derivative is defined.
DeformAttnParams random_params(int heads, int points, int channels, Rng& rng) {
  DeformAttnParams p = DeformAttnParams::zeros(heads, points, channels);
  p.visit([&rng](const char*, Tensor& t) {
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal() * 0.3;
  });
  for (int m = 0; m < heads; ++m) p.offset_scale.at(m) = 1.0 + 0.5 * rng.uniform();
  return p;
}

// max rel error of d loss / d field for every tensor field of a params struct
template <class Forward>
double check_param_grads(DeformAttnParams& params, DeformAttnParams& analytic, Forward&& fwd) {
  double worst = 0.0;
  std::vector<Tensor*> fields, grads;
  params.visit([&](const char*, Tensor& t) { fields.push_back(&t); });
  analytic.visit([&](const char*, Tensor& t) { grads.push_back(&t); });
  for (std::size_t i = 0; i < fields.size(); ++i) {
    Tensor saved = *fields[i];
    const double err = grad_check(
        [&](const Tensor& t) {
          *fields[i] = t;
          const double loss = fwd();
          *fields[i] = saved;
          return loss;
        },
        saved, *grads[i], 1e-5);
    *fields[i] = saved;
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace

TEST_SUITE("attention") {
  TEST_CASE("bilinear sampling hits lattice points exactly") {
    Rng rng(2);
    Tensor f = Tensor::randn({3, 5, 7}, rng);
    std::vector<double> out(3);
    for (int iy = 0; iy < 5; ++iy)
      for (int ix = 0; ix < 7; ++ix) {
        bilinear_sample(f, (ix + 0.5) / 7.0, (iy + 0.5) / 5.0, out.data());
        for (int c = 0; c < 3; ++c) CHECK(out[c] == doctest::Approx(f.at(c, iy, ix)).epsilon(1e-12));
      }
  }

  TEST_CASE("bilinear sampling midway between two cells averages them") {
    Tensor f({1, 1, 2});
    f.at(0, 0, 0) = 2.0;
    f.at(0, 0, 1) = 6.0;
    double out = 0.0;
    // midpoint between the two cell centers
    bilinear_sample(f, 0.5, 0.5, &out);
    CHECK(out == doctest::Approx(4.0));
  }

  TEST_CASE("bilinear sampling reads zeros outside the map") {
    Tensor f = Tensor::full({2, 3, 3}, 5.0);
    std::vector<double> out(2);
    bilinear_sample(f, -0.4, 0.5, out.data());
    CHECK(out[0] == doctest::Approx(0.0));
    bilinear_sample(f, 1.4, 0.5, out.data());
    CHECK(out[1] == doctest::Approx(0.0));
  }

  TEST_CASE("bilinear gradient vs finite differences at interior points") {
    Rng rng(4);
    for (int rep = 0; rep < 20; ++rep) {
      Tensor f = Tensor::randn({3, 6, 6}, rng);
      const double px = rng.uniform(0.15, 0.85) + 0.013;  // generic interior point
      const double py = rng.uniform(0.15, 0.85) + 0.007;
      std::vector<double> probe(3);
      for (auto& v : probe) v = rng.normal();

      Tensor gf = f.zeros_like();
      double gpx = 0.0, gpy = 0.0;
      bilinear_sample_backward(f, px, py, probe.data(), gf, gpx, gpy);

      CHECK(grad_check(
                [&](const Tensor& t) {
                  std::vector<double> out(3);
                  bilinear_sample(t, px, py, out.data());
                  return out[0] * probe[0] + out[1] * probe[1] + out[2] * probe[2];
                },
                f, gf, 1e-5) <= 1e-4);

      Tensor pos = Tensor::from({2}, {px, py});
      Tensor gpos = Tensor::from({2}, {gpx, gpy});
      CHECK(grad_check(
                [&](const Tensor& t) {
                  std::vector<double> out(3);
                  bilinear_sample(f, t[0], t[1], out.data());
                  return out[0] * probe[0] + out[1] * probe[1] + out[2] * probe[2];
                },
                pos, gpos, 1e-5) <= 1e-4);
    }
  }

  TEST_CASE("deform_attn degenerate reduction: identity wiring samples at p_q") {
    Rng rng(6);
    const int c = 4, h = 5, w = 5, k = 3;
    Tensor f = Tensor::randn({c, h, w}, rng);
    DeformAttnParams p = DeformAttnParams::identity(k, c);
    BevQuerySet q;
    q.z = Tensor::randn({2, c}, rng);
    q.p = Tensor::from({2, 2}, {(1 + 0.5) / w, (2 + 0.5) / h, (3 + 0.5) / w, (0 + 0.5) / h});
    Tensor out = deform_attn(q, f, p);
    for (int ch = 0; ch < c; ++ch) {
      CHECK(out.at(0, ch) == doctest::Approx(f.at(ch, 2, 1)).epsilon(1e-12));
      CHECK(out.at(1, ch) == doctest::Approx(f.at(ch, 0, 3)).epsilon(1e-12));
    }
  }

  TEST_CASE("deform_attn K=1 M=1 identity is pure warped sampling") {
    Rng rng(8);
    const int c = 3, h = 6, w = 6;
    Tensor f = Tensor::randn({c, h, w}, rng);
    DeformAttnParams p = DeformAttnParams::identity(1, c);
    // constant offset of +1 cell in x via the bias
    p.offset_b[0] = 1.0;
    p.offset_scale.fill(1.0);
    BevQuerySet q;
    q.z = Tensor({1, c});
    q.p = Tensor::from({1, 2}, {(2 + 0.5) / w, (3 + 0.5) / h});
    Tensor out = deform_attn(q, f, p);
    for (int ch = 0; ch < c; ++ch)
      CHECK(out.at(0, ch) == doctest::Approx(f.at(ch, 3, 3)).epsilon(1e-12));
  }

  TEST_CASE("attention weights are a probability vector per query") {
    Rng rng(10);
    for (int rep = 0; rep < 20; ++rep) {
      const int c = 8;
      DeformAttnParams p = random_params(2, 3, c, rng);
      Tensor f = Tensor::randn({c, 6, 6}, rng);
      BevQuerySet q;
      q.z = Tensor::randn({5, c}, rng);
      q.p = Tensor({5, 2});
      for (int i = 0; i < 5; ++i) {
        q.p.at(i, 0) = rng.uniform(0.1, 0.9);
        q.p.at(i, 1) = rng.uniform(0.1, 0.9);
      }
      DeformAttnCtx ctx;
      deform_attn(q, f, p, &ctx);
      for (int i = 0; i < 5; ++i) {
        double s = 0.0;
        for (int j = 0; j < 6; ++j) {
          CHECK(ctx.attn.at(i, j) >= 0.0);
          s += ctx.attn.at(i, j);
        }
        CHECK(std::fabs(s - 1.0) <= 1e-12);
      }
    }
  }

  TEST_CASE("deform_attn full gradient check (inputs and all parameters)") {
    Rng rng(12);
    const int c = 4, h = 6, w = 6, nq = 5, m = 2, k = 3;
    for (int rep = 0; rep < 5; ++rep) {
      DeformAttnParams p = random_params(m, k, c, rng);
      Tensor f = Tensor::randn({c, h, w}, rng);
      BevQuerySet q;
      q.z = Tensor::randn({nq, c}, rng);
      q.p = Tensor({nq, 2});
      for (int i = 0; i < nq; ++i) {
        q.p.at(i, 0) = rng.uniform(0.2, 0.8);
        q.p.at(i, 1) = rng.uniform(0.2, 0.8);
      }
      Tensor probe = Tensor::randn({nq, c}, rng);

      DeformAttnCtx ctx;
      deform_attn(q, f, p, &ctx);
      Tensor gz = q.z.zeros_like();
      Tensor gf = f.zeros_like();
      DeformAttnParams gp = DeformAttnParams::zeros(m, k, c);
      deform_attn_backward(probe, q, f, p, ctx, gz, gf, gp);

      auto fwd = [&]() { return dot(deform_attn(q, f, p), probe); };
      CHECK(grad_check([&](const Tensor& t) {
              BevQuerySet qq{t, q.p};
              return dot(deform_attn(qq, f, p), probe);
            }, q.z, gz, 1e-5) <= 1e-4);
      CHECK(grad_check([&](const Tensor& t) { return dot(deform_attn(q, t, p), probe); }, f, gf,
                       1e-5) <= 1e-4);
      CHECK(check_param_grads(p, gp, fwd) <= 1e-4);
    }
  }

  TEST_CASE("dsa zero-init is the exact identity") {
    Rng rng(14);
    Tensor f = Tensor::randn({4, 8, 8}, rng);
    DeformAttnParams p = DeformAttnParams::zeros(2, 2, 4);
    Tensor out = dsa(f, p);
    for (std::int64_t i = 0; i < f.size(); ++i) CHECK(out[i] == f[i]);
  }

  TEST_CASE("dsa with zero heads and random projections is translation equivariant") {
    Rng rng(16);
    const int c = 3, h = 8, w = 8;
    DeformAttnParams p = DeformAttnParams::zeros(1, 2, c);
    for (std::int64_t i = 0; i < p.value_proj.size(); ++i) p.value_proj[i] = rng.normal() * 0.4;
    for (std::int64_t i = 0; i < p.out_proj.size(); ++i) p.out_proj[i] = rng.normal() * 0.4;
    p.offset_scale.fill(1.0);
    Tensor f = Tensor::randn({c, h, w}, rng);
    // shift right by one cell
    Tensor fs({c, h, w});
    for (int ch = 0; ch < c; ++ch)
      for (int iy = 0; iy < h; ++iy)
        for (int ix = 1; ix < w; ++ix) fs.at(ch, iy, ix) = f.at(ch, iy, ix - 1);
    Tensor a = dsa(f, p);
    Tensor b = dsa(fs, p);
    for (int ch = 0; ch < c; ++ch)
      for (int iy = 1; iy + 1 < h; ++iy)
        for (int ix = 2; ix + 1 < w; ++ix)
          CHECK(b.at(ch, iy, ix) == doctest::Approx(a.at(ch, iy, ix - 1)).epsilon(1e-10));
  }

  TEST_CASE("dsa gradient check on 2x4x4") {
    Rng rng(18);
    const int c = 2, h = 4, w = 4;
    for (int rep = 0; rep < 3; ++rep) {
      DeformAttnParams p = random_params(1, 2, c, rng);
      Tensor f = Tensor::randn({c, h, w}, rng);
      Tensor probe = Tensor::randn({c, h, w}, rng);
      DeformBlockCtx ctx;
      dsa(f, p, &ctx);
      Tensor gf = f.zeros_like();
      DeformAttnParams gp = DeformAttnParams::zeros(1, 2, c);
      dsa_backward(probe, f, p, ctx, gf, gp);
      CHECK(grad_check([&](const Tensor& t) { return dot(dsa(t, p), probe); }, f, gf, 1e-5) <= 1e-4);
      auto fwd = [&]() { return dot(dsa(f, p), probe); };
      CHECK(check_param_grads(p, gp, fwd) <= 1e-4);
    }
  }

  TEST_CASE("dca null values with zero heads returns the query map") {
    Rng rng(20);
    Tensor q = Tensor::randn({3, 6, 6}, rng);
    Tensor v({3, 6, 6});
    DeformAttnParams p = DeformAttnParams::zeros(1, 2, 3);
    Tensor out = dca(q, v, p);
    for (std::int64_t i = 0; i < q.size(); ++i) CHECK(out[i] == q[i]);
  }

  TEST_CASE("dca of a map with itself equals dsa") {
    Rng rng(22);
    Tensor f = Tensor::randn({4, 5, 5}, rng);
    DeformAttnParams p = random_params(2, 2, 4, rng);
    Tensor a = dsa(f, p);
    Tensor b = dca(f, f, p);
    for (std::int64_t i = 0; i < f.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
  }

  TEST_CASE("dca rejects mismatched spatial extents") {
    Tensor q({3, 6, 6});
    Tensor v({3, 5, 6});
    DeformAttnParams p = DeformAttnParams::zeros(1, 2, 3);
    CHECK_THROWS_AS(dca(q, v, p), ShapeError);
  }

  TEST_CASE("dca gradient check w.r.t. both maps") {
    Rng rng(24);
    const int c = 2, h = 4, w = 4;
    for (int rep = 0; rep < 3; ++rep) {
      DeformAttnParams p = random_params(1, 2, c, rng);
      Tensor fq = Tensor::randn({c, h, w}, rng);
      Tensor fv = Tensor::randn({c, h, w}, rng);
      Tensor probe = Tensor::randn({c, h, w}, rng);
      DeformBlockCtx ctx;
      dca(fq, fv, p, &ctx);
      Tensor gq = fq.zeros_like(), gv = fv.zeros_like();
      DeformAttnParams gp = DeformAttnParams::zeros(1, 2, c);
      dca_backward(probe, fq, fv, p, ctx, gq, gv, gp);
      CHECK(grad_check([&](const Tensor& t) { return dot(dca(t, fv, p), probe); }, fq, gq, 1e-5) <=
            1e-4);
      CHECK(grad_check([&](const Tensor& t) { return dot(dca(fq, t, p), probe); }, fv, gv, 1e-5) <=
            1e-4);
    }
  }

  TEST_CASE("mac counter grows linearly in query count for deform_attn") {
    Rng rng(26);
    const int c = 8;
    DeformAttnParams p = random_params(2, 2, c, rng);
    std::uint64_t macs[2];
    int sides[2] = {8, 16};
    for (int i = 0; i < 2; ++i) {
      Tensor f = Tensor::randn({c, sides[i], sides[i]}, rng);
      MacCounter::reset();
      dsa(f, p);
      macs[i] = MacCounter::value();
    }
    // 4x the queries -> 4x the MACs
    CHECK(macs[1] == 4 * macs[0]);
  }
}
