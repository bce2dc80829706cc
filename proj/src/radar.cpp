#include "bevfuse/radar.hpp"

#include <algorithm>
#include <cmath>

namespace bevfuse {

Tensor radar_point_features(const std::vector<RadarPoint>& pts) {
  BEVFUSE_CHECK(!pts.empty(), EmptySetError, "radar_point_features: empty point set");
  const int n = static_cast<int>(pts.size());
  double rcs_min = pts[0].rcs, rcs_max = pts[0].rcs;
  for (const auto& p : pts) {
    rcs_min = std::min(rcs_min, p.rcs);
    rcs_max = std::max(rcs_max, p.rcs);
  }
  const double span = rcs_max - rcs_min;
  Tensor out({n, 7});
  for (int i = 0; i < n; ++i) {
    const auto& p = pts[static_cast<std::size_t>(i)];
    out.at(i, 0) = p.x;
    out.at(i, 1) = p.y;
    out.at(i, 2) = p.z;
    out.at(i, 3) = p.vx_comp;
    out.at(i, 4) = p.vy_comp;
    out.at(i, 5) = span > 0.0 ? (p.rcs - rcs_min) / span : 0.5;
    out.at(i, 6) = p.t;
  }
  return out;
}

Tensor point_block(const Tensor& feats, const PointBlockParams& p, PointBlockCtx* ctx) {
  BEVFUSE_CHECK(feats.rank() == 2 && feats.extent(0) >= 1, EmptySetError,
                "point_block: need at least one point");
  const int n = feats.extent(0);
  const int half = p.mlp.w.extent(0);
  Tensor pre = linear(feats, p.mlp);
  Tensor act = relu(pre);
  std::vector<int> argmax(static_cast<std::size_t>(half), 0);
  for (int c = 0; c < half; ++c) {
    double best = act.at(0, c);
    int bi = 0;
    for (int i = 1; i < n; ++i)
      if (act.at(i, c) > best) {
        best = act.at(i, c);
        bi = i;
      }
    argmax[static_cast<std::size_t>(c)] = bi;
  }
  Tensor out({n, 2 * half});
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < half; ++c) {
      out.at(i, c) = act.at(i, c);
      out.at(i, half + c) = act.at(argmax[static_cast<std::size_t>(c)], c);
    }
  if (ctx) {
    ctx->pre = std::move(pre);
    ctx->act = std::move(act);
    ctx->argmax = std::move(argmax);
  }
  return out;
}

void point_block_backward(const Tensor& gout, const Tensor& feats, const PointBlockParams& p,
                          const PointBlockCtx& ctx, Tensor& gfeats, PointBlockParams& gp) {
  const int n = feats.extent(0);
  const int half = p.mlp.w.extent(0);
  Tensor gact({n, half});
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < half; ++c) {
      gact.at(i, c) += gout.at(i, c);
      gact.at(ctx.argmax[static_cast<std::size_t>(c)], c) += gout.at(i, half + c);
    }
  Tensor gpre({n, half});
  relu_backward(gact, ctx.pre, gpre);
  linear_backward(gpre, feats, p.mlp, gfeats, gp.mlp);
}

DmsaParams DmsaParams::make(int channels, int heads) {
  BEVFUSE_CHECK(channels % heads == 0, ShapeError, "dmsa: channels must divide by heads");
  DmsaParams p;
  p.heads = heads;
  p.wq = Tensor({channels, channels});
  p.wk = Tensor({channels, channels});
  p.wv = Tensor({channels, channels});
  p.wo = Tensor({channels, channels});
  return p;
}

DmsaParams DmsaParams::init(int channels, int heads, Rng& rng) {
  DmsaParams p = make(channels, heads);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(channels));
  for (Tensor* t : {&p.wq, &p.wk, &p.wv, &p.wo})
    for (std::int64_t i = 0; i < t->size(); ++i) (*t)[i] = rng.normal() * stddev;
  return p;
}

namespace {

Tensor pairwise_dist2(const Tensor& coords) {
  const int n = coords.extent(0);
  Tensor d2({n, n});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double dx = coords.at(i, 0) - coords.at(j, 0);
      const double dy = coords.at(i, 1) - coords.at(j, 1);
      d2.at(i, j) = dx * dx + dy * dy;
    }
  return d2;
}

}  // namespace

Tensor dmsa(const Tensor& feats, const Tensor& coords, double beta, const DmsaParams& p,
            DmsaCtx* ctx) {
  BEVFUSE_CHECK(feats.rank() == 2, ShapeError, "dmsa: features must be [N,C]");
  BEVFUSE_CHECK(coords.rank() == 2 && coords.extent(0) == feats.extent(0) && coords.extent(1) == 2,
                ShapeError, "dmsa: bad coordinates");
  BEVFUSE_CHECK(beta >= 0.0, ValueError, "dmsa: beta must be nonnegative");
  const int n = feats.extent(0), c = feats.extent(1);
  const int hn = p.heads, hd = c / hn;
  Tensor q = matmul(feats, p.wq);
  Tensor k = matmul(feats, p.wk);
  Tensor v = matmul(feats, p.wv);
  Tensor d2 = pairwise_dist2(coords);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

  Tensor attn({hn, n, n});
  for (int h = 0; h < hn; ++h) {
    Tensor logits({n, n});
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        double s = 0.0;
        for (int d = 0; d < hd; ++d) s += q.at(i, h * hd + d) * k.at(j, h * hd + d);
        logits.at(i, j) = s * inv_sqrt - beta * d2.at(i, j);
      }
    Tensor sm = softmax(logits, 1);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) attn.at(h, i, j) = sm.at(i, j);
  }

  Tensor mixed({n, c});
  for (int h = 0; h < hn; ++h)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        const double a = attn.at(h, i, j);
        if (a == 0.0) continue;
        for (int d = 0; d < hd; ++d) mixed.at(i, h * hd + d) += a * v.at(j, h * hd + d);
      }
  Tensor out = matmul(mixed, p.wo);
  out.add_(feats);  // residual
  if (ctx) {
    ctx->q = std::move(q);
    ctx->k = std::move(k);
    ctx->v = std::move(v);
    ctx->attn = std::move(attn);
    ctx->mixed = std::move(mixed);
    ctx->dist2 = std::move(d2);
  }
  debug_check_finite(out, "dmsa");
  return out;
}

void dmsa_backward(const Tensor& gout, const Tensor& feats, const Tensor& coords, double beta,
                   const DmsaParams& p, const DmsaCtx& ctx, Tensor& gfeats, double& gbeta,
                   DmsaParams& gp) {
  (void)coords;
  (void)beta;
  const int n = feats.extent(0), c = feats.extent(1);
  const int hn = p.heads, hd = c / hn;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

  gfeats.add_(gout);  // residual
  Tensor gmixed({n, c});
  matmul_backward(gout, ctx.mixed, p.wo, gmixed, gp.wo);

  Tensor gq({n, c}), gk({n, c}), gv({n, c});
  for (int h = 0; h < hn; ++h) {
    // g attn and g v
    Tensor gattn({n, n});
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        double s = 0.0;
        for (int d = 0; d < hd; ++d) s += gmixed.at(i, h * hd + d) * ctx.v.at(j, h * hd + d);
        gattn.at(i, j) = s;
        const double a = ctx.attn.at(h, i, j);
        if (a != 0.0)
          for (int d = 0; d < hd; ++d) gv.at(j, h * hd + d) += a * gmixed.at(i, h * hd + d);
      }
    // softmax rows
    Tensor head_attn({n, n});
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) head_attn.at(i, j) = ctx.attn.at(h, i, j);
    Tensor glogits({n, n});
    softmax_backward(gattn, head_attn, 1, glogits);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        const double gl = glogits.at(i, j);
        if (gl == 0.0) continue;
        gbeta -= gl * ctx.dist2.at(i, j);
        for (int d = 0; d < hd; ++d) {
          gq.at(i, h * hd + d) += gl * inv_sqrt * ctx.k.at(j, h * hd + d);
          gk.at(j, h * hd + d) += gl * inv_sqrt * ctx.q.at(i, h * hd + d);
        }
      }
  }
  matmul_backward(gq, feats, p.wq, gfeats, gp.wq);
  matmul_backward(gk, feats, p.wk, gfeats, gp.wk);
  matmul_backward(gv, feats, p.wv, gfeats, gp.wv);
}

InjectExtractParams InjectExtractParams::make(int channels) {
  InjectExtractParams p;
  for (Tensor* t : {&p.p_wq, &p.p_wk, &p.p_wv, &p.t_wq, &p.t_wk, &p.t_wv}) *t = Tensor({channels, channels});
  return p;
}

InjectExtractParams InjectExtractParams::init(int channels, Rng& rng) {
  InjectExtractParams p = make(channels);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(channels));
  for (Tensor* t : {&p.p_wq, &p.p_wk, &p.p_wv, &p.t_wq, &p.t_wk, &p.t_wv})
    for (std::int64_t i = 0; i < t->size(); ++i) (*t)[i] = rng.normal() * stddev;
  return p;
}

namespace {

// out = softmax(q k^T / sqrt(C)) v with q from `from`, k/v from `onto`.
Tensor cross_attend(const Tensor& from, const Tensor& onto, const Tensor& wq, const Tensor& wk,
                    const Tensor& wv, CrossAttnCtx* ctx) {
  const int n = from.extent(0), c = from.extent(1);
  Tensor q = matmul(from, wq);
  Tensor k = matmul(onto, wk);
  Tensor v = matmul(onto, wv);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(c));
  Tensor logits({n, n});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int d = 0; d < c; ++d) s += q.at(i, d) * k.at(j, d);
      logits.at(i, j) = s * inv_sqrt;
    }
  Tensor attn = softmax(logits, 1);
  Tensor out({n, c});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double a = attn.at(i, j);
      if (a == 0.0) continue;
      for (int d = 0; d < c; ++d) out.at(i, d) += a * v.at(j, d);
    }
  if (ctx) {
    ctx->q = std::move(q);
    ctx->k = std::move(k);
    ctx->v = std::move(v);
    ctx->attn = std::move(attn);
  }
  return out;
}

void cross_attend_backward(const Tensor& gout, const Tensor& from, const Tensor& onto,
                           const Tensor& wq, const Tensor& wk, const Tensor& wv,
                           const CrossAttnCtx& ctx, Tensor& gfrom, Tensor& gonto, Tensor& gwq,
                           Tensor& gwk, Tensor& gwv) {
  const int n = from.extent(0), c = from.extent(1);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(c));
  Tensor gattn({n, n});
  Tensor gv({n, c});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int d = 0; d < c; ++d) s += gout.at(i, d) * ctx.v.at(j, d);
      gattn.at(i, j) = s;
      const double a = ctx.attn.at(i, j);
      if (a != 0.0)
        for (int d = 0; d < c; ++d) gv.at(j, d) += a * gout.at(i, d);
    }
  Tensor glogits({n, n});
  softmax_backward(gattn, ctx.attn, 1, glogits);
  Tensor gq({n, c}), gk({n, c});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double gl = glogits.at(i, j) * inv_sqrt;
      if (gl == 0.0) continue;
      for (int d = 0; d < c; ++d) {
        gq.at(i, d) += gl * ctx.k.at(j, d);
        gk.at(j, d) += gl * ctx.q.at(i, d);
      }
    }
  matmul_backward(gq, from, wq, gfrom, gwq);
  matmul_backward(gk, onto, wk, gonto, gwk);
  matmul_backward(gv, onto, wv, gonto, gwv);
}

}  // namespace

std::pair<Tensor, Tensor> inject_extract(const Tensor& point_f, const Tensor& trans_f,
                                         const InjectExtractParams& p, InjectExtractCtx* ctx) {
  check_same_shape(point_f, trans_f, "inject_extract");
  InjectExtractCtx local;
  InjectExtractCtx& c = ctx ? *ctx : local;
  Tensor dp = cross_attend(point_f, trans_f, p.p_wq, p.p_wk, p.p_wv, &c.p2t);
  Tensor dt = cross_attend(trans_f, point_f, p.t_wq, p.t_wk, p.t_wv, &c.t2p);
  dp.add_(point_f);
  dt.add_(trans_f);
  return {std::move(dp), std::move(dt)};
}

void inject_extract_backward(const Tensor& gpoint_out, const Tensor& gtrans_out,
                             const Tensor& point_f, const Tensor& trans_f,
                             const InjectExtractParams& p, const InjectExtractCtx& ctx,
                             Tensor& gpoint, Tensor& gtrans, InjectExtractParams& gp) {
  gpoint.add_(gpoint_out);
  gtrans.add_(gtrans_out);
  cross_attend_backward(gpoint_out, point_f, trans_f, p.p_wq, p.p_wk, p.p_wv, ctx.p2t, gpoint,
                        gtrans, gp.p_wq, gp.p_wk, gp.p_wv);
  cross_attend_backward(gtrans_out, trans_f, point_f, p.t_wq, p.t_wk, p.t_wv, ctx.t2p, gtrans,
                        gpoint, gp.t_wq, gp.t_wk, gp.t_wv);
}

std::vector<double> rcs_disc_radii(const std::vector<RadarPoint>& pts, const BevGrid& grid,
                                   const RcsScatterConfig& cfg) {
  const double diag = std::sqrt(grid.cell_x() * grid.cell_x() + grid.cell_y() * grid.cell_y());
  double rcs_min = pts.empty() ? 0.0 : pts[0].rcs;
  double rcs_max = rcs_min;
  for (const auto& p : pts) {
    rcs_min = std::min(rcs_min, p.rcs);
    rcs_max = std::max(rcs_max, p.rcs);
  }
  const double span = rcs_max - rcs_min;
  std::vector<double> radii(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const double norm = span > 0.0 ? (pts[i].rcs - rcs_min) / span : 0.5;
    const double v_rcs = cfg.v_lo + norm * (cfg.v_hi - cfg.v_lo);
    radii[i] = diag * v_rcs;
  }
  return radii;
}

namespace {

// Enumerates (cell, weight) pairs for one point; weight 1 at the point's own
// cell, Gaussian falloff elsewhere within radius r.
template <class Fn>
void for_each_scatter_cell(const RadarPoint& pt, double r, const BevGrid& grid, Fn&& fn) {
  const auto own = world_to_cell(pt.x, pt.y, grid);
  if (!own) return;
  const double sigma = r / 2.0;
  const int ix_lo = std::max(0, static_cast<int>(std::floor((pt.x - r - grid.x_min) / grid.cell_x())));
  const int ix_hi = std::min(grid.nx - 1, static_cast<int>(std::floor((pt.x + r - grid.x_min) / grid.cell_x())));
  const int iy_lo = std::max(0, static_cast<int>(std::floor((pt.y - r - grid.y_min) / grid.cell_y())));
  const int iy_hi = std::min(grid.ny - 1, static_cast<int>(std::floor((pt.y + r - grid.y_min) / grid.cell_y())));
  for (int iy = iy_lo; iy <= iy_hi; ++iy)
    for (int ix = ix_lo; ix <= ix_hi; ++ix) {
      if (ix == own->first && iy == own->second) {
        fn(ix, iy, 1.0);
        continue;
      }
      const double dx = grid.center_x(ix) - pt.x;
      const double dy = grid.center_y(iy) - pt.y;
      const double d2 = dx * dx + dy * dy;
      if (d2 > r * r) continue;
      fn(ix, iy, std::exp(-d2 / (2.0 * sigma * sigma)));
    }
}

}  // namespace

Tensor rcs_scatter(const std::vector<RadarPoint>& pts, const Tensor& feats, const BevGrid& grid,
                   const RcsScatterConfig& cfg) {
  grid.validate();
  BEVFUSE_CHECK(feats.rank() == 2 && feats.extent(0) == static_cast<int>(pts.size()), ShapeError,
                "rcs_scatter: feature rows != point count");
  const int c = feats.extent(1);
  const std::int64_t n_cells = static_cast<std::int64_t>(grid.ny) * grid.nx;
  Tensor out({c, grid.ny, grid.nx});
  const auto radii = rcs_disc_radii(pts, grid, cfg);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const double* frow = feats.data() + static_cast<std::size_t>(i) * c;
    for_each_scatter_cell(pts[i], radii[i], grid, [&](int ix, int iy, double wgt) {
      double* dst = out.data() + static_cast<std::int64_t>(iy) * grid.nx + ix;
      for (int ch = 0; ch < c; ++ch) dst[ch * n_cells] += wgt * frow[ch];
    });
  }
  return out;
}

void rcs_scatter_backward(const Tensor& gout, const std::vector<RadarPoint>& pts,
                          const BevGrid& grid, const RcsScatterConfig& cfg, Tensor& gfeats) {
  const int c = gfeats.extent(1);
  const std::int64_t n_cells = static_cast<std::int64_t>(grid.ny) * grid.nx;
  const auto radii = rcs_disc_radii(pts, grid, cfg);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    double* grow = gfeats.data() + static_cast<std::size_t>(i) * c;
    for_each_scatter_cell(pts[i], radii[i], grid, [&](int ix, int iy, double wgt) {
      const double* src = gout.data() + static_cast<std::int64_t>(iy) * grid.nx + ix;
      for (int ch = 0; ch < c; ++ch) grow[ch] += wgt * src[ch * n_cells];
    });
  }
}

Tensor radar_bev_encode(const Tensor& f, const RadarEncoderParams& p, RadarEncoderCtx* ctx) {
  RadarEncoderCtx local;
  RadarEncoderCtx& c = ctx ? *ctx : local;
  c.mid = cbr_block(f, p.b0, &c.c0);
  return cbr_block(c.mid, p.b1, &c.c1);
}

void radar_bev_encode_backward(const Tensor& gout, const Tensor& f, const RadarEncoderParams& p,
                               const RadarEncoderCtx& ctx, Tensor& gf, RadarEncoderParams& gp) {
  Tensor gmid(ctx.mid.shape());
  cbr_block_backward(gout, ctx.mid, p.b1, ctx.c1, gmid, gp.b1);
  cbr_block_backward(gmid, f, p.b0, ctx.c0, gf, gp.b0);
}

}  // namespace bevfuse
