#include "bevfuse/fusion.hpp"

#include <cmath>

namespace bevfuse {

FusionParams FusionParams::make(int channels, int ny, int nx, int heads, int points) {
  FusionParams p;
  p.pos_cam = Tensor({channels, ny, nx});
  p.pos_rad = Tensor({channels, ny, nx});
  p.dsa_cam = DeformAttnParams::zeros(heads, points, channels);
  p.dsa_rad = DeformAttnParams::zeros(heads, points, channels);
  p.dca_c2r = DeformAttnParams::zeros(heads, points, channels);
  p.dca_r2c = DeformAttnParams::zeros(heads, points, channels);
  p.cbr0 = CbrParams::make(2 * channels, 4 * channels, 3);
  p.cbr1 = CbrParams::make(channels, 2 * channels, 3);
  p.cbr2 = CbrParams::make(channels, channels, 1);
  return p;
}

namespace {

// Fixed sinusoidal pattern used as the starting point of the learnable
// positional encodings.
void fill_sinusoidal(Tensor& pos) {
  const int c = pos.extent(0), ny = pos.extent(1), nx = pos.extent(2);
  for (int ch = 0; ch < c; ++ch) {
    const double freq = std::pow(2.0, ch % 4) * 3.14159265358979323846;
    const bool use_x = (ch / 4) % 2 == 0;
    const bool use_sin = ch % 2 == 0;
    for (int iy = 0; iy < ny; ++iy)
      for (int ix = 0; ix < nx; ++ix) {
        const double u = use_x ? (ix + 0.5) / nx : (iy + 0.5) / ny;
        pos.at(ch, iy, ix) = 0.1 * (use_sin ? std::sin(freq * u) : std::cos(freq * u));
      }
  }
}

}  // namespace

FusionParams FusionParams::init(int channels, int ny, int nx, int heads, int points, Rng& rng,
                                double offset_scale_cells) {
  FusionParams p = make(channels, ny, nx, heads, points);
  fill_sinusoidal(p.pos_cam);
  fill_sinusoidal(p.pos_rad);
  p.dsa_cam = DeformAttnParams::init(heads, points, channels, rng, offset_scale_cells);
  p.dsa_rad = DeformAttnParams::init(heads, points, channels, rng, offset_scale_cells);
  p.dca_c2r = DeformAttnParams::init(heads, points, channels, rng, offset_scale_cells);
  p.dca_r2c = DeformAttnParams::init(heads, points, channels, rng, offset_scale_cells);
  p.cbr0 = CbrParams::init(2 * channels, 4 * channels, 3, rng);
  p.cbr1 = CbrParams::init(channels, 2 * channels, 3, rng);
  p.cbr2 = CbrParams::init(channels, channels, 1, rng);
  return p;
}

Tensor add_pos(const Tensor& f, const Tensor& pos) {
  check_same_shape(f, pos, "add_pos");
  Tensor out = f;
  out.add_(pos);
  return out;
}

Tensor concat_channels(const std::vector<const Tensor*>& maps) {
  BEVFUSE_CHECK(!maps.empty(), ShapeError, "concat_channels: no inputs");
  const int ny = maps[0]->extent(1), nx = maps[0]->extent(2);
  int total_c = 0;
  for (const Tensor* m : maps) {
    BEVFUSE_CHECK(m->extent(1) == ny && m->extent(2) == nx, ShapeError,
                  "concat_channels: spatial mismatch");
    total_c += m->extent(0);
  }
  Tensor out({total_c, ny, nx});
  const std::int64_t plane = static_cast<std::int64_t>(ny) * nx;
  std::int64_t off = 0;
  for (const Tensor* m : maps) {
    std::copy(m->data(), m->data() + m->size(), out.data() + off * plane);
    off += m->extent(0);
  }
  return out;
}

void split_channel_grad(const Tensor& gconcat, const std::vector<Tensor*>& gmaps) {
  const std::int64_t plane = static_cast<std::int64_t>(gconcat.extent(1)) * gconcat.extent(2);
  std::int64_t off = 0;
  for (Tensor* g : gmaps) {
    const double* src = gconcat.data() + off * plane;
    for (std::int64_t i = 0; i < g->size(); ++i) g->data()[i] += src[i];
    off += g->extent(0);
  }
}

Tensor hybrid_fuse(const Tensor& f_c, const Tensor& f_r, const FusionParams& p,
                   const FusionConfig& cfg, FusionCtx* ctx) {
  check_same_shape(f_c, f_r, "hybrid_fuse");
  check_same_shape(f_c, p.pos_cam, "hybrid_fuse pos");
  BEVFUSE_CHECK(cfg.num_layers >= 1, ConfigError, "hybrid_fuse: need at least one layer");
  FusionCtx local;
  FusionCtx& c = ctx ? *ctx : local;
  c.layers.assign(static_cast<std::size_t>(cfg.num_layers), FusionLayerCtx{});

  Tensor x_c = add_pos(f_c, p.pos_cam);
  Tensor x_r = add_pos(f_r, p.pos_rad);
  for (int layer = 0; layer < cfg.num_layers; ++layer) {
    FusionLayerCtx& lc = c.layers[static_cast<std::size_t>(layer)];
    lc.x_c = x_c;
    lc.x_r = x_r;
    lc.f_cs = dsa(lc.x_c, p.dsa_cam, &lc.dsa_cam);
    lc.f_rs = dsa(lc.x_r, p.dsa_rad, &lc.dsa_rad);
    lc.f_cp = dca(lc.f_cs, lc.f_rs, p.dca_c2r, &lc.dca_c2r);
    lc.f_rp = dca(lc.f_rs, lc.f_cs, p.dca_r2c, &lc.dca_r2c);
    x_c = lc.f_cp;
    x_r = lc.f_rp;
  }

  const FusionLayerCtx& last = c.layers.back();
  Tensor zero;
  if (!cfg.concat_self) zero = last.f_cs.zeros_like();
  c.concat = cfg.concat_self
                 ? concat_channels({&last.f_cs, &last.f_rs, &last.f_cp, &last.f_rp})
                 : concat_channels({&zero, &zero, &last.f_cp, &last.f_rp});
  c.mid0 = cbr_block(c.concat, p.cbr0, &c.cbr0);
  c.mid1 = cbr_block(c.mid0, p.cbr1, &c.cbr1);
  Tensor out = cbr_block(c.mid1, p.cbr2, &c.cbr2);
  debug_check_finite(out, "hybrid_fuse");
  return out;
}

void hybrid_fuse_backward(const Tensor& gout, const Tensor& f_c, const Tensor& f_r,
                          const FusionParams& p, const FusionConfig& cfg, const FusionCtx& ctx,
                          Tensor& gf_c, Tensor& gf_r, FusionParams& gp) {
  Tensor gmid1(ctx.mid1.shape());
  cbr_block_backward(gout, ctx.mid1, p.cbr2, ctx.cbr2, gmid1, gp.cbr2);
  Tensor gmid0(ctx.mid0.shape());
  cbr_block_backward(gmid1, ctx.mid0, p.cbr1, ctx.cbr1, gmid0, gp.cbr1);
  Tensor gconcat(ctx.concat.shape());
  cbr_block_backward(gmid0, ctx.concat, p.cbr0, ctx.cbr0, gconcat, gp.cbr0);

  const FusionLayerCtx& last = ctx.layers.back();
  Tensor g_cs = last.f_cs.zeros_like();
  Tensor g_rs = last.f_rs.zeros_like();
  Tensor g_cp = last.f_cp.zeros_like();
  Tensor g_rp = last.f_rp.zeros_like();
  if (cfg.concat_self) {
    split_channel_grad(gconcat, {&g_cs, &g_rs, &g_cp, &g_rp});
  } else {
    Tensor sink_c = g_cs.zeros_like(), sink_r = g_rs.zeros_like();
    split_channel_grad(gconcat, {&sink_c, &sink_r, &g_cp, &g_rp});
  }

  Tensor gx_c = f_c.zeros_like();
  Tensor gx_r = f_r.zeros_like();
  for (int layer = cfg.num_layers - 1; layer >= 0; --layer) {
    const FusionLayerCtx& lc = ctx.layers[static_cast<std::size_t>(layer)];
    // outputs of this layer are (f_cp, f_rp); for the last layer the concat
    // gradients of the self maps also apply
    Tensor gl_cs = layer == cfg.num_layers - 1 ? std::move(g_cs) : lc.f_cs.zeros_like();
    Tensor gl_rs = layer == cfg.num_layers - 1 ? std::move(g_rs) : lc.f_rs.zeros_like();
    Tensor gl_cp = std::move(g_cp);
    Tensor gl_rp = std::move(g_rp);

    // cross attention: f_cp = dca(f_cs, f_rs), f_rp = dca(f_rs, f_cs)
    dca_backward(gl_cp, lc.f_cs, lc.f_rs, p.dca_c2r, lc.dca_c2r, gl_cs, gl_rs, gp.dca_c2r);
    dca_backward(gl_rp, lc.f_rs, lc.f_cs, p.dca_r2c, lc.dca_r2c, gl_rs, gl_cs, gp.dca_r2c);

    // self attention: f_cs = dsa(x_c), f_rs = dsa(x_r)
    gx_c.fill(0.0);
    gx_r.fill(0.0);
    dsa_backward(gl_cs, lc.x_c, p.dsa_cam, lc.dsa_cam, gx_c, gp.dsa_cam);
    dsa_backward(gl_rs, lc.x_r, p.dsa_rad, lc.dsa_rad, gx_r, gp.dsa_rad);

    if (layer > 0) {
      g_cp = gx_c;
      g_rp = gx_r;
      g_cs = Tensor();
      g_rs = Tensor();
    }
  }
  // x_c = f_c + pos_cam, x_r = f_r + pos_rad
  gf_c.add_(gx_c);
  gf_r.add_(gx_r);
  gp.pos_cam.add_(gx_c);
  gp.pos_rad.add_(gx_r);
}

NaiveFuseParams NaiveFuseParams::make(int channels) {
  return {CbrParams::make(channels, 2 * channels, 3), CbrParams::make(channels, channels, 3),
          CbrParams::make(channels, channels, 1)};
}

NaiveFuseParams NaiveFuseParams::init(int channels, Rng& rng) {
  return {CbrParams::init(channels, 2 * channels, 3, rng), CbrParams::init(channels, channels, 3, rng),
          CbrParams::init(channels, channels, 1, rng)};
}

Tensor naive_fuse(const Tensor& f_c, const Tensor& f_r, const NaiveFuseParams& p, NaiveFuseCtx* ctx) {
  check_same_shape(f_c, f_r, "naive_fuse");
  NaiveFuseCtx local;
  NaiveFuseCtx& c = ctx ? *ctx : local;
  c.concat = concat_channels({&f_c, &f_r});
  c.mid0 = cbr_block(c.concat, p.cbr0, &c.cbr0);
  c.mid1 = cbr_block(c.mid0, p.cbr1, &c.cbr1);
  return cbr_block(c.mid1, p.cbr2, &c.cbr2);
}

void naive_fuse_backward(const Tensor& gout, const Tensor& f_c, const Tensor& f_r,
                         const NaiveFuseParams& p, const NaiveFuseCtx& ctx, Tensor& gf_c,
                         Tensor& gf_r, NaiveFuseParams& gp) {
  (void)f_r;
  Tensor gmid1(ctx.mid1.shape());
  cbr_block_backward(gout, ctx.mid1, p.cbr2, ctx.cbr2, gmid1, gp.cbr2);
  Tensor gmid0(ctx.mid0.shape());
  cbr_block_backward(gmid1, ctx.mid0, p.cbr1, ctx.cbr1, gmid0, gp.cbr1);
  Tensor gconcat(ctx.concat.shape());
  cbr_block_backward(gmid0, ctx.concat, p.cbr0, ctx.cbr0, gconcat, gp.cbr0);
  (void)f_c;
  split_channel_grad(gconcat, {&gf_c, &gf_r});
}

}  // namespace bevfuse
