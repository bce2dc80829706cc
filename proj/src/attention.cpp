#include "bevfuse/attention.hpp"

#include <cmath>

#include "bevfuse/blocks.hpp"

namespace bevfuse {

namespace {
std::atomic<std::uint64_t> g_mac_count{0};
}

void MacCounter::reset() { g_mac_count.store(0, std::memory_order_relaxed); }
void MacCounter::add(std::uint64_t n) { g_mac_count.fetch_add(n, std::memory_order_relaxed); }
std::uint64_t MacCounter::value() { return g_mac_count.load(std::memory_order_relaxed); }

void bilinear_sample(const Tensor& f, double px, double py, double* out) {
  const int c = f.extent(0), h = f.extent(1), w = f.extent(2);
  const double gx = px * w - 0.5;
  const double gy = py * h - 0.5;
  const int x0 = static_cast<int>(std::floor(gx));
  const int y0 = static_cast<int>(std::floor(gy));
  const double fx = gx - x0;
  const double fy = gy - y0;
  const double wgt[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
  const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
  const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
  for (int ch = 0; ch < c; ++ch) out[ch] = 0.0;
  for (int corner = 0; corner < 4; ++corner) {
    const int x = xs[corner], y = ys[corner];
    if (x < 0 || x >= w || y < 0 || y >= h || wgt[corner] == 0.0) continue;
    const double wv = wgt[corner];
    const double* src = f.data() + (static_cast<std::size_t>(y) * w + x);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int ch = 0; ch < c; ++ch) out[ch] += wv * src[ch * plane];
  }
}

void bilinear_sample_backward(const Tensor& f, double px, double py, const double* gout,
                              Tensor& gf, double& gpx, double& gpy) {
  const int c = f.extent(0), h = f.extent(1), w = f.extent(2);
  const double gx = px * w - 0.5;
  const double gy = py * h - 0.5;
  const int x0 = static_cast<int>(std::floor(gx));
  const int y0 = static_cast<int>(std::floor(gy));
  const double fx = gx - x0;
  const double fy = gy - y0;
  // corner weights and their derivatives w.r.t. (gx, gy)
  const double wgt[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
  const double dwx[4] = {-(1 - fy), (1 - fy), -fy, fy};
  const double dwy[4] = {-(1 - fx), -fx, (1 - fx), fx};
  const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
  const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  double ggx = 0.0, ggy = 0.0;
  for (int corner = 0; corner < 4; ++corner) {
    const int x = xs[corner], y = ys[corner];
    if (x < 0 || x >= w || y < 0 || y >= h) continue;
    const std::size_t base = static_cast<std::size_t>(y) * w + x;
    const double* src = f.data() + base;
    double* dst = gf.data() + base;
    double dot = 0.0;
    for (int ch = 0; ch < c; ++ch) {
      dst[ch * plane] += wgt[corner] * gout[ch];
      dot += gout[ch] * src[ch * plane];
    }
    ggx += dwx[corner] * dot;
    ggy += dwy[corner] * dot;
  }
  gpx += ggx * w;
  gpy += ggy * h;
}

DeformAttnParams DeformAttnParams::zeros(int heads, int points, int channels) {
  BEVFUSE_CHECK(channels % heads == 0, ShapeError, "channels must divide by head count");
  BEVFUSE_CHECK(points >= 1, ShapeError, "need at least one sampling point");
  DeformAttnParams p;
  p.heads = heads;
  p.points = points;
  p.channels = channels;
  const int mk = heads * points;
  p.offset_w = Tensor({mk * 2, channels});
  p.offset_b = Tensor({mk * 2});
  p.weight_w = Tensor({mk, channels});
  p.weight_b = Tensor({mk});
  p.value_proj = Tensor({heads, channels / heads, channels});
  p.out_proj = Tensor({heads, channels, channels / heads});
  p.offset_scale = Tensor({heads});
  return p;
}

DeformAttnParams DeformAttnParams::init(int heads, int points, int channels, Rng& rng,
                                        double offset_scale_cells) {
  DeformAttnParams p = zeros(heads, points, channels);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(channels));
  for (std::int64_t i = 0; i < p.value_proj.size(); ++i) p.value_proj[i] = rng.normal() * stddev;
  p.offset_scale.fill(offset_scale_cells);
  return p;
}

DeformAttnParams DeformAttnParams::identity(int points, int channels) {
  DeformAttnParams p = zeros(1, points, channels);
  for (int c = 0; c < channels; ++c) {
    p.value_proj.at(0, c, c) = 1.0;
    p.out_proj.at(0, c, c) = 1.0;
  }
  p.offset_scale.fill(1.0);
  return p;
}

Tensor deform_attn(const BevQuerySet& q, const Tensor& f, const DeformAttnParams& p,
                   DeformAttnCtx* ctx) {
  BEVFUSE_CHECK(f.rank() == 3, ShapeError, "deform_attn: value map must be [C,H,W]");
  BEVFUSE_CHECK(f.extent(0) == p.channels, ShapeError, "deform_attn: channel mismatch");
  BEVFUSE_CHECK(q.z.rank() == 2 && q.z.extent(1) == p.channels, ShapeError,
                "deform_attn: query width mismatch");
  BEVFUSE_CHECK(q.p.rank() == 2 && q.p.extent(0) == q.z.extent(0) && q.p.extent(1) == 2,
                ShapeError, "deform_attn: bad reference points");
  const int nq = q.z.extent(0);
  const int m = p.heads, k = p.points, c = p.channels, cm = p.head_dim();
  const int mk = m * k;
  const int h = f.extent(1), w = f.extent(2);

  Tensor raw_off = linear(q.z, LinearParams{p.offset_w, p.offset_b});   // [Nq, mk*2]
  Tensor logits = linear(q.z, LinearParams{p.weight_w, p.weight_b});    // [Nq, mk]
  Tensor attn = softmax(logits, 1);

  Tensor sample_pos({nq, mk, 2});
  Tensor samples({nq, mk, c});
  Tensor head_vals({nq, mk, cm});
  Tensor out({nq, c});

  std::vector<double> sbuf(static_cast<std::size_t>(c));
  for (int iq = 0; iq < nq; ++iq) {
    const double pqx = q.p.at(iq, 0), pqy = q.p.at(iq, 1);
    for (int im = 0; im < m; ++im) {
      const double scale = p.offset_scale.at(im);
      for (int ik = 0; ik < k; ++ik) {
        const int s = im * k + ik;
        const double ox = raw_off.at(iq, 2 * s) * scale / w;
        const double oy = raw_off.at(iq, 2 * s + 1) * scale / h;
        const double px = pqx + ox, py = pqy + oy;
        sample_pos.at(iq, s, 0) = px;
        sample_pos.at(iq, s, 1) = py;
        bilinear_sample(f, px, py, sbuf.data());
        for (int ch = 0; ch < c; ++ch) samples.at(iq, s, ch) = sbuf[ch];
        // head value: W'_m * sample
        const double a = attn.at(iq, s);
        for (int hc = 0; hc < cm; ++hc) {
          double v = 0.0;
          const double* wrow = p.value_proj.data() + (static_cast<std::size_t>(im) * cm + hc) * c;
          for (int ch = 0; ch < c; ++ch) v += wrow[ch] * sbuf[ch];
          head_vals.at(iq, s, hc) = v;
          // accumulate A * W_m * v into the output
          const double av = a * v;
          const double* orow = p.out_proj.data() + static_cast<std::size_t>(im) * c * cm + hc;
          for (int ch = 0; ch < c; ++ch) out.at(iq, ch) += av * orow[static_cast<std::size_t>(ch) * cm];
        }
      }
    }
  }

  // projections, sampling and aggregation actually executed above
  MacCounter::add(static_cast<std::uint64_t>(nq) *
                  (static_cast<std::uint64_t>(mk * 2 + mk) * c +     // offset + weight heads
                   static_cast<std::uint64_t>(mk) * (4u * c) +       // bilinear corners
                   static_cast<std::uint64_t>(mk) * cm * (c + 1) +   // value proj + A*v
                   static_cast<std::uint64_t>(mk) * cm * c));        // output proj

  if (ctx) {
    ctx->raw_offsets = std::move(raw_off);
    ctx->attn = std::move(attn);
    ctx->sample_pos = std::move(sample_pos);
    ctx->samples = std::move(samples);
    ctx->head_vals = std::move(head_vals);
  }
  debug_check_finite(out, "deform_attn");
  return out;
}

void deform_attn_backward(const Tensor& gout, const BevQuerySet& q, const Tensor& f,
                          const DeformAttnParams& p, const DeformAttnCtx& ctx, Tensor& gz,
                          Tensor& gf, DeformAttnParams& gp) {
  const int nq = q.z.extent(0);
  const int m = p.heads, k = p.points, c = p.channels, cm = p.head_dim();
  const int mk = m * k;
  const int h = f.extent(1), w = f.extent(2);
  BEVFUSE_CHECK(gout.rank() == 2 && gout.extent(0) == nq && gout.extent(1) == c, ShapeError,
                "deform_attn_backward: bad gout");

  Tensor gattn({nq, mk});
  Tensor graw({nq, mk * 2});
  std::vector<double> ghv(static_cast<std::size_t>(cm));
  std::vector<double> gsample(static_cast<std::size_t>(c));

  for (int iq = 0; iq < nq; ++iq) {
    const double* grow = gout.data() + static_cast<std::size_t>(iq) * c;
    for (int im = 0; im < m; ++im) {
      const double scale = p.offset_scale.at(im);
      for (int ik = 0; ik < k; ++ik) {
        const int s = im * k + ik;
        const double a = ctx.attn.at(iq, s);
        // g head_val = A * W_m^T grow ; g A = head_val . (W_m^T grow)
        double ga = 0.0;
        for (int hc = 0; hc < cm; ++hc) {
          const double* orow = p.out_proj.data() + static_cast<std::size_t>(im) * c * cm + hc;
          double wtg = 0.0;
          for (int ch = 0; ch < c; ++ch) wtg += orow[static_cast<std::size_t>(ch) * cm] * grow[ch];
          const double hv = ctx.head_vals.at(iq, s, hc);
          ghv[static_cast<std::size_t>(hc)] = a * wtg;
          ga += hv * wtg;
          // gW_m += grow (outer) (A * head_val)
          double* gorow = gp.out_proj.data() + static_cast<std::size_t>(im) * c * cm + hc;
          const double ahv = a * hv;
          for (int ch = 0; ch < c; ++ch) gorow[static_cast<std::size_t>(ch) * cm] += grow[ch] * ahv;
        }
        gattn.at(iq, s) = ga;
        // back through the value projection
        for (int ch = 0; ch < c; ++ch) gsample[static_cast<std::size_t>(ch)] = 0.0;
        for (int hc = 0; hc < cm; ++hc) {
          const double g = ghv[static_cast<std::size_t>(hc)];
          if (g == 0.0) continue;
          const double* wrow = p.value_proj.data() + (static_cast<std::size_t>(im) * cm + hc) * c;
          double* gwrow = gp.value_proj.data() + (static_cast<std::size_t>(im) * cm + hc) * c;
          for (int ch = 0; ch < c; ++ch) {
            gsample[static_cast<std::size_t>(ch)] += wrow[ch] * g;
            gwrow[ch] += ctx.samples.at(iq, s, ch) * g;
          }
        }
        // back through bilinear sampling
        double gpx = 0.0, gpy = 0.0;
        bilinear_sample_backward(f, ctx.sample_pos.at(iq, s, 0), ctx.sample_pos.at(iq, s, 1),
                                 gsample.data(), gf, gpx, gpy);
        // sample position = p_q + raw * scale / extent
        const double rx = ctx.raw_offsets.at(iq, 2 * s);
        const double ry = ctx.raw_offsets.at(iq, 2 * s + 1);
        graw.at(iq, 2 * s) = gpx * scale / w;
        graw.at(iq, 2 * s + 1) = gpy * scale / h;
        gp.offset_scale.at(im) += gpx * rx / w + gpy * ry / h;
      }
    }
  }

  // softmax and the two linear heads
  Tensor glogits({nq, mk});
  softmax_backward(gattn, ctx.attn, 1, glogits);
  LinearParams wb{p.weight_w, p.weight_b};
  LinearParams gwb{gp.weight_w, gp.weight_b};
  linear_backward(glogits, q.z, wb, gz, gwb);
  gp.weight_w = std::move(gwb.w);
  gp.weight_b = std::move(gwb.b);
  LinearParams ob{p.offset_w, p.offset_b};
  LinearParams gob{gp.offset_w, gp.offset_b};
  linear_backward(graw, q.z, ob, gz, gob);
  gp.offset_w = std::move(gob.w);
  gp.offset_b = std::move(gob.b);
}

BevQuerySet make_grid_queries(const Tensor& f) {
  const int c = f.extent(0), h = f.extent(1), w = f.extent(2);
  BevQuerySet q;
  q.z = Tensor({h * w, c});
  q.p = Tensor({h * w, 2});
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int iy = 0; iy < h; ++iy)
    for (int ix = 0; ix < w; ++ix) {
      const int iq = iy * w + ix;
      for (int ch = 0; ch < c; ++ch) q.z.at(iq, ch) = f.data()[ch * plane + iq];
      q.p.at(iq, 0) = (ix + 0.5) / w;
      q.p.at(iq, 1) = (iy + 0.5) / h;
    }
  return q;
}

namespace {

Tensor unflatten_queries(const Tensor& rows, int c, int h, int w) {
  Tensor out({c, h, w});
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int iq = 0; iq < h * w; ++iq)
    for (int ch = 0; ch < c; ++ch) out.data()[ch * plane + iq] = rows.at(iq, ch);
  return out;
}

void scatter_query_grad(const Tensor& grows, Tensor& gf) {
  const int c = gf.extent(0), h = gf.extent(1), w = gf.extent(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int iq = 0; iq < h * w; ++iq)
    for (int ch = 0; ch < c; ++ch) gf.data()[ch * plane + iq] += grows.at(iq, ch);
}

}  // namespace

Tensor dsa(const Tensor& f, const DeformAttnParams& p, DeformBlockCtx* ctx) {
  DeformBlockCtx local;
  DeformBlockCtx& c = ctx ? *ctx : local;
  c.queries = make_grid_queries(f);
  Tensor rows = deform_attn(c.queries, f, p, &c.attn);
  Tensor out = unflatten_queries(rows, f.extent(0), f.extent(1), f.extent(2));
  out.add_(f);
  return out;
}

void dsa_backward(const Tensor& gout, const Tensor& f, const DeformAttnParams& p,
                  const DeformBlockCtx& ctx, Tensor& gf, DeformAttnParams& gp) {
  const int c = f.extent(0), h = f.extent(1), w = f.extent(2);
  // residual path
  gf.add_(gout);
  // attention path: gout rows feed both the value map and the query features
  Tensor grows({h * w, c});
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int iq = 0; iq < h * w; ++iq)
    for (int ch = 0; ch < c; ++ch) grows.at(iq, ch) = gout.data()[ch * plane + iq];
  Tensor gz({h * w, c});
  deform_attn_backward(grows, ctx.queries, f, p, ctx.attn, gz, gf, gp);
  scatter_query_grad(gz, gf);
}

Tensor dca(const Tensor& queries_from, const Tensor& values_from, const DeformAttnParams& p,
           DeformBlockCtx* ctx) {
  check_same_shape(queries_from, values_from, "dca");
  DeformBlockCtx local;
  DeformBlockCtx& c = ctx ? *ctx : local;
  c.queries = make_grid_queries(queries_from);
  Tensor rows = deform_attn(c.queries, values_from, p, &c.attn);
  Tensor out = unflatten_queries(rows, queries_from.extent(0), queries_from.extent(1),
                                 queries_from.extent(2));
  out.add_(queries_from);
  return out;
}

void dca_backward(const Tensor& gout, const Tensor& queries_from, const Tensor& values_from,
                  const DeformAttnParams& p, const DeformBlockCtx& ctx, Tensor& gq, Tensor& gv,
                  DeformAttnParams& gp) {
  const int c = queries_from.extent(0), h = queries_from.extent(1), w = queries_from.extent(2);
  gq.add_(gout);
  Tensor grows({h * w, c});
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int iq = 0; iq < h * w; ++iq)
    for (int ch = 0; ch < c; ++ch) grows.at(iq, ch) = gout.data()[ch * plane + iq];
  Tensor gz({h * w, c});
  deform_attn_backward(grows, ctx.queries, values_from, p, ctx.attn, gz, gv, gp);
  scatter_query_grad(gz, gq);
}

Tensor dense_self_attn(const Tensor& f, const Tensor& wq, const Tensor& wk, const Tensor& wv) {
  const int c = f.extent(0), h = f.extent(1), w = f.extent(2);
  const int n = h * w;
  BEVFUSE_CHECK(wq.extent(0) == c && wq.extent(1) == c, ShapeError, "dense_self_attn: bad wq");
  // tokens: [N, C]
  Tensor tok({n, c});
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) tok.at(i, ch) = f.data()[ch * plane + i];
  Tensor q = matmul(tok, wq);
  Tensor k = matmul(tok, wk);
  Tensor v = matmul(tok, wv);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(c));
  Tensor scores({n, n});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int ch = 0; ch < c; ++ch) s += q.at(i, ch) * k.at(j, ch);
      scores.at(i, j) = s * inv_sqrt;
    }
  Tensor attn = softmax(scores, 1);
  Tensor outTok({n, c});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double a = attn.at(i, j);
      for (int ch = 0; ch < c; ++ch) outTok.at(i, ch) += a * v.at(j, ch);
    }
  MacCounter::add(3ull * n * c * c + 2ull * static_cast<std::uint64_t>(n) * n * c);
  Tensor out({c, h, w});
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) out.data()[ch * plane + i] = outTok.at(i, ch);
  return out;
}

}  // namespace bevfuse
