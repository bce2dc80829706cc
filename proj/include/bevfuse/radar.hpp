#pragma once

#include "bevfuse/blocks.hpp"
#include "bevfuse/geometry.hpp"
#include "bevfuse/tensor.hpp"

namespace bevfuse {

// One 4D-radar return. Velocities are ego-motion compensated; t is seconds
// relative to the newest sweep (t <= 0); rcs in dBsm.
struct RadarPoint {
  double x = 0, y = 0, z = 0;
  double vx_comp = 0, vy_comp = 0;
  double rcs = 0;
  double t = 0;
};

// Raw per-point input features (x, y, z, vx, vy, rcs normalized to [0,1], t).
Tensor radar_point_features(const std::vector<RadarPoint>& pts);

// Shared per-point MLP; global max-pool concatenated back to every point.
// Output width = 2 * mlp output width.
struct PointBlockParams {
  LinearParams mlp;

  static PointBlockParams make(int out_half, int in) { return {LinearParams::make(out_half, in)}; }
  static PointBlockParams init(int out_half, int in, Rng& rng) {
    return {LinearParams::init(out_half, in, rng)};
  }

  template <class F>
  void visit(F&& f) {
    f("mlp.w", mlp.w);
    f("mlp.b", mlp.b);
  }
};

struct PointBlockCtx {
  Tensor pre, act;          // [N, out_half]
  std::vector<int> argmax;  // per output channel, index of the pooled point
};

Tensor point_block(const Tensor& feats, const PointBlockParams& p, PointBlockCtx* ctx = nullptr);
void point_block_backward(const Tensor& gout, const Tensor& feats, const PointBlockParams& p,
                          const PointBlockCtx& ctx, Tensor& gfeats, PointBlockParams& gp);

// Distance-modulated multi-head self-attention over a point set:
// Softmax(QK^T/sqrt(d) - beta*D^2)V with D the pairwise point distances.
// beta >= 0 is passed by value; the caller owns its (softplus) parameterization.
struct DmsaParams {
  int heads = 2;
  Tensor wq, wk, wv, wo;  // [C, C] each, row-major x*W convention

  static DmsaParams make(int channels, int heads);
  static DmsaParams init(int channels, int heads, Rng& rng);

  template <class F>
  void visit(F&& f) {
    f("wq", wq);
    f("wk", wk);
    f("wv", wv);
    f("wo", wo);
  }
};

struct DmsaCtx {
  Tensor q, k, v;     // [N, C]
  Tensor attn;        // [heads, N, N]
  Tensor mixed;       // [N, C] pre-output-projection
  Tensor dist2;       // [N, N]
};

Tensor dmsa(const Tensor& feats, const Tensor& coords, double beta, const DmsaParams& p,
            DmsaCtx* ctx = nullptr);
void dmsa_backward(const Tensor& gout, const Tensor& feats, const Tensor& coords, double beta,
                   const DmsaParams& p, const DmsaCtx& ctx, Tensor& gfeats, double& gbeta,
                   DmsaParams& gp);

// Single-head cross-attention coupling the point and transformer streams in
// both directions, residual on both sides.
struct InjectExtractParams {
  Tensor p_wq, p_wk, p_wv;  // point stream attends to transformer stream
  Tensor t_wq, t_wk, t_wv;  // transformer stream attends to point stream

  static InjectExtractParams make(int channels);
  static InjectExtractParams init(int channels, Rng& rng);

  template <class F>
  void visit(F&& f) {
    f("p_wq", p_wq);
    f("p_wk", p_wk);
    f("p_wv", p_wv);
    f("t_wq", t_wq);
    f("t_wk", t_wk);
    f("t_wv", t_wv);
  }
};

struct CrossAttnCtx {
  Tensor q, k, v, attn;  // attn: [N, N]
};

struct InjectExtractCtx {
  CrossAttnCtx p2t, t2p;
};

std::pair<Tensor, Tensor> inject_extract(const Tensor& point_f, const Tensor& trans_f,
                                         const InjectExtractParams& p,
                                         InjectExtractCtx* ctx = nullptr);
void inject_extract_backward(const Tensor& gpoint_out, const Tensor& gtrans_out,
                             const Tensor& point_f, const Tensor& trans_f,
                             const InjectExtractParams& p, const InjectExtractCtx& ctx,
                             Tensor& gpoint, Tensor& gtrans, InjectExtractParams& gp);

// RCS-aware BEV scattering. Every point spreads its feature over a disc of
// radius r = cell_diagonal * v_rcs with Gaussian weights (sigma = r/2); the
// cell containing the point always receives weight one. v_rcs is the min-max
// normalized RCS of the point set mapped to [v_lo, v_hi] cell radii.
struct RcsScatterConfig {
  double v_lo = 0.5;
  double v_hi = 3.0;
};

std::vector<double> rcs_disc_radii(const std::vector<RadarPoint>& pts, const BevGrid& grid,
                                   const RcsScatterConfig& cfg);
Tensor rcs_scatter(const std::vector<RadarPoint>& pts, const Tensor& feats, const BevGrid& grid,
                   const RcsScatterConfig& cfg = {});
void rcs_scatter_backward(const Tensor& gout, const std::vector<RadarPoint>& pts,
                          const BevGrid& grid, const RcsScatterConfig& cfg, Tensor& gfeats);

// Two 3x3 CBR blocks lifting the scattered radar map to the BEV channel width.
struct RadarEncoderParams {
  CbrParams b0, b1;

  static RadarEncoderParams make(int cin, int cout) {
    return {CbrParams::make(cout, cin, 3), CbrParams::make(cout, cout, 3)};
  }
  static RadarEncoderParams init(int cin, int cout, Rng& rng) {
    return {CbrParams::init(cout, cin, 3, rng), CbrParams::init(cout, cout, 3, rng)};
  }

  template <class F>
  void visit(F&& f) {
    b0.visit([&](const char* n, Tensor& t) { f((std::string("b0.") + n).c_str(), t); });
    b1.visit([&](const char* n, Tensor& t) { f((std::string("b1.") + n).c_str(), t); });
  }
};

struct RadarEncoderCtx {
  CbrCtx c0, c1;
  Tensor mid;
};

Tensor radar_bev_encode(const Tensor& f, const RadarEncoderParams& p, RadarEncoderCtx* ctx = nullptr);
void radar_bev_encode_backward(const Tensor& gout, const Tensor& f, const RadarEncoderParams& p,
                               const RadarEncoderCtx& ctx, Tensor& gf, RadarEncoderParams& gp);

}  // namespace bevfuse
