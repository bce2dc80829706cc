#include "bevfuse/blocks.hpp"

#include <cmath>

namespace bevfuse {

LinearParams LinearParams::init(int out, int in, Rng& rng) {
  LinearParams p = make(out, in);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(in));
  for (std::int64_t i = 0; i < p.w.size(); ++i) p.w[i] = rng.normal() * stddev;
  return p;
}

Tensor linear(const Tensor& x, const LinearParams& p) {
  BEVFUSE_CHECK(x.rank() == 2, ShapeError, "linear: input must be [N,Cin]");
  BEVFUSE_CHECK(x.extent(1) == p.w.extent(1), ShapeError, "linear: input width mismatch");
  const int n = x.extent(0), cin = x.extent(1), cout = p.w.extent(0);
  Tensor out({n, cout});
  for (int i = 0; i < n; ++i)
    for (int o = 0; o < cout; ++o) {
      double s = p.b.at(o);
      const double* xr = x.data() + static_cast<std::size_t>(i) * cin;
      const double* wr = p.w.data() + static_cast<std::size_t>(o) * cin;
      for (int c = 0; c < cin; ++c) s += xr[c] * wr[c];
      out.at(i, o) = s;
    }
  debug_check_finite(out, "linear");
  return out;
}

void linear_backward(const Tensor& gout, const Tensor& x, const LinearParams& p, Tensor& gx,
                     LinearParams& gp) {
  const int n = x.extent(0), cin = x.extent(1), cout = p.w.extent(0);
  BEVFUSE_CHECK(gout.extent(0) == n && gout.extent(1) == cout, ShapeError,
                "linear_backward: bad gout");
  for (int i = 0; i < n; ++i) {
    const double* xr = x.data() + static_cast<std::size_t>(i) * cin;
    const double* gr = gout.data() + static_cast<std::size_t>(i) * cout;
    double* gxr = gx.data() + static_cast<std::size_t>(i) * cin;
    for (int o = 0; o < cout; ++o) {
      const double g = gr[o];
      if (g == 0.0) continue;
      gp.b.at(o) += g;
      const double* wr = p.w.data() + static_cast<std::size_t>(o) * cin;
      double* gwr = gp.w.data() + static_cast<std::size_t>(o) * cin;
      for (int c = 0; c < cin; ++c) {
        gwr[c] += g * xr[c];
        gxr[c] += g * wr[c];
      }
    }
  }
}

CbrParams CbrParams::make(int cout, int cin, int k) {
  CbrParams p;
  p.conv_w = Tensor({cout, cin, k, k});
  p.conv_b = Tensor({cout});
  p.bn_gamma = Tensor::full({cout}, 1.0);
  p.bn_beta = Tensor({cout});
  return p;
}

CbrParams CbrParams::init(int cout, int cin, int k, Rng& rng) {
  CbrParams p = make(cout, cin, k);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(cin) * k * k);
  for (std::int64_t i = 0; i < p.conv_w.size(); ++i) p.conv_w[i] = rng.normal() * stddev;
  // small positive bias keeps narrow blocks alive through the rectifier
  p.conv_b.fill(0.05);
  return p;
}

Tensor cbr_block(const Tensor& x, const CbrParams& p, CbrCtx* ctx) {
  const int k = p.kernel();
  Tensor conv = conv2d(x, p.conv_w, p.conv_b, 1, (k - 1) / 2);
  Tensor bn = channel_affine(conv, p.bn_gamma, p.bn_beta);
  Tensor out = relu(bn);
  if (ctx) {
    ctx->conv_out = std::move(conv);
    ctx->bn_out = std::move(bn);
  }
  return out;
}

void cbr_block_backward(const Tensor& gout, const Tensor& x, const CbrParams& p, const CbrCtx& ctx,
                        Tensor& gx, CbrParams& gp) {
  Tensor gbn = ctx.bn_out.zeros_like();
  relu_backward(gout, ctx.bn_out, gbn);
  Tensor gconv = ctx.conv_out.zeros_like();
  channel_affine_backward(gbn, ctx.conv_out, p.bn_gamma, gconv, gp.bn_gamma, gp.bn_beta);
  conv2d_backward(gconv, x, p.conv_w, 1, (p.kernel() - 1) / 2, gx, gp.conv_w, gp.conv_b);
}

}  // namespace bevfuse
