#pragma once

#include "bevfuse/tensor.hpp"

namespace bevfuse {

// y = x * w^T + b with x: [N,Cin], w: [Cout,Cin], b: [Cout].
struct LinearParams {
  Tensor w, b;

  static LinearParams make(int out, int in) {
    return {Tensor({out, in}), Tensor({out})};
  }
  static LinearParams init(int out, int in, Rng& rng);

  template <class F>
  void visit(F&& f) {
    f("w", w);
    f("b", b);
  }
};

// Zeroes every tensor field of a visitable parameter struct; gradient buffers
// start from this state.
template <class P>
void zero_fields(P& p) {
  p.visit([](const char*, Tensor& t) { t.fill(0.0); });
}

Tensor linear(const Tensor& x, const LinearParams& p);
void linear_backward(const Tensor& gout, const Tensor& x, const LinearParams& p, Tensor& gx,
                     LinearParams& gp);

// Conv -> inference-mode batch norm (per-channel affine) -> ReLU.
struct CbrParams {
  Tensor conv_w, conv_b, bn_gamma, bn_beta;

  static CbrParams make(int cout, int cin, int k);
  static CbrParams init(int cout, int cin, int k, Rng& rng);
  int kernel() const { return conv_w.extent(2); }

  template <class F>
  void visit(F&& f) {
    f("conv_w", conv_w);
    f("conv_b", conv_b);
    f("bn_gamma", bn_gamma);
    f("bn_beta", bn_beta);
  }
};

struct CbrCtx {
  Tensor conv_out, bn_out;
};

// Stride 1, symmetric pad (k-1)/2; spatial extents preserved.
Tensor cbr_block(const Tensor& x, const CbrParams& p, CbrCtx* ctx = nullptr);
void cbr_block_backward(const Tensor& gout, const Tensor& x, const CbrParams& p, const CbrCtx& ctx,
                        Tensor& gx, CbrParams& gp);

}  // namespace bevfuse
