#pragma once

#include <atomic>

#include "bevfuse/tensor.hpp"

namespace bevfuse {

// Multiply-accumulate counter for the complexity experiments. Attention ops
// bump it with bulk totals derived from actual loop bounds.
struct MacCounter {
  static void reset();
  static void add(std::uint64_t n);
  static std::uint64_t value();
};

// Bilinear interpolation of F: [C,H,W] at a normalized location p in [0,1]^2.
// p maps to the cell-center lattice: grid x = px*W - 0.5, so px=(ix+0.5)/W hits
// column ix exactly. Locations outside the map read zeros. The derivative in p
// uses the floor-branch at lattice points.
void bilinear_sample(const Tensor& f, double px, double py, double* out);
void bilinear_sample_backward(const Tensor& f, double px, double py, const double* gout,
                              Tensor& gf, double& gpx, double& gpy);

// Deformable attention over a single-scale value map.
//
// Per query q with features z_q and reference point p_q: raw offsets and
// weight logits are linear in z_q; logits are softmaxed jointly over all
// heads*points samples; output is sum_m W_m sum_k A_mqk W'_m F(p_q + dp_mqk).
// Raw offsets are scaled by a learnable per-head range expressed in cells.
struct DeformAttnParams {
  int heads = 4;
  int points = 4;
  int channels = 64;
  Tensor offset_w;     // [heads*points*2, C]
  Tensor offset_b;     // [heads*points*2]
  Tensor weight_w;     // [heads*points, C]
  Tensor weight_b;     // [heads*points]
  Tensor value_proj;   // [heads, C/heads, C]   (W'_m)
  Tensor out_proj;     // [heads, C, C/heads]   (W_m)
  Tensor offset_scale; // [heads], cells

  int head_dim() const { return channels / heads; }

  // All-zero parameters: attention contributes nothing (residual identity in
  // the DSA/DCA wrappers).
  static DeformAttnParams zeros(int heads, int points, int channels);
  // Training init: random value projection, zero offset/weight heads and zero
  // output projection, offset range 3 cells.
  static DeformAttnParams init(int heads, int points, int channels, Rng& rng,
                               double offset_scale_cells = 3.0);
  // M=1 identity wiring: W' = W = I, zero heads. deform_attn then reduces to
  // plain sampling at the reference points.
  static DeformAttnParams identity(int points, int channels);

  template <class F>
  void visit(F&& f) {
    f("offset_w", offset_w);
    f("offset_b", offset_b);
    f("weight_w", weight_w);
    f("weight_b", weight_b);
    f("value_proj", value_proj);
    f("out_proj", out_proj);
    f("offset_scale", offset_scale);
  }
};

// Query features plus normalized reference points in [0,1]^2.
struct BevQuerySet {
  Tensor z;  // [Nq, C]
  Tensor p;  // [Nq, 2] (px, py)
};

struct DeformAttnCtx {
  Tensor raw_offsets;  // [Nq, heads*points*2]
  Tensor attn;         // [Nq, heads*points] softmax output
  Tensor sample_pos;   // [Nq, heads*points, 2] normalized sample locations
  Tensor samples;      // [Nq, heads*points, C] values read from F
  Tensor head_vals;    // [Nq, heads*points, C/heads] after value projection
};

Tensor deform_attn(const BevQuerySet& q, const Tensor& f, const DeformAttnParams& p,
                   DeformAttnCtx* ctx = nullptr);
void deform_attn_backward(const Tensor& gout, const BevQuerySet& q, const Tensor& f,
                          const DeformAttnParams& p, const DeformAttnCtx& ctx, Tensor& gz,
                          Tensor& gf, DeformAttnParams& gp);

// One query per BEV cell at its own center, residual connection.
struct DeformBlockCtx {
  BevQuerySet queries;
  DeformAttnCtx attn;
};

Tensor dsa(const Tensor& f, const DeformAttnParams& p, DeformBlockCtx* ctx = nullptr);
void dsa_backward(const Tensor& gout, const Tensor& f, const DeformAttnParams& p,
                  const DeformBlockCtx& ctx, Tensor& gf, DeformAttnParams& gp);

// Queries from one BEV map, values sampled from the other; residual added to
// the query map. dca(f, f, p) == dsa(f, p).
Tensor dca(const Tensor& queries_from, const Tensor& values_from, const DeformAttnParams& p,
           DeformBlockCtx* ctx = nullptr);
void dca_backward(const Tensor& gout, const Tensor& queries_from, const Tensor& values_from,
                  const DeformAttnParams& p, const DeformBlockCtx& ctx, Tensor& gq, Tensor& gv,
                  DeformAttnParams& gp);

// Dense softmax self-attention over all H*W positions of a BEV map; the
// quadratic-complexity reference for the scaling experiment.
Tensor dense_self_attn(const Tensor& f, const Tensor& wq, const Tensor& wk, const Tensor& wv);

// Queries placed at every cell center of an H x W map.
BevQuerySet make_grid_queries(const Tensor& f);

}  // namespace bevfuse
