#pragma once

#include "bevfuse/attention.hpp"
#include "bevfuse/blocks.hpp"

namespace bevfuse {

// Hybrid fusion of camera and radar BEV maps: learnable positional encodings,
// per-modality deformable self-attention, bidirectional deformable
// cross-attention, channel concat of all four maps, three CBR blocks.
struct FusionParams {
  Tensor pos_cam, pos_rad;  // [C, ny, nx]
  DeformAttnParams dsa_cam, dsa_rad, dca_c2r, dca_r2c;
  CbrParams cbr0, cbr1, cbr2;  // 4C -> 2C (3x3) -> C (3x3) -> C (1x1)

  static FusionParams make(int channels, int ny, int nx, int heads, int points);
  static FusionParams init(int channels, int ny, int nx, int heads, int points, Rng& rng,
                           double offset_scale_cells);

  template <class F>
  void visit(F&& f);
};

struct FusionConfig {
  int num_layers = 1;
  // test hook: drop the self-attended maps from the concat (zero slots)
  bool concat_self = true;
};

struct FusionLayerCtx {
  Tensor x_c, x_r;  // layer inputs
  DeformBlockCtx dsa_cam, dsa_rad, dca_c2r, dca_r2c;
  Tensor f_cs, f_rs, f_cp, f_rp;
};

struct FusionCtx {
  std::vector<FusionLayerCtx> layers;
  Tensor concat;
  CbrCtx cbr0, cbr1, cbr2;
  Tensor mid0, mid1;
};

Tensor add_pos(const Tensor& f, const Tensor& pos);

Tensor hybrid_fuse(const Tensor& f_c, const Tensor& f_r, const FusionParams& p,
                   const FusionConfig& cfg = {}, FusionCtx* ctx = nullptr);
void hybrid_fuse_backward(const Tensor& gout, const Tensor& f_c, const Tensor& f_r,
                          const FusionParams& p, const FusionConfig& cfg, const FusionCtx& ctx,
                          Tensor& gf_c, Tensor& gf_r, FusionParams& gp);

// Baseline that concatenates the two BEV maps directly and applies the CBR
// stack, bypassing all attention.
struct NaiveFuseParams {
  CbrParams cbr0, cbr1, cbr2;  // 2C -> C (3x3) -> C (3x3) -> C (1x1)

  static NaiveFuseParams make(int channels);
  static NaiveFuseParams init(int channels, Rng& rng);

  template <class F>
  void visit(F&& f) {
    cbr0.visit([&](const char* n, Tensor& t) { f((std::string("cbr0.") + n).c_str(), t); });
    cbr1.visit([&](const char* n, Tensor& t) { f((std::string("cbr1.") + n).c_str(), t); });
    cbr2.visit([&](const char* n, Tensor& t) { f((std::string("cbr2.") + n).c_str(), t); });
  }
};

struct NaiveFuseCtx {
  Tensor concat;
  CbrCtx cbr0, cbr1, cbr2;
  Tensor mid0, mid1;
};

Tensor naive_fuse(const Tensor& f_c, const Tensor& f_r, const NaiveFuseParams& p,
                  NaiveFuseCtx* ctx = nullptr);
void naive_fuse_backward(const Tensor& gout, const Tensor& f_c, const Tensor& f_r,
                         const NaiveFuseParams& p, const NaiveFuseCtx& ctx, Tensor& gf_c,
                         Tensor& gf_r, NaiveFuseParams& gp);

// Channel concat / split helpers for [C,H,W] maps.
Tensor concat_channels(const std::vector<const Tensor*>& maps);
void split_channel_grad(const Tensor& gconcat, const std::vector<Tensor*>& gmaps);

template <class F>
void FusionParams::visit(F&& f) {
  f("pos_cam", pos_cam);
  f("pos_rad", pos_rad);
  dsa_cam.visit([&](const char* n, Tensor& t) { f((std::string("dsa_cam.") + n).c_str(), t); });
  dsa_rad.visit([&](const char* n, Tensor& t) { f((std::string("dsa_rad.") + n).c_str(), t); });
  dca_c2r.visit([&](const char* n, Tensor& t) { f((std::string("dca_c2r.") + n).c_str(), t); });
  dca_r2c.visit([&](const char* n, Tensor& t) { f((std::string("dca_r2c.") + n).c_str(), t); });
  cbr0.visit([&](const char* n, Tensor& t) { f((std::string("cbr0.") + n).c_str(), t); });
  cbr1.visit([&](const char* n, Tensor& t) { f((std::string("cbr1.") + n).c_str(), t); });
  cbr2.visit([&](const char* n, Tensor& t) { f((std::string("cbr2.") + n).c_str(), t); });
}

}  // namespace bevfuse
