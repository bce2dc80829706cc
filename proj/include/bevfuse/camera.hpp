#pragma once

#include "bevfuse/blocks.hpp"
#include "bevfuse/geometry.hpp"
#include "bevfuse/tensor.hpp"

namespace bevfuse {

// 2D feature map plus its downsample factor relative to the input image.
struct Feature2D {
  Tensor t;  // [C, Hf, Wf]
  int stride_pixels = 16;
};

// Calibration-conditioned channel gating: f'[c] = f[c] * sigmoid(MLP(calib_vec))[c].
struct SeParams {
  LinearParams fc1;  // [hidden, 21]
  LinearParams fc2;  // [C, hidden]

  static SeParams make(int channels, int hidden);
  static SeParams init(int channels, int hidden, Rng& rng);

  template <class F>
  void visit(F&& f) {
    f("fc1.w", fc1.w);
    f("fc1.b", fc1.b);
    f("fc2.w", fc2.w);
    f("fc2.b", fc2.b);
  }
};

struct SeCtx {
  Tensor h_pre, h, gate_pre, gate;  // [1, hidden] / [1, C] rows
};

Tensor se_condition(const Tensor& f, const std::vector<double>& calib_vec, const SeParams& p,
                    SeCtx* ctx = nullptr);
void se_condition_backward(const Tensor& gout, const Tensor& f, const std::vector<double>& calib_vec,
                           const SeParams& p, const SeCtx& ctx, Tensor& gf, SeParams& gp);

// 1x1 convolution to depth-bin logits followed by softmax over bins.
struct DepthHeadParams {
  Tensor w;  // [D, C]
  Tensor b;  // [D]

  static DepthHeadParams make(int bins, int channels);
  static DepthHeadParams init(int bins, int channels, Rng& rng);

  template <class F>
  void visit(F&& f) {
    f("w", w);
    f("b", b);
  }
};

// Returns [D, Hf, Wf]; every pixel's bin distribution sums to one.
Tensor depth_head(const Tensor& f, const DepthHeadParams& p);
void depth_head_backward(const Tensor& gout, const Tensor& f, const DepthHeadParams& p,
                         const Tensor& dist, Tensor& gf, DepthHeadParams& gp);

// Frustum features from the per-pixel outer product of features and depth
// probabilities, with the ego-frame location of every (bin, pixel) sample.
// point_id is the canonical (d,h,w) flat index; pooling accumulates each cell
// in point_id order, so results do not depend on storage order.
struct FrustumFeatures {
  Tensor features;                          // [C, D, Hf, Wf]
  std::vector<std::array<double, 3>> ego;   // D*Hf*Wf, dhw order
  std::vector<std::int64_t> point_id;       // empty: storage order is canonical
};

FrustumFeatures lift(const Feature2D& f, const Tensor& depth, const CameraCalib& calib,
                     const DepthBins& bins);
void lift_backward(const Tensor& gfeatures, const Feature2D& f, const Tensor& depth, Tensor& gf,
                   Tensor& gdepth);

// Sum of frustum features per BEV cell. The reference path sorts points by
// cell id and takes cumulative-sum segment differences; the efficient path
// pre-buckets points per cell and scatter-adds cell ranges in parallel with a
// fixed per-cell accumulation order. Both drop out-of-grid points.
Tensor voxel_pool_reference(const FrustumFeatures& ff, const BevGrid& grid);
Tensor voxel_pool_efficient(const FrustumFeatures& ff, const BevGrid& grid);
void voxel_pool_backward(const Tensor& gout, const FrustumFeatures& ff, const BevGrid& grid,
                         Tensor& gfeatures);

// float32 benchmark kernels over pre-binned points; features: [N, C] flat.
std::vector<float> voxel_pool_reference_f32(const std::vector<float>& feats,
                                            const std::vector<std::int32_t>& cells, int n_cells,
                                            int channels);
std::vector<float> voxel_pool_efficient_f32(const std::vector<float>& feats,
                                            const std::vector<std::int32_t>& cells, int n_cells,
                                            int channels, int threads);
std::vector<std::int32_t> frustum_cell_ids(const FrustumFeatures& ff, const BevGrid& grid);

// Masked binary cross-entropy between the predicted distribution and a one-hot
// ground truth ([D, Hf, Wf]); all-zero gt columns mark invalid pixels. The loss
// averages over valid pixels and bins; log inputs clamp at 1e-12.
struct DepthLossResult {
  double loss = 0.0;
  bool any_valid = false;
};

DepthLossResult depth_loss(const Tensor& pred, const Tensor& gt);
void depth_loss_backward(double gscale, const Tensor& pred, const Tensor& gt, Tensor& gpred);

// Image pixel of a feature-map cell center.
inline double feature_pixel_u(int ix, int stride) { return (ix + 0.5) * stride; }
inline double feature_pixel_v(int iy, int stride) { return (iy + 0.5) * stride; }

}  // namespace bevfuse
