#pragma once

#include <map>
#include <set>

#include "bevfuse/camera.hpp"
#include "bevfuse/fusion.hpp"
#include "bevfuse/head.hpp"
#include "bevfuse/radar.hpp"
#include "bevfuse/synth.hpp"

namespace bevfuse {

enum class Modality { kCamera, kRadar, kFused };
enum class FusionMode { kHybrid, kConcat };

Modality modality_from_string(const std::string& s);
std::string to_string(Modality m);
FusionMode fusion_mode_from_string(const std::string& s);
std::string to_string(FusionMode m);

struct ModelConfig {
  BevGrid grid;
  DepthBins bins;
  int feat_channels = 16;  // camera 2D feature channels
  int feat_stride = 16;
  int image_w = 800, image_h = 512;
  int bev_channels = 64;
  int se_hidden = 32;
  int attn_heads = 4, attn_points = 4;
  double offset_scale_init = 3.0;
  int radar_channels = 32;
  int radar_blocks = 3;
  int dmsa_heads = 2;
  RcsScatterConfig rcs;
  FusionConfig fusion;
  FusionMode fusion_mode = FusionMode::kHybrid;
  double w_depth = 1.0, w_cls = 1.0, w_box = 1.0, w_vel = 1.0;
  double score_thresh = 0.1;
  int max_dets = 64;

  void validate() const;
};

struct RadarBlockParams {
  PointBlockParams point;
  DmsaParams dmsa;
  Tensor beta_raw;  // [1]; beta = softplus(beta_raw)
  InjectExtractParams ie;

  template <class F>
  void visit(F&& f) {
    point.visit([&](const char* n, Tensor& t) { f((std::string("point.") + n).c_str(), t); });
    dmsa.visit([&](const char* n, Tensor& t) { f((std::string("dmsa.") + n).c_str(), t); });
    f("beta_raw", beta_raw);
    ie.visit([&](const char* n, Tensor& t) { f((std::string("ie.") + n).c_str(), t); });
  }
};

struct ModelParams {
  SeParams se;
  DepthHeadParams depth;
  CbrParams cam_refine;
  LinearParams rad_embed;
  std::vector<RadarBlockParams> rad_blocks;
  RadarEncoderParams rad_enc;
  FusionParams fusion;
  NaiveFuseParams naive;
  HeadParams head;

  // Enumerates every parameter with its canonical checkpoint name.
  template <class F>
  void visit(F&& f);
};

ModelParams make_params(const ModelConfig& cfg);
// Zero-filled structure of the same shape, for gradient accumulation.
ModelParams make_grads(const ModelConfig& cfg);
ModelParams init_params(const ModelConfig& cfg, Rng& rng);

// Canonical name list and lookup.
std::vector<std::string> param_names(ModelParams& p);
Tensor* find_param(ModelParams& p, const std::string& name);

// Parameter-name prefixes owned by each trainable group.
std::vector<std::string> camera_param_prefixes();  // camera branch incl. its DSA
std::vector<std::string> active_prefixes(Modality m, FusionMode mode);
bool name_has_prefix(const std::string& name, const std::vector<std::string>& prefixes);

// ---- forward/backward contexts ----------------------------------------------

struct CameraBranchCtx {
  SeCtx se;
  Tensor f_cond;       // SE output
  Tensor depth_dist;   // [D,Hf,Wf]
  FrustumFeatures ff;
  Tensor pooled;       // [C_feat, ny, nx]
  CbrCtx refine;
};

struct RadarBranchCtx {
  bool empty = false;
  std::vector<RadarPoint> points;
  Tensor raw;  // [N,7]
  Tensor embedded;
  std::vector<Tensor> p_in, t_in;      // stream inputs per block (plus final streams)
  std::vector<Tensor> p_mid, t_mid;    // after point_block / dmsa
  std::vector<PointBlockCtx> point;
  std::vector<DmsaCtx> dmsa;
  std::vector<double> beta;
  std::vector<InjectExtractCtx> ie;
  Tensor combined;  // p + t
  Tensor coords;    // [N,2]
  Tensor scattered;
  RadarEncoderCtx enc;
};

struct DetectForwardCtx {
  CameraBranchCtx cam;
  RadarBranchCtx rad;
  Tensor f_cam_bev, f_rad_bev;  // branch outputs
  // unimodal path
  DeformBlockCtx uni_dsa;
  // fused paths
  FusionCtx fuse;
  NaiveFuseCtx naive;
  Tensor head_in;
  HeadCtx head;
  HeadOutput out;
};

class Model {
 public:
  Model() = default;
  Model(ModelConfig cfg, std::uint64_t init_seed);

  ModelConfig cfg;
  ModelParams params;

  Tensor camera_bev(const Scene& scene, CameraBranchCtx* ctx = nullptr) const;
  Tensor radar_bev(const std::vector<RadarPoint>& points, RadarBranchCtx* ctx = nullptr) const;

  HeadOutput forward(const Scene& scene, Modality modality, DetectForwardCtx* ctx = nullptr) const;

  struct LossBreakdown {
    double depth = 0, cls = 0, box = 0, vel = 0;
    double total() const { return depth + cls + box + vel; }
  };

  // Forward + loss; with grads != nullptr also runs the full backward and
  // accumulates parameter gradients scaled by gscale.
  LossBreakdown loss(const Scene& scene, Modality modality, ModelParams* grads = nullptr,
                     double gscale = 1.0) const;

  std::vector<Detection> detect(const Scene& scene, Modality modality,
                                DetectForwardCtx* ctx = nullptr) const;

 // Branch backwards; public so integration tests can probe the chains.
  void camera_backward(const Tensor& gbev, const Scene& scene, const CameraBranchCtx& ctx,
                       ModelParams& grads, double gdepth_loss, const Tensor* gt_depth) const;
  void radar_backward(const Tensor& gbev, const RadarBranchCtx& ctx, ModelParams& grads) const;
};

double softplus(double x);
double softplus_backward(double x, double g);

template <class F>
void ModelParams::visit(F&& f) {
  se.visit([&](const char* n, Tensor& t) { f((std::string("cam.se.") + n).c_str(), t); });
  depth.visit([&](const char* n, Tensor& t) { f((std::string("cam.depth.") + n).c_str(), t); });
  cam_refine.visit([&](const char* n, Tensor& t) { f((std::string("cam.refine.") + n).c_str(), t); });
  rad_embed.visit([&](const char* n, Tensor& t) { f((std::string("rad.embed.") + n).c_str(), t); });
  for (std::size_t i = 0; i < rad_blocks.size(); ++i) {
    const std::string prefix = "rad.block" + std::to_string(i) + ".";
    rad_blocks[i].visit([&](const char* n, Tensor& t) { f((prefix + n).c_str(), t); });
  }
  rad_enc.visit([&](const char* n, Tensor& t) { f((std::string("rad.enc.") + n).c_str(), t); });
  f("fuse.pos_cam", fusion.pos_cam);
  f("fuse.pos_rad", fusion.pos_rad);
  fusion.dsa_cam.visit([&](const char* n, Tensor& t) { f((std::string("attn.dsa_cam.") + n).c_str(), t); });
  fusion.dsa_rad.visit([&](const char* n, Tensor& t) { f((std::string("attn.dsa_rad.") + n).c_str(), t); });
  fusion.dca_c2r.visit([&](const char* n, Tensor& t) { f((std::string("attn.dca_c2r.") + n).c_str(), t); });
  fusion.dca_r2c.visit([&](const char* n, Tensor& t) { f((std::string("attn.dca_r2c.") + n).c_str(), t); });
  fusion.cbr0.visit([&](const char* n, Tensor& t) { f((std::string("fuse.cbr0.") + n).c_str(), t); });
  fusion.cbr1.visit([&](const char* n, Tensor& t) { f((std::string("fuse.cbr1.") + n).c_str(), t); });
  fusion.cbr2.visit([&](const char* n, Tensor& t) { f((std::string("fuse.cbr2.") + n).c_str(), t); });
  naive.visit([&](const char* n, Tensor& t) { f((std::string("fuse.naive.") + n).c_str(), t); });
  head.visit([&](const char* n, Tensor& t) { f((std::string("head.") + n).c_str(), t); });
}

}  // namespace bevfuse
