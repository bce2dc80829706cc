#include "bevfuse/model.hpp"

#include <cmath>

namespace bevfuse {

Modality modality_from_string(const std::string& s) {
  if (s == "camera") return Modality::kCamera;
  if (s == "radar") return Modality::kRadar;
  if (s == "fused") return Modality::kFused;
  throw ConfigError("unknown modality '" + s + "' (camera|radar|fused)");
}

std::string to_string(Modality m) {
  switch (m) {
    case Modality::kCamera: return "camera";
    case Modality::kRadar: return "radar";
    default: return "fused";
  }
}

FusionMode fusion_mode_from_string(const std::string& s) {
  if (s == "hybrid") return FusionMode::kHybrid;
  if (s == "concat") return FusionMode::kConcat;
  throw ConfigError("unknown fusion mode '" + s + "' (hybrid|concat)");
}

std::string to_string(FusionMode m) { return m == FusionMode::kHybrid ? "hybrid" : "concat"; }

void ModelConfig::validate() const {
  grid.validate();
  bins.validate();
  BEVFUSE_CHECK(bev_channels % attn_heads == 0, ConfigError,
                "bev channels must divide by attention heads");
  BEVFUSE_CHECK(radar_channels % 2 == 0, ConfigError, "radar channels must be even");
  BEVFUSE_CHECK(radar_channels % dmsa_heads == 0, ConfigError,
                "radar channels must divide by dmsa heads");
  BEVFUSE_CHECK(radar_blocks >= 1, ConfigError, "need at least one radar block");
  BEVFUSE_CHECK(image_w % feat_stride == 0 && image_h % feat_stride == 0, ConfigError,
                "image extents must be multiples of the feature stride");
}

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
double softplus_backward(double x, double g) { return g / (1.0 + std::exp(-x)); }

ModelParams make_params(const ModelConfig& cfg) {
  ModelParams p;
  p.se = SeParams::make(cfg.feat_channels, cfg.se_hidden);
  p.depth = DepthHeadParams::make(cfg.bins.n_bins, cfg.feat_channels);
  p.cam_refine = CbrParams::make(cfg.bev_channels, cfg.feat_channels, 3);
  p.rad_embed = LinearParams::make(cfg.radar_channels, 7);
  p.rad_blocks.resize(static_cast<std::size_t>(cfg.radar_blocks));
  for (auto& b : p.rad_blocks) {
    b.point = PointBlockParams::make(cfg.radar_channels / 2, cfg.radar_channels);
    b.dmsa = DmsaParams::make(cfg.radar_channels, cfg.dmsa_heads);
    b.beta_raw = Tensor({1});
    b.ie = InjectExtractParams::make(cfg.radar_channels);
  }
  p.rad_enc = RadarEncoderParams::make(cfg.radar_channels, cfg.bev_channels);
  p.fusion = FusionParams::make(cfg.bev_channels, cfg.grid.ny, cfg.grid.nx, cfg.attn_heads,
                                cfg.attn_points);
  p.naive = NaiveFuseParams::make(cfg.bev_channels);
  p.head = HeadParams::make(cfg.bev_channels);
  return p;
}

ModelParams make_grads(const ModelConfig& cfg) {
  ModelParams p = make_params(cfg);
  p.visit([](const char*, Tensor& t) { t.fill(0.0); });
  return p;
}

ModelParams init_params(const ModelConfig& cfg, Rng& rng) {
  ModelParams p = make_params(cfg);
  p.se = SeParams::init(cfg.feat_channels, cfg.se_hidden, rng);
  p.depth = DepthHeadParams::init(cfg.bins.n_bins, cfg.feat_channels, rng);
  p.cam_refine = CbrParams::init(cfg.bev_channels, cfg.feat_channels, 3, rng);
  p.rad_embed = LinearParams::init(cfg.radar_channels, 7, rng);
  for (auto& b : p.rad_blocks) {
    b.point = PointBlockParams::init(cfg.radar_channels / 2, cfg.radar_channels, rng);
    b.dmsa = DmsaParams::init(cfg.radar_channels, cfg.dmsa_heads, rng);
    b.beta_raw = Tensor({1});
    b.beta_raw[0] = -5.0;  // softplus ~ 0.0067, near-flat distance bias at start
    b.ie = InjectExtractParams::init(cfg.radar_channels, rng);
  }
  p.rad_enc = RadarEncoderParams::init(cfg.radar_channels, cfg.bev_channels, rng);
  // scattered radar maps accumulate several overlapping discs per cell; the
  // fixed-statistic affine of the first encoder block compensates that scale
  p.rad_enc.b0.bn_gamma.fill(0.1);
  p.fusion = FusionParams::init(cfg.bev_channels, cfg.grid.ny, cfg.grid.nx, cfg.attn_heads,
                                cfg.attn_points, rng, cfg.offset_scale_init);
  p.naive = NaiveFuseParams::init(cfg.bev_channels, rng);
  p.head = HeadParams::init(cfg.bev_channels, rng);
  return p;
}

std::vector<std::string> param_names(ModelParams& p) {
  std::vector<std::string> names;
  p.visit([&](const char* n, Tensor&) { names.emplace_back(n); });
  return names;
}

Tensor* find_param(ModelParams& p, const std::string& name) {
  Tensor* found = nullptr;
  p.visit([&](const char* n, Tensor& t) {
    if (name == n) found = &t;
  });
  return found;
}

std::vector<std::string> camera_param_prefixes() { return {"cam.", "attn.dsa_cam."}; }

std::vector<std::string> active_prefixes(Modality m, FusionMode mode) {
  switch (m) {
    case Modality::kCamera:
      return {"cam.", "attn.dsa_cam.", "head."};
    case Modality::kRadar:
      return {"rad.", "attn.dsa_rad.", "head."};
    default:
      break;
  }
  if (mode == FusionMode::kConcat) return {"cam.", "attn.dsa_cam.", "rad.", "fuse.naive.", "head."};
  return {"cam.",          "attn.dsa_cam.", "rad.",         "attn.dsa_rad.", "attn.dca_c2r.",
          "attn.dca_r2c.", "fuse.pos_cam",  "fuse.pos_rad", "fuse.cbr",      "head."};
}

bool name_has_prefix(const std::string& name, const std::vector<std::string>& prefixes) {
  for (const std::string& p : prefixes)
    if (name.rfind(p, 0) == 0) return true;
  return false;
}

Model::Model(ModelConfig cfg_, std::uint64_t init_seed) : cfg(std::move(cfg_)) {
  cfg.validate();
  Rng rng(init_seed);
  params = init_params(cfg, rng);
}

Tensor Model::camera_bev(const Scene& scene, CameraBranchCtx* ctx) const {
  CameraBranchCtx local;
  CameraBranchCtx& c = ctx ? *ctx : local;
  const std::vector<double> cv = flatten_calib(scene.calib);
  c.f_cond = se_condition(scene.cam_features.t, cv, params.se, &c.se);
  c.depth_dist = depth_head(c.f_cond, params.depth);
  Feature2D cond{c.f_cond, scene.cam_features.stride_pixels};
  c.ff = lift(cond, c.depth_dist, scene.calib, cfg.bins);
  c.pooled = voxel_pool_efficient(c.ff, cfg.grid);
  return cbr_block(c.pooled, params.cam_refine, &c.refine);
}

void Model::camera_backward(const Tensor& gbev, const Scene& scene, const CameraBranchCtx& ctx,
                            ModelParams& grads, double gdepth_loss, const Tensor* gt_depth) const {
  Tensor gpooled(ctx.pooled.shape());
  cbr_block_backward(gbev, ctx.pooled, params.cam_refine, ctx.refine, gpooled, grads.cam_refine);
  Tensor gff(ctx.ff.features.shape());
  voxel_pool_backward(gpooled, ctx.ff, cfg.grid, gff);
  Feature2D cond{ctx.f_cond, scene.cam_features.stride_pixels};
  Tensor gf_cond(ctx.f_cond.shape());
  Tensor gdepth(ctx.depth_dist.shape());
  lift_backward(gff, cond, ctx.depth_dist, gf_cond, gdepth);
  if (gdepth_loss != 0.0 && gt_depth)
    depth_loss_backward(gdepth_loss, ctx.depth_dist, *gt_depth, gdepth);
  depth_head_backward(gdepth, ctx.f_cond, params.depth, ctx.depth_dist, gf_cond, grads.depth);
  const std::vector<double> cv = flatten_calib(scene.calib);
  Tensor gfeat(scene.cam_features.t.shape());  // input features, grad discarded
  se_condition_backward(gf_cond, scene.cam_features.t, cv, params.se, ctx.se, gfeat, grads.se);
}

Tensor Model::radar_bev(const std::vector<RadarPoint>& points, RadarBranchCtx* ctx) const {
  RadarBranchCtx local;
  RadarBranchCtx& c = ctx ? *ctx : local;
  if (points.empty()) {
    c.empty = true;
    return Tensor({cfg.bev_channels, cfg.grid.ny, cfg.grid.nx});
  }
  c.empty = false;
  c.points = points;
  const int n = static_cast<int>(points.size());
  c.raw = radar_point_features(points);
  c.embedded = linear(c.raw, params.rad_embed);
  c.coords = Tensor({n, 2});
  for (int i = 0; i < n; ++i) {
    c.coords.at(i, 0) = points[static_cast<std::size_t>(i)].x;
    c.coords.at(i, 1) = points[static_cast<std::size_t>(i)].y;
  }

  const std::size_t nb = params.rad_blocks.size();
  c.p_in.assign(nb, Tensor());
  c.t_in.assign(nb, Tensor());
  c.p_mid.assign(nb, Tensor());
  c.t_mid.assign(nb, Tensor());
  c.point.assign(nb, PointBlockCtx{});
  c.dmsa.assign(nb, DmsaCtx{});
  c.beta.assign(nb, 0.0);
  c.ie.assign(nb, InjectExtractCtx{});

  Tensor p_stream = c.embedded;
  Tensor t_stream = c.embedded;
  for (std::size_t b = 0; b < nb; ++b) {
    const RadarBlockParams& bp = params.rad_blocks[b];
    c.p_in[b] = p_stream;
    c.t_in[b] = t_stream;
    c.p_mid[b] = point_block(p_stream, bp.point, &c.point[b]);
    c.beta[b] = softplus(bp.beta_raw[0]);
    c.t_mid[b] = dmsa(t_stream, c.coords, c.beta[b], bp.dmsa, &c.dmsa[b]);
    auto [p_next, t_next] = inject_extract(c.p_mid[b], c.t_mid[b], bp.ie, &c.ie[b]);
    p_stream = std::move(p_next);
    t_stream = std::move(t_next);
  }
  c.combined = p_stream;
  c.combined.add_(t_stream);
  c.scattered = rcs_scatter(points, c.combined, cfg.grid, cfg.rcs);
  return radar_bev_encode(c.scattered, params.rad_enc, &c.enc);
}

void Model::radar_backward(const Tensor& gbev, const RadarBranchCtx& ctx, ModelParams& grads) const {
  if (ctx.empty) return;
  Tensor gscattered(ctx.scattered.shape());
  radar_bev_encode_backward(gbev, ctx.scattered, params.rad_enc, ctx.enc, gscattered, grads.rad_enc);
  Tensor gcombined(ctx.combined.shape());
  rcs_scatter_backward(gscattered, ctx.points, cfg.grid, cfg.rcs, gcombined);

  // combined = p_final + t_final
  Tensor gp = gcombined;
  Tensor gt = std::move(gcombined);
  const int nb = static_cast<int>(params.rad_blocks.size());
  for (int b = nb - 1; b >= 0; --b) {
    const RadarBlockParams& bp = params.rad_blocks[static_cast<std::size_t>(b)];
    RadarBlockParams& gbp = grads.rad_blocks[static_cast<std::size_t>(b)];
    Tensor gp_mid(ctx.p_mid[static_cast<std::size_t>(b)].shape());
    Tensor gt_mid(ctx.t_mid[static_cast<std::size_t>(b)].shape());
    inject_extract_backward(gp, gt, ctx.p_mid[static_cast<std::size_t>(b)],
                            ctx.t_mid[static_cast<std::size_t>(b)], bp.ie,
                            ctx.ie[static_cast<std::size_t>(b)], gp_mid, gt_mid, gbp.ie);
    Tensor gp_in(ctx.p_in[static_cast<std::size_t>(b)].shape());
    Tensor gt_in(ctx.t_in[static_cast<std::size_t>(b)].shape());
    point_block_backward(gp_mid, ctx.p_in[static_cast<std::size_t>(b)], bp.point,
                         ctx.point[static_cast<std::size_t>(b)], gp_in, gbp.point);
    double gbeta = 0.0;
    dmsa_backward(gt_mid, ctx.t_in[static_cast<std::size_t>(b)], ctx.coords,
                  ctx.beta[static_cast<std::size_t>(b)], bp.dmsa,
                  ctx.dmsa[static_cast<std::size_t>(b)], gt_in, gbeta, gbp.dmsa);
    gbp.beta_raw[0] += softplus_backward(bp.beta_raw[0], gbeta);
    gp = std::move(gp_in);
    gt = std::move(gt_in);
  }
  // both streams start from the embedding
  Tensor gembed = gp;
  gembed.add_(gt);
  Tensor graw(ctx.raw.shape());  // input features, grad discarded
  linear_backward(gembed, ctx.raw, params.rad_embed, graw, grads.rad_embed);
}

HeadOutput Model::forward(const Scene& scene, Modality modality, DetectForwardCtx* ctx) const {
  DetectForwardCtx local;
  DetectForwardCtx& c = ctx ? *ctx : local;
  switch (modality) {
    case Modality::kCamera: {
      c.f_cam_bev = camera_bev(scene, &c.cam);
      c.head_in = dsa(c.f_cam_bev, params.fusion.dsa_cam, &c.uni_dsa);
      break;
    }
    case Modality::kRadar: {
      c.f_rad_bev = radar_bev(scene.radar, &c.rad);
      c.head_in = dsa(c.f_rad_bev, params.fusion.dsa_rad, &c.uni_dsa);
      break;
    }
    case Modality::kFused: {
      c.f_cam_bev = camera_bev(scene, &c.cam);
      c.f_rad_bev = radar_bev(scene.radar, &c.rad);
      if (cfg.fusion_mode == FusionMode::kHybrid) {
        c.head_in = hybrid_fuse(c.f_cam_bev, c.f_rad_bev, params.fusion, cfg.fusion, &c.fuse);
      } else {
        c.head_in = naive_fuse(c.f_cam_bev, c.f_rad_bev, params.naive, &c.naive);
      }
      break;
    }
  }
  c.out = head_forward(c.head_in, params.head, &c.head);
  return c.out;
}

Model::LossBreakdown Model::loss(const Scene& scene, Modality modality, ModelParams* grads,
                                 double gscale) const {
  DetectForwardCtx ctx;
  const HeadOutput out = forward(scene, modality, &ctx);
  DetLossCtx loss_ctx;
  const DetectionLoss det = detection_loss(out, scene.boxes, cfg.grid, &loss_ctx);
  LossBreakdown lb;
  lb.cls = cfg.w_cls * det.cls;
  lb.box = cfg.w_box * det.box;
  lb.vel = cfg.w_vel * det.vel;
  if (modality == Modality::kCamera) {
    const DepthLossResult dl = depth_loss(ctx.cam.depth_dist, scene.gt_depth);
    lb.depth = cfg.w_depth * dl.loss;
  }
  if (!grads) return lb;

  // backward: detection losses -> head -> bev path(s)
  HeadOutput gout;
  gout.heatmap = out.heatmap.zeros_like();
  gout.reg = out.reg.zeros_like();
  gout.vel = out.vel.zeros_like();
  detection_loss_backward(gscale * cfg.w_cls, gscale * cfg.w_box, gscale * cfg.w_vel, out,
                          scene.boxes, cfg.grid, loss_ctx, gout);
  Tensor ghead_in(ctx.head_in.shape());
  head_backward(gout, ctx.head_in, params.head, ctx.head, ghead_in, grads->head);

  switch (modality) {
    case Modality::kCamera: {
      Tensor gbev(ctx.f_cam_bev.shape());
      dsa_backward(ghead_in, ctx.f_cam_bev, params.fusion.dsa_cam, ctx.uni_dsa, gbev,
                   grads->fusion.dsa_cam);
      camera_backward(gbev, scene, ctx.cam, *grads, gscale * cfg.w_depth, &scene.gt_depth);
      break;
    }
    case Modality::kRadar: {
      Tensor gbev(ctx.f_rad_bev.shape());
      dsa_backward(ghead_in, ctx.f_rad_bev, params.fusion.dsa_rad, ctx.uni_dsa, gbev,
                   grads->fusion.dsa_rad);
      radar_backward(gbev, ctx.rad, *grads);
      break;
    }
    case Modality::kFused: {
      Tensor gcam(ctx.f_cam_bev.shape());
      Tensor grad_bev(ctx.f_rad_bev.shape());
      if (cfg.fusion_mode == FusionMode::kHybrid) {
        hybrid_fuse_backward(ghead_in, ctx.f_cam_bev, ctx.f_rad_bev, params.fusion, cfg.fusion,
                             ctx.fuse, gcam, grad_bev, grads->fusion);
      } else {
        naive_fuse_backward(ghead_in, ctx.f_cam_bev, ctx.f_rad_bev, params.naive, ctx.naive, gcam,
                            grad_bev, grads->naive);
      }
      camera_backward(gcam, scene, ctx.cam, *grads, 0.0, nullptr);
      radar_backward(grad_bev, ctx.rad, *grads);
      break;
    }
  }
  return lb;
}

std::vector<Detection> Model::detect(const Scene& scene, Modality modality,
                                     DetectForwardCtx* ctx) const {
  const HeadOutput out = forward(scene, modality, ctx);
  return decode(out, cfg.grid, cfg.score_thresh, cfg.max_dets);
}

}  // namespace bevfuse
