#include "bevfuse/train.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace bevfuse {

void AdamW::step(ModelParams& params, ModelParams& grads, const std::set<std::string>& frozen,
                 const std::vector<std::string>& active, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));

  std::vector<std::pair<std::string, Tensor*>> plist;
  params.visit([&](const char* n, Tensor& t) { plist.emplace_back(n, &t); });
  std::vector<Tensor*> glist;
  grads.visit([&](const char*, Tensor& t) { glist.push_back(&t); });
  BEVFUSE_CHECK(plist.size() == glist.size(), InvariantError, "param/grad structure mismatch");

  for (std::size_t i = 0; i < plist.size(); ++i) {
    const std::string& name = plist[i].first;
    if (!name_has_prefix(name, active) || frozen.count(name)) continue;
    Tensor& p = *plist[i].second;
    Tensor& g = *glist[i];
    auto mit = m_.find(name);
    if (mit == m_.end()) {
      m_.emplace(name, p.zeros_like());
      v_.emplace(name, p.zeros_like());
      mit = m_.find(name);
    }
    Tensor& m = mit->second;
    Tensor& v = v_.find(name)->second;
    // every applied update to a frozen parameter counts against the contract
    if (frozen.count(name)) ++frozen_updates_;
    for (std::int64_t k = 0; k < p.size(); ++k) {
      m[k] = beta1_ * m[k] + (1.0 - beta1_) * g[k];
      v[k] = beta2_ * v[k] + (1.0 - beta2_) * g[k] * g[k];
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      p[k] -= lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * p[k]);
    }
  }
}

double cosine_lr(double lr0, long long step, long long total_steps) {
  if (total_steps <= 1) return lr0;
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps - 1);
  return lr0 * 0.5 * (1.0 + std::cos(3.14159265358979323846 * frac));
}

std::string loss_curve_csv(const TrainResult& r) {
  std::ostringstream os;
  os << "step,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < r.step_losses.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.9f\n", i, r.step_losses[i]);
    os << buf;
  }
  return os.str();
}

Scene flip_scene(const Scene& scene, const SynthConfig& cfg) {
  Scene out = scene;
  const int wf = scene.cam_features.t.extent(2);
  const int hf = scene.cam_features.t.extent(1);
  Tensor& feat = out.cam_features.t;
  for (int ch = 0; ch < feat.extent(0); ++ch)
    for (int iy = 0; iy < hf; ++iy)
      for (int ix = 0; ix < wf; ++ix)
        feat.at(ch, iy, ix) = scene.cam_features.t.at(ch, iy, wf - 1 - ix);
  for (int b = 0; b < out.gt_depth.extent(0); ++b)
    for (int iy = 0; iy < hf; ++iy)
      for (int ix = 0; ix < wf; ++ix)
        out.gt_depth.at(b, iy, ix) = scene.gt_depth.at(b, iy, wf - 1 - ix);
  for (Box3D& b : out.boxes) {
    b.cx = -b.cx;
    b.yaw = wrap_angle(3.14159265358979323846 - b.yaw);
    b.vx = -b.vx;
  }
  for (RadarPoint& p : out.radar) {
    p.x = -p.x;
    p.vx_comp = -p.vx_comp;
  }
  (void)cfg;
  return out;
}

TrainResult stage_train(Model& model, const std::vector<Scene>& scenes, const TrainConfig& tc,
                        const std::set<std::string>& frozen, const SynthConfig& synth_cfg) {
  BEVFUSE_CHECK(!scenes.empty(), ValueError, "stage_train: no scenes");
  model.cfg.fusion_mode = tc.fusion_mode;
  AdamW opt(0.9, 0.999, 1e-8, tc.weight_decay);
  const auto active = active_prefixes(tc.modality, tc.fusion_mode);

  const int n = static_cast<int>(scenes.size());
  const int batch = std::max(1, tc.batch_size);
  const long long steps_per_epoch = (n + batch - 1) / batch;
  const long long total_steps = steps_per_epoch * tc.epochs;

  TrainResult res;
  Rng aug_rng(tc.seed ^ 0xa076bdf1d5f9c7b3ULL);
  long long step = 0;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    for (int start = 0; start < n; start += batch, ++step) {
      ModelParams grads = make_grads(model.cfg);
      const int bsz = std::min(batch, n - start);
      double loss_sum = 0.0;
      for (int i = 0; i < bsz; ++i) {
        const Scene& base = scenes[static_cast<std::size_t>(start + i)];
        Scene aug = base;
        const bool do_flip = tc.aug_flip && aug_rng.uniform() < 0.5;
        if (do_flip) aug = flip_scene(base, synth_cfg);
        if (tc.modality != Modality::kCamera && (tc.aug_radar_drop > 0.0 || tc.aug_radar_noise > 0.0)) {
          aug.radar = radar_augment(aug.radar, tc.aug_radar_drop, tc.aug_radar_noise,
                                    aug_rng.next_u64());
        }
        const auto lb = model.loss(aug, tc.modality, &grads, 1.0 / bsz);
        loss_sum += lb.total();
      }
      const double loss = loss_sum / bsz;
      if (!std::isfinite(loss))
        throw ValueError("training diverged: non-finite loss at step " + std::to_string(step));
      res.step_losses.push_back(loss);
      opt.step(model.params, grads, frozen, active, cosine_lr(tc.lr, step, total_steps));
    }
  }
  const std::size_t w = std::min<std::size_t>(10, res.step_losses.size());
  for (std::size_t i = 0; i < w; ++i) {
    res.first_window_loss += res.step_losses[i] / static_cast<double>(w);
    res.last_window_loss += res.step_losses[res.step_losses.size() - 1 - i] / static_cast<double>(w);
  }
  res.frozen_updates = opt.frozen_updates();
  BEVFUSE_CHECK(res.frozen_updates == 0, InvariantError,
                "optimizer applied updates to frozen parameters");
  return res;
}

std::set<std::string> frozen_camera_names(Model& model) {
  std::set<std::string> out;
  const auto prefixes = camera_param_prefixes();
  model.params.visit([&](const char* n, Tensor&) {
    if (name_has_prefix(n, prefixes)) out.insert(n);
  });
  return out;
}

Checkpoint run_stage1(Model& model, const std::vector<Scene>& scenes, const TrainConfig& tc,
                      const SynthConfig& synth_cfg, std::uint64_t config_hash, TrainResult* result) {
  BEVFUSE_CHECK(tc.stage == 1, ConfigError, "run_stage1: config is not stage 1");
  TrainResult res = stage_train(model, scenes, tc, {}, synth_cfg);
  if (result) *result = res;
  Checkpoint ck = Checkpoint::from_model(model, {}, 1, static_cast<std::uint32_t>(tc.epochs),
                                         config_hash);
  ck.modality = to_string(tc.modality);
  ck.fusion_mode = to_string(tc.fusion_mode);
  return ck;
}

Checkpoint run_stage2(Model& model, const Checkpoint& camera_ckpt, const std::vector<Scene>& scenes,
                      const TrainConfig& tc, const SynthConfig& synth_cfg, std::uint64_t config_hash,
                      TrainResult* result) {
  BEVFUSE_CHECK(tc.stage == 2, ConfigError, "run_stage2: config is not stage 2");
  camera_ckpt.apply_to(model);
  const std::set<std::string> frozen = frozen_camera_names(model);
  const std::uint64_t digest_before =
      Checkpoint::from_model(model, frozen, 2, 0, config_hash).subset_digest(frozen);

  TrainResult res = stage_train(model, scenes, tc, frozen, synth_cfg);
  if (result) *result = res;

  Checkpoint ck = Checkpoint::from_model(model, frozen, 2, static_cast<std::uint32_t>(tc.epochs),
                                         config_hash);
  ck.modality = to_string(tc.modality);
  ck.fusion_mode = to_string(tc.fusion_mode);
  const std::uint64_t digest_after = ck.subset_digest(frozen);
  BEVFUSE_CHECK(digest_after == digest_before, InvariantError,
                "frozen camera parameters drifted during stage 2");
  return ck;
}

}  // namespace bevfuse
