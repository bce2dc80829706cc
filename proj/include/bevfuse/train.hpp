#pragma once

#include "bevfuse/checkpoint.hpp"
#include "bevfuse/config.hpp"

namespace bevfuse {

// Decoupled-weight-decay adaptive optimizer over named parameters.
class AdamW {
 public:
  AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0.01)
      : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

  void step(ModelParams& params, ModelParams& grads, const std::set<std::string>& frozen,
            const std::vector<std::string>& active, double lr);

  // Applied updates to frozen parameters; must stay zero.
  long long frozen_updates() const { return frozen_updates_; }

 private:
  double beta1_, beta2_, eps_, weight_decay_;
  std::map<std::string, Tensor> m_, v_;
  long long t_ = 0;
  long long frozen_updates_ = 0;
};

double cosine_lr(double lr0, long long step, long long total_steps);

struct TrainResult {
  double first_window_loss = 0.0;  // mean of the first 10 steps
  double last_window_loss = 0.0;   // mean of the last 10 steps
  std::vector<double> step_losses;
  long long frozen_updates = 0;
};

std::string loss_curve_csv(const TrainResult& r);

// One optimization run over the scene list. Stage 1 trains a unimodal model
// (camera by default; radar when configured), stage 2 trains radar + fusion +
// head on top of a loaded camera checkpoint with the camera branch frozen.
TrainResult stage_train(Model& model, const std::vector<Scene>& scenes, const TrainConfig& tc,
                        const std::set<std::string>& frozen, const SynthConfig& synth_cfg);

// Names of parameters the stage-2 contract freezes (camera branch + its DSA).
std::set<std::string> frozen_camera_names(Model& model);

// Stage drivers; verify the freezing contract and return the checkpoint.
Checkpoint run_stage1(Model& model, const std::vector<Scene>& scenes, const TrainConfig& tc,
                      const SynthConfig& synth_cfg, std::uint64_t config_hash, TrainResult* result = nullptr);
Checkpoint run_stage2(Model& model, const Checkpoint& camera_ckpt, const std::vector<Scene>& scenes,
                      const TrainConfig& tc, const SynthConfig& synth_cfg, std::uint64_t config_hash,
                      TrainResult* result = nullptr);

// Exact lateral mirror of a synthetic scene (camera features, depth gt, boxes,
// radar). Requires a centered principal point and symmetric grid.
Scene flip_scene(const Scene& scene, const SynthConfig& cfg);

}  // namespace bevfuse
