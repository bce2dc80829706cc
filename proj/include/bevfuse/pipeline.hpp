#pragma once

#include "bevfuse/contribution.hpp"
#include "bevfuse/train.hpp"

namespace bevfuse {

// CLI-level drivers. Everything is deterministic for a fixed config.

struct GenOptions {
  std::string out_dir;
  int n_frames = 10;
  std::uint64_t seed0 = 1;
};

void cmd_gen(const Config& cfg, const GenOptions& opt);

std::vector<Scene> load_scenes(const std::string& dir, int n_frames, const SynthConfig& cfg);
std::vector<Scene> gen_scenes(const SynthConfig& cfg, int n_frames, std::uint64_t seed0);

struct TrainOptions {
  int stage = 1;
  std::string data_dir;  // empty: generate train.frames scenes in memory
  std::string out_ckpt;
  std::string in_ckpt;  // stage 2: the stage-1 camera checkpoint
  std::string loss_csv;
};

Checkpoint cmd_train(const Config& cfg, const TrainOptions& opt);

struct ForwardOptions {
  std::string ckpt;
  std::string data_dir;
  int frame = 0;
  std::string dets_out;                 // label lines with scores
  std::vector<std::string> dump_paths;  // recognized stems: camera, radar, fused, dca_cam, dca_rad
};

std::vector<Detection> cmd_forward(const Config& cfg, const ForwardOptions& opt);

struct EvalOptions {
  std::string ckpt;
  std::string data_dir;
  int n_frames = 0;
  std::string report_csv;  // optional output path
};

EvalReport cmd_eval(const Config& cfg, const EvalOptions& opt);

struct ContribOptions {
  std::string ckpt;
  std::string data_dir;
  int n_frames = 0;
  std::string out_prefix;
};

StratifiedReport cmd_contrib(const Config& cfg, const ContribOptions& opt);

struct BenchRow {
  int grid = 0;
  int points = 0;
  int channels = 0;
  std::string dtype;
  double ref_ms = 0, eff_ms = 0;
  double max_abs_diff = 0;
};

struct BenchOptions {
  std::vector<int> grids = {64, 128};
  std::vector<int> points = {10000, 100000};
  int channels = 64;
  int runs = 5;
  bool f32 = false;
  std::uint64_t seed = 7;
};

std::vector<BenchRow> bench_pooling(const BenchOptions& opt);
std::string bench_csv(const std::vector<BenchRow>& rows);

// Inference over a whole directory of frames.
std::vector<std::vector<Detection>> detect_frames(const Model& model, const std::vector<Scene>& scenes,
                                                  Modality modality);

Model model_from_checkpoint(const Config& cfg, const std::string& ckpt_path, Modality* modality_out,
                            FusionMode* mode_out);

}  // namespace bevfuse
