#pragma once

#include <string>

#include "bevfuse/camera.hpp"
#include "bevfuse/geometry.hpp"
#include "bevfuse/head.hpp"
#include "bevfuse/radar.hpp"

namespace bevfuse {

// Deterministic synthetic scene: ground-truth boxes, accumulated radar sweeps,
// pseudo camera features (class-coded blobs at projected box locations), and
// projected one-hot depth ground truth. Regeneration with the same seed and
// config is bit-identical.
struct Scene {
  std::vector<Box3D> boxes;
  std::vector<RadarPoint> radar;
  Feature2D cam_features;
  Tensor gt_depth;  // [D, Hf, Wf]; all-zero column = invalid pixel
  CameraCalib calib;
  std::uint64_t seed = 0;
};

struct SynthConfig {
  BevGrid grid;
  DepthBins bins;
  int image_w = 800, image_h = 512;
  int feat_stride = 16;
  int feat_channels = 16;

  int cars_min = 1, cars_max = 3;
  int peds_min = 0, peds_max = 2;
  int cyclists_min = 0, cyclists_max = 2;

  // radar returns per box per sweep
  int car_points = 12, cyclist_points = 6, ped_points = 3;
  double car_rcs_mean = 15.0, car_rcs_sigma = 3.0;
  double cyclist_rcs_mean = 5.0, cyclist_rcs_sigma = 2.0;
  double ped_rcs_mean = -2.0, ped_rcs_sigma = 2.0;
  double clutter_rcs_mean = 0.0, clutter_rcs_sigma = 4.0;
  double clutter_fraction = 0.2;

  int n_sweeps = 5;
  double sweep_dt = 0.1;

  double camera_height = 1.6;
  double focal = 500.0;

  // camera blob appearance
  double blob_gain = 3.0;
  double feature_noise = 0.05;
  // depth cue: per-pixel blob amplitude scales like (ref_depth / depth)^cue_power
  double depth_cue_power = 1.0;
  double depth_cue_noise = 0.15;

  // Fig.4-style fixed layout: one large vehicle ahead plus a pedestrian
  // cluster, no randomized counts.
  bool benchmark_scene = false;

  void validate() const;
};

Scene gen_scene(std::uint64_t seed, const SynthConfig& cfg);

// Radar sweeps accumulated back in time: sweep k samples each moving box at
// its position k*dt earlier, stamping t = -k*dt.
std::vector<RadarPoint> accumulate_sweeps(const Scene& scene, const SynthConfig& cfg, int n_sweeps,
                                          double dt);

std::vector<RadarPoint> radar_augment(const std::vector<RadarPoint>& points, double drop_prob,
                                      double noise_sigma, std::uint64_t seed);

// Joint flip/rot90 of a BEV tensor and box parameters. flip_x mirrors the
// lateral axis (requires a laterally symmetric grid); rot90_k rotates by k*90
// degrees about the grid center (requires nx == ny and square cells).
std::pair<Tensor, std::vector<Box3D>> bev_augment(const Tensor& f, const std::vector<Box3D>& boxes,
                                                  const BevGrid& grid, bool flip_x, int rot90_k);

// ---- per-frame file formats -------------------------------------------------
// radar csv: header x,y,z,vx_comp,vy_comp,rcs,t
std::string radar_csv(const std::vector<RadarPoint>& points);
std::vector<RadarPoint> parse_radar_csv(const std::string& text);

void write_scene(const Scene& scene, const std::string& dir, int frame_index);
Scene read_scene(const std::string& dir, int frame_index, const SynthConfig& cfg);
std::string frame_prefix(int frame_index);

}  // namespace bevfuse
