#pragma once

#include "bevfuse/geometry.hpp"
#include "bevfuse/tensor.hpp"

namespace bevfuse {

inline constexpr int kNumClasses = 3;
enum ObjectClass : int { kCar = 0, kPedestrian = 1, kCyclist = 2 };
const char* class_name(int class_id);
int class_id_from_name(const std::string& name);  // -1 for classes outside the set

// Oriented 3D box. cx/cy/cz is the volumetric center; yaw rotates the length
// axis counterclockwise from +x (lateral) toward +y (forward), wrapped to
// (-pi, pi].
struct Box3D {
  double cx = 0, cy = 0, cz = 0;
  double l = 1, w = 1, h = 1;
  double yaw = 0;
  double vx = 0, vy = 0;
  int class_id = kCar;
};

double wrap_angle(double a);

struct Detection {
  Box3D box;
  double score = 0;
};

// Per-cell head maps: class heatmaps after sigmoid, regression channels
// (dx, dy, cz, log l, log w, log h, sin yaw, cos yaw), velocity (vx, vy).
struct HeadOutput {
  Tensor heatmap;  // [3, ny, nx]
  Tensor reg;      // [8, ny, nx]
  Tensor vel;      // [2, ny, nx]
};

inline constexpr int kRegChannels = 8;
inline constexpr int kVelChannels = 2;

struct HeadParams {
  Tensor heat_w, heat_b;  // [3, C], [3]
  Tensor reg_w, reg_b;    // [8, C], [8]
  Tensor vel_w, vel_b;    // [2, C], [2]

  static HeadParams make(int channels);
  static HeadParams init(int channels, Rng& rng);

  template <class F>
  void visit(F&& f) {
    f("heat_w", heat_w);
    f("heat_b", heat_b);
    f("reg_w", reg_w);
    f("reg_b", reg_b);
    f("vel_w", vel_w);
    f("vel_b", vel_b);
  }
};

struct HeadCtx {
  Tensor heat_sig;  // sigmoid output (same as HeadOutput.heatmap)
};

HeadOutput head_forward(const Tensor& f, const HeadParams& p, HeadCtx* ctx = nullptr);
void head_backward(const HeadOutput& gout, const Tensor& f, const HeadParams& p, const HeadCtx& ctx,
                   Tensor& gf, HeadParams& gp);

// Per-class Gaussian center heatmap; overlapping bumps take the elementwise
// max. Radius follows the CenterNet footprint formula (min overlap 0.3) with a
// floor of 2 cells.
Tensor render_gt_heatmap(const std::vector<Box3D>& boxes, const BevGrid& grid);
double gaussian_radius_cells(double extent_y, double extent_x, double min_overlap = 0.3);

struct DetectionLoss {
  double cls = 0, box = 0, vel = 0;
  double total() const { return cls + box + vel; }
};

struct DetLossCtx {
  Tensor gt_heat;
  std::vector<int> center_cells;   // iy*nx+ix per kept box
  std::vector<int> kept_boxes;     // indices into the input list
  int n_boxes = 0;
};

// Penalty-reduced Gaussian focal loss on the heatmaps (alpha=2, beta=4),
// L1 on regression and velocity channels at ground-truth center cells,
// each term normalized by the number of in-grid boxes (min 1).
DetectionLoss detection_loss(const HeadOutput& pred, const std::vector<Box3D>& boxes,
                             const BevGrid& grid, DetLossCtx* ctx = nullptr);
void detection_loss_backward(double gcls, double gbox, double gvel, const HeadOutput& pred,
                             const std::vector<Box3D>& boxes, const BevGrid& grid,
                             const DetLossCtx& ctx, HeadOutput& gpred);

// 3x3 max-pool peak selection, score threshold, top-k, box reconstruction.
// Ties break by (score desc, iy, ix, class).
std::vector<Detection> decode(const HeadOutput& pred, const BevGrid& grid, double score_thresh,
                              int max_dets);

// Regression target channels for a box at its center cell.
std::array<double, kRegChannels> reg_targets(const Box3D& box, const BevGrid& grid, int ix, int iy);

}  // namespace bevfuse
