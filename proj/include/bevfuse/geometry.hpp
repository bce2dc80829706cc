#pragma once

#include <array>
#include <optional>
#include <vector>

#include "bevfuse/common.hpp"

namespace bevfuse {

// BEV grid over the ground plane. x is lateral (right positive), y is forward.
// Cells are half-open: a point on the max boundary maps to no cell.
struct BevGrid {
  double x_min = -51.2, x_max = 51.2;
  double y_min = 0.0, y_max = 51.2;
  int nx = 128, ny = 128;

  void validate() const;
  double cell_x() const { return (x_max - x_min) / nx; }
  double cell_y() const { return (y_max - y_min) / ny; }
  double center_x(int ix) const { return x_min + (ix + 0.5) * cell_x(); }
  double center_y(int iy) const { return y_min + (iy + 0.5) * cell_y(); }
  bool contains(double x, double y) const {
    return x >= x_min && x < x_max && y >= y_min && y < y_max;
  }
};

std::optional<std::pair<int, int>> world_to_cell(const std::array<double, 3>& p, const BevGrid& grid);
std::optional<std::pair<int, int>> world_to_cell(double x, double y, const BevGrid& grid);

// Pinhole camera. Ego frame: x right, y forward, z up. Camera frame: x right,
// y down, z forward (optical axis). p_cam = R * p_ego + t, pixel = K * p_cam.
struct CameraCalib {
  std::array<double, 9> K{};  // row-major 3x3, upper triangular
  std::array<double, 9> R{};  // row-major 3x3, orthonormal
  std::array<double, 3> t{};

  void validate() const;
};

// Ego-frame point for pixel (u,v) at camera depth d: p = R^T (d K^{-1} [u,v,1]^T - t).
std::array<double, 3> frustum_to_ego(double u, double v, double d, const CameraCalib& calib);

// Returns (u, v, depth). Inverse of frustum_to_ego on the image domain.
std::array<double, 3> project_to_image(const std::array<double, 3>& p_ego, const CameraCalib& calib);

// Fixed-order flattening of (R, t, K): 9 + 3 + 9 = 21 values.
std::vector<double> flatten_calib(const CameraCalib& calib);

// Uniformly spaced depth bins along the camera ray, d_min > 0.
struct DepthBins {
  double d_min = 1.0, d_max = 51.2;
  int n_bins = 64;

  void validate() const;
  double width() const { return (d_max - d_min) / n_bins; }
  double center(int i) const { return d_min + (i + 0.5) * width(); }
  // Bin containing depth d, or -1 outside [d_min, d_max).
  int bin_of(double d) const;
};

// Synthetic single-camera rig: camera at (0, 0, height) looking forward (+y),
// focal f pixels, principal point at image center.
CameraCalib make_forward_calib(double focal, int image_w, int image_h, double height);

}  // namespace bevfuse
