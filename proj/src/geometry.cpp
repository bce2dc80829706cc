#include "bevfuse/geometry.hpp"

#include <cmath>

namespace bevfuse {

namespace {

std::array<double, 3> mat3_vec(const std::array<double, 9>& m, const std::array<double, 3>& v) {
  return {m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
          m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
          m[6] * v[0] + m[7] * v[1] + m[8] * v[2]};
}

std::array<double, 3> mat3t_vec(const std::array<double, 9>& m, const std::array<double, 3>& v) {
  return {m[0] * v[0] + m[3] * v[1] + m[6] * v[2],
          m[1] * v[0] + m[4] * v[1] + m[7] * v[2],
          m[2] * v[0] + m[5] * v[1] + m[8] * v[2]};
}

// Inverse of an upper-triangular K = [[fx, s, cx], [0, fy, cy], [0, 0, 1]].
std::array<double, 9> invert_intrinsics(const std::array<double, 9>& k) {
  const double fx = k[0], s = k[1], cx = k[2], fy = k[4], cy = k[5];
  BEVFUSE_CHECK(std::fabs(fx) > 1e-12 && std::fabs(fy) > 1e-12, ValueError,
                "singular intrinsic matrix");
  return {1.0 / fx, -s / (fx * fy), (s * cy - cx * fy) / (fx * fy),
          0.0,      1.0 / fy,       -cy / fy,
          0.0,      0.0,            1.0};
}

}  // namespace

void BevGrid::validate() const {
  BEVFUSE_CHECK(x_max > x_min && y_max > y_min, ConfigError, "BevGrid: empty extent");
  BEVFUSE_CHECK(nx >= 1 && ny >= 1, ConfigError, "BevGrid: cell counts must be >= 1");
}

std::optional<std::pair<int, int>> world_to_cell(double x, double y, const BevGrid& grid) {
  if (!grid.contains(x, y)) return std::nullopt;
  int ix = static_cast<int>(std::floor((x - grid.x_min) / grid.cell_x()));
  int iy = static_cast<int>(std::floor((y - grid.y_min) / grid.cell_y()));
  // floor on the boundary of the last cell can round up; clamp inside
  if (ix >= grid.nx) ix = grid.nx - 1;
  if (iy >= grid.ny) iy = grid.ny - 1;
  return std::make_pair(ix, iy);
}

std::optional<std::pair<int, int>> world_to_cell(const std::array<double, 3>& p, const BevGrid& grid) {
  return world_to_cell(p[0], p[1], grid);
}

void CameraCalib::validate() const {
  BEVFUSE_CHECK(K[3] == 0.0 && K[6] == 0.0 && K[7] == 0.0, ValueError,
                "intrinsics must be upper triangular");
  BEVFUSE_CHECK(K[0] > 0.0 && K[4] > 0.0, ValueError, "focal lengths must be positive");
  // R^T R = I within 1e-9
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0.0;
      for (int k = 0; k < 3; ++k) s += R[k * 3 + i] * R[k * 3 + j];
      const double want = i == j ? 1.0 : 0.0;
      BEVFUSE_CHECK(std::fabs(s - want) <= 1e-9, ValueError, "rotation is not orthonormal");
    }
}

std::array<double, 3> frustum_to_ego(double u, double v, double d, const CameraCalib& calib) {
  BEVFUSE_CHECK(d > 0.0, ValueError, "frustum_to_ego: depth must be positive");
  const auto kinv = invert_intrinsics(calib.K);
  std::array<double, 3> ray = mat3_vec(kinv, {u, v, 1.0});
  std::array<double, 3> cam = {d * ray[0] - calib.t[0], d * ray[1] - calib.t[1],
                               d * ray[2] - calib.t[2]};
  return mat3t_vec(calib.R, cam);
}

std::array<double, 3> project_to_image(const std::array<double, 3>& p_ego, const CameraCalib& calib) {
  std::array<double, 3> cam = mat3_vec(calib.R, p_ego);
  cam[0] += calib.t[0];
  cam[1] += calib.t[1];
  cam[2] += calib.t[2];
  const std::array<double, 3> pix = mat3_vec(calib.K, cam);
  BEVFUSE_CHECK(std::fabs(pix[2]) > 1e-12, ValueError, "project_to_image: point at zero depth");
  return {pix[0] / pix[2], pix[1] / pix[2], cam[2]};
}

std::vector<double> flatten_calib(const CameraCalib& calib) {
  std::vector<double> out;
  out.reserve(21);
  for (double v : calib.R) out.push_back(v);
  for (double v : calib.t) out.push_back(v);
  for (double v : calib.K) out.push_back(v);
  return out;
}

void DepthBins::validate() const {
  BEVFUSE_CHECK(d_min > 0.0, ConfigError, "DepthBins: d_min must be positive");
  BEVFUSE_CHECK(d_max > d_min, ConfigError, "DepthBins: empty range");
  BEVFUSE_CHECK(n_bins >= 2, ConfigError, "DepthBins: need at least 2 bins");
}

int DepthBins::bin_of(double d) const {
  if (d < d_min || d >= d_max) return -1;
  int b = static_cast<int>(std::floor((d - d_min) / width()));
  return b >= n_bins ? n_bins - 1 : b;
}

CameraCalib make_forward_calib(double focal, int image_w, int image_h, double height) {
  CameraCalib c;
  c.K = {focal, 0.0, image_w / 2.0, 0.0, focal, image_h / 2.0, 0.0, 0.0, 1.0};
  // ego (x right, y forward, z up) -> camera (x right, y down, z forward)
  c.R = {1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0};
  // camera center at ego (0, 0, height): t = -R * center
  c.t = {0.0, height, 0.0};
  return c;
}

}  // namespace bevfuse
