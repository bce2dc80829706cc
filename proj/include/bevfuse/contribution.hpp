#pragma once

#include <optional>
#include <string>

#include "bevfuse/geometry.hpp"
#include "bevfuse/head.hpp"
#include "bevfuse/tensor.hpp"

namespace bevfuse {

// Per-cell modality weights from channel L2 norms of the refined BEV maps:
// C = |F_c| / (|F_c| + |F_r|), R = 1 - C; a cell where both norms vanish is
// neutral (C = R = 0.5).
struct ContributionMap {
  Tensor cam;  // [ny, nx]
  Tensor rad;  // [ny, nx]
};

ContributionMap contribution_maps(const Tensor& f_c_hat, const Tensor& f_r_hat);

struct StratifiedRow {
  int class_id = 0;
  double dist_lo = 0, dist_hi = 0;
  std::optional<double> mean_cam;  // absent when the bin is empty
  std::optional<double> mean_rad;
  int count = 0;
};

struct StratifiedReport {
  std::vector<StratifiedRow> rows;
  int skipped_outside_grid = 0;
};

// Groups detections by (class, radial distance bin from origin); each
// detection reads the camera weight at its center cell.
StratifiedReport stratify(const std::vector<Detection>& dets, const ContributionMap& cmap,
                          const BevGrid& grid, const std::vector<double>& dist_edges,
                          std::array<double, 2> origin = {0.0, 0.0});

std::string stratified_csv(const StratifiedReport& report);

// Writes <path>.csv with the camera weights plus <path>_cam.pgm and
// <path>_rad.pgm 8-bit grayscale renderings.
void export_contribution(const ContributionMap& cmap, const std::string& path_prefix);

// CSV of one [ny, nx] map, 6 decimals, row per grid row.
std::string contribution_csv(const Tensor& map);
ContributionMap read_contribution_csv(const std::string& path);

}  // namespace bevfuse
