#pragma once

#include <string>

#include "bevfuse/geometry.hpp"
#include "bevfuse/head.hpp"

namespace bevfuse {

// Ground-truth label parsed from a KITTI-format line, converted to the ego
// BEV frame (x lateral, y forward, z up; yaw from +x toward +y).
struct GtLabel {
  Box3D box;
  std::string raw_class;
  double truncation = 0, occlusion = 0;
};

// KITTI label layout: type trunc occl alpha bbox[4] h w l x y z ry, plus two
// extension fields carrying the ego-frame velocity and, for detections, the
// score. Camera coordinates (x right, y down, z forward, location at box
// bottom) convert via ego_x = x, ego_y = z, ego_z = -y + h/2, yaw = -ry.
std::vector<GtLabel> parse_labels(const std::string& text);
std::string format_label_line(const Box3D& box, std::optional<double> score = std::nullopt);
std::vector<Detection> parse_detections(const std::string& text);

// KITTI-style calibration file with P2:, R0_rect: and Tr_velo_to_cam: rows.
// K comes from the left 3x3 of P2; R/t compose R0_rect with the ego-to-camera
// transform.
CameraCalib parse_calib(const std::string& text);
std::string format_calib(const CameraCalib& calib);

// IoU of two rotated BEV rectangles by convex polygon clipping.
double bev_iou(const Box3D& a, const Box3D& b);
// Rotated-prism 3D IoU: BEV polygon intersection area times z-interval
// overlap, exact for upright boxes.
double iou_3d(const Box3D& a, const Box3D& b);

struct EvalRegion {
  enum Kind { kFull, kCorridor } kind = kFull;
  double lat_min = -4.0, lat_max = 4.0, forward_max = 25.0;

  bool contains(const Box3D& b) const {
    if (kind == kFull) return true;
    return b.cx > lat_min && b.cx < lat_max && b.cy < forward_max;
  }
};

enum class ApInterpolation { kPoint40, kPoint11, kAll };

// Greedy score-descending matching (one gt per detection, IoU >= thresh on
// the 3D IoU), then interpolated precision integration. Returns 100 * AP.
double average_precision(const std::vector<Detection>& dets, const std::vector<Box3D>& gts,
                         int class_id, double iou_thresh, const EvalRegion& region,
                         ApInterpolation interp = ApInterpolation::kPoint40);

struct EvalReport {
  // ap[region][class], region 0 = full, 1 = corridor; mAP appended per region
  double ap[2][kNumClasses] = {};
  double map[2] = {};
};

struct EvalConfig {
  double iou_car = 0.5;
  double iou_pedestrian = 0.25;
  double iou_cyclist = 0.25;
  double corridor_lat = 4.0;
  double corridor_forward = 25.0;
  ApInterpolation interp = ApInterpolation::kPoint40;
};

EvalReport evaluate(const std::vector<std::vector<Detection>>& dets_per_frame,
                    const std::vector<std::vector<Box3D>>& gts_per_frame,
                    const EvalConfig& cfg = {});

std::string report_csv(const EvalReport& rep);
std::string report_table(const EvalReport& rep);

}  // namespace bevfuse
