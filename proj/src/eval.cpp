#include "bevfuse/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace bevfuse {

// ---- KITTI label parsing ----------------------------------------------------

std::vector<GtLabel> parse_labels(const std::string& text) {
  std::vector<GtLabel> out;
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    std::vector<std::string> fields;
    std::string tok;
    while (ls >> tok) fields.push_back(tok);
    if (fields.size() < 15) {
      throw ParseError("label line " + std::to_string(line_no) + ": expected >= 15 fields, got " +
                       std::to_string(fields.size()));
    }
    double v[14];
    for (int i = 1; i < 15; ++i) {
      try {
        std::size_t used = 0;
        v[i - 1] = std::stod(fields[static_cast<std::size_t>(i)], &used);
        if (used != fields[static_cast<std::size_t>(i)].size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw ParseError("label line " + std::to_string(line_no) + ", column " +
                         std::to_string(i + 1) + ": non-numeric field '" +
                         fields[static_cast<std::size_t>(i)] + "'");
      }
    }
    const int cls = class_id_from_name(fields[0]);
    if (cls < 0) continue;  // classes outside the benchmark set are ignored
    GtLabel g;
    g.raw_class = fields[0];
    g.truncation = v[0];
    g.occlusion = v[1];
    // fields: alpha v[2], bbox v[3..6], h v[7], w v[8], l v[9], x v[10], y v[11], z v[12], ry v[13]
    const double h = v[7], w = v[8], l = v[9];
    const double cam_x = v[10], cam_y = v[11], cam_z = v[12], ry = v[13];
    g.box.class_id = cls;
    g.box.l = l;
    g.box.w = w;
    g.box.h = h;
    g.box.cx = cam_x;
    g.box.cy = cam_z;
    g.box.cz = -cam_y + h / 2.0;
    g.box.yaw = wrap_angle(-ry);
    // optional trailing ego-frame velocity (extension fields 16/17)
    if (fields.size() >= 17) {
      try {
        g.box.vx = std::stod(fields[15]);
        g.box.vy = std::stod(fields[16]);
      } catch (const std::exception&) {
        throw ParseError("label line " + std::to_string(line_no) + ": bad velocity fields");
      }
    }
    out.push_back(std::move(g));
  }
  return out;
}

std::string format_label_line(const Box3D& box, std::optional<double> score) {
  // inverse of the parse_labels frame conversion; fields 16/17 carry the
  // ego-frame velocity, field 18 the detection score when present
  const double cam_x = box.cx, cam_z = box.cy, cam_y = -(box.cz - box.h / 2.0);
  const double ry = wrap_angle(-box.yaw);
  char buf[440];
  std::snprintf(buf, sizeof buf,
                "%s 0.00 0 0.00 0.00 0.00 0.00 0.00 %.6f %.6f %.6f %.6f %.6f %.6f %.6f %.6f %.6f",
                class_name(box.class_id), box.h, box.w, box.l, cam_x, cam_y, cam_z, ry, box.vx,
                box.vy);
  std::string line = buf;
  if (score) {
    std::snprintf(buf, sizeof buf, " %.6f", *score);
    line += buf;
  }
  return line;
}

std::vector<Detection> parse_detections(const std::string& text) {
  std::vector<Detection> out;
  const auto labels = parse_labels(text);
  // score rides in field 18; re-tokenize per line to pick it up
  std::istringstream is(text);
  std::string line;
  std::size_t li = 0;
  while (std::getline(is, line)) {
    if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    std::vector<std::string> fields;
    std::string tok;
    while (ls >> tok) fields.push_back(tok);
    if (class_id_from_name(fields[0]) < 0) continue;
    BEVFUSE_CHECK(fields.size() >= 18, ParseError, "detection line without score field");
    Detection d;
    d.box = labels[li].box;
    d.score = std::stod(fields[17]);
    out.push_back(d);
    ++li;
  }
  return out;
}

namespace {

std::vector<double> parse_numbers(const std::string& s, std::size_t want, const char* what) {
  std::istringstream is(s);
  std::vector<double> vals;
  double v;
  while (is >> v) vals.push_back(v);
  BEVFUSE_CHECK(vals.size() == want, ParseError,
                std::string("calib row ") + what + ": wrong value count");
  return vals;
}

}  // namespace

CameraCalib parse_calib(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  std::vector<double> p2, r0, tr;
  while (std::getline(is, line)) {
    const auto colon = line.find(':');
    if (colon == std::string::npos) continue;
    const std::string key = line.substr(0, colon);
    const std::string rest = line.substr(colon + 1);
    if (key == "P2") p2 = parse_numbers(rest, 12, "P2");
    else if (key == "R0_rect") r0 = parse_numbers(rest, 9, "R0_rect");
    else if (key == "Tr_velo_to_cam") tr = parse_numbers(rest, 12, "Tr_velo_to_cam");
  }
  BEVFUSE_CHECK(!p2.empty(), ParseError, "calibration: missing P2 row");
  BEVFUSE_CHECK(!r0.empty(), ParseError, "calibration: missing R0_rect row");
  BEVFUSE_CHECK(!tr.empty(), ParseError, "calibration: missing Tr_velo_to_cam row");
  CameraCalib c;
  c.K = {p2[0], p2[1], p2[2], p2[4], p2[5], p2[6], p2[8], p2[9], p2[10]};
  // R = R0 * Tr_R, t = R0 * Tr_t
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0.0;
      for (int k = 0; k < 3; ++k) s += r0[static_cast<std::size_t>(i * 3 + k)] * tr[static_cast<std::size_t>(k * 4 + j)];
      c.R[static_cast<std::size_t>(i * 3 + j)] = s;
    }
  for (int i = 0; i < 3; ++i) {
    double s = 0.0;
    for (int k = 0; k < 3; ++k) s += r0[static_cast<std::size_t>(i * 3 + k)] * tr[static_cast<std::size_t>(k * 4 + 3)];
    c.t[static_cast<std::size_t>(i)] = s;
  }
  c.validate();
  return c;
}

std::string format_calib(const CameraCalib& calib) {
  char buf[600];
  std::ostringstream os;
  std::snprintf(buf, sizeof buf, "P2: %.9f %.9f %.9f 0.0 %.9f %.9f %.9f 0.0 %.9f %.9f %.9f 0.0\n",
                calib.K[0], calib.K[1], calib.K[2], calib.K[3], calib.K[4], calib.K[5], calib.K[6],
                calib.K[7], calib.K[8]);
  os << buf;
  os << "R0_rect: 1.0 0.0 0.0 0.0 1.0 0.0 0.0 0.0 1.0\n";
  std::snprintf(buf, sizeof buf,
                "Tr_velo_to_cam: %.9f %.9f %.9f %.9f %.9f %.9f %.9f %.9f %.9f %.9f %.9f %.9f\n",
                calib.R[0], calib.R[1], calib.R[2], calib.t[0], calib.R[3], calib.R[4], calib.R[5],
                calib.t[1], calib.R[6], calib.R[7], calib.R[8], calib.t[2]);
  os << buf;
  return os.str();
}

// ---- rotated IoU ------------------------------------------------------------

namespace {

struct Pt {
  double x, y;
};

// counterclockwise corner order; the clipper keeps the left half-plane
std::vector<Pt> box_corners(const Box3D& b) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double hl = b.l / 2.0, hw = b.w / 2.0;
  std::vector<Pt> out(4);
  const double ex[4] = {hl, -hl, -hl, hl};
  const double ey[4] = {hw, hw, -hw, -hw};
  for (int i = 0; i < 4; ++i) {
    out[static_cast<std::size_t>(i)] = {b.cx + ex[i] * c - ey[i] * s, b.cy + ex[i] * s + ey[i] * c};
  }
  return out;
}

double polygon_area(const std::vector<Pt>& poly) {
  double a = 0.0;
  const std::size_t n = poly.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Pt& p = poly[i];
    const Pt& q = poly[(i + 1) % n];
    a += p.x * q.y - q.x * p.y;
  }
  return std::fabs(a) / 2.0;
}

// Sutherland-Hodgman clip of a convex polygon by the half-plane left of a->b.
std::vector<Pt> clip_halfplane(const std::vector<Pt>& poly, const Pt& a, const Pt& b) {
  std::vector<Pt> out;
  const std::size_t n = poly.size();
  auto side = [&](const Pt& p) { return (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x); };
  for (std::size_t i = 0; i < n; ++i) {
    const Pt& cur = poly[i];
    const Pt& nxt = poly[(i + 1) % n];
    const double sc = side(cur), sn = side(nxt);
    if (sc >= 0) out.push_back(cur);
    if ((sc > 0 && sn < 0) || (sc < 0 && sn > 0)) {
      const double t = sc / (sc - sn);
      out.push_back({cur.x + t * (nxt.x - cur.x), cur.y + t * (nxt.y - cur.y)});
    }
  }
  return out;
}

double rect_intersection_area(const Box3D& a, const Box3D& b) {
  std::vector<Pt> poly = box_corners(a);
  const std::vector<Pt> clip = box_corners(b);
  // corners are counterclockwise for yaw=0; ensure consistent winding
  for (std::size_t i = 0; i < 4 && poly.size() >= 3; ++i)
    poly = clip_halfplane(poly, clip[i], clip[(i + 1) % 4]);
  if (poly.size() < 3) return 0.0;
  return polygon_area(poly);
}

}  // namespace

double bev_iou(const Box3D& a, const Box3D& b) {
  BEVFUSE_CHECK(a.l > 0 && a.w > 0 && b.l > 0 && b.w > 0, ValueError,
                "bev_iou: box extents must be positive");
  const double inter = rect_intersection_area(a, b);
  const double uni = a.l * a.w + b.l * b.w - inter;
  if (uni <= 0.0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

double iou_3d(const Box3D& a, const Box3D& b) {
  BEVFUSE_CHECK(a.h > 0 && b.h > 0, ValueError, "iou_3d: box heights must be positive");
  const double inter_bev = rect_intersection_area(a, b);
  const double za0 = a.cz - a.h / 2.0, za1 = a.cz + a.h / 2.0;
  const double zb0 = b.cz - b.h / 2.0, zb1 = b.cz + b.h / 2.0;
  const double dz = std::max(0.0, std::min(za1, zb1) - std::max(za0, zb0));
  const double inter = inter_bev * dz;
  const double uni = a.l * a.w * a.h + b.l * b.w * b.h - inter;
  if (uni <= 0.0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

// ---- average precision -------------------------------------------------------

namespace {

// (recall, precision) operating points after each detection, score-descending.
std::vector<std::pair<double, double>> pr_curve(const std::vector<Detection>& dets,
                                                const std::vector<Box3D>& gts, double iou_thresh) {
  std::vector<int> order(dets.size());
  for (std::size_t i = 0; i < dets.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(),
                   [&dets](int a, int b) { return dets[static_cast<std::size_t>(a)].score > dets[static_cast<std::size_t>(b)].score; });
  std::vector<bool> taken(gts.size(), false);
  std::vector<std::pair<double, double>> pts;
  int tp = 0, fp = 0;
  for (int idx : order) {
    const Detection& d = dets[static_cast<std::size_t>(idx)];
    double best = 0.0;
    int best_gt = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g]) continue;
      const double o = iou_3d(d.box, gts[g]);
      if (o >= iou_thresh && o > best) {
        best = o;
        best_gt = static_cast<int>(g);
      }
    }
    if (best_gt >= 0) {
      taken[static_cast<std::size_t>(best_gt)] = true;
      ++tp;
    } else {
      ++fp;
    }
    pts.emplace_back(gts.empty() ? 0.0 : static_cast<double>(tp) / gts.size(),
                     static_cast<double>(tp) / (tp + fp));
  }
  return pts;
}

double integrate_pr(const std::vector<std::pair<double, double>>& pts, ApInterpolation interp) {
  auto max_prec_at = [&pts](double recall) {
    double best = 0.0;
    for (const auto& [r, p] : pts)
      if (r >= recall) best = std::max(best, p);
    return best;
  };
  switch (interp) {
    case ApInterpolation::kPoint40: {
      double s = 0.0;
      for (int i = 1; i <= 40; ++i) s += max_prec_at(i / 40.0);
      return s / 40.0;
    }
    case ApInterpolation::kPoint11: {
      double s = 0.0;
      for (int i = 0; i <= 10; ++i) s += max_prec_at(i / 10.0);
      return s / 11.0;
    }
    case ApInterpolation::kAll: {
      // exact area under the interpolated precision envelope
      double area = 0.0, prev_r = 0.0;
      std::vector<double> recalls;
      for (const auto& [r, p] : pts) recalls.push_back(r);
      std::sort(recalls.begin(), recalls.end());
      recalls.erase(std::unique(recalls.begin(), recalls.end()), recalls.end());
      for (double r : recalls) {
        if (r > prev_r) area += (r - prev_r) * max_prec_at(r);
        prev_r = r;
      }
      return area;
    }
  }
  return 0.0;
}

}  // namespace

double average_precision(const std::vector<Detection>& dets, const std::vector<Box3D>& gts,
                         int class_id, double iou_thresh, const EvalRegion& region,
                         ApInterpolation interp) {
  std::vector<Detection> d;
  for (const Detection& x : dets)
    if (x.box.class_id == class_id && region.contains(x.box)) d.push_back(x);
  std::vector<Box3D> g;
  for (const Box3D& x : gts)
    if (x.class_id == class_id && region.contains(x)) g.push_back(x);
  if (g.empty()) return d.empty() ? 100.0 : 0.0;
  if (d.empty()) return 0.0;
  return 100.0 * integrate_pr(pr_curve(d, g, iou_thresh), interp);
}

EvalReport evaluate(const std::vector<std::vector<Detection>>& dets_per_frame,
                    const std::vector<std::vector<Box3D>>& gts_per_frame, const EvalConfig& cfg) {
  BEVFUSE_CHECK(dets_per_frame.size() == gts_per_frame.size(), ValueError,
                "evaluate: frame count mismatch");
  EvalReport rep;
  const double thr[kNumClasses] = {cfg.iou_car, cfg.iou_pedestrian, cfg.iou_cyclist};
  for (int region_idx = 0; region_idx < 2; ++region_idx) {
    EvalRegion region;
    region.kind = region_idx == 0 ? EvalRegion::kFull : EvalRegion::kCorridor;
    region.lat_min = -cfg.corridor_lat;
    region.lat_max = cfg.corridor_lat;
    region.forward_max = cfg.corridor_forward;
    for (int cls = 0; cls < kNumClasses; ++cls) {
      // pool frames after region + class filtering, keeping frames separable
      std::vector<Detection> d;
      std::vector<Box3D> g;
      const double frame_shift = 1e6;
      for (std::size_t f = 0; f < dets_per_frame.size(); ++f) {
        for (Detection x : dets_per_frame[f]) {
          if (x.box.class_id != cls || !region.contains(x.box)) continue;
          x.box.cx += frame_shift * static_cast<double>(f + 1);
          d.push_back(x);
        }
        for (Box3D x : gts_per_frame[f]) {
          if (x.class_id != cls || !region.contains(x)) continue;
          x.cx += frame_shift * static_cast<double>(f + 1);
          g.push_back(x);
        }
      }
      EvalRegion pooled;  // filtering already applied
      pooled.kind = EvalRegion::kFull;
      rep.ap[region_idx][cls] = average_precision(d, g, cls, thr[cls], pooled, cfg.interp);
    }
    rep.map[region_idx] = (rep.ap[region_idx][0] + rep.ap[region_idx][1] + rep.ap[region_idx][2]) / 3.0;
  }
  return rep;
}

std::string report_csv(const EvalReport& rep) {
  std::ostringstream os;
  os << "region,class,ap\n";
  const char* regions[2] = {"full", "corridor"};
  char buf[96];
  for (int r = 0; r < 2; ++r) {
    for (int cls = 0; cls < kNumClasses; ++cls) {
      std::snprintf(buf, sizeof buf, "%s,%s,%.2f\n", regions[r], class_name(cls), rep.ap[r][cls]);
      os << buf;
    }
    std::snprintf(buf, sizeof buf, "%s,mAP,%.2f\n", regions[r], rep.map[r]);
    os << buf;
  }
  return os.str();
}

std::string report_table(const EvalReport& rep) {
  std::ostringstream os;
  char buf[160];
  os << "Region               Car    Ped.   Cyc.   mAP\n";
  const char* names[2] = {"Entire area     ", "Driving corridor"};
  for (int r = 0; r < 2; ++r) {
    std::snprintf(buf, sizeof buf, "%s  %6.2f %6.2f %6.2f %6.2f\n", names[r], rep.ap[r][0],
                  rep.ap[r][1], rep.ap[r][2], rep.map[r]);
    os << buf;
  }
  return os.str();
}

}  // namespace bevfuse
