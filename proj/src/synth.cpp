#include "bevfuse/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "bevfuse/eval.hpp"

namespace bevfuse {

void SynthConfig::validate() const {
  grid.validate();
  bins.validate();
  BEVFUSE_CHECK(image_w > 0 && image_h > 0 && feat_stride > 0, ConfigError, "bad image config");
  BEVFUSE_CHECK(image_w % feat_stride == 0 && image_h % feat_stride == 0, ConfigError,
                "image extents must be multiples of the feature stride");
  BEVFUSE_CHECK(feat_channels >= 4, ConfigError, "need at least 4 feature channels");
  BEVFUSE_CHECK(clutter_fraction >= 0.0 && clutter_fraction < 1.0, ConfigError,
                "clutter fraction must be in [0,1)");
  BEVFUSE_CHECK(n_sweeps >= 1 && n_sweeps <= 5, ConfigError, "sweep count must be in [1,5]");
}

namespace {

struct ClassSpec {
  double l_mean, l_sig, w_mean, w_sig, h_mean;
  double speed_max;
  int points;
  double rcs_mean, rcs_sigma;
};

ClassSpec class_spec(int cls, const SynthConfig& cfg) {
  switch (cls) {
    case kCar:
      return {4.2, 0.4, 1.9, 0.15, 1.6, 8.0, cfg.car_points, cfg.car_rcs_mean, cfg.car_rcs_sigma};
    case kCyclist:
      return {1.8, 0.2, 0.6, 0.08, 1.7, 5.0, cfg.cyclist_points, cfg.cyclist_rcs_mean,
              cfg.cyclist_rcs_sigma};
    default:
      return {0.7, 0.1, 0.7, 0.08, 1.75, 1.8, cfg.ped_points, cfg.ped_rcs_mean, cfg.ped_rcs_sigma};
  }
}

Box3D sample_box(int cls, const SynthConfig& cfg, Rng& rng) {
  const ClassSpec spec = class_spec(cls, cfg);
  Box3D b;
  b.class_id = cls;
  b.l = std::max(0.3, rng.normal(spec.l_mean, spec.l_sig));
  b.w = std::max(0.25, rng.normal(spec.w_mean, spec.w_sig));
  b.h = spec.h_mean;
  const double margin_x = 0.08 * (cfg.grid.x_max - cfg.grid.x_min);
  const double margin_y = 0.08 * (cfg.grid.y_max - cfg.grid.y_min);
  b.cx = rng.uniform(cfg.grid.x_min + margin_x, cfg.grid.x_max - margin_x);
  b.cy = rng.uniform(cfg.grid.y_min + margin_y, cfg.grid.y_max - margin_y);
  b.cz = b.h / 2.0;
  b.yaw = rng.uniform(-3.141592653589793, 3.141592653589793);
  const double speed = rng.uniform(0.0, spec.speed_max);
  b.vx = speed * std::cos(b.yaw);
  b.vy = speed * std::sin(b.yaw);
  return b;
}

// Uniform sample inside the box footprint (box frame, then rotate).
std::pair<double, double> sample_in_footprint(const Box3D& b, Rng& rng) {
  const double lx = rng.uniform(-0.5, 0.5) * b.l;
  const double ly = rng.uniform(-0.5, 0.5) * b.w;
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  return {b.cx + lx * c - ly * s, b.cy + lx * s + ly * c};
}

void sample_box_returns(const Box3D& b, int cls, double t, const SynthConfig& cfg, Rng& rng,
                        std::vector<RadarPoint>& out) {
  const ClassSpec spec = class_spec(cls, cfg);
  for (int i = 0; i < spec.points; ++i) {
    RadarPoint p;
    const auto [x, y] = sample_in_footprint(b, rng);
    p.x = x;
    p.y = y;
    p.z = rng.uniform(0.1, b.h);
    p.vx_comp = b.vx;
    p.vy_comp = b.vy;
    p.rcs = rng.normal(spec.rcs_mean, spec.rcs_sigma);
    p.t = t;
    out.push_back(p);
  }
}

std::vector<Box3D> gen_boxes(const SynthConfig& cfg, Rng& rng) {
  std::vector<Box3D> boxes;
  if (cfg.benchmark_scene) {
    // one large vehicle dead ahead plus a pedestrian cluster to its left
    Box3D car;
    car.class_id = kCar;
    car.l = 5.2;
    car.w = 2.2;
    car.h = 2.0;
    car.cx = 0.5;
    car.cy = 0.55 * cfg.grid.y_max;
    car.cz = 1.0;
    car.yaw = 1.5707963267948966;
    car.vx = 0.0;
    car.vy = 4.0;
    boxes.push_back(car);
    for (int i = 0; i < 3; ++i) {
      Box3D ped;
      ped.class_id = kPedestrian;
      ped.l = 0.7;
      ped.w = 0.7;
      ped.h = 1.75;
      ped.cx = -0.25 * (cfg.grid.x_max - cfg.grid.x_min) / 2.0 + 1.2 * i;
      ped.cy = 0.3 * cfg.grid.y_max + 0.8 * i;
      ped.cz = ped.h / 2.0;
      ped.yaw = 0.3 * i;
      ped.vx = 1.0;
      ped.vy = 0.2;
      boxes.push_back(ped);
    }
    return boxes;
  }
  const int n_car = rng.uniform_int(cfg.cars_min, cfg.cars_max);
  const int n_ped = rng.uniform_int(cfg.peds_min, cfg.peds_max);
  const int n_cyc = rng.uniform_int(cfg.cyclists_min, cfg.cyclists_max);
  for (int i = 0; i < n_car; ++i) boxes.push_back(sample_box(kCar, cfg, rng));
  for (int i = 0; i < n_ped; ++i) boxes.push_back(sample_box(kPedestrian, cfg, rng));
  for (int i = 0; i < n_cyc; ++i) boxes.push_back(sample_box(kCyclist, cfg, rng));
  return boxes;
}

}  // namespace

std::vector<RadarPoint> accumulate_sweeps(const Scene& scene, const SynthConfig& cfg, int n_sweeps,
                                          double dt) {
  BEVFUSE_CHECK(n_sweeps >= 1, ConfigError, "accumulate_sweeps: need at least one sweep");
  Rng rng(scene.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<RadarPoint> pts;
  int object_points = 0;
  for (int k = 0; k < n_sweeps; ++k) {
    const double t = -k * dt;
    for (const Box3D& b : scene.boxes) {
      Box3D moved = b;
      moved.cx = b.cx + t * b.vx;
      moved.cy = b.cy + t * b.vy;
      sample_box_returns(moved, b.class_id, t, cfg, rng, pts);
    }
  }
  object_points = static_cast<int>(pts.size());
  // uniform clutter, newest-sweep timestamps
  const int n_clutter = static_cast<int>(std::lround(
      cfg.clutter_fraction / std::max(1e-9, 1.0 - cfg.clutter_fraction) * object_points));
  for (int i = 0; i < n_clutter; ++i) {
    RadarPoint p;
    p.x = rng.uniform(cfg.grid.x_min, cfg.grid.x_max);
    p.y = rng.uniform(cfg.grid.y_min, cfg.grid.y_max);
    p.z = rng.uniform(0.0, 2.5);
    p.vx_comp = 0.0;
    p.vy_comp = 0.0;
    p.rcs = rng.normal(cfg.clutter_rcs_mean, cfg.clutter_rcs_sigma);
    p.t = 0.0;
    pts.push_back(p);
  }
  return pts;
}

Scene gen_scene(std::uint64_t seed, const SynthConfig& cfg) {
  cfg.validate();
  Scene scene;
  scene.seed = seed;
  scene.calib = make_forward_calib(cfg.focal, cfg.image_w, cfg.image_h, cfg.camera_height);
  Rng rng(seed);
  scene.boxes = gen_boxes(cfg, rng);
  scene.radar = accumulate_sweeps(scene, cfg, cfg.n_sweeps, cfg.sweep_dt);

  const int hf = cfg.image_h / cfg.feat_stride;
  const int wf = cfg.image_w / cfg.feat_stride;
  scene.cam_features.stride_pixels = cfg.feat_stride;
  scene.cam_features.t = Tensor({cfg.feat_channels, hf, wf});
  scene.gt_depth = Tensor({cfg.bins.n_bins, hf, wf});

  Tensor& feat = scene.cam_features.t;
  Rng feat_rng(seed ^ 0xc2b2ae3d27d4eb4fULL);
  for (std::int64_t i = 0; i < feat.size(); ++i) feat[i] = feat_rng.normal(0.0, cfg.feature_noise);

  for (const Box3D& b : scene.boxes) {
    std::array<double, 3> img;
    try {
      img = project_to_image({b.cx, b.cy, b.cz}, scene.calib);
    } catch (const ValueError&) {
      continue;  // behind the camera
    }
    const double depth = img[2];
    if (depth <= 0.0) continue;
    const double fu = img[0] / cfg.feat_stride - 0.5;
    const double fv = img[1] / cfg.feat_stride - 0.5;
    if (fu < -2 || fu > wf + 1 || fv < -2 || fv > hf + 1) continue;
    // blob radius shrinks with depth, floor of one cell
    const double apparent = std::max(1.0, cfg.focal * std::max(b.w, b.h) / depth / cfg.feat_stride / 2.0);
    const double cue = std::pow(cfg.bins.d_max / std::max(depth, 1.0), cfg.depth_cue_power);
    const double cue_noisy = cue * (1.0 + feat_rng.normal(0.0, cfg.depth_cue_noise));
    const int r = static_cast<int>(std::ceil(3.0 * apparent));
    for (int iy = std::max(0, static_cast<int>(fv) - r); iy <= std::min(hf - 1, static_cast<int>(fv) + r); ++iy)
      for (int ix = std::max(0, static_cast<int>(fu) - r); ix <= std::min(wf - 1, static_cast<int>(fu) + r); ++ix) {
        const double d2 = (ix - fu) * (ix - fu) + (iy - fv) * (iy - fv);
        const double g = cfg.blob_gain * std::exp(-d2 / (2.0 * apparent * apparent));
        if (g < 1e-4) continue;
        feat.at(b.class_id, iy, ix) += g;                 // class-coded channel
        feat.at(kNumClasses, iy, ix) += g;                // presence channel
        if (cfg.feat_channels > kNumClasses + 1)
          feat.at(kNumClasses + 1, iy, ix) += g * cue_noisy;  // depth cue channel
      }
    // one-hot depth supervision at the projected pixel
    const int bin = cfg.bins.bin_of(depth);
    const int px = static_cast<int>(std::lround(fu));
    const int py = static_cast<int>(std::lround(fv));
    if (bin >= 0 && px >= 0 && px < wf && py >= 0 && py < hf) {
      for (int bb = 0; bb < cfg.bins.n_bins; ++bb) scene.gt_depth.at(bb, py, px) = 0.0;
      scene.gt_depth.at(bin, py, px) = 1.0;
    }
  }
  return scene;
}

std::vector<RadarPoint> radar_augment(const std::vector<RadarPoint>& points, double drop_prob,
                                      double noise_sigma, std::uint64_t seed) {
  BEVFUSE_CHECK(drop_prob >= 0.0 && drop_prob < 1.0, ConfigError,
                "radar_augment: drop_prob must be in [0,1)");
  Rng rng(seed);
  std::vector<RadarPoint> out;
  out.reserve(points.size());
  for (const RadarPoint& p : points) {
    const bool keep = rng.uniform() >= drop_prob;
    RadarPoint q = p;
    q.x += rng.normal(0.0, noise_sigma);
    q.y += rng.normal(0.0, noise_sigma);
    q.z += rng.normal(0.0, noise_sigma);
    if (keep) out.push_back(q);
  }
  return out;
}

std::pair<Tensor, std::vector<Box3D>> bev_augment(const Tensor& f, const std::vector<Box3D>& boxes,
                                                  const BevGrid& grid, bool flip_x, int rot90_k) {
  BEVFUSE_CHECK(f.rank() == 3 && f.extent(1) == grid.ny && f.extent(2) == grid.nx, ShapeError,
                "bev_augment: map/grid mismatch");
  BEVFUSE_CHECK(rot90_k >= 0 && rot90_k <= 3, ConfigError, "bev_augment: rot90_k in 0..3");
  if (rot90_k != 0) {
    BEVFUSE_CHECK(grid.nx == grid.ny, ConfigError, "bev_augment: rotation needs a square grid");
    BEVFUSE_CHECK(std::fabs(grid.cell_x() - grid.cell_y()) < 1e-9, ConfigError,
                  "bev_augment: rotation needs square cells");
  }
  if (flip_x)
    BEVFUSE_CHECK(std::fabs(grid.x_min + grid.x_max) < 1e-9, ConfigError,
                  "bev_augment: flip needs a laterally symmetric grid");

  const int c = f.extent(0);
  Tensor cur = f;
  std::vector<Box3D> bx = boxes;

  if (flip_x) {
    Tensor flipped(cur.shape());
    for (int ch = 0; ch < c; ++ch)
      for (int iy = 0; iy < grid.ny; ++iy)
        for (int ix = 0; ix < grid.nx; ++ix)
          flipped.at(ch, iy, ix) = cur.at(ch, iy, grid.nx - 1 - ix);
    cur = std::move(flipped);
    for (Box3D& b : bx) {
      b.cx = -b.cx;
      b.yaw = wrap_angle(3.14159265358979323846 - b.yaw);
      b.vx = -b.vx;
    }
  }

  const double cx0 = (grid.x_min + grid.x_max) / 2.0;
  const double cy0 = (grid.y_min + grid.y_max) / 2.0;
  for (int k = 0; k < rot90_k; ++k) {
    // 90-degree counterclockwise rotation about the grid center:
    // world (dx, dy) -> (-dy, dx); array cell (iy, ix) receives (ix', iy') with
    // ix' = iy, iy' = nx-1-ix   (inverse mapping of the world rotation)
    Tensor rotated(cur.shape());
    for (int ch = 0; ch < c; ++ch)
      for (int iy = 0; iy < grid.ny; ++iy)
        for (int ix = 0; ix < grid.nx; ++ix)
          rotated.at(ch, iy, ix) = cur.at(ch, grid.nx - 1 - ix, iy);
    cur = std::move(rotated);
    for (Box3D& b : bx) {
      const double dx = b.cx - cx0, dy = b.cy - cy0;
      b.cx = cx0 - dy;
      b.cy = cy0 + dx;
      const double vx = b.vx, vy = b.vy;
      b.vx = -vy;
      b.vy = vx;
      b.yaw = wrap_angle(b.yaw + 1.5707963267948966);
    }
  }
  return {std::move(cur), std::move(bx)};
}

std::string radar_csv(const std::vector<RadarPoint>& points) {
  std::ostringstream os;
  os << "x,y,z,vx_comp,vy_comp,rcs,t\n";
  char buf[240];
  for (const RadarPoint& p : points) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", p.x, p.y, p.z,
                  p.vx_comp, p.vy_comp, p.rcs, p.t);
    os << buf;
  }
  return os.str();
}

std::vector<RadarPoint> parse_radar_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  BEVFUSE_CHECK(static_cast<bool>(std::getline(is, line)), ParseError, "radar csv: empty file");
  BEVFUSE_CHECK(line == "x,y,z,vx_comp,vy_comp,rcs,t", ParseError,
                "radar csv: unexpected header '" + line + "'");
  std::vector<RadarPoint> out;
  int line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cellv;
    double v[7];
    for (int i = 0; i < 7; ++i) {
      BEVFUSE_CHECK(static_cast<bool>(std::getline(ss, cellv, ',')), ParseError,
                    "radar csv line " + std::to_string(line_no) + ": expected 7 fields");
      try {
        v[i] = std::stod(cellv);
      } catch (const std::exception&) {
        throw ParseError("radar csv line " + std::to_string(line_no) + ": bad number '" + cellv + "'");
      }
    }
    out.push_back({v[0], v[1], v[2], v[3], v[4], v[5], v[6]});
  }
  return out;
}

std::string frame_prefix(int frame_index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06d", frame_index);
  return buf;
}

void write_scene(const Scene& scene, const std::string& dir, int frame_index) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const std::string stem = dir + "/" + frame_prefix(frame_index);
  {
    std::ofstream os(stem + "_radar.csv");
    BEVFUSE_CHECK(os.is_open(), IoError, "cannot write " + stem + "_radar.csv");
    os << radar_csv(scene.radar);
  }
  {
    std::ofstream os(stem + "_label.txt");
    BEVFUSE_CHECK(os.is_open(), IoError, "cannot write " + stem + "_label.txt");
    for (const Box3D& b : scene.boxes) os << format_label_line(b) << "\n";
  }
  {
    std::ofstream os(stem + "_calib.txt");
    BEVFUSE_CHECK(os.is_open(), IoError, "cannot write " + stem + "_calib.txt");
    os << format_calib(scene.calib);
  }
  save_tensor(stem + "_cam.bin", scene.cam_features.t);
  save_tensor(stem + "_depth.bin", scene.gt_depth);
}

Scene read_scene(const std::string& dir, int frame_index, const SynthConfig& cfg) {
  const std::string stem = dir + "/" + frame_prefix(frame_index);
  auto slurp = [](const std::string& path) {
    std::ifstream is(path);
    BEVFUSE_CHECK(is.is_open(), IoError, "cannot read " + path);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
  };
  Scene scene;
  scene.radar = parse_radar_csv(slurp(stem + "_radar.csv"));
  const auto labels = parse_labels(slurp(stem + "_label.txt"));
  for (const GtLabel& g : labels) scene.boxes.push_back(g.box);
  scene.calib = parse_calib(slurp(stem + "_calib.txt"));
  scene.cam_features.t = load_tensor(stem + "_cam.bin");
  scene.cam_features.stride_pixels = cfg.feat_stride;
  scene.gt_depth = load_tensor(stem + "_depth.bin");
  return scene;
}

}  // namespace bevfuse
