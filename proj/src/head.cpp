#include "bevfuse/head.hpp"

#include <algorithm>
#include <cmath>

namespace bevfuse {

const char* class_name(int class_id) {
  switch (class_id) {
    case kCar: return "Car";
    case kPedestrian: return "Pedestrian";
    case kCyclist: return "Cyclist";
    default: return "Unknown";
  }
}

int class_id_from_name(const std::string& name) {
  if (name == "Car") return kCar;
  if (name == "Pedestrian") return kPedestrian;
  if (name == "Cyclist") return kCyclist;
  return -1;
}

double wrap_angle(double a) {
  while (a <= -3.14159265358979323846) a += 2.0 * 3.14159265358979323846;
  while (a > 3.14159265358979323846) a -= 2.0 * 3.14159265358979323846;
  return a;
}

HeadParams HeadParams::make(int channels) {
  HeadParams p;
  p.heat_w = Tensor({kNumClasses, channels});
  p.heat_b = Tensor({kNumClasses});
  p.reg_w = Tensor({kRegChannels, channels});
  p.reg_b = Tensor({kRegChannels});
  p.vel_w = Tensor({kVelChannels, channels});
  p.vel_b = Tensor({kVelChannels});
  return p;
}

HeadParams HeadParams::init(int channels, Rng& rng) {
  HeadParams p = make(channels);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(channels));
  for (Tensor* t : {&p.heat_w, &p.reg_w, &p.vel_w})
    for (std::int64_t i = 0; i < t->size(); ++i) (*t)[i] = rng.normal() * stddev;
  // start with low heatmap scores so early training focuses on positives
  p.heat_b.fill(-2.19);  // sigmoid ~ 0.1
  return p;
}

namespace {

// 1x1 conv over [C,H,W] given weights [Cout,C].
Tensor conv1x1(const Tensor& f, const Tensor& w, const Tensor& b) {
  const int c = f.extent(0), h = f.extent(1), wd = f.extent(2), cout = w.extent(0);
  const std::int64_t hw = static_cast<std::int64_t>(h) * wd;
  Tensor out({cout, h, wd});
  for (int oc = 0; oc < cout; ++oc) {
    double* dst = out.data() + oc * hw;
    for (std::int64_t i = 0; i < hw; ++i) dst[i] = b.at(oc);
    for (int ic = 0; ic < c; ++ic) {
      const double wv = w.at(oc, ic);
      if (wv == 0.0) continue;
      const double* src = f.data() + ic * hw;
      for (std::int64_t i = 0; i < hw; ++i) dst[i] += wv * src[i];
    }
  }
  return out;
}

void conv1x1_backward(const Tensor& gout, const Tensor& f, const Tensor& w, Tensor& gf, Tensor& gw,
                      Tensor& gb) {
  const int c = f.extent(0), cout = w.extent(0);
  const std::int64_t hw = static_cast<std::int64_t>(f.extent(1)) * f.extent(2);
  for (int oc = 0; oc < cout; ++oc) {
    const double* go = gout.data() + oc * hw;
    double bsum = 0.0;
    for (std::int64_t i = 0; i < hw; ++i) bsum += go[i];
    gb.at(oc) += bsum;
    for (int ic = 0; ic < c; ++ic) {
      const double wv = w.at(oc, ic);
      const double* src = f.data() + ic * hw;
      double* gsrc = gf.data() + ic * hw;
      double wsum = 0.0;
      for (std::int64_t i = 0; i < hw; ++i) {
        wsum += go[i] * src[i];
        gsrc[i] += go[i] * wv;
      }
      gw.at(oc, ic) += wsum;
    }
  }
}

}  // namespace

HeadOutput head_forward(const Tensor& f, const HeadParams& p, HeadCtx* ctx) {
  BEVFUSE_CHECK(f.rank() == 3 && f.extent(0) == p.heat_w.extent(1), ShapeError,
                "head_forward: channel mismatch");
  HeadOutput out;
  out.heatmap = sigmoid(conv1x1(f, p.heat_w, p.heat_b));
  out.reg = conv1x1(f, p.reg_w, p.reg_b);
  out.vel = conv1x1(f, p.vel_w, p.vel_b);
  if (ctx) ctx->heat_sig = out.heatmap;
  return out;
}

void head_backward(const HeadOutput& gout, const Tensor& f, const HeadParams& p, const HeadCtx& ctx,
                   Tensor& gf, HeadParams& gp) {
  Tensor gheat_pre(ctx.heat_sig.shape());
  sigmoid_backward(gout.heatmap, ctx.heat_sig, gheat_pre);
  conv1x1_backward(gheat_pre, f, p.heat_w, gf, gp.heat_w, gp.heat_b);
  conv1x1_backward(gout.reg, f, p.reg_w, gf, gp.reg_w, gp.reg_b);
  conv1x1_backward(gout.vel, f, p.vel_w, gf, gp.vel_w, gp.vel_b);
}

double gaussian_radius_cells(double extent_y, double extent_x, double min_overlap) {
  const double h = extent_y, w = extent_x;
  const double a1 = 1.0, b1 = h + w, c1 = w * h * (1 - min_overlap) / (1 + min_overlap);
  const double r1 = (b1 - std::sqrt(std::max(0.0, b1 * b1 - 4 * a1 * c1))) / 2;
  const double a2 = 4.0, b2 = 2 * (h + w), c2 = (1 - min_overlap) * w * h;
  const double r2 = (b2 - std::sqrt(std::max(0.0, b2 * b2 - 4 * a2 * c2))) / 2;
  const double a3 = 4 * min_overlap, b3 = -2 * min_overlap * (h + w);
  const double c3 = (min_overlap - 1) * w * h;
  const double r3 = (-b3 + std::sqrt(std::max(0.0, b3 * b3 - 4 * a3 * c3))) / (2 * a3);
  return std::min({r1, r2, r3});
}

namespace {

// Footprint extents of a rotated box along the grid axes, in cells.
std::pair<double, double> footprint_cells(const Box3D& b, const BevGrid& grid) {
  const double c = std::fabs(std::cos(b.yaw)), s = std::fabs(std::sin(b.yaw));
  const double ext_x = b.l * c + b.w * s;
  const double ext_y = b.l * s + b.w * c;
  return {ext_y / grid.cell_y(), ext_x / grid.cell_x()};
}

int box_radius_cells(const Box3D& b, const BevGrid& grid) {
  const auto [ey, ex] = footprint_cells(b, grid);
  const int r = static_cast<int>(gaussian_radius_cells(ey, ex));
  return std::max(2, r);
}

}  // namespace

Tensor render_gt_heatmap(const std::vector<Box3D>& boxes, const BevGrid& grid) {
  grid.validate();
  Tensor heat({kNumClasses, grid.ny, grid.nx});
  for (const Box3D& b : boxes) {
    const auto cell = world_to_cell(b.cx, b.cy, grid);
    if (!cell || b.class_id < 0 || b.class_id >= kNumClasses) continue;
    const int cx = cell->first, cy = cell->second;
    const int r = box_radius_cells(b, grid);
    const double sigma = (2.0 * r + 1.0) / 6.0;
    for (int iy = std::max(0, cy - r); iy <= std::min(grid.ny - 1, cy + r); ++iy)
      for (int ix = std::max(0, cx - r); ix <= std::min(grid.nx - 1, cx + r); ++ix) {
        const double d2 = static_cast<double>(ix - cx) * (ix - cx) +
                          static_cast<double>(iy - cy) * (iy - cy);
        const double g = std::exp(-d2 / (2.0 * sigma * sigma));
        double& cellv = heat.at(b.class_id, iy, ix);
        cellv = std::max(cellv, g);
      }
  }
  return heat;
}

std::array<double, kRegChannels> reg_targets(const Box3D& box, const BevGrid& grid, int ix, int iy) {
  const double fx = (box.cx - grid.x_min) / grid.cell_x();
  const double fy = (box.cy - grid.y_min) / grid.cell_y();
  return {fx - ix,
          fy - iy,
          box.cz,
          std::log(box.l),
          std::log(box.w),
          std::log(box.h),
          std::sin(box.yaw),
          std::cos(box.yaw)};
}

DetectionLoss detection_loss(const HeadOutput& pred, const std::vector<Box3D>& boxes,
                             const BevGrid& grid, DetLossCtx* ctx) {
  BEVFUSE_CHECK(pred.heatmap.rank() == 3 && pred.heatmap.extent(0) == kNumClasses, ShapeError,
                "detection_loss: bad heatmap");
  BEVFUSE_CHECK(pred.heatmap.extent(1) == grid.ny && pred.heatmap.extent(2) == grid.nx, ShapeError,
                "detection_loss: heatmap/grid mismatch");
  DetLossCtx local;
  DetLossCtx& c = ctx ? *ctx : local;
  c.gt_heat = render_gt_heatmap(boxes, grid);
  c.center_cells.clear();
  c.kept_boxes.clear();
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const auto cell = world_to_cell(boxes[i].cx, boxes[i].cy, grid);
    if (!cell || boxes[i].class_id < 0 || boxes[i].class_id >= kNumClasses) continue;
    c.center_cells.push_back(cell->second * grid.nx + cell->first);
    c.kept_boxes.push_back(static_cast<int>(i));
  }
  c.n_boxes = static_cast<int>(c.kept_boxes.size());
  const double norm = std::max(1, c.n_boxes);

  DetectionLoss loss;
  // penalty-reduced Gaussian focal loss, alpha = 2, beta = 4
  double cls = 0.0;
  for (std::int64_t i = 0; i < pred.heatmap.size(); ++i) {
    const double y = c.gt_heat[i];
    const double p = std::clamp(pred.heatmap[i], 1e-12, 1.0 - 1e-12);
    if (y >= 1.0) {
      cls -= (1.0 - p) * (1.0 - p) * std::log(p);
    } else {
      cls -= std::pow(1.0 - y, 4.0) * p * p * std::log(1.0 - p);
    }
  }
  loss.cls = cls / norm;

  const std::int64_t hw = static_cast<std::int64_t>(grid.ny) * grid.nx;
  double lbox = 0.0, lvel = 0.0;
  for (std::size_t bi = 0; bi < c.kept_boxes.size(); ++bi) {
    const Box3D& b = boxes[static_cast<std::size_t>(c.kept_boxes[bi])];
    const int cellidx = c.center_cells[bi];
    const int ix = cellidx % grid.nx, iy = cellidx / grid.nx;
    const auto tgt = reg_targets(b, grid, ix, iy);
    for (int ch = 0; ch < kRegChannels; ++ch)
      lbox += std::fabs(pred.reg[ch * hw + cellidx] - tgt[static_cast<std::size_t>(ch)]);
    lvel += std::fabs(pred.vel[cellidx] - b.vx) + std::fabs(pred.vel[hw + cellidx] - b.vy);
  }
  loss.box = lbox / norm;
  loss.vel = lvel / norm;
  return loss;
}

void detection_loss_backward(double gcls, double gbox, double gvel, const HeadOutput& pred,
                             const std::vector<Box3D>& boxes, const BevGrid& grid,
                             const DetLossCtx& ctx, HeadOutput& gpred) {
  const double norm = std::max(1, ctx.n_boxes);
  for (std::int64_t i = 0; i < pred.heatmap.size(); ++i) {
    const double y = ctx.gt_heat[i];
    const double p = pred.heatmap[i];
    if (p <= 1e-12 || p >= 1.0 - 1e-12) continue;  // clamped
    double d;
    if (y >= 1.0) {
      d = 2.0 * (1.0 - p) * std::log(p) - (1.0 - p) * (1.0 - p) / p;
    } else {
      d = std::pow(1.0 - y, 4.0) * (-2.0 * p * std::log(1.0 - p) + p * p / (1.0 - p));
    }
    gpred.heatmap[i] += gcls * d / norm;
  }

  const std::int64_t hw = static_cast<std::int64_t>(grid.ny) * grid.nx;
  for (std::size_t bi = 0; bi < ctx.kept_boxes.size(); ++bi) {
    const Box3D& b = boxes[static_cast<std::size_t>(ctx.kept_boxes[bi])];
    const int cellidx = ctx.center_cells[bi];
    const int ix = cellidx % grid.nx, iy = cellidx / grid.nx;
    const auto tgt = reg_targets(b, grid, ix, iy);
    for (int ch = 0; ch < kRegChannels; ++ch) {
      const double diff = pred.reg[ch * hw + cellidx] - tgt[static_cast<std::size_t>(ch)];
      if (diff != 0.0) gpred.reg[ch * hw + cellidx] += gbox * (diff > 0 ? 1.0 : -1.0) / norm;
    }
    const double dvx = pred.vel[cellidx] - b.vx;
    const double dvy = pred.vel[hw + cellidx] - b.vy;
    if (dvx != 0.0) gpred.vel[cellidx] += gvel * (dvx > 0 ? 1.0 : -1.0) / norm;
    if (dvy != 0.0) gpred.vel[hw + cellidx] += gvel * (dvy > 0 ? 1.0 : -1.0) / norm;
  }
}

std::vector<Detection> decode(const HeadOutput& pred, const BevGrid& grid, double score_thresh,
                              int max_dets) {
  BEVFUSE_CHECK(score_thresh >= 0.0 && score_thresh <= 1.0, ValueError,
                "decode: threshold must be in [0,1]");
  const int ny = grid.ny, nx = grid.nx;
  const std::int64_t hw = static_cast<std::int64_t>(ny) * nx;
  struct Peak {
    double score;
    int cls, iy, ix;
  };
  std::vector<Peak> peaks;
  for (int cls = 0; cls < kNumClasses; ++cls) {
    const double* plane = pred.heatmap.data() + cls * hw;
    for (int iy = 0; iy < ny; ++iy)
      for (int ix = 0; ix < nx; ++ix) {
        const double v = plane[iy * nx + ix];
        if (v < score_thresh || v <= 0.0) continue;
        bool is_peak = true;
        for (int dy = -1; dy <= 1 && is_peak; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = iy + dy, xx = ix + dx;
            if (yy < 0 || yy >= ny || xx < 0 || xx >= nx) continue;
            if (plane[yy * nx + xx] > v) {
              is_peak = false;
              break;
            }
          }
        if (is_peak) peaks.push_back({v, cls, iy, ix});
      }
  }
  std::sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.iy != b.iy) return a.iy < b.iy;
    if (a.ix != b.ix) return a.ix < b.ix;
    return a.cls < b.cls;
  });
  if (static_cast<int>(peaks.size()) > max_dets) peaks.resize(static_cast<std::size_t>(max_dets));

  std::vector<Detection> dets;
  dets.reserve(peaks.size());
  for (const Peak& pk : peaks) {
    const std::int64_t cellidx = static_cast<std::int64_t>(pk.iy) * nx + pk.ix;
    Detection d;
    d.score = pk.score;
    Box3D& b = d.box;
    b.class_id = pk.cls;
    b.cx = grid.x_min + (pk.ix + pred.reg[0 * hw + cellidx]) * grid.cell_x();
    b.cy = grid.y_min + (pk.iy + pred.reg[1 * hw + cellidx]) * grid.cell_y();
    b.cz = pred.reg[2 * hw + cellidx];
    b.l = std::exp(pred.reg[3 * hw + cellidx]);
    b.w = std::exp(pred.reg[4 * hw + cellidx]);
    b.h = std::exp(pred.reg[5 * hw + cellidx]);
    b.yaw = std::atan2(pred.reg[6 * hw + cellidx], pred.reg[7 * hw + cellidx]);
    b.vx = pred.vel[cellidx];
    b.vy = pred.vel[hw + cellidx];
    dets.push_back(d);
  }
  return dets;
}

}  // namespace bevfuse
