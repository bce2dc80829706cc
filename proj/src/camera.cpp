#include "bevfuse/camera.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace bevfuse {

SeParams SeParams::make(int channels, int hidden) {
  return {LinearParams::make(hidden, 21), LinearParams::make(channels, hidden)};
}

SeParams SeParams::init(int channels, int hidden, Rng& rng) {
  return {LinearParams::init(hidden, 21, rng), LinearParams::init(channels, hidden, rng)};
}

Tensor se_condition(const Tensor& f, const std::vector<double>& calib_vec, const SeParams& p,
                    SeCtx* ctx) {
  BEVFUSE_CHECK(f.rank() == 3, ShapeError, "se_condition: features must be [C,Hf,Wf]");
  BEVFUSE_CHECK(static_cast<int>(calib_vec.size()) == p.fc1.w.extent(1), ShapeError,
                "se_condition: calibration vector length mismatch");
  BEVFUSE_CHECK(p.fc2.w.extent(0) == f.extent(0), ShapeError,
                "se_condition: gate width != channel count");
  Tensor cv = Tensor::from({1, static_cast<int>(calib_vec.size())}, calib_vec);
  Tensor h_pre = linear(cv, p.fc1);
  Tensor h = relu(h_pre);
  Tensor gate_pre = linear(h, p.fc2);
  Tensor gate = sigmoid(gate_pre);

  const std::int64_t hw = static_cast<std::int64_t>(f.extent(1)) * f.extent(2);
  Tensor out(f.shape());
  for (int c = 0; c < f.extent(0); ++c) {
    const double g = gate.at(0, c);
    const double* src = f.data() + c * hw;
    double* dst = out.data() + c * hw;
    for (std::int64_t i = 0; i < hw; ++i) dst[i] = g * src[i];
  }
  if (ctx) {
    ctx->h_pre = std::move(h_pre);
    ctx->h = std::move(h);
    ctx->gate_pre = std::move(gate_pre);
    ctx->gate = std::move(gate);
  }
  return out;
}

void se_condition_backward(const Tensor& gout, const Tensor& f, const std::vector<double>& calib_vec,
                           const SeParams& p, const SeCtx& ctx, Tensor& gf, SeParams& gp) {
  const std::int64_t hw = static_cast<std::int64_t>(f.extent(1)) * f.extent(2);
  Tensor ggate({1, f.extent(0)});
  for (int c = 0; c < f.extent(0); ++c) {
    const double g = ctx.gate.at(0, c);
    const double* go = gout.data() + c * hw;
    const double* src = f.data() + c * hw;
    double* gfc = gf.data() + c * hw;
    double s = 0.0;
    for (std::int64_t i = 0; i < hw; ++i) {
      gfc[i] += g * go[i];
      s += go[i] * src[i];
    }
    ggate.at(0, c) = s;
  }
  Tensor ggate_pre(ctx.gate_pre.shape());
  sigmoid_backward(ggate, ctx.gate, ggate_pre);
  Tensor gh(ctx.h.shape());
  linear_backward(ggate_pre, ctx.h, p.fc2, gh, gp.fc2);
  Tensor gh_pre(ctx.h_pre.shape());
  relu_backward(gh, ctx.h_pre, gh_pre);
  Tensor cv = Tensor::from({1, static_cast<int>(calib_vec.size())}, calib_vec);
  Tensor gcv(cv.shape());
  linear_backward(gh_pre, cv, p.fc1, gcv, gp.fc1);
}

DepthHeadParams DepthHeadParams::make(int bins, int channels) {
  return {Tensor({bins, channels}), Tensor({bins})};
}

DepthHeadParams DepthHeadParams::init(int bins, int channels, Rng& rng) {
  DepthHeadParams p = make(bins, channels);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(channels));
  for (std::int64_t i = 0; i < p.w.size(); ++i) p.w[i] = rng.normal() * stddev;
  return p;
}

Tensor depth_head(const Tensor& f, const DepthHeadParams& p) {
  BEVFUSE_CHECK(f.rank() == 3 && f.extent(0) == p.w.extent(1), ShapeError,
                "depth_head: channel mismatch");
  const int c = f.extent(0), h = f.extent(1), w = f.extent(2), d = p.w.extent(0);
  const std::int64_t hw = static_cast<std::int64_t>(h) * w;
  Tensor logits({d, h, w});
  for (int b = 0; b < d; ++b) {
    double* dst = logits.data() + b * hw;
    for (std::int64_t i = 0; i < hw; ++i) dst[i] = p.b.at(b);
    for (int ch = 0; ch < c; ++ch) {
      const double wv = p.w.at(b, ch);
      if (wv == 0.0) continue;
      const double* src = f.data() + ch * hw;
      for (std::int64_t i = 0; i < hw; ++i) dst[i] += wv * src[i];
    }
  }
  return softmax(logits, 0);
}

void depth_head_backward(const Tensor& gout, const Tensor& f, const DepthHeadParams& p,
                         const Tensor& dist, Tensor& gf, DepthHeadParams& gp) {
  const int c = f.extent(0), h = f.extent(1), w = f.extent(2), d = p.w.extent(0);
  const std::int64_t hw = static_cast<std::int64_t>(h) * w;
  Tensor glogits(dist.shape());
  softmax_backward(gout, dist, 0, glogits);
  for (int b = 0; b < d; ++b) {
    const double* gl = glogits.data() + b * hw;
    double bias_sum = 0.0;
    for (std::int64_t i = 0; i < hw; ++i) bias_sum += gl[i];
    gp.b.at(b) += bias_sum;
    for (int ch = 0; ch < c; ++ch) {
      const double* src = f.data() + ch * hw;
      double* gsrc = gf.data() + ch * hw;
      const double wv = p.w.at(b, ch);
      double wsum = 0.0;
      for (std::int64_t i = 0; i < hw; ++i) {
        wsum += gl[i] * src[i];
        gsrc[i] += gl[i] * wv;
      }
      gp.w.at(b, ch) += wsum;
    }
  }
}

FrustumFeatures lift(const Feature2D& f, const Tensor& depth, const CameraCalib& calib,
                     const DepthBins& bins) {
  const int c = f.t.extent(0), h = f.t.extent(1), w = f.t.extent(2);
  BEVFUSE_CHECK(depth.rank() == 3 && depth.extent(1) == h && depth.extent(2) == w, ShapeError,
                "lift: feature/depth spatial extents differ");
  const int d = depth.extent(0);
  BEVFUSE_CHECK(d == bins.n_bins, ShapeError, "lift: depth map bins != bin config");
  FrustumFeatures ff;
  ff.features = Tensor({c, d, h, w});
  ff.ego.resize(static_cast<std::size_t>(d) * h * w);
  ff.point_id.resize(ff.ego.size());
  for (std::size_t i = 0; i < ff.point_id.size(); ++i) ff.point_id[i] = static_cast<std::int64_t>(i);
  const std::int64_t hw = static_cast<std::int64_t>(h) * w;
  for (int ch = 0; ch < c; ++ch) {
    const double* fs = f.t.data() + ch * hw;
    for (int b = 0; b < d; ++b) {
      const double* ds = depth.data() + b * hw;
      double* dst = ff.features.data() + (static_cast<std::int64_t>(ch) * d + b) * hw;
      for (std::int64_t i = 0; i < hw; ++i) dst[i] = fs[i] * ds[i];
    }
  }
  for (int b = 0; b < d; ++b) {
    const double depth_m = bins.center(b);
    for (int iy = 0; iy < h; ++iy)
      for (int ix = 0; ix < w; ++ix) {
        const double u = feature_pixel_u(ix, f.stride_pixels);
        const double v = feature_pixel_v(iy, f.stride_pixels);
        ff.ego[(static_cast<std::size_t>(b) * h + iy) * w + ix] = frustum_to_ego(u, v, depth_m, calib);
      }
  }
  return ff;
}

void lift_backward(const Tensor& gfeatures, const Feature2D& f, const Tensor& depth, Tensor& gf,
                   Tensor& gdepth) {
  const int c = f.t.extent(0), h = f.t.extent(1), w = f.t.extent(2), d = depth.extent(0);
  const std::int64_t hw = static_cast<std::int64_t>(h) * w;
  for (int ch = 0; ch < c; ++ch) {
    const double* fs = f.t.data() + ch * hw;
    double* gfs = gf.data() + ch * hw;
    for (int b = 0; b < d; ++b) {
      const double* ds = depth.data() + b * hw;
      double* gds = gdepth.data() + b * hw;
      const double* go = gfeatures.data() + (static_cast<std::int64_t>(ch) * d + b) * hw;
      for (std::int64_t i = 0; i < hw; ++i) {
        gfs[i] += go[i] * ds[i];
        gds[i] += go[i] * fs[i];
      }
    }
  }
}

std::vector<std::int32_t> frustum_cell_ids(const FrustumFeatures& ff, const BevGrid& grid) {
  std::vector<std::int32_t> ids(ff.ego.size());
  for (std::size_t i = 0; i < ff.ego.size(); ++i) {
    const auto cell = world_to_cell(ff.ego[i], grid);
    ids[i] = cell ? static_cast<std::int32_t>(cell->second) * grid.nx + cell->first : -1;
  }
  return ids;
}

namespace {

struct PoolDims {
  int c;
  std::int64_t n;  // points per channel plane (D*Hf*Wf)
};

PoolDims pool_dims(const FrustumFeatures& ff) {
  BEVFUSE_CHECK(ff.features.rank() == 4, ShapeError, "pooling: features must be [C,D,Hf,Wf]");
  PoolDims d;
  d.c = ff.features.extent(0);
  d.n = static_cast<std::int64_t>(ff.features.extent(1)) * ff.features.extent(2) *
        ff.features.extent(3);
  BEVFUSE_CHECK(static_cast<std::int64_t>(ff.ego.size()) == d.n, ShapeError,
                "pooling: coordinate count mismatch");
  return d;
}

}  // namespace

Tensor voxel_pool_reference(const FrustumFeatures& ff, const BevGrid& grid) {
  grid.validate();
  const PoolDims dims = pool_dims(ff);
  const auto ids = frustum_cell_ids(ff, grid);
  // sort point indices by (cell, canonical point id); the canonical key makes
  // the accumulation order independent of input storage order
  const auto canon = [&ff](std::int64_t i) {
    return ff.point_id.empty() ? i : ff.point_id[static_cast<std::size_t>(i)];
  };
  std::vector<std::int64_t> order;
  order.reserve(static_cast<std::size_t>(dims.n));
  for (std::int64_t i = 0; i < dims.n; ++i)
    if (ids[static_cast<std::size_t>(i)] >= 0) order.push_back(i);
  std::sort(order.begin(), order.end(), [&ids, &canon](std::int64_t a, std::int64_t b) {
    const auto ca = ids[static_cast<std::size_t>(a)], cb = ids[static_cast<std::size_t>(b)];
    return ca != cb ? ca < cb : canon(a) < canon(b);
  });

  Tensor out({dims.c, grid.ny, grid.nx});
  const std::int64_t n_cells = static_cast<std::int64_t>(grid.ny) * grid.nx;
  if (order.empty()) return out;
  std::vector<double> csum(order.size());
  for (int ch = 0; ch < dims.c; ++ch) {
    const double* src = ff.features.data() + ch * dims.n;
    double acc = 0.0;
    for (std::size_t i = 0; i < order.size(); ++i) {
      acc += src[order[i]];
      csum[i] = acc;
    }
    double* dst = out.data() + ch * n_cells;
    std::size_t seg_start = 0;
    for (std::size_t i = 0; i < order.size(); ++i) {
      const bool last_of_cell = i + 1 == order.size() ||
                                ids[static_cast<std::size_t>(order[i + 1])] !=
                                    ids[static_cast<std::size_t>(order[i])];
      if (last_of_cell) {
        const double seg = csum[i] - (seg_start == 0 ? 0.0 : csum[seg_start - 1]);
        dst[ids[static_cast<std::size_t>(order[i])]] = seg;
        seg_start = i + 1;
      }
    }
  }
  return out;
}

Tensor voxel_pool_efficient(const FrustumFeatures& ff, const BevGrid& grid) {
  grid.validate();
  const PoolDims dims = pool_dims(ff);
  const auto ids = frustum_cell_ids(ff, grid);
  const std::int64_t n_cells = static_cast<std::int64_t>(grid.ny) * grid.nx;

  // counting sort into per-cell buckets, canonical point order within a cell
  std::vector<std::int64_t> start(static_cast<std::size_t>(n_cells) + 1, 0);
  for (std::int64_t i = 0; i < dims.n; ++i)
    if (ids[static_cast<std::size_t>(i)] >= 0) ++start[static_cast<std::size_t>(ids[i]) + 1];
  for (std::int64_t cell = 0; cell < n_cells; ++cell)
    start[static_cast<std::size_t>(cell) + 1] += start[static_cast<std::size_t>(cell)];
  std::vector<std::int64_t> bucket(static_cast<std::size_t>(start.back()));
  {
    // iterate points in canonical order so each cell accumulates identically
    // for any storage permutation
    std::vector<std::int64_t> canon_order(static_cast<std::size_t>(dims.n));
    if (ff.point_id.empty()) {
      for (std::int64_t i = 0; i < dims.n; ++i) canon_order[static_cast<std::size_t>(i)] = i;
    } else {
      for (std::int64_t i = 0; i < dims.n; ++i)
        canon_order[static_cast<std::size_t>(ff.point_id[static_cast<std::size_t>(i)])] = i;
    }
    std::vector<std::int64_t> cursor(start.begin(), start.end() - 1);
    for (std::int64_t ci = 0; ci < dims.n; ++ci) {
      const std::int64_t i = canon_order[static_cast<std::size_t>(ci)];
      const std::int32_t id = ids[static_cast<std::size_t>(i)];
      if (id >= 0) bucket[static_cast<std::size_t>(cursor[id]++)] = i;
    }
  }

  Tensor out({dims.c, grid.ny, grid.nx});
  const int c = dims.c;
  const std::int64_t n_pts = dims.n;
  const double* feat = ff.features.data();
  double* dst = out.data();
  parallel_for(n_cells, thread_count(), [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t cell = lo; cell < hi; ++cell) {
      const std::int64_t b0 = start[static_cast<std::size_t>(cell)];
      const std::int64_t b1 = start[static_cast<std::size_t>(cell) + 1];
      if (b0 == b1) continue;
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        const double* plane = feat + ch * n_pts;
        for (std::int64_t bi = b0; bi < b1; ++bi) acc += plane[bucket[static_cast<std::size_t>(bi)]];
        dst[ch * n_cells + cell] = acc;
      }
    }
  });
  return out;
}

void voxel_pool_backward(const Tensor& gout, const FrustumFeatures& ff, const BevGrid& grid,
                         Tensor& gfeatures) {
  const PoolDims dims = pool_dims(ff);
  const auto ids = frustum_cell_ids(ff, grid);
  const std::int64_t n_cells = static_cast<std::int64_t>(grid.ny) * grid.nx;
  BEVFUSE_CHECK(gout.extent(0) == dims.c && gout.size() == dims.c * n_cells, ShapeError,
                "voxel_pool_backward: bad gout");
  for (int ch = 0; ch < dims.c; ++ch) {
    const double* gsrc = gout.data() + ch * n_cells;
    double* gdst = gfeatures.data() + ch * dims.n;
    for (std::int64_t i = 0; i < dims.n; ++i) {
      const std::int32_t id = ids[static_cast<std::size_t>(i)];
      if (id >= 0) gdst[i] += gsrc[id];
    }
  }
}

std::vector<float> voxel_pool_reference_f32(const std::vector<float>& feats,
                                            const std::vector<std::int32_t>& cells, int n_cells,
                                            int channels) {
  const std::int64_t n = static_cast<std::int64_t>(cells.size());
  std::vector<std::int64_t> order;
  order.reserve(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i)
    if (cells[static_cast<std::size_t>(i)] >= 0) order.push_back(i);
  std::sort(order.begin(), order.end(), [&cells](std::int64_t a, std::int64_t b) {
    const auto ca = cells[static_cast<std::size_t>(a)], cb = cells[static_cast<std::size_t>(b)];
    return ca != cb ? ca < cb : a < b;
  });
  std::vector<float> out(static_cast<std::size_t>(n_cells) * channels, 0.0f);
  std::vector<float> csum(order.size());
  for (int ch = 0; ch < channels; ++ch) {
    float acc = 0.0f;
    for (std::size_t i = 0; i < order.size(); ++i) {
      acc += feats[static_cast<std::size_t>(order[i]) * channels + ch];
      csum[i] = acc;
    }
    std::size_t seg_start = 0;
    for (std::size_t i = 0; i < order.size(); ++i) {
      const bool last = i + 1 == order.size() ||
                        cells[static_cast<std::size_t>(order[i + 1])] !=
                            cells[static_cast<std::size_t>(order[i])];
      if (last) {
        const float seg = csum[i] - (seg_start == 0 ? 0.0f : csum[seg_start - 1]);
        out[static_cast<std::size_t>(cells[static_cast<std::size_t>(order[i])]) * channels + ch] = seg;
        seg_start = i + 1;
      }
    }
  }
  return out;
}

std::vector<float> voxel_pool_efficient_f32(const std::vector<float>& feats,
                                            const std::vector<std::int32_t>& cells, int n_cells,
                                            int channels, int threads) {
  const std::int64_t n = static_cast<std::int64_t>(cells.size());
  std::vector<std::int64_t> start(static_cast<std::size_t>(n_cells) + 1, 0);
  for (std::int64_t i = 0; i < n; ++i)
    if (cells[static_cast<std::size_t>(i)] >= 0) ++start[static_cast<std::size_t>(cells[i]) + 1];
  for (int cell = 0; cell < n_cells; ++cell)
    start[static_cast<std::size_t>(cell) + 1] += start[static_cast<std::size_t>(cell)];
  std::vector<std::int64_t> bucket(static_cast<std::size_t>(start.back()));
  {
    std::vector<std::int64_t> cursor(start.begin(), start.end() - 1);
    for (std::int64_t i = 0; i < n; ++i) {
      const std::int32_t id = cells[static_cast<std::size_t>(i)];
      if (id >= 0) bucket[static_cast<std::size_t>(cursor[id]++)] = i;
    }
  }
  std::vector<float> out(static_cast<std::size_t>(n_cells) * channels, 0.0f);
  parallel_for(n_cells, threads, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t cell = lo; cell < hi; ++cell) {
      const std::int64_t b0 = start[static_cast<std::size_t>(cell)];
      const std::int64_t b1 = start[static_cast<std::size_t>(cell) + 1];
      if (b0 == b1) continue;
      float* dst = out.data() + static_cast<std::size_t>(cell) * channels;
      for (std::int64_t bi = b0; bi < b1; ++bi) {
        const float* src = feats.data() + static_cast<std::size_t>(bucket[static_cast<std::size_t>(bi)]) * channels;
        for (int ch = 0; ch < channels; ++ch) dst[ch] += src[ch];
      }
    }
  });
  return out;
}

DepthLossResult depth_loss(const Tensor& pred, const Tensor& gt) {
  check_same_shape(pred, gt, "depth_loss");
  BEVFUSE_CHECK(pred.rank() == 3, ShapeError, "depth_loss: maps must be [D,Hf,Wf]");
  const int d = pred.extent(0);
  const std::int64_t hw = static_cast<std::int64_t>(pred.extent(1)) * pred.extent(2);
  DepthLossResult res;
  double sum = 0.0;
  std::int64_t n_valid = 0;
  for (std::int64_t i = 0; i < hw; ++i) {
    bool valid = false;
    for (int b = 0; b < d; ++b)
      if (gt[b * hw + i] != 0.0) {
        valid = true;
        break;
      }
    if (!valid) continue;
    ++n_valid;
    for (int b = 0; b < d; ++b) {
      const double y = gt[b * hw + i];
      const double p = std::clamp(pred[b * hw + i], 1e-12, 1.0 - 1e-12);
      sum += -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
    }
  }
  res.any_valid = n_valid > 0;
  res.loss = n_valid > 0 ? sum / (static_cast<double>(n_valid) * d) : 0.0;
  return res;
}

void depth_loss_backward(double gscale, const Tensor& pred, const Tensor& gt, Tensor& gpred) {
  const int d = pred.extent(0);
  const std::int64_t hw = static_cast<std::int64_t>(pred.extent(1)) * pred.extent(2);
  std::int64_t n_valid = 0;
  std::vector<bool> valid(static_cast<std::size_t>(hw), false);
  for (std::int64_t i = 0; i < hw; ++i)
    for (int b = 0; b < d; ++b)
      if (gt[b * hw + i] != 0.0) {
        valid[static_cast<std::size_t>(i)] = true;
        ++n_valid;
        break;
      }
  if (n_valid == 0) return;
  const double norm = gscale / (static_cast<double>(n_valid) * d);
  for (std::int64_t i = 0; i < hw; ++i) {
    if (!valid[static_cast<std::size_t>(i)]) continue;
    for (int b = 0; b < d; ++b) {
      const double y = gt[b * hw + i];
      const double p = pred[b * hw + i];
      if (p <= 1e-12 || p >= 1.0 - 1e-12) continue;  // clamped region has zero slope
      gpred[b * hw + i] += norm * (-(y / p) + (1.0 - y) / (1.0 - p));
    }
  }
}

}  // namespace bevfuse
