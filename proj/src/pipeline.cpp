#include "bevfuse/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace bevfuse {

void cmd_gen(const Config& cfg, const GenOptions& opt) {
  const SynthConfig sc = synth_config_from(cfg);
  for (int i = 0; i < opt.n_frames; ++i) {
    const Scene scene = gen_scene(opt.seed0 + static_cast<std::uint64_t>(i), sc);
    write_scene(scene, opt.out_dir, i);
  }
}

std::vector<Scene> load_scenes(const std::string& dir, int n_frames, const SynthConfig& cfg) {
  std::vector<Scene> scenes;
  scenes.reserve(static_cast<std::size_t>(n_frames));
  for (int i = 0; i < n_frames; ++i) scenes.push_back(read_scene(dir, i, cfg));
  return scenes;
}

std::vector<Scene> gen_scenes(const SynthConfig& cfg, int n_frames, std::uint64_t seed0) {
  std::vector<Scene> scenes;
  scenes.reserve(static_cast<std::size_t>(n_frames));
  for (int i = 0; i < n_frames; ++i)
    scenes.push_back(gen_scene(seed0 + static_cast<std::uint64_t>(i), cfg));
  return scenes;
}

namespace {

int count_frames(const std::string& dir) {
  int n = 0;
  while (std::filesystem::exists(dir + "/" + frame_prefix(n) + "_label.txt")) ++n;
  BEVFUSE_CHECK(n > 0, ValueError, "no frames found under " + dir);
  return n;
}

}  // namespace

Checkpoint cmd_train(const Config& cfg, const TrainOptions& opt) {
  const SynthConfig sc = synth_config_from(cfg);
  const ModelConfig mc = model_config_from(cfg);
  const TrainConfig tc = train_config_from(cfg, opt.stage);

  std::vector<Scene> scenes;
  if (!opt.data_dir.empty()) {
    scenes = load_scenes(opt.data_dir, count_frames(opt.data_dir), sc);
  } else {
    scenes = gen_scenes(sc, cfg.get_int("train.frames", 50), tc.seed * 1000 + 11);
  }

  Model model(mc, tc.seed);
  TrainResult result;
  Checkpoint ck;
  if (opt.stage == 1) {
    ck = run_stage1(model, scenes, tc, sc, cfg.hash(), &result);
  } else {
    BEVFUSE_CHECK(!opt.in_ckpt.empty(), ConfigError, "stage 2 requires --init with the stage-1 checkpoint");
    const Checkpoint cam = Checkpoint::load(opt.in_ckpt);
    ck = run_stage2(model, cam, scenes, tc, sc, cfg.hash(), &result);
  }
  if (!opt.out_ckpt.empty()) ck.save(opt.out_ckpt);
  if (!opt.loss_csv.empty()) {
    std::ofstream os(opt.loss_csv);
    BEVFUSE_CHECK(os.is_open(), IoError, "cannot write " + opt.loss_csv);
    os << loss_curve_csv(result);
  }
  return ck;
}

Model model_from_checkpoint(const Config& cfg, const std::string& ckpt_path, Modality* modality_out,
                            FusionMode* mode_out) {
  const ModelConfig mc = model_config_from(cfg);
  Model model(mc, 0);
  const Checkpoint ck = Checkpoint::load(ckpt_path);
  ck.apply_to(model);
  Modality m = modality_from_string(ck.modality);
  if (ck.stage == 2) m = Modality::kFused;
  model.cfg.fusion_mode = fusion_mode_from_string(ck.fusion_mode);
  if (modality_out) *modality_out = m;
  if (mode_out) *mode_out = model.cfg.fusion_mode;
  return model;
}

std::vector<Detection> cmd_forward(const Config& cfg, const ForwardOptions& opt) {
  const SynthConfig sc = synth_config_from(cfg);
  Modality modality = Modality::kFused;
  Model model = model_from_checkpoint(cfg, opt.ckpt, &modality, nullptr);
  const Scene scene = read_scene(opt.data_dir, opt.frame, sc);

  DetectForwardCtx ctx;
  const std::vector<Detection> dets = model.detect(scene, modality, &ctx);

  for (const std::string& path : opt.dump_paths) {
    const std::string stem = std::filesystem::path(path).stem().string();
    if (stem == "camera") {
      BEVFUSE_CHECK(modality != Modality::kRadar, ConfigError, "no camera map in a radar-only run");
      save_tensor(path, ctx.cam.pooled);
    } else if (stem == "radar") {
      BEVFUSE_CHECK(modality != Modality::kCamera, ConfigError, "no radar map in a camera-only run");
      save_tensor(path, ctx.f_rad_bev);
    } else if (stem == "fused") {
      BEVFUSE_CHECK(modality == Modality::kFused, ConfigError, "no fused map in a unimodal run");
      save_tensor(path, ctx.head_in);
    } else if (stem == "dca_cam") {
      BEVFUSE_CHECK(modality == Modality::kFused && model.cfg.fusion_mode == FusionMode::kHybrid,
                    ConfigError, "dca maps exist only in hybrid fusion runs");
      save_tensor(path, ctx.fuse.layers.back().f_cp);
    } else if (stem == "dca_rad") {
      BEVFUSE_CHECK(modality == Modality::kFused && model.cfg.fusion_mode == FusionMode::kHybrid,
                    ConfigError, "dca maps exist only in hybrid fusion runs");
      save_tensor(path, ctx.fuse.layers.back().f_rp);
    } else {
      throw ConfigError("--dump-bev: unrecognized stem '" + stem +
                        "' (camera|radar|fused|dca_cam|dca_rad)");
    }
  }

  if (!opt.dets_out.empty()) {
    std::ofstream os(opt.dets_out);
    BEVFUSE_CHECK(os.is_open(), IoError, "cannot write " + opt.dets_out);
    for (const Detection& d : dets) os << format_label_line(d.box, d.score) << "\n";
    // JSON lines variant alongside
    std::ofstream js(opt.dets_out + ".jsonl");
    BEVFUSE_CHECK(js.is_open(), IoError, "cannot write " + opt.dets_out + ".jsonl");
    char buf[500];
    for (const Detection& d : dets) {
      std::snprintf(buf, sizeof buf,
                    "{\"class\":\"%s\",\"score\":%.6f,\"cx\":%.6f,\"cy\":%.6f,\"cz\":%.6f,"
                    "\"l\":%.6f,\"w\":%.6f,\"h\":%.6f,\"yaw\":%.6f,\"vx\":%.6f,\"vy\":%.6f}",
                    class_name(d.box.class_id), d.score, d.box.cx, d.box.cy, d.box.cz, d.box.l,
                    d.box.w, d.box.h, d.box.yaw, d.box.vx, d.box.vy);
      js << buf << "\n";
    }
  }
  return dets;
}

std::vector<std::vector<Detection>> detect_frames(const Model& model, const std::vector<Scene>& scenes,
                                                  Modality modality) {
  std::vector<std::vector<Detection>> out;
  out.reserve(scenes.size());
  for (const Scene& s : scenes) out.push_back(model.detect(s, modality));
  return out;
}

EvalReport cmd_eval(const Config& cfg, const EvalOptions& opt) {
  const SynthConfig sc = synth_config_from(cfg);
  Modality modality = Modality::kFused;
  Model model = model_from_checkpoint(cfg, opt.ckpt, &modality, nullptr);
  const int n = opt.n_frames > 0 ? opt.n_frames : count_frames(opt.data_dir);
  const std::vector<Scene> scenes = load_scenes(opt.data_dir, n, sc);
  std::vector<std::vector<Box3D>> gts;
  gts.reserve(scenes.size());
  for (const Scene& s : scenes) gts.push_back(s.boxes);
  const auto dets = detect_frames(model, scenes, modality);
  const EvalReport rep = evaluate(dets, gts, eval_config_from(cfg));
  if (!opt.report_csv.empty()) {
    std::ofstream os(opt.report_csv);
    BEVFUSE_CHECK(os.is_open(), IoError, "cannot write " + opt.report_csv);
    os << report_csv(rep);
  }
  return rep;
}

StratifiedReport cmd_contrib(const Config& cfg, const ContribOptions& opt) {
  const SynthConfig sc = synth_config_from(cfg);
  Modality modality = Modality::kFused;
  Model model = model_from_checkpoint(cfg, opt.ckpt, &modality, nullptr);
  BEVFUSE_CHECK(modality == Modality::kFused, ConfigError,
                "contribution analysis needs a fused checkpoint");
  BEVFUSE_CHECK(model.cfg.fusion_mode == FusionMode::kHybrid, ConfigError,
                "contribution analysis needs hybrid fusion maps");
  const int n = opt.n_frames > 0 ? opt.n_frames : count_frames(opt.data_dir);
  const std::vector<Scene> scenes = load_scenes(opt.data_dir, n, sc);

  Tensor cam_sum({model.cfg.grid.ny, model.cfg.grid.nx});
  // stratified rows accumulate over frames via per-frame maps; detections keep
  // their own frame's map reading, so batch rows are exact
  std::vector<double> sum_by_key;
  std::vector<int> cnt_by_key;
  const std::vector<double> edges = dist_edges_from(cfg);
  const int n_bins = static_cast<int>(edges.size()) - 1;
  sum_by_key.assign(static_cast<std::size_t>(kNumClasses * n_bins), 0.0);
  cnt_by_key.assign(static_cast<std::size_t>(kNumClasses * n_bins), 0);
  int skipped = 0;

  for (const Scene& scene : scenes) {
    DetectForwardCtx ctx;
    const auto dets = model.detect(scene, Modality::kFused, &ctx);
    const FusionLayerCtx& last = ctx.fuse.layers.back();
    const ContributionMap cmap = contribution_maps(last.f_cs, last.f_rs);
    cam_sum.add_(cmap.cam);
    const StratifiedReport frame_rep = stratify(dets, cmap, model.cfg.grid, edges);
    skipped += frame_rep.skipped_outside_grid;
    for (const StratifiedRow& row : frame_rep.rows) {
      int bin = -1;
      for (int b = 0; b < n_bins; ++b)
        if (edges[static_cast<std::size_t>(b)] == row.dist_lo) bin = b;
      if (bin < 0 || row.count == 0) continue;
      const std::size_t key = static_cast<std::size_t>(row.class_id * n_bins + bin);
      sum_by_key[key] += *row.mean_cam * row.count;
      cnt_by_key[key] += row.count;
    }
  }

  StratifiedReport rep;
  rep.skipped_outside_grid = skipped;
  for (int cls = 0; cls < kNumClasses; ++cls)
    for (int b = 0; b < n_bins; ++b) {
      StratifiedRow row;
      row.class_id = cls;
      row.dist_lo = edges[static_cast<std::size_t>(b)];
      row.dist_hi = edges[static_cast<std::size_t>(b) + 1];
      row.count = cnt_by_key[static_cast<std::size_t>(cls * n_bins + b)];
      if (row.count > 0) {
        row.mean_cam = sum_by_key[static_cast<std::size_t>(cls * n_bins + b)] / row.count;
        row.mean_rad = 1.0 - *row.mean_cam;
      }
      rep.rows.push_back(row);
    }

  if (!opt.out_prefix.empty()) {
    Tensor cam_mean = cam_sum;
    cam_mean.scale_(1.0 / static_cast<double>(scenes.size()));
    ContributionMap mean_map{cam_mean, cam_mean.zeros_like()};
    for (std::int64_t i = 0; i < mean_map.cam.size(); ++i)
      mean_map.rad[i] = 1.0 - mean_map.cam[i];
    export_contribution(mean_map, opt.out_prefix);
    std::ofstream os(opt.out_prefix + "_strat.csv");
    BEVFUSE_CHECK(os.is_open(), IoError, "cannot write " + opt.out_prefix + "_strat.csv");
    os << stratified_csv(rep);
  }
  return rep;
}

std::vector<BenchRow> bench_pooling(const BenchOptions& opt) {
  using clock = std::chrono::steady_clock;
  std::vector<BenchRow> rows;
  for (int grid : opt.grids) {
    for (int npts : opt.points) {
      Rng rng(opt.seed ^ (static_cast<std::uint64_t>(grid) << 20) ^ static_cast<std::uint64_t>(npts));
      const int n_cells = grid * grid;
      std::vector<std::int32_t> cells(static_cast<std::size_t>(npts));
      for (auto& cid : cells) {
        // ~2% of points land outside the grid and must be dropped
        cid = rng.uniform() < 0.02 ? -1 : static_cast<std::int32_t>(rng.uniform_int(0, n_cells - 1));
      }
      BenchRow row;
      row.grid = grid;
      row.points = npts;
      row.channels = opt.channels;
      row.dtype = opt.f32 ? "f32" : "f64";

      if (opt.f32) {
        std::vector<float> feats(static_cast<std::size_t>(npts) * opt.channels);
        for (auto& v : feats) v = static_cast<float>(rng.normal());
        std::vector<double> ref_times, eff_times;
        std::vector<float> ref, eff;
        for (int r = 0; r < opt.runs; ++r) {
          auto t0 = clock::now();
          ref = voxel_pool_reference_f32(feats, cells, n_cells, opt.channels);
          auto t1 = clock::now();
          eff = voxel_pool_efficient_f32(feats, cells, n_cells, opt.channels, thread_count());
          auto t2 = clock::now();
          ref_times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
          eff_times.push_back(std::chrono::duration<double, std::milli>(t2 - t1).count());
        }
        for (std::size_t i = 0; i < ref.size(); ++i)
          row.max_abs_diff = std::max(row.max_abs_diff,
                                      static_cast<double>(std::fabs(ref[i] - eff[i])));
        std::sort(ref_times.begin(), ref_times.end());
        std::sort(eff_times.begin(), eff_times.end());
        row.ref_ms = ref_times[ref_times.size() / 2];
        row.eff_ms = eff_times[eff_times.size() / 2];
      } else {
        // pack the points as a [C, N, 1, 1] frustum over a synthetic grid of
        // matching size so the production kernels run unchanged
        FrustumFeatures ff;
        ff.features = Tensor({opt.channels, npts, 1, 1});
        for (std::int64_t i = 0; i < ff.features.size(); ++i) ff.features[i] = rng.normal();
        BevGrid g;
        g.x_min = 0;
        g.x_max = grid;
        g.y_min = 0;
        g.y_max = grid;
        g.nx = grid;
        g.ny = grid;
        ff.ego.resize(static_cast<std::size_t>(npts));
        for (int i = 0; i < npts; ++i) {
          const std::int32_t cid = cells[static_cast<std::size_t>(i)];
          if (cid < 0) {
            ff.ego[static_cast<std::size_t>(i)] = {-1.0, -1.0, 0.0};
          } else {
            ff.ego[static_cast<std::size_t>(i)] = {cid % grid + 0.5, cid / grid + 0.5, 0.0};
          }
        }
        std::vector<double> ref_times, eff_times;
        Tensor ref, eff;
        for (int r = 0; r < opt.runs; ++r) {
          auto t0 = clock::now();
          ref = voxel_pool_reference(ff, g);
          auto t1 = clock::now();
          eff = voxel_pool_efficient(ff, g);
          auto t2 = clock::now();
          ref_times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
          eff_times.push_back(std::chrono::duration<double, std::milli>(t2 - t1).count());
        }
        for (std::int64_t i = 0; i < ref.size(); ++i)
          row.max_abs_diff = std::max(row.max_abs_diff, std::fabs(ref[i] - eff[i]));
        std::sort(ref_times.begin(), ref_times.end());
        std::sort(eff_times.begin(), eff_times.end());
        row.ref_ms = ref_times[ref_times.size() / 2];
        row.eff_ms = eff_times[eff_times.size() / 2];
      }
      rows.push_back(row);
    }
  }
  return rows;
}

std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::ostringstream os;
  os << "grid,points,channels,dtype,ref_ms,eff_ms,speedup,max_abs_diff\n";
  char buf[200];
  for (const BenchRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%d,%d,%s,%.3f,%.3f,%.2f,%.3g\n", r.grid, r.points,
                  r.channels, r.dtype.c_str(), r.ref_ms, r.eff_ms,
                  r.eff_ms > 0 ? r.ref_ms / r.eff_ms : 0.0, r.max_abs_diff);
    os << buf;
  }
  return os.str();
}

}  // namespace bevfuse
