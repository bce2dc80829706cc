// Command-line surface: gen, train, forward, eval, contrib, bench.
// Exit codes: 0 ok, 1 usage, 2 data error, 3 invariant breach.

#include <cstdio>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "bevfuse/pipeline.hpp"

namespace {

bevfuse::Config load_config(const std::string& path) {
  if (path.empty()) return bevfuse::Config();
  return bevfuse::Config::load_file(path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bevfuse: radar-camera BEV fusion reference stack"};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("--config", config_path, "key = value configuration file");

  // gen
  auto* gen = app.add_subcommand("gen", "generate synthetic frames");
  bevfuse::GenOptions gen_opt;
  gen->add_option("--out", gen_opt.out_dir, "output directory")->required();
  gen->add_option("--frames", gen_opt.n_frames, "frame count");
  gen->add_option("--seed", gen_opt.seed0, "seed of frame 0");

  // train
  auto* train = app.add_subcommand("train", "run one training stage");
  bevfuse::TrainOptions train_opt;
  train->add_option("--stage", train_opt.stage, "1 or 2")->required()->check(CLI::Range(1, 2));
  train->add_option("--data", train_opt.data_dir, "frame directory (defaults to generating scenes)");
  train->add_option("--out", train_opt.out_ckpt, "checkpoint output path")->required();
  train->add_option("--init", train_opt.in_ckpt, "stage-1 checkpoint (required for stage 2)");
  train->add_option("--loss-csv", train_opt.loss_csv, "loss curve output");

  // forward
  auto* fwd = app.add_subcommand("forward", "single-frame inference with optional feature dumps");
  bevfuse::ForwardOptions fwd_opt;
  fwd->add_option("--ckpt", fwd_opt.ckpt, "checkpoint")->required();
  fwd->add_option("--data", fwd_opt.data_dir, "frame directory")->required();
  fwd->add_option("--frame", fwd_opt.frame, "frame index");
  fwd->add_option("--dets", fwd_opt.dets_out, "detection output file");
  fwd->add_option("--dump-bev", fwd_opt.dump_paths,
                  "tensor dump path; stem selects the map (camera|radar|fused|dca_cam|dca_rad)");

  // eval
  auto* ev = app.add_subcommand("eval", "VoD-protocol evaluation over a frame directory");
  bevfuse::EvalOptions ev_opt;
  ev->add_option("--ckpt", ev_opt.ckpt, "checkpoint")->required();
  ev->add_option("--data", ev_opt.data_dir, "frame directory")->required();
  ev->add_option("--frames", ev_opt.n_frames, "frame count (default: all)");
  ev->add_option("--report", ev_opt.report_csv, "CSV report path");

  // contrib
  auto* contrib = app.add_subcommand("contrib", "sensor contribution maps and stratified report");
  bevfuse::ContribOptions ct_opt;
  contrib->add_option("--ckpt", ct_opt.ckpt, "fused checkpoint")->required();
  contrib->add_option("--data", ct_opt.data_dir, "frame directory")->required();
  contrib->add_option("--frames", ct_opt.n_frames, "frame count (default: all)");
  contrib->add_option("--out", ct_opt.out_prefix, "output path prefix")->required();

  // bench
  auto* bench = app.add_subcommand("bench", "voxel pooling benchmark");
  bevfuse::BenchOptions bn_opt;
  std::string bench_out;
  bench->add_option("--grids", bn_opt.grids, "grid side lengths");
  bench->add_option("--points", bn_opt.points, "frustum point counts");
  bench->add_option("--channels", bn_opt.channels, "feature channels");
  bench->add_option("--runs", bn_opt.runs, "runs per cell (median reported)");
  bench->add_flag("--f32", bn_opt.f32, "use the 32-bit kernels");
  bench->add_option("--out", bench_out, "CSV output path");

  for (CLI::App* sub : app.get_subcommands({})) sub->fallthrough();
  CLI11_PARSE(app, argc, argv);

  try {
    const bevfuse::Config cfg = load_config(config_path);
    if (gen->parsed()) {
      bevfuse::cmd_gen(cfg, gen_opt);
      std::printf("wrote %d frames to %s\n", gen_opt.n_frames, gen_opt.out_dir.c_str());
    } else if (train->parsed()) {
      bevfuse::cmd_train(cfg, train_opt);
      std::printf("checkpoint written to %s\n", train_opt.out_ckpt.c_str());
    } else if (fwd->parsed()) {
      const auto dets = bevfuse::cmd_forward(cfg, fwd_opt);
      for (const auto& d : dets)
        std::printf("%s\n", bevfuse::format_label_line(d.box, d.score).c_str());
    } else if (ev->parsed()) {
      const auto rep = bevfuse::cmd_eval(cfg, ev_opt);
      std::printf("%s", bevfuse::report_table(rep).c_str());
    } else if (contrib->parsed()) {
      const auto rep = bevfuse::cmd_contrib(cfg, ct_opt);
      std::printf("%s", bevfuse::stratified_csv(rep).c_str());
    } else if (bench->parsed()) {
      const auto rows = bevfuse::bench_pooling(bn_opt);
      const std::string csv = bevfuse::bench_csv(rows);
      std::printf("%s", csv.c_str());
      if (!bench_out.empty()) {
        std::ofstream os(bench_out);
        if (!os.is_open()) throw bevfuse::IoError("cannot write " + bench_out);
        os << csv;
      }
    }
  } catch (const bevfuse::InvariantError& e) {
    std::fprintf(stderr, "invariant breach: %s\n", e.what());
    return 3;
  } catch (const bevfuse::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const bevfuse::ValueError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 2;
  } catch (const bevfuse::IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 2;
  } catch (const bevfuse::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
