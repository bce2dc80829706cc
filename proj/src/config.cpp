#include "bevfuse/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace bevfuse {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

Config Config::parse(const std::string& text) {
  Config c;
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto hash_pos = line.find('#');
    if (hash_pos != std::string::npos) line = line.substr(0, hash_pos);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    BEVFUSE_CHECK(eq != std::string::npos, ConfigError,
                  "config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    BEVFUSE_CHECK(!key.empty(), ConfigError,
                  "config line " + std::to_string(line_no) + ": empty key");
    c.values_[key] = value;
  }
  return c;
}

Config Config::load_file(const std::string& path) {
  std::ifstream is(path);
  BEVFUSE_CHECK(is.is_open(), IoError, "cannot open config: " + path);
  std::ostringstream os;
  os << is.rdbuf();
  return parse(os.str());
}

std::string Config::get(const std::string& key, const std::string& dflt) const {
  mark_known(key);
  const auto it = values_.find(key);
  return it == values_.end() ? dflt : it->second;
}

int Config::get_int(const std::string& key, int dflt) const {
  mark_known(key);
  const auto it = values_.find(key);
  if (it == values_.end()) return dflt;
  try {
    return std::stoi(it->second);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': not an integer: " + it->second);
  }
}

double Config::get_double(const std::string& key, double dflt) const {
  mark_known(key);
  const auto it = values_.find(key);
  if (it == values_.end()) return dflt;
  try {
    return std::stod(it->second);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': not a number: " + it->second);
  }
}

bool Config::get_bool(const std::string& key, bool dflt) const {
  mark_known(key);
  const auto it = values_.find(key);
  if (it == values_.end()) return dflt;
  if (it->second == "true" || it->second == "1") return true;
  if (it->second == "false" || it->second == "0") return false;
  throw ConfigError("config key '" + key + "': not a boolean: " + it->second);
}

std::string Config::canonical_text() const {
  std::ostringstream os;
  for (const auto& [k, v] : values_) os << k << " = " << v << "\n";
  return os.str();
}

std::uint64_t Config::hash() const { return fnv1a64(canonical_text()); }

void Config::mark_known(const std::string& key) const { known_[key] = true; }

void Config::check_no_unknown_keys() const {
  for (const auto& [k, v] : values_) {
    (void)v;
    BEVFUSE_CHECK(known_.count(k) > 0, ConfigError, "unknown config key: " + k);
  }
}

namespace {

BevGrid grid_from(const Config& c) {
  BevGrid g;
  g.x_min = c.get_double("grid.x_min", g.x_min);
  g.x_max = c.get_double("grid.x_max", g.x_max);
  g.y_min = c.get_double("grid.y_min", g.y_min);
  g.y_max = c.get_double("grid.y_max", g.y_max);
  g.nx = c.get_int("grid.nx", g.nx);
  g.ny = c.get_int("grid.ny", g.ny);
  g.validate();
  return g;
}

DepthBins bins_from(const Config& c) {
  DepthBins b;
  b.d_min = c.get_double("depth.d_min", b.d_min);
  b.d_max = c.get_double("depth.d_max", b.d_max);
  b.n_bins = c.get_int("depth.n_bins", b.n_bins);
  b.validate();
  return b;
}

}  // namespace

ModelConfig model_config_from(const Config& c) {
  ModelConfig m;
  m.grid = grid_from(c);
  m.bins = bins_from(c);
  m.feat_channels = c.get_int("camera.feat_channels", m.feat_channels);
  m.feat_stride = c.get_int("camera.feat_stride", m.feat_stride);
  m.image_w = c.get_int("camera.image_w", m.image_w);
  m.image_h = c.get_int("camera.image_h", m.image_h);
  m.bev_channels = c.get_int("model.bev_channels", m.bev_channels);
  m.se_hidden = c.get_int("model.se_hidden", m.se_hidden);
  m.attn_heads = c.get_int("attn.heads", m.attn_heads);
  m.attn_points = c.get_int("attn.points", m.attn_points);
  m.offset_scale_init = c.get_double("attn.offset_scale_init", m.offset_scale_init);
  m.radar_channels = c.get_int("radar.channels", m.radar_channels);
  m.radar_blocks = c.get_int("radar.blocks", m.radar_blocks);
  m.dmsa_heads = c.get_int("radar.dmsa_heads", m.dmsa_heads);
  m.rcs.v_lo = c.get_double("radar.rcs_v_lo", m.rcs.v_lo);
  m.rcs.v_hi = c.get_double("radar.rcs_v_hi", m.rcs.v_hi);
  m.fusion.num_layers = c.get_int("fusion.num_layers", m.fusion.num_layers);
  m.fusion_mode = fusion_mode_from_string(c.get("fusion.mode", "hybrid"));
  m.w_depth = c.get_double("loss.w_depth", m.w_depth);
  m.w_cls = c.get_double("loss.w_cls", m.w_cls);
  m.w_box = c.get_double("loss.w_box", m.w_box);
  m.w_vel = c.get_double("loss.w_vel", m.w_vel);
  m.score_thresh = c.get_double("decode.score_thresh", m.score_thresh);
  m.max_dets = c.get_int("decode.max_dets", m.max_dets);
  m.validate();
  return m;
}

SynthConfig synth_config_from(const Config& c) {
  SynthConfig s;
  s.grid = grid_from(c);
  s.bins = bins_from(c);
  s.image_w = c.get_int("camera.image_w", s.image_w);
  s.image_h = c.get_int("camera.image_h", s.image_h);
  s.feat_stride = c.get_int("camera.feat_stride", s.feat_stride);
  s.feat_channels = c.get_int("camera.feat_channels", s.feat_channels);
  s.cars_min = c.get_int("synth.cars_min", s.cars_min);
  s.cars_max = c.get_int("synth.cars_max", s.cars_max);
  s.peds_min = c.get_int("synth.peds_min", s.peds_min);
  s.peds_max = c.get_int("synth.peds_max", s.peds_max);
  s.cyclists_min = c.get_int("synth.cyclists_min", s.cyclists_min);
  s.cyclists_max = c.get_int("synth.cyclists_max", s.cyclists_max);
  s.car_points = c.get_int("synth.car_points", s.car_points);
  s.cyclist_points = c.get_int("synth.cyclist_points", s.cyclist_points);
  s.ped_points = c.get_int("synth.ped_points", s.ped_points);
  s.clutter_fraction = c.get_double("synth.clutter_fraction", s.clutter_fraction);
  s.n_sweeps = c.get_int("synth.n_sweeps", s.n_sweeps);
  s.sweep_dt = c.get_double("synth.sweep_dt", s.sweep_dt);
  s.camera_height = c.get_double("synth.camera_height", s.camera_height);
  s.focal = c.get_double("synth.focal", s.focal);
  s.blob_gain = c.get_double("synth.blob_gain", s.blob_gain);
  s.feature_noise = c.get_double("synth.feature_noise", s.feature_noise);
  s.depth_cue_power = c.get_double("synth.depth_cue_power", s.depth_cue_power);
  s.depth_cue_noise = c.get_double("synth.depth_cue_noise", s.depth_cue_noise);
  s.benchmark_scene = c.get_bool("synth.benchmark_scene", s.benchmark_scene);
  s.validate();
  return s;
}

TrainConfig train_config_from(const Config& c, int stage) {
  TrainConfig t;
  t.stage = stage;
  BEVFUSE_CHECK(stage == 1 || stage == 2, ConfigError, "train stage must be 1 or 2");
  t.epochs = c.get_int("train.epochs", 12);
  t.lr = c.get_double("train.lr", stage == 1 ? 2e-4 : 1e-4);
  BEVFUSE_CHECK(t.lr >= 0.0, ConfigError, "learning rate must be nonnegative");
  BEVFUSE_CHECK(t.epochs >= 1, ConfigError, "epochs must be >= 1");
  t.weight_decay = c.get_double("train.weight_decay", t.weight_decay);
  t.batch_size = c.get_int("train.batch_size", t.batch_size);
  t.seed = static_cast<std::uint64_t>(c.get_int("train.seed", 1));
  const std::string dflt_mod = stage == 1 ? "camera" : "fused";
  t.modality = modality_from_string(c.get("train.modality", dflt_mod));
  t.fusion_mode = fusion_mode_from_string(c.get("fusion.mode", "hybrid"));
  t.aug_flip = c.get_bool("train.aug_flip", t.aug_flip);
  t.aug_radar_drop = c.get_double("train.aug_radar_drop", t.aug_radar_drop);
  t.aug_radar_noise = c.get_double("train.aug_radar_noise", t.aug_radar_noise);
  if (stage == 2)
    BEVFUSE_CHECK(t.modality == Modality::kFused, ConfigError, "stage 2 trains the fused model");
  return t;
}

EvalConfig eval_config_from(const Config& c) {
  EvalConfig e;
  e.iou_car = c.get_double("eval.iou_car", e.iou_car);
  e.iou_pedestrian = c.get_double("eval.iou_pedestrian", e.iou_pedestrian);
  e.iou_cyclist = c.get_double("eval.iou_cyclist", e.iou_cyclist);
  e.corridor_lat = c.get_double("eval.corridor_lat", e.corridor_lat);
  e.corridor_forward = c.get_double("eval.corridor_forward", e.corridor_forward);
  const std::string interp = c.get("eval.interp", "r40");
  if (interp == "r40") e.interp = ApInterpolation::kPoint40;
  else if (interp == "r11") e.interp = ApInterpolation::kPoint11;
  else if (interp == "all") e.interp = ApInterpolation::kAll;
  else throw ConfigError("eval.interp must be r40|r11|all");
  return e;
}

std::vector<double> dist_edges_from(const Config& c) {
  const std::string s = c.get("contrib.dist_edges", "0,15,30,51.2");
  std::vector<double> edges;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) edges.push_back(std::stod(tok));
  BEVFUSE_CHECK(edges.size() >= 2, ConfigError, "contrib.dist_edges needs >= 2 values");
  return edges;
}

}  // namespace bevfuse
