#pragma once

#include <map>
#include <string>

#include "bevfuse/eval.hpp"
#include "bevfuse/model.hpp"
#include "bevfuse/synth.hpp"

namespace bevfuse {

// Plain key = value configuration text; '#' starts a comment. Unknown keys are
// rejected when building typed configs so typos fail loudly.
class Config {
 public:
  Config() = default;
  static Config parse(const std::string& text);
  static Config load_file(const std::string& path);

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  std::string get(const std::string& key, const std::string& dflt) const;
  int get_int(const std::string& key, int dflt) const;
  double get_double(const std::string& key, double dflt) const;
  bool get_bool(const std::string& key, bool dflt) const;
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  // Sorted canonical text; its FNV-1a hash identifies the configuration.
  std::string canonical_text() const;
  std::uint64_t hash() const;

  const std::map<std::string, std::string>& values() const { return values_; }
  void mark_known(const std::string& key) const;
  // Throws ConfigError when a key was never consumed by any typed builder.
  void check_no_unknown_keys() const;

 private:
  std::map<std::string, std::string> values_;
  mutable std::map<std::string, bool> known_;
};

struct TrainConfig {
  int stage = 1;
  int epochs = 12;
  double lr = 2e-4;  // stage 2 default 1e-4
  double weight_decay = 0.01;
  int batch_size = 2;
  std::uint64_t seed = 1;
  Modality modality = Modality::kCamera;
  FusionMode fusion_mode = FusionMode::kHybrid;
  bool aug_flip = true;
  double aug_radar_drop = 0.1;
  double aug_radar_noise = 0.05;
};

ModelConfig model_config_from(const Config& c);
SynthConfig synth_config_from(const Config& c);
TrainConfig train_config_from(const Config& c, int stage);
EvalConfig eval_config_from(const Config& c);

// Distance stratification edges for the contribution report.
std::vector<double> dist_edges_from(const Config& c);

}  // namespace bevfuse
