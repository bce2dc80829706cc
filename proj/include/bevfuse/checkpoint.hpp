#pragma once

#include <map>
#include <set>

#include "bevfuse/model.hpp"

namespace bevfuse {

// Named-parameter store with per-parameter frozen flags. Binary format (all
// little-endian): magic "BVFCKPT1", u32 stage, u32 epoch, u64 config hash,
// u32 count, then per parameter sorted by name: u32 name length, name bytes,
// u8 frozen, tensor block. Loading then saving reproduces the bytes exactly.
struct Checkpoint {
  std::map<std::string, Tensor> tensors;
  std::set<std::string> frozen;
  std::uint32_t stage = 0;
  std::uint32_t epoch = 0;
  std::uint64_t config_hash = 0;
  std::string modality = "camera";
  std::string fusion_mode = "hybrid";

  static Checkpoint from_model(const Model& model, const std::set<std::string>& frozen_names,
                               std::uint32_t stage, std::uint32_t epoch, std::uint64_t config_hash);
  // Copies tensors into the model by name; every checkpoint entry must match
  // an existing parameter of identical shape.
  void apply_to(Model& model) const;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

  // Order- and content-sensitive digest of a parameter subset.
  std::uint64_t subset_digest(const std::set<std::string>& names) const;
};

std::uint64_t tensor_digest(const Tensor& t, std::uint64_t seed = 1469598103934665603ULL);

}  // namespace bevfuse
