#include "bevfuse/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace bevfuse {

namespace {

constexpr char kMagic[8] = {'B', 'V', 'F', 'C', 'K', 'P', 'T', '1'};

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& os, std::uint64_t v) {
  write_u32(os, static_cast<std::uint32_t>(v & 0xffffffffu));
  write_u32(os, static_cast<std::uint32_t>(v >> 32));
}

std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  BEVFUSE_CHECK(is.good(), IoError, "checkpoint: truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint64_t read_u64(std::istream& is) {
  const std::uint64_t lo = read_u32(is);
  const std::uint64_t hi = read_u32(is);
  return lo | (hi << 32);
}

void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is) {
  const std::uint32_t n = read_u32(is);
  BEVFUSE_CHECK(n <= 4096, IoError, "checkpoint: implausible string length");
  std::string s(n, '\0');
  is.read(s.data(), n);
  BEVFUSE_CHECK(is.good(), IoError, "checkpoint: truncated string");
  return s;
}

}  // namespace

Checkpoint Checkpoint::from_model(const Model& model, const std::set<std::string>& frozen_names,
                                  std::uint32_t stage_, std::uint32_t epoch_,
                                  std::uint64_t config_hash_) {
  Checkpoint ck;
  ck.stage = stage_;
  ck.epoch = epoch_;
  ck.config_hash = config_hash_;
  ck.frozen = frozen_names;
  auto& params = const_cast<ModelParams&>(model.params);
  params.visit([&](const char* n, Tensor& t) { ck.tensors.emplace(n, t); });
  for (const std::string& f : ck.frozen)
    BEVFUSE_CHECK(ck.tensors.count(f) == 1, InvariantError,
                  "frozen name not among parameters: " + f);
  return ck;
}

void Checkpoint::apply_to(Model& model) const {
  std::set<std::string> seen;
  model.params.visit([&](const char* n, Tensor& t) {
    const auto it = tensors.find(n);
    if (it == tensors.end()) return;
    BEVFUSE_CHECK(it->second.shape() == t.shape(), ValueError,
                  std::string("checkpoint shape mismatch for ") + n);
    t = it->second;
    seen.insert(n);
  });
  for (const auto& [name, tensor] : tensors)
    BEVFUSE_CHECK(seen.count(name) == 1, ValueError,
                  "checkpoint parameter has no model counterpart: " + name);
}

void Checkpoint::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  BEVFUSE_CHECK(os.is_open(), IoError, "cannot open for write: " + path);
  os.write(kMagic, 8);
  write_u32(os, stage);
  write_u32(os, epoch);
  write_u64(os, config_hash);
  write_string(os, modality);
  write_string(os, fusion_mode);
  write_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, tensor] : tensors) {
    write_string(os, name);
    const unsigned char fr = frozen.count(name) ? 1 : 0;
    os.write(reinterpret_cast<const char*>(&fr), 1);
    write_tensor(os, tensor);
  }
  BEVFUSE_CHECK(os.good(), IoError, "checkpoint write failed: " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  BEVFUSE_CHECK(is.is_open(), IoError, "cannot open for read: " + path);
  char magic[8];
  is.read(magic, 8);
  BEVFUSE_CHECK(is.good() && std::memcmp(magic, kMagic, 8) == 0, IoError,
                "not a checkpoint file: " + path);
  Checkpoint ck;
  ck.stage = read_u32(is);
  ck.epoch = read_u32(is);
  ck.config_hash = read_u64(is);
  ck.modality = read_string(is);
  ck.fusion_mode = read_string(is);
  const std::uint32_t n = read_u32(is);
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::string name = read_string(is);
    unsigned char fr = 0;
    is.read(reinterpret_cast<char*>(&fr), 1);
    BEVFUSE_CHECK(is.good(), IoError, "checkpoint: truncated flag");
    Tensor t = read_tensor(is);
    if (fr) ck.frozen.insert(name);
    ck.tensors.emplace(name, std::move(t));
  }
  return ck;
}

std::uint64_t tensor_digest(const Tensor& t, std::uint64_t seed) {
  std::uint64_t h = seed;
  auto mix = [&h](std::uint64_t v) {
    h ^= v;
    h *= 1099511628211ULL;
  };
  mix(static_cast<std::uint64_t>(t.rank()));
  for (int i = 0; i < t.rank(); ++i) mix(static_cast<std::uint64_t>(t.extent(i)));
  for (std::int64_t i = 0; i < t.size(); ++i) {
    std::uint64_t bits;
    const double v = t[i];
    std::memcpy(&bits, &v, 8);
    mix(bits);
  }
  return h;
}

std::uint64_t Checkpoint::subset_digest(const std::set<std::string>& names) const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const std::string& n : names) {
    const auto it = tensors.find(n);
    BEVFUSE_CHECK(it != tensors.end(), InvariantError, "digest: unknown parameter " + n);
    h = tensor_digest(it->second, h ^ fnv1a64(n));
  }
  return h;
}

}  // namespace bevfuse
