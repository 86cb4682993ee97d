// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "dcvit/binio.hpp"
#include "dcvit/hash.hpp"
#include "dcvit/vit.hpp"

namespace dcvit {

// Layout (all integers little-endian):
//   "DCVT" | u32 version | u64 config length | config JSON (UTF-8)
//   | u64 tensor count | per tensor: u32 name length | name | u32 rank
//   | rank x u64 extents | float32 data
// The config JSON holds {"vit": ViTConfig, "blocks": [BlockSpec], "meta": {...}}.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ViTModel model;
  nlohmann::json meta = nlohmann::json::object();
};

inline std::vector<std::uint8_t> serialize_checkpoint(const ViTModel& m, const nlohmann::json& meta = nlohmann::json::object()) {
  validate_model(m);
  nlohmann::json cfg{{"vit", m.config}, {"blocks", m.specs}, {"meta", meta}};
  const auto text = cfg.dump();
  binio::Writer w;
  w.magic("DCVT");
  w.u32(kCheckpointVersion);
  w.u64(text.size());
  w.bytes(text.data(), text.size());
  w.u64(m.params.size());
  for (const auto& [name, t] : m.params.map()) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) w.u64(static_cast<std::uint64_t>(e));
    w.f32s(t.data());
  }
  return w.buffer();
}

inline Checkpoint deserialize_checkpoint(binio::Reader r) {
  r.expect_magic("DCVT");
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw IoError(detail::concat(r.what(), ": unsupported checkpoint version ", version));
  const auto cfg_len = r.u64();
  nlohmann::json cfg;
  try {
    cfg = nlohmann::json::parse(r.str(cfg_len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(r.what() + ": malformed config record: " + e.what());
  }
  Checkpoint ck;
  ck.model.config = cfg.at("vit").get<ViTConfig>();
  ck.model.specs = cfg.at("blocks").get<std::vector<BlockSpec>>();
  ck.meta = cfg.value("meta", nlohmann::json::object());
  const auto count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name = r.str(r.u32());
    const auto rank = r.u32();
    Shape shape(rank);
    for (auto& e : shape) e = static_cast<std::int64_t>(r.u64());
    Tensor t(shape);
    r.f32s(t.data());
    if (ck.model.params.contains(name)) throw IoError(r.what() + ": duplicate tensor " + name);
    ck.model.params.set(name, t);
  }
  if (!r.at_end()) throw IoError(r.what() + ": trailing bytes after last tensor");
  validate_model(ck.model);
  return ck;
}

inline void save_checkpoint(const std::string& path, const ViTModel& m,
                            const nlohmann::json& meta = nlohmann::json::object()) {
  binio::Writer w;
  const auto bytes = serialize_checkpoint(m, meta);
  w.bytes(bytes.data(), bytes.size());
  w.save(path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return deserialize_checkpoint(binio::Reader::from_file(path));
}

/// Content hash of a model (structure and weights, no metadata).
inline Digest model_digest(const ViTModel& m) { return sha256(serialize_checkpoint(m)); }

}  // namespace dcvit
