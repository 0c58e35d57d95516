#pragma once

// IGMC checkpoint: "IGMC", u32 version, u32-length JSON metadata, u32 array count, then per
// array {u32-length name, u32 rows, u32 cols, rows*cols f32 row-major}. Optimizer moments
// are stored as arrays named "adam.m/<param>" and "adam.v/<param>". All integers and floats
// are little-endian.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "igm/autodiff.hpp"
#include "igm/binary_io.hpp"
#include "igm/error.hpp"

namespace igm {

inline constexpr char kCheckpointMagic[4] = {'I', 'G', 'M', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  ad::ParamStore<float> params;
  std::vector<ad::Mat<float>> adam_m, adam_v;  // empty when no optimizer state is stored

  bool has_optimizer_state() const { return !adam_m.empty(); }
};

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  const bool opt = ck.has_optimizer_state();
  if (opt && (int(ck.adam_m.size()) != ck.params.size() || int(ck.adam_v.size()) != ck.params.size()))
    throw ConfigError("optimizer state does not match the parameter list");
  bin::Writer w;
  w.bytes(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.str(ck.meta.dump());
  w.u32(std::uint32_t(ck.params.size() * (opt ? 3 : 1)));
  auto put = [&](const std::string& name, const ad::Mat<float>& m) {
    w.str(name);
    w.u32(std::uint32_t(m.rows()));
    w.u32(std::uint32_t(m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) w.f32(m.data()[i]);
  };
  for (int i = 0; i < ck.params.size(); ++i) put(ck.params.name(i), ck.params.value(i));
  if (opt) {
    for (int i = 0; i < ck.params.size(); ++i) put("adam.m/" + ck.params.name(i), ck.adam_m[i]);
    for (int i = 0; i < ck.params.size(); ++i) put("adam.v/" + ck.params.name(i), ck.adam_v[i]);
  }
  return w.buffer();
}

inline Checkpoint decode_checkpoint(std::vector<std::uint8_t> bytes) {
  bin::Reader r(std::move(bytes));
  char magic[4];
  r.bytes(magic, 4, "checkpoint header");
  if (std::string(magic, 4) != std::string(kCheckpointMagic, 4)) throw IoError("bad checkpoint magic at byte offset 0");
  const auto version = r.u32("checkpoint header");
  if (version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version) + " at byte offset 4");
  Checkpoint ck;
  const std::size_t json_at = r.offset();
  try {
    ck.meta = nlohmann::json::parse(r.str("checkpoint metadata"));
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError("malformed checkpoint metadata at byte offset " + std::to_string(json_at) + ": " + e.what());
  }
  const auto n = r.u32("array count");
  for (std::uint32_t k = 0; k < n; ++k) {
    const std::string name = r.str("array name");
    const auto rows = r.u32("array shape"), cols = r.u32("array shape");
    ad::Mat<float> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = r.f32("array data");
    if (name.rfind("adam.m/", 0) == 0) {
      ck.params.id(name.substr(7));
      ck.adam_m.push_back(std::move(m));
    } else if (name.rfind("adam.v/", 0) == 0) {
      ck.params.id(name.substr(7));
      ck.adam_v.push_back(std::move(m));
    } else {
      ck.params.add(name, std::move(m));
    }
  }
  if (!r.at_end()) throw IoError("trailing bytes in checkpoint at byte offset " + std::to_string(r.offset()));
  if (ck.adam_m.size() != ck.adam_v.size() ||
      (ck.has_optimizer_state() && int(ck.adam_m.size()) != ck.params.size()))
    throw IoError("checkpoint optimizer state is incomplete");
  return ck;
}

/// Writes to a sibling temp file first so a crash never leaves a half-written checkpoint.
inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  bin::Writer w;
  const auto bytes = encode_checkpoint(ck);
  w.bytes(bytes.data(), bytes.size());
  const std::string tmp = path + ".tmp";
  w.save(tmp);
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at '" + path + "': " + ec.message());
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  bin::Reader r = bin::Reader::from_file(path);
  std::vector<std::uint8_t> bytes(r.remaining());
  if (!bytes.empty()) r.bytes(bytes.data(), bytes.size(), "file");
  return bytes;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  if (!std::filesystem::exists(path)) throw IoError("checkpoint not found: " + path);
  return decode_checkpoint(read_file_bytes(path));
}

inline std::string hex64(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

/// FNV-1a of the checkpoint file bytes, as 16 hex digits.
inline std::string checkpoint_hash(const std::string& path) { return hex64(bin::fnv1a(read_file_bytes(path))); }

}  // namespace igm
