#pragma once

// IGMD dataset files:
//   "IGMD" | u32 version=1 | u32 header_len | JSON header
//   per record: u16 T | u16 V | u16 C | f32[T*V*C] data | ceil(T*V/8) mask bytes | u16 label
// The JSON header carries the manifest plus T, V, C, K. Mask bits are LSB-first in (t, v)
// row-major order. All integers and floats are little-endian.

#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "igm/binary_io.hpp"
#include "igm/error.hpp"
#include "igm/skeleton.hpp"

namespace igm {

inline constexpr char kDatasetMagic[4] = {'I', 'G', 'M', 'D'};
inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr const char* kGeneratorVersion = "igm-synth-1";

struct DatasetManifest {
  std::string name = "synthetic";
  int num_classes = 0;
  int num_samples = 0;
  std::string split = "train";
  std::uint64_t seed = 0;
  std::string generator_version = kGeneratorVersion;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<SkeletonSequence> samples;

  int frames() const { return samples.empty() ? 0 : samples.front().frames; }
  int joints() const { return samples.empty() ? 0 : samples.front().joints; }
  int channels() const { return samples.empty() ? 3 : samples.front().channels; }
};

inline nlohmann::json to_json(const DatasetManifest& m) {
  return {{"name", m.name},   {"num_classes", m.num_classes}, {"num_samples", m.num_samples},
          {"split", m.split}, {"seed", m.seed},               {"generator_version", m.generator_version}};
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  m.name = j.at("name").get<std::string>();
  m.num_classes = j.at("num_classes").get<int>();
  m.num_samples = j.at("num_samples").get<int>();
  m.split = j.at("split").get<std::string>();
  if (m.split != "train" && m.split != "val") throw IoError("manifest split must be train or val");
  m.seed = j.at("seed").get<std::uint64_t>();
  m.generator_version = j.at("generator_version").get<std::string>();
  return m;
}

inline std::vector<std::uint8_t> encode_dataset(const Dataset& ds) {
  validate_dataset(ds.samples);
  bin::Writer w;
  w.bytes(kDatasetMagic, 4);
  w.u32(kDatasetVersion);
  DatasetManifest m = ds.manifest;
  m.num_samples = int(ds.samples.size());
  nlohmann::json header = {{"manifest", to_json(m)},
                           {"T", ds.frames()},
                           {"V", ds.joints()},
                           {"C", ds.channels()},
                           {"K", m.num_classes}};
  w.str(header.dump());
  for (const auto& s : ds.samples) {
    w.u16(std::uint16_t(s.frames));
    w.u16(std::uint16_t(s.joints));
    w.u16(std::uint16_t(s.channels));
    for (double x : s.data) w.f32(static_cast<float>(x));
    std::vector<std::uint8_t> bits((s.mask.size() + 7) / 8, 0);
    for (std::size_t i = 0; i < s.mask.size(); ++i)
      if (s.mask[i]) bits[i / 8] |= std::uint8_t(1u << (i % 8));
    w.bytes(bits.data(), bits.size());
    w.u16(std::uint16_t(s.label));
  }
  return w.buffer();
}

inline void save_dataset(const std::string& path, const Dataset& ds) {
  bin::Writer w;
  const auto bytes = encode_dataset(ds);
  w.bytes(bytes.data(), bytes.size());
  w.save(path);
}

inline Dataset decode_dataset(std::vector<std::uint8_t> bytes) {
  bin::Reader r(std::move(bytes));
  char magic[4];
  r.bytes(magic, 4, "header");
  if (std::string(magic, 4) != std::string(kDatasetMagic, 4))
    throw IoError("bad dataset magic at byte offset 0");
  const auto version = r.u32("header");
  if (version != kDatasetVersion)
    throw IoError("unsupported dataset version " + std::to_string(version) + " at byte offset 4");
  const std::size_t json_at = r.offset();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.str("header"));
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError("malformed dataset header at byte offset " + std::to_string(json_at) + ": " + e.what());
  }
  Dataset ds;
  ds.manifest = manifest_from_json(header.at("manifest"));
  const int T = header.at("T").get<int>(), V = header.at("V").get<int>(), C = header.at("C").get<int>();
  const int K = header.at("K").get<int>();
  ds.samples.reserve(ds.manifest.num_samples);
  for (int i = 0; i < ds.manifest.num_samples; ++i) {
    const std::size_t rec_at = r.offset();
    const std::string what = "record " + std::to_string(i);
    const int t = r.u16(what.c_str()), v = r.u16(what.c_str()), c = r.u16(what.c_str());
    if (t != T || v != V || c != C)
      throw IoError("record " + std::to_string(i) + " at byte offset " + std::to_string(rec_at) +
                    " has shape " + std::to_string(t) + "x" + std::to_string(v) + "x" + std::to_string(c) +
                    ", header says " + std::to_string(T) + "x" + std::to_string(V) + "x" + std::to_string(C));
    SkeletonSequence s(T, V, C);
    for (auto& x : s.data) x = r.f32(what.c_str());
    std::vector<std::uint8_t> bits((s.mask.size() + 7) / 8);
    r.bytes(bits.data(), bits.size(), what.c_str());
    for (std::size_t k = 0; k < s.mask.size(); ++k) s.mask[k] = (bits[k / 8] >> (k % 8)) & 1u;
    s.label = r.u16(what.c_str());
    if (s.label >= K)
      throw IoError("record " + std::to_string(i) + " label " + std::to_string(s.label) + " >= K");
    ds.samples.push_back(std::move(s));
  }
  if (!r.at_end())
    throw IoError("trailing bytes after " + std::to_string(ds.samples.size()) +
                  " records at byte offset " + std::to_string(r.offset()));
  return ds;
}

inline Dataset load_dataset(const std::string& path) {
  bin::Reader r = bin::Reader::from_file(path);
  std::vector<std::uint8_t> bytes(r.remaining());
  if (!bytes.empty()) r.bytes(bytes.data(), bytes.size(), "file");
  return decode_dataset(std::move(bytes));
}

/// Generates the canonical train/val pair from one seed; val draws from a disjoint stream.
inline std::pair<Dataset, Dataset> make_train_val(int num_classes, int train_per_class, int val_per_class,
                                                  int frames, int joints, std::uint64_t seed) {
  Dataset train, val;
  train.samples = generate_synthetic_dataset(num_classes, train_per_class, frames, joints, seed);
  val.samples = generate_synthetic_dataset(num_classes, val_per_class, frames, joints, splitmix64(seed ^ 0x5eedULL));
  train.manifest = {"synthetic", num_classes, int(train.samples.size()), "train", seed, kGeneratorVersion};
  val.manifest = {"synthetic", num_classes, int(val.samples.size()), "val", seed, kGeneratorVersion};
  return {std::move(train), std::move(val)};
}

}  // namespace igm
