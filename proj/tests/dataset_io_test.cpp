#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "igm/dataset_io.hpp"

namespace igm {
namespace {

namespace fs = std::filesystem;

std::string temp_path(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "igm_dataset_io_test";
  fs::create_directories(dir);
  return (dir / name).string();
}

Dataset small_dataset() {
  Dataset ds;
  ds.samples = generate_synthetic_dataset(3, 4, 6, 15, 5);
  ds.samples[1].set_valid(2, 4, false);
  for (int c = 0; c < 3; ++c) ds.samples[1].at(2, 4, c) = 0.0;
  ds.manifest = {"synthetic", 3, int(ds.samples.size()), "train", 5, kGeneratorVersion};
  return ds;
}

std::string message_of(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_dataset(bytes);
  } catch (const IoError& e) {
    return e.what();
  }
  return "";
}

TEST(DatasetIo, RoundTripIsBitExact) {
  const Dataset ds = small_dataset();
  const std::string path = temp_path("roundtrip.igmd");
  save_dataset(path, ds);
  const Dataset back = load_dataset(path);
  EXPECT_EQ(back.samples, ds.samples);
  EXPECT_EQ(back.manifest.num_classes, 3);
  EXPECT_EQ(back.manifest.num_samples, 12);
  EXPECT_EQ(back.manifest.seed, 5u);
  EXPECT_EQ(back.manifest.generator_version, kGeneratorVersion);
  EXPECT_EQ(encode_dataset(back), encode_dataset(ds));
}

TEST(DatasetIo, LayoutStartsWithMagicAndVersion) {
  const auto bytes = encode_dataset(small_dataset());
  ASSERT_GE(bytes.size(), 8u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "IGMD");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5] | bytes[6] | bytes[7], 0);
}

TEST(DatasetIo, EmptyFileIsTruncatedHeader) {
  const std::string path = temp_path("empty.igmd");
  std::ofstream(path, std::ios::trunc).close();
  try {
    load_dataset(path);
    FAIL() << "expected an error";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated header"), std::string::npos) << e.what();
  }
}

TEST(DatasetIo, BadMagicAndVersion) {
  auto bytes = encode_dataset(small_dataset());
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_NE(message_of(bad).find("magic"), std::string::npos);
  bad = bytes;
  bad[4] = 2;
  EXPECT_NE(message_of(bad).find("version 2"), std::string::npos);
}

TEST(DatasetIo, TruncatedRecordNamesIndexAndOffset) {
  auto bytes = encode_dataset(small_dataset());
  bytes.resize(bytes.size() - 3);
  const std::string msg = message_of(bytes);
  EXPECT_NE(msg.find("record 11"), std::string::npos) << msg;
  EXPECT_NE(msg.find("byte offset"), std::string::npos) << msg;
}

TEST(DatasetIo, JointCountMismatchNamesRecord) {
  // A record written with 14 joints under a header that says 15.
  Dataset ds = small_dataset();
  ds.samples.resize(2);
  auto bytes = encode_dataset(ds);
  const std::size_t record_bytes = 6 + 6 * 15 * 3 * 4 + (6 * 15 + 7) / 8 + 2;
  const std::size_t second = bytes.size() - record_bytes;
  bytes[second + 2] = 14;
  const std::string msg = message_of(bytes);
  EXPECT_NE(msg.find("record 1"), std::string::npos) << msg;
  EXPECT_NE(msg.find("6x14x3"), std::string::npos) << msg;
}

TEST(DatasetIo, TrailingBytesAreRejected) {
  auto bytes = encode_dataset(small_dataset());
  bytes.push_back(0);
  EXPECT_NE(message_of(bytes).find("trailing"), std::string::npos);
}

TEST(DatasetIo, MissingFileIsIoError) { EXPECT_THROW(load_dataset(temp_path("absent.igmd")), IoError); }

TEST(DatasetIo, TrainValStreamsDiffer) {
  const auto [train, val] = make_train_val(6, 5, 2, 24, 15, 7);
  EXPECT_EQ(train.samples.size(), 30u);
  EXPECT_EQ(val.samples.size(), 12u);
  EXPECT_EQ(val.manifest.split, "val");
  EXPECT_NE(train.samples[0].data, val.samples[0].data);
}

}  // namespace
}  // namespace igm
