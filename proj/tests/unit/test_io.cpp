#include <gtest/gtest.h>

#include <cstring>
#include <fstream>

#include "ctm/io.hpp"
#include "ctm/rng.hpp"
#include "test_util.hpp"

namespace ctm::io {
namespace {

namespace fs = std::filesystem;

GridGeometry geom(Dims d) { return {d, {0.5, 1.25, 3.0}, {-10.0, 2.5, 7.0}}; }

VoxelGrid random_grid(Dims d, Rng& rng) {
  std::vector<float> v(d.count());
  for (auto& x : v) x = static_cast<float>(rng.normal(0, 100));
  return VoxelGrid(geom(d), std::move(v));
}

LabelMask random_mask(Dims d, Rng& rng) {
  std::vector<std::uint8_t> v(d.count());
  for (auto& x : v) x = static_cast<std::uint8_t>(rng.below(6));
  return LabelMask(geom(d), std::move(v));
}

TEST(VolumeIo, FloatLayoutIsLittleEndianXFastest) {
  testing::TempDir dir;
  const Dims d(2, 2, 2);
  std::vector<float> v(8);
  for (int i = 0; i < 8; ++i) v[i] = 1.5f * i;
  write_volume(VoxelGrid(geom(d), v), dir.path() / "g");
  const auto bytes = read_binary_file(dir.path() / "g.raw");
  ASSERT_EQ(bytes.size(), 32u);
  // (1,0,0) is the second value: bytes 4..8 hold 1.5f little-endian.
  std::uint32_t bits;
  std::memcpy(&bits, &v[1], 4);
  for (int k = 0; k < 4; ++k) EXPECT_EQ(bytes[4 + k], (bits >> (8 * k)) & 0xff);
  const auto h = read_header(dir.path() / "g");
  EXPECT_EQ(h.dtype, "f32le");
  EXPECT_EQ(h.order, "x-fastest");
}

TEST(VolumeIo, SingleByteMask) {
  testing::TempDir dir;
  write_volume(LabelMask(geom(Dims(1, 1, 1)), std::vector<std::uint8_t>{5}), dir.path() / "m");
  EXPECT_EQ(read_binary_file(dir.path() / "m.raw"), std::vector<std::uint8_t>{0x05});
}

TEST(VolumeIo, RandomRoundTripsAreByteExact) {
  testing::TempDir dir;
  Rng rng(1);
  for (int t = 0; t < 100; ++t) {
    const Dims d(rng.uniform_int(1, 16), rng.uniform_int(1, 16), rng.uniform_int(1, 16));
    const fs::path a = dir.path() / "a", b = dir.path() / "b";
    if (t % 2) {
      const auto g = random_grid(d, rng);
      write_volume(g, a);
      const auto back = read_grid(a);
      EXPECT_EQ(back, g);
      write_volume(back, b);
    } else {
      const auto m = random_mask(d, rng);
      write_volume(m, a);
      const auto back = read_label_mask(a);
      EXPECT_EQ(back, m);
      write_volume(back, b);
    }
    EXPECT_EQ(read_binary_file(a.string() + ".raw"), read_binary_file(b.string() + ".raw"));
    EXPECT_EQ(read_text_file(a.string() + ".json"), read_text_file(b.string() + ".json"));
  }
}

TEST(VolumeIo, ReadVolumeDispatchesOnKind) {
  testing::TempDir dir;
  Rng rng(2);
  write_volume(random_grid(Dims(3, 3, 3), rng), dir.path() / "g");
  write_volume(random_mask(Dims(3, 3, 3), rng), dir.path() / "m");
  EXPECT_TRUE(std::holds_alternative<VoxelGrid>(read_volume(dir.path() / "g")));
  EXPECT_TRUE(std::holds_alternative<LabelMask>(read_volume(dir.path() / "m")));
  EXPECT_THROW(read_label_mask(dir.path() / "g"), FormatError);
  EXPECT_THROW(read_grid(dir.path() / "m"), FormatError);
}

TEST(VolumeIo, PayloadLengthMismatchIsFormatError) {
  testing::TempDir dir;
  Rng rng(3);
  write_volume(random_grid(Dims(2, 2, 2), rng), dir.path() / "g");
  auto bytes = read_binary_file(dir.path() / "g.raw");
  // 31 bytes where 32 are required.
  bytes.pop_back();
  write_binary_file(dir.path() / "g.raw", bytes);
  EXPECT_THROW(read_grid(dir.path() / "g"), FormatError);
  bytes.push_back(0);
  bytes.push_back(0);
  write_binary_file(dir.path() / "g.raw", bytes);
  EXPECT_THROW(read_grid(dir.path() / "g"), FormatError);
}

TEST(VolumeIo, FuzzedTruncationsAreRejected) {
  testing::TempDir dir;
  Rng rng(4);
  for (int t = 0; t < 50; ++t) {
    const Dims d(rng.uniform_int(1, 8), rng.uniform_int(1, 8), rng.uniform_int(1, 8));
    write_volume(random_grid(d, rng), dir.path() / "g");
    auto bytes = read_binary_file(dir.path() / "g.raw");
    bytes.resize(rng.below(bytes.size()));
    write_binary_file(dir.path() / "g.raw", bytes);
    EXPECT_THROW(read_grid(dir.path() / "g"), FormatError);
  }
}

TEST(VolumeIo, CorruptHeadersAreRejected) {
  testing::TempDir dir;
  Rng rng(5);
  write_volume(random_mask(Dims(2, 2, 2), rng), dir.path() / "m");
  const auto good = read_json_file(dir.path() / "m.json");
  auto with = [&](const char* key, nlohmann::json v) {
    auto j = good;
    j[key] = v;
    write_json_file(dir.path() / "m.json", j);
  };
  with("dtype", "f16");
  EXPECT_THROW(read_volume(dir.path() / "m"), FormatError);
  with("order", "z-fastest");
  EXPECT_THROW(read_volume(dir.path() / "m"), FormatError);
  with("dims", {2, 0, 2});
  EXPECT_THROW(read_volume(dir.path() / "m"), FormatError);
  with("spacing_mm", {1, -1, 1});
  EXPECT_THROW(read_volume(dir.path() / "m"), FormatError);
  with("dims", {2, 2, 3});
  EXPECT_THROW(read_volume(dir.path() / "m"), FormatError);
  write_text_file(dir.path() / "m.json", "{ not json");
  EXPECT_THROW(read_volume(dir.path() / "m"), FormatError);
  EXPECT_THROW(read_volume(dir.path() / "absent"), IoError);
}

TEST(VolumeIo, OutOfRangeLabelIsValidationError) {
  testing::TempDir dir;
  Rng rng(6);
  write_volume(random_mask(Dims(2, 2, 2), rng), dir.path() / "m");
  auto bytes = read_binary_file(dir.path() / "m.raw");
  bytes[3] = 6;
  write_binary_file(dir.path() / "m.raw", bytes);
  EXPECT_THROW(read_label_mask(dir.path() / "m"), ValidationError);
}

TEST(VolumeIo, UnwritablePathIsIoError) {
  Rng rng(7);
  EXPECT_THROW(write_volume(random_grid(Dims(1, 1, 1), rng), "/proc/forbidden/x"), IoError);
}

}  // namespace
}  // namespace ctm::io
