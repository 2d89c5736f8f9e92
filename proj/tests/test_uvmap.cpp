#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "anamorph/uvmap.hpp"
#include "anamorph/views.hpp"
#include "support.hpp"

using namespace anamorph;
using testing_support::Gen;

namespace {

/// Map that shows the canonical image shrunk by s about its top-left
/// corner: u = s (x + 0.5) / W. Exact in binary for power-of-two sizes.
UvMap scaling_map(std::size_t n, double s) {
  UvMap m(n, n);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x)
      m.set(x, y, s * (x + 0.5) / static_cast<double>(n), s * (y + 0.5) / static_cast<double>(n));
  return m;
}

void expect_interior_lod(const LodMap& lod, double expected, double tol) {
  for (std::size_t y = 1; y + 1 < lod.height; ++y)
    for (std::size_t x = 1; x + 1 < lod.width; ++x) {
      ASSERT_TRUE(lod.defined(x, y));
      ASSERT_NEAR(lod.at(x, y), expected, tol) << x << "," << y;
    }
}

}  // namespace

TEST(UvMap, IdentityHitsPixelCenters) {
  const UvMap m = UvMap::identity(4, 2);
  EXPECT_EQ(m.u(0, 0), 0.125);
  EXPECT_EQ(m.v(3, 1), 0.75);
  EXPECT_EQ(m.valid_count(), 8u);
}

TEST(UvMap, RejectsOutOfRangeCoordinates) {
  UvMap m(2, 2);
  EXPECT_THROW(m.set(0, 0, 1.5, 0.5), RangeError);
  EXPECT_THROW(m.set(0, 0, 0.5, -0.1), RangeError);
  EXPECT_THROW(m.set(0, 0, std::nan(""), 0.5), RangeError);
}

TEST(Lod, IdentityFlipRotationAreZero) {
  expect_interior_lod(compute_lod(UvMap::identity(32, 32), 32), 0.0, 0.0);
  expect_interior_lod(compute_lod(make_2d_map({FlipScene{}}, 32), 32), 0.0, 0.0);
  expect_interior_lod(compute_lod(make_2d_map({RotateScene{90.0, false}}, 32), 32), 0.0, 0.0);
  // Non-right angles: the Jacobian is a rotation, max(|grad u|, |grad v|) = 1.
  const LodMap lod = compute_lod(make_2d_map({RotateScene{30.0, false}}, 32), 32);
  for (double l : lod.level)
    if (!std::isnan(l)) EXPECT_NEAR(l, 0.0, 1e-6);
}

TEST(Lod, UniformScalingGivesLog2) {
  for (double s : {2.0, 4.0, 8.0}) {
    const std::size_t canonical = 64;
    const auto target = static_cast<std::size_t>(canonical / s);
    const LodMap lod = compute_lod(scaling_map(target, 1.0), canonical);
    expect_interior_lod(lod, std::log2(s), 1e-6);
  }
}

TEST(Lod, MagnificationClampsToZero) {
  expect_interior_lod(compute_lod(scaling_map(64, 0.25), 64), 0.0, 0.0);
}

TEST(Lod, AnisotropicUsesLargerAxis) {
  UvMap m(16, 16);
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 16; ++x) m.set(x, y, (x + 0.5) / 16.0, (y + 0.5) / 64.0);
  expect_interior_lod(compute_lod(m, Extent{16, 16}), 0.0, 0.0);
  // Canonical 64 wide: u moves 4 canonical pixels per target pixel.
  expect_interior_lod(compute_lod(m, Extent{64, 64}), 2.0, 1e-12);
}

TEST(Lod, IsolatedPixelIsUndefinedAndBordersFallBack) {
  UvMap m(5, 5);
  m.set(2, 2, 0.5, 0.5);
  LodMap lod = compute_lod(m, 8);
  EXPECT_FALSE(lod.defined(2, 2));
  EXPECT_FALSE(lod.defined(0, 0));  // invalid pixel

  const UvMap id = UvMap::identity(8, 8);
  lod = compute_lod(id, 8);
  EXPECT_TRUE(lod.defined(7, 7));  // backward differences at the far border
  EXPECT_EQ(lod.at(7, 7), 0.0);
}

TEST(Lod, RejectsTinyCanonical) { EXPECT_THROW(compute_lod(UvMap::identity(4, 4), 1), SizeError); }

TEST(UvMap, DownscaleKeepsTopLeftSamples) {
  Gen g(11);
  const UvMap m = g.uvmap(8, 6);
  const UvMap d = downscale_uvmap(m, 2);
  ASSERT_EQ(d.extent(), (Extent{4, 3}));
  for (std::size_t y = 0; y < 3; ++y)
    for (std::size_t x = 0; x < 4; ++x) {
      EXPECT_EQ(d.valid(x, y), m.valid(2 * x, 2 * y));
      EXPECT_EQ(d.u(x, y), m.u(2 * x, 2 * y));
      EXPECT_EQ(d.v(x, y), m.v(2 * x, 2 * y));
    }
  EXPECT_THROW(downscale_uvmap(m, 4), SizeError);
  EXPECT_EQ(downscale_uvmap(m, 1), m);
}

// ---------------------------------------------------------------------------
// UVM1

namespace {

UvMap float_exact(const UvMap& m) {
  UvMap out(m.width(), m.height());
  for (std::size_t y = 0; y < m.height(); ++y)
    for (std::size_t x = 0; x < m.width(); ++x)
      if (m.valid(x, y)) out.set(x, y, static_cast<float>(m.u(x, y)), static_cast<float>(m.v(x, y)));
  return out;
}

}  // namespace

TEST(Uvm1, LayoutIsLittleEndianRecords) {
  UvMap m(2, 1);
  m.set(1, 0, 0.5, 0.25);
  const auto bytes = encode_uvm(m);
  ASSERT_EQ(bytes.size(), 12u + 2 * 12);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "UVM1");
  EXPECT_EQ(bytes[4], 2);
  EXPECT_EQ(bytes[8], 1);
  // Pixel 0 invalid: twelve zero bytes.
  for (std::size_t i = 12; i < 24; ++i) EXPECT_EQ(bytes[i], 0);
  // 0.5f = 0x3F000000, 0.25f = 0x3E800000, 1.0f = 0x3F800000.
  const std::vector<std::uint8_t> expect{0, 0, 0, 0x3F, 0, 0, 0x80, 0x3E, 0, 0, 0x80, 0x3F};
  EXPECT_TRUE(std::equal(expect.begin(), expect.end(), bytes.begin() + 24));
}

TEST(Uvm1, RoundTripRandom) {
  Gen g(12);
  for (int i = 0; i < 30; ++i) {
    const UvMap m = float_exact(g.uvmap(g.size(1, 20), g.size(1, 20), 0.7));
    EXPECT_EQ(decode_uvm(encode_uvm(m)), m);
  }
}

TEST(Uvm1, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "anamorph_test_roundtrip.uvm";
  const UvMap m = float_exact(make_2d_map({RotateScene{45.0, {}}}, 16));
  write_uvm(m, path);
  EXPECT_EQ(read_uvm(path), m);
  std::filesystem::remove(path);
}

TEST(Uvm1, RejectsMalformedInput) {
  UvMap m(2, 2);
  m.set(0, 0, 0.5, 0.5);
  auto good = encode_uvm(m);

  auto bad_magic = good;
  bad_magic[3] = '2';
  EXPECT_THROW(decode_uvm(bad_magic), FormatError);

  auto truncated = good;
  truncated.pop_back();
  EXPECT_THROW(decode_uvm(truncated), TruncationError);
  EXPECT_THROW(decode_uvm(std::vector<std::uint8_t>(good.begin(), good.begin() + 6)), TruncationError);

  auto trailing = good;
  trailing.push_back(0);
  EXPECT_THROW(decode_uvm(trailing), FormatError);

  auto out_of_range = good;
  out_of_range[12 + 3] = 0x40;  // u = 2.0
  EXPECT_THROW(decode_uvm(out_of_range), RangeError);

  auto bad_flag = good;
  bad_flag[12 + 8 + 3] = 0x40;  // validity = 2.0
  EXPECT_THROW(decode_uvm(bad_flag), FormatError);

  auto invalid_nonzero = good;
  invalid_nonzero[24 + 3] = 0x3F;  // invalid pixel with u != 0
  EXPECT_THROW(decode_uvm(invalid_nonzero), FormatError);
}
