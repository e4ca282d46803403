// Copyright 2026 The natpatch Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "natpatch/placement.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <gtest/gtest.h>

namespace natpatch::placement {
namespace {

surrogate::AttentionMap make_map(int64_t g, std::vector<double> raw) {
  return {g, std::move(raw), "test"};
}

Raster make_raster(int64_t h, int64_t w, std::vector<double> v) { return {h, w, std::move(v)}; }

std::vector<double> random_values(size_t n, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

TEST(UpsampleTest, CornerAlignedMiddleColumn) {
  const auto r = upsample_map(make_map(2, {0, 1, 0, 1}), 3, 3);
  for (int64_t row = 0; row < 3; ++row) {
    EXPECT_DOUBLE_EQ(r.at(row, 0), 0.0);
    EXPECT_DOUBLE_EQ(r.at(row, 1), 0.5);
    EXPECT_DOUBLE_EQ(r.at(row, 2), 1.0);
  }
}

TEST(UpsampleTest, ConstantMapStaysConstant) {
  const auto r = upsample_map(make_map(3, std::vector<double>(9, 0.37)), 17, 11);
  for (double v : r.values) EXPECT_NEAR(v, 0.37, 1e-15);
}

TEST(UpsampleTest, SameSizeIsIdentity) {
  const auto raw = random_values(16, 1);
  const auto r = upsample_map(make_map(4, raw), 4, 4);
  for (size_t i = 0; i < raw.size(); ++i) EXPECT_NEAR(r.values[i], raw[i], 1e-15);
}

TEST(UpsampleTest, StaysWithinMapRange) {
  const auto raw = random_values(25, 2);
  const auto r = upsample_map(make_map(5, raw), 32, 29);
  const auto [lo, hi] = std::minmax_element(raw.begin(), raw.end());
  for (double v : r.values) {
    EXPECT_GE(v, *lo - 1e-15);
    EXPECT_LE(v, *hi + 1e-15);
  }
}

TEST(UpsampleTest, CommutesWithAddingAConstant) {
  auto raw = random_values(16, 3);
  const auto base = upsample_map(make_map(4, raw), 32, 32);
  for (auto& v : raw) v += 2.5;
  const auto shifted = upsample_map(make_map(4, raw), 32, 32);
  for (size_t i = 0; i < base.values.size(); ++i) {
    EXPECT_NEAR(shifted.values[i], base.values[i] + 2.5, 1e-6);
  }
}

TEST(UpsampleTest, RejectsBadTargets) {
  EXPECT_THROW(upsample_map(make_map(2, {0, 0, 0, 0}), 0, 3), std::invalid_argument);
  EXPECT_THROW(upsample_map(make_map(4, std::vector<double>(16, 0.0)), 3, 3), std::invalid_argument);
}

TEST(SelectCenterTest, InteriorMaximumIsTheCenter) {
  std::vector<double> v(32 * 32, 0.0);
  v[16 * 32 + 16] = 1.0;
  const auto p = select_center(make_raster(32, 32, v), 5);
  EXPECT_EQ(p.center_row, 16);
  EXPECT_EQ(p.center_col, 16);
  EXPECT_TRUE(p.valid());
}

TEST(SelectCenterTest, CornerMaximumIsClamped) {
  std::vector<double> v(32 * 32, 0.0);
  v[0] = 1.0;
  const auto p = select_center(make_raster(32, 32, v), 11);
  EXPECT_EQ(p.center_row, 5);
  EXPECT_EQ(p.center_col, 5);
  EXPECT_EQ(p.top(), 0);
  EXPECT_EQ(p.left(), 0);
}

TEST(SelectCenterTest, EnumeratedSmallCases) {
  // 4x4 raster, side 2: valid centers have rows/cols in [1, 3].
  struct Case {
    int64_t max_index;
    int64_t row, col;
  };
  for (const Case& c : {Case{0, 1, 1}, Case{5, 1, 1}, Case{15, 3, 3}, Case{3, 1, 3}, Case{10, 2, 2}}) {
    std::vector<double> v(16, 0.0);
    v[c.max_index] = 1.0;
    const auto p = select_center(make_raster(4, 4, v), 2);
    EXPECT_EQ(p.center_row, c.row) << c.max_index;
    EXPECT_EQ(p.center_col, c.col) << c.max_index;
    EXPECT_TRUE(p.valid());
  }
  // All-equal raster: the first cell wins, then the clamp applies.
  const auto tie = select_center(make_raster(4, 4, std::vector<double>(16, 0.2)), 3);
  EXPECT_EQ(tie.center_row, 1);
  EXPECT_EQ(tie.center_col, 1);
  // Two equal maxima: the earlier one in row-major order wins.
  std::vector<double> two(16, 0.0);
  two[9] = two[6] = 1.0;
  const auto p = select_center(make_raster(4, 4, two), 1);
  EXPECT_EQ(p.center_row, 1);
  EXPECT_EQ(p.center_col, 2);
}

TEST(SelectCenterTest, InvariantUnderIncreasingTransforms) {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    const auto v = random_values(24 * 24, seed);
    auto w = v;
    for (auto& x : w) x = std::exp(3.0 * x) - 7.0;
    EXPECT_EQ(select_center(make_raster(24, 24, v), 5), select_center(make_raster(24, 24, w), 5));
  }
}

TEST(SelectCenterTest, RejectsPatchLargerThanImage) {
  EXPECT_THROW(select_center(make_raster(4, 4, std::vector<double>(16, 0.0)), 5),
               std::invalid_argument);
}

TEST(RandomPlacementTest, AlwaysFits) {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 1000; ++i) {
    const auto p = random_placement(32, 24, 1 + i % 24, rng);
    ASSERT_TRUE(p.valid());
    EXPECT_GE(p.top(), 0);
    EXPECT_LE(p.top() + p.patch_side, 32);
    EXPECT_LE(p.left() + p.patch_side, 24);
  }
}

TEST(PatchSideTest, RoundsRatioOfShorterSide) {
  EXPECT_EQ(patch_side_for(0.15, 32, 32), 5);  // 4.8
  EXPECT_EQ(patch_side_for(0.1, 32, 40), 3);   // 3.2
  EXPECT_EQ(patch_side_for(0.01, 32, 32), 1);
  EXPECT_EQ(patch_side_for(1.0, 32, 32), 32);
  EXPECT_THROW(patch_side_for(0.0, 32, 32), std::invalid_argument);
  EXPECT_THROW(patch_side_for(1.5, 32, 32), std::invalid_argument);
}

TEST(MaskTest, SmallSquareGeometry) {
  const Placement p{1, 1, 2, 4, 4};
  const auto m = make_mask(p);
  for (int64_t r = 0; r < 4; ++r)
    for (int64_t c = 0; c < 4; ++c) EXPECT_EQ(m.cells[r * 4 + c], (r < 2 && c < 2) ? 1 : 0);
}

TEST(MaskTest, FullCoverAndCount) {
  EXPECT_EQ(make_mask({2, 2, 4, 4, 4}).count(), 16);
  for (int64_t s = 1; s <= 9; ++s) {
    const Placement p{s / 2 + 3, s / 2 + 1, s, 20, 15};
    EXPECT_EQ(make_mask(p).count(), s * s);
  }
  EXPECT_THROW(make_mask({0, 0, 3, 4, 4}), std::invalid_argument);
}

Image random_image(int64_t h, int64_t w, uint64_t seed) {
  Image img(h, w, 3);
  img.pixels = random_values(img.pixels.size(), seed);
  return img;
}

TEST(ComposeTest, OutsideUnchangedInsideEqualsPatch) {
  const auto image = random_image(12, 10, 1);
  const auto patch = random_image(3, 3, 2);
  const Placement p{6, 4, 3, 12, 10};
  const auto out = compose(image, patch, make_mask(p), p);
  for (int64_t r = 0; r < 12; ++r)
    for (int64_t c = 0; c < 10; ++c)
      for (int ch = 0; ch < 3; ++ch) {
        const bool inside = r >= 5 && r < 8 && c >= 3 && c < 6;
        EXPECT_EQ(out.at(r, c, ch), inside ? patch.at(r - 5, c - 3, ch) : image.at(r, c, ch));
      }
}

TEST(ComposeTest, FullCoverYieldsPatch) {
  const auto image = random_image(4, 4, 3);
  const auto patch = random_image(4, 4, 4);
  const Placement p{2, 2, 4, 4, 4};
  EXPECT_EQ(compose(image, patch, make_mask(p), p), patch);
}

TEST(ComposeTest, ZeroMaskYieldsImage) {
  const auto image = random_image(6, 6, 5);
  const Placement p{3, 3, 2, 6, 6};
  const Mask empty{6, 6, std::vector<uint8_t>(36, 0)};
  EXPECT_EQ(compose(image, random_image(2, 2, 6), empty, p), image);
  auto shifted = make_mask(p);
  std::rotate(shifted.cells.begin(), shifted.cells.begin() + 1, shifted.cells.end());
  EXPECT_THROW(compose(image, random_image(2, 2, 6), shifted, p), std::invalid_argument);
}

TEST(ComposeTest, GradientFlowsOnlyToCoveredPixels) {
  const auto image = random_image(6, 6, 7);
  const Placement p{3, 3, 2, 6, 6};
  auto img = ad::Tensor::parameter({6, 6, 3}, image.pixels);
  auto patch = ad::Tensor::parameter({2, 2, 3}, random_values(12, 8));
  ad::sum(compose(img, patch, make_mask(p), p)).backward();
  for (double g : patch.grad()) EXPECT_EQ(g, 1.0);
  const auto gi = img.grad();
  for (int64_t r = 0; r < 6; ++r)
    for (int64_t c = 0; c < 6; ++c) {
      const bool inside = r >= 2 && r < 4 && c >= 2 && c < 4;
      EXPECT_EQ(gi[(r * 6 + c) * 3], inside ? 0.0 : 1.0);
    }
}

}  // namespace
}  // namespace natpatch::placement
