#include "oracles.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

using namespace deepsrq;

TEST(PatchCount, Examples) {
  EXPECT_EQ(patch_count(512, 512, 32, 32), 256);
  EXPECT_EQ(patch_count(500, 300, 32, 32), 135);
  EXPECT_EQ(patch_count(32, 32, 32, 32), 1);
  EXPECT_THROW(patch_count(31, 32, 32, 32), PatchError);
}

TEST(PatchCount, MatchesEnumeration) {
  Rng rng(101);
  for (int i = 0; i < 50; ++i) {
    const int m = 1 + static_cast<int>(rng.below(40)), n = 1 + static_cast<int>(rng.below(40));
    const int M = m + static_cast<int>(rng.below(200)), N = n + static_cast<int>(rng.below(200));
    EXPECT_EQ(patch_count(M, N, m, n), oracle::count_placements(M, N, m, n));
  }
}

TEST(AdaptiveStride, ReferenceValues) {
  EXPECT_EQ(adaptive_stride(2, 8, 32), 8);
  EXPECT_EQ(adaptive_stride(4, 8, 32), 16);
  EXPECT_EQ(adaptive_stride(8, 8, 32), 32);
  EXPECT_EQ(adaptive_stride(4, 8, 24), 12);
  EXPECT_EQ(adaptive_stride(0.01, 8, 32), 1);
  EXPECT_THROW(adaptive_stride(0, 8, 32), PatchError);
  EXPECT_THROW(adaptive_stride(9, 8, 32), PatchError);
}

TEST(AdaptiveStride, CountsStayBalanced) {
  // Same LR content at f*L for f in {2,4,8}. ((fL-m)/s+1)^2 gives 169, 225
  // and 256, so the largest pairwise ratio is 256/169 (about 1.515).
  const int L = 64, m = 32;
  const std::vector<double> expected = {169, 225, 256};
  std::vector<double> counts;
  for (int f : {2, 4, 8}) {
    const int side = f * L;
    const int s = adaptive_stride(f, 8, m);
    const auto n = crop_origins(side, side, {m, m, s}).size();
    EXPECT_EQ(static_cast<long>(n), oracle::count_strided(side, side, m, s));
    counts.push_back(static_cast<double>(n));
  }
  EXPECT_EQ(counts, expected);
  for (double a : counts)
    for (double b : counts) EXPECT_LE(a / b, 256.0 / 169.0);
}

TEST(CropPatches, GridOrigins) {
  const RasterImage img(64, 64, 3);
  const auto p = crop_patches(img, {32, 32, 32});
  ASSERT_EQ(p.size(), 4u);
  const std::vector<std::pair<int, int>> want = {{0, 0}, {32, 0}, {0, 32}, {32, 32}};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(p[i].x0, want[i].first);
    EXPECT_EQ(p[i].y0, want[i].second);
  }
  EXPECT_EQ(crop_patches(img, {32, 32, 16}).size(), 9u);
  EXPECT_EQ(crop_patches(RasterImage(33, 32, 3), {32, 32, 32}).size(), 1u);
  EXPECT_THROW(crop_patches(RasterImage(16, 64, 3), {32, 32, 32}), PatchError);
}

TEST(CropPatches, CountsMatchEnumerationAndPixelsMatchSource) {
  Rng rng(7);
  for (int i = 0; i < 20; ++i) {
    const int m = 4 + static_cast<int>(rng.below(10));
    const int s = 1 + static_cast<int>(rng.below(12));
    const int W = m + static_cast<int>(rng.below(30)), H = m + static_cast<int>(rng.below(30));
    const RasterImage img = testsupport::random_image(rng, W, H);
    const auto patches = crop_patches(img, {m, m, s});
    EXPECT_EQ(static_cast<long>(patches.size()), oracle::count_strided(W, H, m, s));
    for (const auto& p : patches) {
      ASSERT_LE(p.x0 + m, W);
      ASSERT_LE(p.y0 + m, H);
      for (int y = 0; y < m; ++y)
        for (int x = 0; x < m; ++x)
          for (int c = 0; c < 3; ++c) ASSERT_EQ(p.pixels.at(x, y, c), img.at(p.x0 + x, p.y0 + y, c));
    }
  }
}

TEST(NormalizePatch, Scale) {
  RasterImage img(2, 1, 3);
  img.at(0, 0, 0) = 0;
  img.at(0, 0, 1) = 255;
  img.at(0, 0, 2) = 128;
  const auto t = normalize_patch<double>(img);
  EXPECT_EQ(t.shape(), (Shape{1, 2, 3}));
  EXPECT_EQ(t[0], 0.0);
  EXPECT_EQ(t[1], 1.0);
  EXPECT_NEAR(t[2], 0.501961, 1e-6);
  EXPECT_THROW(normalize_patch<float>(RasterImage(2, 2, 1)), PatchError);
}
