#include <gtest/gtest.h>

#include <random>

#include "support.hpp"

using namespace tpa;

TEST(GridScheme, ParseAndPrint) {
  EXPECT_EQ(GridScheme::parse("U(3)"), GridScheme::uniform(3));
  EXPECT_EQ(GridScheme::parse("SA(1,2,3)"), GridScheme::scale_adaptive(1, 2, 3));
  EXPECT_EQ(GridScheme::parse("SA(2, 3, 4)"), GridScheme::scale_adaptive(2, 3, 4));
  EXPECT_EQ(GridScheme::scale_adaptive(1, 2, 3).to_string(), "SA(1,2,3)");
  EXPECT_EQ(GridScheme::uniform(5).to_string(), "U(5)");
  for (const char* bad : {"U(0)", "U(-1)", "SA(1,2)", "sa(1,2,3)", "U(3) ", "", "U(99999999999)"})
    EXPECT_THROW(GridScheme::parse(bad), ConfigError) << bad;
}

TEST(GridSizeFor, Examples) {
  const auto sa = GridScheme::scale_adaptive(1, 2, 3);
  EXPECT_EQ(grid_size_for(Box::center(50, 50, 30, 30), sa), 1);
  EXPECT_EQ(grid_size_for(Box::center(50, 50, 60, 60), sa), 2);
  EXPECT_EQ(grid_size_for(Box::center(50, 50, 100, 100), sa), 3);
  EXPECT_EQ(grid_size_for(Box::center(50, 50, 32, 32), sa), 1);
  EXPECT_EQ(grid_size_for(Box::center(50, 50, 64, 64), sa), 2);
  EXPECT_EQ(grid_size_for(Box::center(50, 50, 100, 100), GridScheme::uniform(3)), 3);
  EXPECT_EQ(grid_size_for(Box::center(50, 50, 4, 4), GridScheme::uniform(3)), 3);
}

TEST(GridSizeFor, MonotoneInArea) {
  const auto sa = GridScheme::scale_adaptive(1, 3, 4);
  int prev = 0;
  for (double side = 1; side <= 120; side += 0.5) {
    const int n = grid_size_for(Box::center(60, 60, side, side), sa);
    EXPECT_GE(n, prev);
    prev = n;
  }
}

TEST(SegmentInstance, QuadrantsOfEvenBox) {
  const auto p = segment_instance(Box::center(50, 50, 40, 40), 2, 7);
  ASSERT_EQ(p.size(), 4u);
  const PixelRect want[4] = {{30, 30, 20, 20}, {50, 30, 20, 20}, {30, 50, 20, 20}, {50, 50, 20, 20}};
  for (int j = 0; j < 4; ++j) {
    EXPECT_EQ(p[j].rect, want[j]);
    EXPECT_EQ(p[j].index, j);
    EXPECT_EQ(p[j].instance_id, 7);
  }
}

TEST(SegmentInstance, SingleCellIsPixelExtent) {
  const Box b = Box::center(33.3, 47.9, 21.4, 17.2);
  const auto p = segment_instance(b, 1);
  ASSERT_EQ(p.size(), 1u);
  EXPECT_EQ(p[0].rect, pixel_extent(b));
}

TEST(SegmentInstance, OddExtentSplitsUnevenly) {
  const auto p = segment_instance(Box::corners(10, 10, 51, 51), 2);
  ASSERT_EQ(p.size(), 4u);
  EXPECT_EQ(p[0].rect.width, 20);
  EXPECT_EQ(p[1].rect.width, 21);
  EXPECT_EQ(p[0].rect.height, 20);
  EXPECT_EQ(p[2].rect.height, 21);
  long total = 0;
  for (const auto& s : p) total += s.rect.area();
  EXPECT_EQ(total, 41 * 41);
}

TEST(SegmentInstance, TooSmallIsDegenerate) {
  EXPECT_THROW(segment_instance(Box::corners(0, 0, 2, 10), 3), DegenerateGridError);
  EXPECT_THROW(segment_instance(Box::corners(0, 0, 10, 10), 0), DegenerateGridError);
  EXPECT_NO_THROW(segment_instance(Box::corners(0, 0, 3, 3), 3));
}

// Pixel-count oracle: every pixel of the extent is covered exactly once.
TEST(SegmentInstance, TilesExtentExactly) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> pos(0, 200), size(8, 120);
  for (int trial = 0; trial < 1000; ++trial) {
    const Box b = Box::center(pos(rng), pos(rng), size(rng), size(rng));
    const PixelRect ext = pixel_extent(b);
    for (int n = 1; n <= 8; ++n) {
      const auto patches = segment_instance(b, n);
      ASSERT_EQ(patches.size(), static_cast<std::size_t>(n * n));
      std::vector<int> cover(static_cast<std::size_t>(ext.area()), 0);
      long sum = 0;
      for (const auto& p : patches) {
        sum += p.rect.area();
        for (int y = p.rect.top; y < p.rect.bottom(); ++y)
          for (int x = p.rect.left; x < p.rect.right(); ++x) {
            ASSERT_TRUE(ext.contains(x, y));
            ++cover[static_cast<std::size_t>(y - ext.top) * ext.width + (x - ext.left)];
          }
      }
      ASSERT_EQ(sum, ext.area());
      for (int c : cover) ASSERT_EQ(c, 1);
    }
  }
}

TEST(SegmentInstance, ClipsToImage) {
  const auto p = segment_instance(Box::corners(-10, 100, 30, 140), 2, 0, 128, 128);
  long total = 0;
  for (const auto& s : p) {
    EXPECT_GE(s.rect.left, 0);
    EXPECT_LE(s.rect.bottom(), 128);
    total += s.rect.area();
  }
  EXPECT_EQ(total, 30 * 28);
}

TEST(Budget, Examples) {
  EXPECT_EQ(budget(3), 4);
  EXPECT_EQ(budget(2), 2);
  EXPECT_EQ(budget(1), 0);
  EXPECT_EQ(budget(1, true), 1);
  EXPECT_EQ(budget(4, true), 8);
  EXPECT_THROW(budget(0), ConfigError);
}
