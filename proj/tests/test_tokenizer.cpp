#include <algorithm>
#include <numeric>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "motionmae/rng.hpp"
#include "motionmae/tokenizer.hpp"
#include "motionmae/video.hpp"

using namespace mmae;

namespace {

Clip random_clip(std::size_t t, std::size_t h, std::size_t w, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  Clip clip(t, h, w, c);
  for (float& v : clip.data()) v = static_cast<float>(uniform01(rng));
  return clip;
}

bool tube_constant(const Mask& m, const TokenGrid& g) {
  for (std::size_t cell = 0; cell < g.spatial_cells(); ++cell)
    for (std::size_t t = 1; t < g.t; ++t)
      if (m.bits[t * g.spatial_cells() + cell] != m.bits[cell]) return false;
  return true;
}

bool whole_slots(const Mask& m, const TokenGrid& g) {
  for (std::size_t t = 0; t < g.t; ++t)
    for (std::size_t cell = 1; cell < g.spatial_cells(); ++cell)
      if (m.bits[t * g.spatial_cells() + cell] != m.bits[t * g.spatial_cells()]) return false;
  return true;
}

}  // namespace

TEST(Patchify, PaperScaleGridArithmetic) {
  const TokenGrid g = make_grid(16, 224, 224, 3, {2, 16});
  EXPECT_EQ(g.t, 8u);
  EXPECT_EQ(g.h, 14u);
  EXPECT_EQ(g.w, 14u);
  EXPECT_EQ(g.count(), 1568u);
  EXPECT_EQ(g.token_dim(), 1536u);
  EXPECT_EQ(g.motion_dim(), 768u);
}

TEST(Patchify, SmallGridArithmeticAndErrors) {
  const auto [tokens, g] = patchify(random_clip(4, 8, 8, 1, 1), {2, 4});
  EXPECT_EQ(g.count(), 8u);
  EXPECT_EQ(tokens.rows(), 8u);
  EXPECT_EQ(tokens.cols(), 32u);
  EXPECT_THROW(make_grid(5, 8, 8, 1, {2, 4}), ConfigError);
  EXPECT_THROW(make_grid(4, 9, 8, 1, {2, 4}), ConfigError);
}

TEST(Patchify, FlatteningOrderMatchesNaiveGather) {
  const Clip clip = random_clip(4, 8, 12, 2, 2);
  const CubeSize cube{2, 4};
  const auto [tokens, g] = patchify(clip, cube);
  for (std::size_t ti = 0; ti < g.t; ++ti)
    for (std::size_t hi = 0; hi < g.h; ++hi)
      for (std::size_t wi = 0; wi < g.w; ++wi) {
        std::size_t k = 0;
        const std::size_t n = (ti * g.h + hi) * g.w + wi;
        for (std::size_t f = 0; f < 2; ++f)
          for (std::size_t y = 0; y < 4; ++y)
            for (std::size_t x = 0; x < 4; ++x)
              for (std::size_t c = 0; c < 2; ++c)
                ASSERT_EQ(tokens(n, k++), static_cast<double>(clip.at(ti * 2 + f, hi * 4 + y, wi * 4 + x, c)));
      }
}

TEST(Unpatchify, InverseZerosAndSingleToken) {
  const Clip clip = random_clip(4, 8, 8, 3, 3);
  const auto [tokens, g] = patchify(clip, {2, 4});
  EXPECT_EQ(unpatchify(tokens, g), clip);

  EXPECT_EQ(unpatchify(Tensor({g.count(), g.token_dim()}), g), Clip(4, 8, 8, 3));

  const Clip one = random_clip(2, 4, 4, 1, 4);
  const auto [t1, g1] = patchify(one, {2, 4});
  ASSERT_EQ(g1.count(), 1u);
  std::vector<float> flat(one.data().begin(), one.data().end());
  for (std::size_t i = 0; i < flat.size(); ++i) EXPECT_EQ(t1[i], static_cast<double>(flat[i]));
  EXPECT_THROW(unpatchify(Tensor({3, g.token_dim()}), g), ConfigError);
}

TEST(PosEnc, OriginPatternDistinctAndDeterministic) {
  const TokenGrid g = make_grid(4, 8, 8, 1, {2, 4});
  const Tensor pe = sincos_posenc(g, 20);  // 3 axes x 6 + 2 padding
  for (std::size_t axis = 0; axis < 3; ++axis)
    for (std::size_t i = 0; i < 3; ++i) {
      EXPECT_EQ(pe(0, axis * 6 + 2 * i), 0.0);
      EXPECT_EQ(pe(0, axis * 6 + 2 * i + 1), 1.0);
    }
  for (std::size_t r = 0; r < g.count(); ++r) {
    EXPECT_EQ(pe(r, 18), 0.0);
    EXPECT_EQ(pe(r, 19), 0.0);
  }
  std::set<std::vector<double>> rows;
  for (std::size_t r = 0; r < g.count(); ++r) rows.insert({pe.data().begin() + r * 20, pe.data().begin() + (r + 1) * 20});
  EXPECT_EQ(rows.size(), g.count());
  EXPECT_EQ(pe, sincos_posenc(g, 20));
  EXPECT_THROW(sincos_posenc(g, 5), ConfigError);
}

TEST(PosEnc, MatchesClosedForm) {
  const TokenGrid g = make_grid(4, 8, 8, 1, {2, 4});
  const Tensor pe = sincos_posenc(g, 12);
  const std::size_t n = g.index(1, 0, 1);
  // Two pairs per axis with frequencies 1 and 1/100.
  EXPECT_DOUBLE_EQ(pe(n, 0), std::sin(1.0));
  EXPECT_DOUBLE_EQ(pe(n, 3), std::cos(0.01));
  EXPECT_DOUBLE_EQ(pe(n, 4), 0.0);
  EXPECT_DOUBLE_EQ(pe(n, 9), std::cos(1.0));
}

TEST(Mask, PaperRatioCount) {
  const TokenGrid g = make_grid(16, 224, 224, 3, {2, 16});
  const Mask m = sample_mask(g, 0.9, MaskStrategy::random, 1);
  EXPECT_EQ(m.masked_count(), 1411u);
  EXPECT_EQ(g.count() - m.masked_count(), 157u);
}

TEST(Mask, CountsPerStrategy) {
  const TokenGrid g = make_grid(8, 16, 16, 1, {2, 4});  // 4 x 4 x 4
  for (std::uint64_t seed = 0; seed < 50; ++seed)
    for (double r : {0.0, 0.3, 0.5, 0.75, 0.9}) {
      EXPECT_EQ(sample_mask(g, r, MaskStrategy::random, seed).masked_count(), floor_count(r, 64));
      EXPECT_EQ(sample_mask(g, r, MaskStrategy::tube, seed).masked_count(), floor_count(r, 16) * 4);
      EXPECT_EQ(sample_mask(g, r, MaskStrategy::time_only, seed).masked_count(), floor_count(r, 4) * 16);
    }
  // Where the unit count divides evenly, every strategy hides exactly floor(r N).
  for (auto s : {MaskStrategy::random, MaskStrategy::tube, MaskStrategy::time_only})
    EXPECT_EQ(sample_mask(g, 0.75, s, 3).masked_count(), 48u);
}

TEST(Mask, StructuralPredicates) {
  const TokenGrid g = make_grid(8, 16, 16, 1, {2, 4});
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    EXPECT_TRUE(tube_constant(sample_mask(g, 0.75, MaskStrategy::tube, seed), g));
    const Mask t = sample_mask(g, 0.6, MaskStrategy::time_only, seed);
    EXPECT_TRUE(whole_slots(t, g));
    EXPECT_LT(t.masked_count(), g.count());
  }
}

TEST(Mask, RatioZeroAndErrors) {
  const TokenGrid g = make_grid(4, 8, 8, 1, {2, 4});
  EXPECT_EQ(sample_mask(g, 0.0, MaskStrategy::random, 1).masked_count(), 0u);
  EXPECT_THROW(sample_mask(g, 1.0, MaskStrategy::random, 1), ConfigError);
  EXPECT_THROW(sample_mask(g, -0.1, MaskStrategy::tube, 1), ConfigError);
  EXPECT_THROW(parse_strategy("diagonal"), ConfigError);
}

TEST(Mask, SeedDeterminism) {
  const TokenGrid g = make_grid(8, 16, 16, 1, {2, 4});
  EXPECT_EQ(sample_mask(g, 0.75, MaskStrategy::random, 5).bits, sample_mask(g, 0.75, MaskStrategy::random, 5).bits);
  EXPECT_NE(sample_mask(g, 0.75, MaskStrategy::random, 5).bits, sample_mask(g, 0.75, MaskStrategy::random, 6).bits);
}

TEST(Mask, RandomFrequencyIsUniform) {
  const TokenGrid g = make_grid(8, 16, 16, 1, {2, 4});
  std::vector<int> hits(g.count(), 0);
  for (std::uint64_t seed = 0; seed < 10000; ++seed) {
    const Mask m = sample_mask(g, 0.75, MaskStrategy::random, derive_seed(77, {seed}));
    for (std::size_t i = 0; i < g.count(); ++i) hits[i] += m.bits[i];
  }
  for (int h : hits) EXPECT_NEAR(h / 10000.0, 0.75, 0.02);
}

TEST(SplitVisible, PartitionAndEnumeration) {
  const Mask m = mask_from_indices(8, {1, 3});
  Tensor tokens({8, 2});
  for (std::size_t i = 0; i < 8; ++i) tokens(i, 0) = static_cast<double>(i);
  const VisibleSplit s = split_visible(tokens, m);
  EXPECT_EQ(s.visible_index, (std::vector<std::size_t>{0, 2, 4, 5, 6, 7}));
  EXPECT_EQ(s.masked_index, (std::vector<std::size_t>{1, 3}));
  for (std::size_t r = 0; r < 6; ++r) EXPECT_EQ(s.visible(r, 0), static_cast<double>(s.visible_index[r]));

  const TokenGrid g = make_grid(8, 16, 16, 1, {2, 4});
  const Mask rnd = sample_mask(g, 0.6, MaskStrategy::random, 9);
  const VisibleSplit p = split_visible(Tensor({g.count(), 1}), rnd);
  std::vector<std::size_t> all = p.visible_index;
  all.insert(all.end(), p.masked_index.begin(), p.masked_index.end());
  std::sort(all.begin(), all.end());
  std::vector<std::size_t> want(g.count());
  std::iota(want.begin(), want.end(), std::size_t{0});
  EXPECT_EQ(all, want);

  const VisibleSplit none = split_visible(tokens, mask_from_indices(8, {}));
  EXPECT_EQ(none.visible_index.size(), 8u);
  EXPECT_TRUE(none.masked_index.empty());
  EXPECT_THROW(split_visible(Tensor({7, 2}), m), ConfigError);
}
