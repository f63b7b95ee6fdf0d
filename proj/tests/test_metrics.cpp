// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "flexireid/metrics.hpp"
#include "flexireid/rng.hpp"

namespace fr = flexireid;

namespace {

fr::RankedGallery ranked(std::size_t n, std::vector<std::size_t> relevant_positions) {
  fr::RankedGallery g;
  g.ordering.resize(n);
  std::iota(g.ordering.begin(), g.ordering.end(), std::size_t{0});
  g.relevance.assign(n, false);
  for (auto p : relevant_positions) g.relevance[p - 1] = true;
  return g;
}

// Brute-force reference working from the 1-based ranks of relevant items.
struct Oracle {
  static std::vector<std::size_t> relevant_ranks(const fr::RankedGallery& g) {
    std::vector<std::size_t> ranks;
    for (std::size_t item = 0; item < g.relevance.size(); ++item) {
      if (!g.relevance[item]) continue;
      const auto pos = std::find(g.ordering.begin(), g.ordering.end(), item) - g.ordering.begin();
      ranks.push_back(static_cast<std::size_t>(pos) + 1);
    }
    std::sort(ranks.begin(), ranks.end());
    return ranks;
  }
  static double hit(const fr::RankedGallery& g, std::size_t k) { return relevant_ranks(g).front() <= k ? 1.0 : 0.0; }
  static double ap(const fr::RankedGallery& g) {
    const auto ranks = relevant_ranks(g);
    double s = 0.0;
    for (std::size_t i = 0; i < ranks.size(); ++i) s += static_cast<double>(i + 1) / static_cast<double>(ranks[i]);
    return s / static_cast<double>(ranks.size());
  }
  static double inp(const fr::RankedGallery& g) {
    const auto ranks = relevant_ranks(g);
    return static_cast<double>(ranks.size()) / static_cast<double>(ranks.back());
  }
};

fr::RankedGallery random_gallery(fr::Rng& rng) {
  const std::size_t n = 2 + rng.below(49);
  fr::RankedGallery g;
  g.ordering.resize(n);
  std::iota(g.ordering.begin(), g.ordering.end(), std::size_t{0});
  rng.shuffle(g.ordering);
  g.relevance.assign(n, false);
  const std::size_t relevant = 1 + rng.below(std::min<std::size_t>(n, 5));
  for (std::size_t i = 0; i < relevant; ++i) g.relevance[rng.below(n)] = true;
  return g;
}

}  // namespace

TEST(RankK, HandCases) {
  const std::vector<fr::RankedGallery> first{ranked(5, {1})};
  EXPECT_EQ(fr::rank_k(first, 1), 1.0);
  const std::vector<fr::RankedGallery> third{ranked(5, {3})};
  EXPECT_EQ(fr::rank_k(third, 1), 0.0);
  EXPECT_EQ(fr::rank_k(third, 5), 1.0);
  EXPECT_THROW(fr::rank_k(third, 0), fr::Error);
  EXPECT_THROW(fr::rank_k(third, 6), fr::Error);
}

TEST(AveragePrecision, HandCases) {
  EXPECT_EQ(fr::average_precision(ranked(5, {1, 3})), (1.0 + 2.0 / 3.0) / 2.0);
  EXPECT_NEAR(fr::average_precision(ranked(5, {1, 3})), 5.0 / 6.0, 1e-15);
  EXPECT_EQ(fr::average_precision(ranked(4, {1, 2, 3, 4})), 1.0);
  EXPECT_EQ(fr::average_precision(ranked(7, {7})), 1.0 / 7.0);
}

TEST(InverseNegativePenalty, HandCases) {
  EXPECT_EQ(fr::inverse_negative_penalty(ranked(5, {1, 3})), 2.0 / 3.0);
  EXPECT_EQ(fr::inverse_negative_penalty(ranked(6, {1, 2, 3})), 1.0);
  for (std::size_t r = 1; r <= 9; ++r) {
    EXPECT_EQ(fr::inverse_negative_penalty(ranked(9, {r})), 1.0 / static_cast<double>(r));
  }
}

TEST(MetricOracle, RandomInstancesMatchExactly) {
  fr::Rng rng(2025);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<fr::RankedGallery> gs;
    const std::size_t queries = 1 + rng.below(8);
    const std::size_t n = 2 + rng.below(49);
    for (std::size_t q = 0; q < queries; ++q) {
      auto g = random_gallery(rng);
      while (g.size() != n) g = random_gallery(rng);
      gs.push_back(g);
    }
    for (std::size_t k : {std::size_t{1}, std::size_t{2}, n / 2 + 1, n}) {
      double hits = 0.0;
      for (const auto& g : gs) hits += Oracle::hit(g, k);
      ASSERT_EQ(fr::rank_k(gs, k), hits / static_cast<double>(gs.size())) << "k " << k;
    }
    for (const auto& g : gs) {
      ASSERT_EQ(fr::average_precision(g), Oracle::ap(g));
      ASSERT_EQ(fr::inverse_negative_penalty(g), Oracle::inp(g));
    }
  }
}

TEST(MetricProperty, BoundsAndMonotonicity) {
  fr::Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<fr::RankedGallery> gs;
    const std::size_t n = 10 + rng.below(20);
    for (int q = 0; q < 5; ++q) {
      auto g = random_gallery(rng);
      g.ordering.resize(n);
      std::iota(g.ordering.begin(), g.ordering.end(), std::size_t{0});
      rng.shuffle(g.ordering);
      g.relevance.assign(n, false);
      g.relevance[rng.below(n)] = true;
      gs.push_back(g);
    }
    const auto m = fr::summarize_mode("x", gs);
    EXPECT_LE(m.r1, m.r5);
    EXPECT_LE(m.r5, m.r10);
    for (double v : {m.r1, m.r5, m.r10, m.map, m.minp}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(RankByScore, TiesKeepAscendingIndex) {
  const std::vector<double> scores{0.5, 0.9, 0.5, 0.9, 0.1};
  const auto g = fr::rank_by_score(scores, {true, false, false, false, false});
  EXPECT_EQ(g.ordering, (std::vector<std::size_t>{1, 3, 0, 2, 4}));
}

TEST(RankByScore, DuplicatedGalleryKeepsRankOne) {
  fr::Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 3 + rng.below(10);
    std::vector<double> scores(n);
    std::vector<bool> rel(n, false);
    for (auto& s : scores) s = rng.uniform();
    rel[rng.below(n)] = true;
    // Each item followed by its copy.
    std::vector<double> dup_scores;
    std::vector<bool> dup_rel;
    for (std::size_t i = 0; i < n; ++i) {
      for (int c = 0; c < 2; ++c) {
        dup_scores.push_back(scores[i]);
        dup_rel.push_back(rel[i]);
      }
    }
    const std::vector<fr::RankedGallery> a{fr::rank_by_score(scores, rel)};
    const std::vector<fr::RankedGallery> b{fr::rank_by_score(dup_scores, dup_rel)};
    EXPECT_EQ(fr::rank_k(a, 1), fr::rank_k(b, 1));
  }
}

TEST(RankedGallery, Validation) {
  auto g = ranked(3, {2});
  EXPECT_NO_THROW(g.validate());
  g.ordering = {0, 0, 1};
  EXPECT_THROW(g.validate(), fr::Error);
  g = ranked(3, {});
  EXPECT_THROW(g.validate(), fr::Error);
  g = ranked(3, {1});
  g.relevance.pop_back();
  EXPECT_THROW(g.validate(), fr::Error);
}

TEST(SummarizeMode, SmallGalleryClampsK) {
  const std::vector<fr::RankedGallery> gs{ranked(3, {3}), ranked(3, {1})};
  const auto m = fr::summarize_mode("t", gs);
  EXPECT_EQ(m.r1, 0.5);
  EXPECT_EQ(m.r5, 1.0);
  EXPECT_EQ(m.r10, 1.0);
  EXPECT_EQ(m.queries, 2u);
  EXPECT_EQ(m.gallery, 3u);
}

TEST(RetrievalReport, AverageRankOne) {
  fr::RetrievalReport r;
  EXPECT_EQ(r.average_r1(), 0.0);
  for (double v : {0.1, 0.2, 0.6}) {
    fr::ModeResult m;
    m.r1 = v;
    m.mode = std::to_string(v);
    r.modes.push_back(m);
  }
  EXPECT_NEAR(r.average_r1(), 0.3, 1e-15);
  EXPECT_EQ(r.find("nothing"), nullptr);
}
