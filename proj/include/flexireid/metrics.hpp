// SPDX-License-Identifier: Apache-2.0
#pragma once

// Retrieval metrics over ranked galleries: Rank-k (CMC), mAP and mINP.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "flexireid/autodiff.hpp"

namespace flexireid {

struct RankedGallery {
  std::vector<std::size_t> ordering;  // gallery indices, best first
  std::vector<bool> relevance;        // per gallery index

  std::size_t size() const { return ordering.size(); }

  void validate() const {
    if (ordering.size() != relevance.size()) throw Error("ranked gallery: size mismatch");
    std::vector<bool> seen(ordering.size(), false);
    for (auto idx : ordering) {
      if (idx >= ordering.size() || seen[idx]) throw Error("ranked gallery: ordering is not a permutation");
      seen[idx] = true;
    }
    if (std::none_of(relevance.begin(), relevance.end(), [](bool b) { return b; })) {
      throw Error("ranked gallery: query has no relevant item");
    }
  }
};

// Orders gallery items by descending score; equal scores keep ascending index.
inline RankedGallery rank_by_score(std::span<const double> scores, std::vector<bool> relevance) {
  RankedGallery g;
  g.ordering.resize(scores.size());
  std::iota(g.ordering.begin(), g.ordering.end(), std::size_t{0});
  std::stable_sort(g.ordering.begin(), g.ordering.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  g.relevance = std::move(relevance);
  return g;
}

inline double rank_k(std::span<const RankedGallery> galleries, std::size_t k) {
  if (k < 1) throw Error("rank_k: k must be >= 1");
  if (galleries.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& g : galleries) {
    if (k > g.size()) {
      throw Error("rank_k: k = " + std::to_string(k) + " exceeds gallery size " +
                  std::to_string(g.size()));
    }
    for (std::size_t r = 0; r < k; ++r) {
      if (g.relevance[g.ordering[r]]) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(galleries.size());
}

// Mean over relevant positions of precision at that position.
inline double average_precision(const RankedGallery& g) {
  std::size_t found = 0;
  double total = 0.0;
  for (std::size_t r = 0; r < g.size(); ++r) {
    if (g.relevance[g.ordering[r]]) {
      ++found;
      total += static_cast<double>(found) / static_cast<double>(r + 1);
    }
  }
  return found == 0 ? 0.0 : total / static_cast<double>(found);
}

// Relevant count divided by the rank of the last relevant item.
inline double inverse_negative_penalty(const RankedGallery& g) {
  std::size_t found = 0;
  std::size_t hardest = 0;
  for (std::size_t r = 0; r < g.size(); ++r) {
    if (g.relevance[g.ordering[r]]) {
      ++found;
      hardest = r + 1;
    }
  }
  return hardest == 0 ? 0.0 : static_cast<double>(found) / static_cast<double>(hardest);
}

inline double mean_average_precision(std::span<const RankedGallery> galleries) {
  if (galleries.empty()) return 0.0;
  double total = 0.0;
  for (const auto& g : galleries) total += average_precision(g);
  return total / static_cast<double>(galleries.size());
}

inline double mean_inverse_negative_penalty(std::span<const RankedGallery> galleries) {
  if (galleries.empty()) return 0.0;
  double total = 0.0;
  for (const auto& g : galleries) total += inverse_negative_penalty(g);
  return total / static_cast<double>(galleries.size());
}

struct ModeResult {
  std::string mode;
  std::size_t queries = 0;
  std::size_t gallery = 0;
  double r1 = 0.0;
  double r5 = 0.0;
  double r10 = 0.0;
  double map = 0.0;
  double minp = 0.0;
};

struct RetrievalReport {
  std::vector<ModeResult> modes;
  std::uint64_t seed = 0;
  std::string config_hash;
  double elapsed_seconds = 0.0;  // not serialized; kept out of byte comparisons

  double average_r1() const {
    if (modes.empty()) return 0.0;
    double total = 0.0;
    for (const auto& m : modes) total += m.r1;
    return total / static_cast<double>(modes.size());
  }

  const ModeResult* find(const std::string& name) const {
    for (const auto& m : modes)
      if (m.mode == name) return &m;
    return nullptr;
  }
};

// R@k is reported at min(k, gallery size) so tiny galleries still score.
inline ModeResult summarize_mode(const std::string& name, std::span<const RankedGallery> galleries) {
  ModeResult r;
  r.mode = name;
  r.queries = galleries.size();
  r.gallery = galleries.empty() ? 0 : galleries.front().size();
  auto at = [&](std::size_t k) { return rank_k(galleries, std::min(k, std::max<std::size_t>(1, r.gallery))); };
  r.r1 = at(1);
  r.r5 = at(5);
  r.r10 = at(10);
  r.map = mean_average_precision(galleries);
  r.minp = mean_inverse_negative_penalty(galleries);
  return r;
}

}  // namespace flexireid
