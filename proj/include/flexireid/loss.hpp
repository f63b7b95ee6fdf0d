// SPDX-License-Identifier: Apache-2.0
#pragma once

// Similarity distribution matching (SDM) and the training objective.
//
// For a block of query/gallery cosine similarities, p_i is the row softmax
// of similarity / temperature and q_i the same-identity indicator normalized
// per row. One direction is (1/N) sum_i sum_j p_ij log(p_ij / (q_ij + eps));
// the bidirectional loss adds the transposed block.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "flexireid/autodiff.hpp"
#include "flexireid/fusion.hpp"
#include "flexireid/nn.hpp"

namespace flexireid {

struct SDMConfig {
  double epsilon = 1e-8;
  double temperature = 0.02;

  void validate() const {
    if (!(epsilon > 0.0)) throw Error("sdm: epsilon must be positive");
    if (!(temperature > 0.0)) throw Error("sdm: temperature must be positive");
  }
};

using Labels = std::vector<std::uint32_t>;

// q[i, j] = [row_labels[i] == col_labels[j]] / (matches in row i).
inline Tensor match_distribution(const Labels& row_labels, const Labels& col_labels) {
  const std::size_t r = row_labels.size(), c = col_labels.size();
  std::vector<double> q(r * c, 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    std::size_t matches = 0;
    for (std::size_t j = 0; j < c; ++j) matches += row_labels[i] == col_labels[j];
    if (matches == 0) {
      throw Error("sdm: row " + std::to_string(i) + " (identity " +
                  std::to_string(row_labels[i]) + ") has no true match");
    }
    for (std::size_t j = 0; j < c; ++j) {
      if (row_labels[i] == col_labels[j]) q[i * c + j] = 1.0 / static_cast<double>(matches);
    }
  }
  return Tensor({r, c}, std::move(q));
}

// (1/N) sum_ij p_ij (log p_ij - log(q_ij + eps)) given p and log p.
inline Tensor kl_to_targets(const Tensor& p, const Tensor& log_p, const Tensor& q, double epsilon) {
  if (p.shape() != q.shape()) throw ShapeError("sdm: p and q shapes differ");
  std::vector<double> log_q(q.numel());
  for (std::size_t i = 0; i < log_q.size(); ++i) log_q[i] = std::log(q[i] + epsilon);
  const Tensor diff = ad::sub(log_p, Tensor(q.shape(), std::move(log_q)));
  const Tensor loss = ad::scale(ad::sum(ad::mul(p, diff)), 1.0 / static_cast<double>(p.rows()));
  if (!std::isfinite(loss.item())) throw NonFiniteError("sdm: loss is not finite");
  return loss;
}

// KL against targets for explicit distributions; log p is clamped at 1e-12.
inline Tensor sdm_from_distributions(const Tensor& p, const Tensor& q, double epsilon) {
  return kl_to_targets(p, ad::log_clamped(p), q, epsilon);
}

// One direction on a block of cosine similarities [N, M].
inline Tensor sdm_directional(const Tensor& similarity, const Labels& row_labels,
                              const Labels& col_labels, const SDMConfig& cfg) {
  cfg.validate();
  if (similarity.rank() != 2 || similarity.rows() != row_labels.size() ||
      similarity.cols() != col_labels.size()) {
    throw ShapeError("sdm: similarity block " + ad::shape_str(similarity.shape()) +
                     " does not match label counts");
  }
  for (double s : similarity.data()) {
    if (!std::isfinite(s)) throw NonFiniteError("sdm: non-finite similarity");
    if (s < -1.0 - 1e-9 || s > 1.0 + 1e-9) throw Error("sdm: similarity outside [-1, 1]");
  }
  const Tensor q = match_distribution(row_labels, col_labels);
  const Tensor logits = ad::scale(similarity, 1.0 / cfg.temperature);
  return kl_to_targets(ad::softmax_rows(logits), ad::log_softmax_rows(logits), q, cfg.epsilon);
}

// Cosine similarity matrix between the rows of a [N, d] and b [M, d].
inline Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  return ad::matmul_nt(ad::l2_normalize_rows(a), ad::l2_normalize_rows(b));
}

inline Tensor sdm_bidirectional(const Tensor& queries, const Tensor& galleries, const Labels& labels,
                                const SDMConfig& cfg) {
  if (queries.rows() != galleries.rows() || queries.rows() != labels.size()) {
    throw ShapeError("sdm: query, gallery and label counts differ");
  }
  const Tensor sim = cosine_similarity(queries, galleries);
  return ad::add(sdm_directional(sim, labels, labels, cfg),
                 sdm_directional(ad::transpose(sim), labels, labels, cfg));
}

// Sum of the bidirectional loss over the seven query families, each matched
// against the rgb gallery features.
inline Tensor sdm_sum(const std::vector<FusedFeatureSet>& batch, const Labels& labels,
                      const SDMConfig& cfg, std::array<double, 7>* per_family = nullptr) {
  if (batch.size() != labels.size() || batch.empty()) {
    throw ShapeError("sdm_sum: batch and label counts differ");
  }
  std::vector<Tensor> gallery_rows;
  for (const auto& s : batch) gallery_rows.push_back(s.gallery);
  const Tensor galleries = stack_rows(gallery_rows);
  Tensor total;
  for (std::size_t m = 0; m < 7; ++m) {
    std::vector<Tensor> query_rows;
    for (const auto& s : batch) {
      if (!s.queries[m].defined()) throw Error("sdm_sum: fused feature missing");
      query_rows.push_back(s.queries[m]);
    }
    const Tensor family = sdm_bidirectional(stack_rows(query_rows), galleries, labels, cfg);
    if (per_family != nullptr) (*per_family)[m] = family.item();
    total = total.defined() ? ad::add(total, family) : family;
  }
  return total;
}

// L = L_sdm_sum + lambda * L_ada
inline Tensor total_loss(const Tensor& sdm_sum_value, const Tensor& adaptive, double lambda) {
  if (!(lambda >= 0.0)) throw Error("total_loss: lambda must be non-negative");
  return ad::add(sdm_sum_value, ad::scale(adaptive, lambda));
}

}  // namespace flexireid
