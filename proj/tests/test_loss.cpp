// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "flexireid/gradcheck.hpp"
#include "flexireid/loss.hpp"

namespace fr = flexireid;
namespace ad = flexireid::ad;
using ad::Tensor;

namespace {

Tensor random_matrix(fr::Rng& rng, std::size_t r, std::size_t c) {
  return Tensor({r, c}, rng.normal_vector(r * c, 1.0));
}

Tensor permute_rows(const Tensor& x, const std::vector<std::size_t>& perm) {
  std::vector<double> out;
  for (auto i : perm)
    for (std::size_t j = 0; j < x.cols(); ++j) out.push_back(x.at(i, j));
  return Tensor({perm.size(), x.cols()}, out);
}

}  // namespace

TEST(SdmValue, IdenticalDistributionsGiveZero) {
  const Tensor p = Tensor::matrix(2, 3, {0.5, 0.5, 0.0, 0.0, 0.0, 1.0});
  const double loss = fr::sdm_from_distributions(p, p, 1e-8).item();
  EXPECT_LT(std::abs(loss), 1e-6);
}

TEST(SdmValue, VanishingEpsilonLimit) {
  const Tensor p = Tensor::matrix(2, 2, {0.5, 0.5, 0.0, 1.0});
  EXPECT_LT(std::abs(fr::sdm_from_distributions(p, p, 1e-15).item()), 1e-14);
}

TEST(SdmValue, TwoByTwoHandCase) {
  const Tensor p = Tensor::matrix(2, 2, {0.9, 0.1, 0.1, 0.9});
  const Tensor q = Tensor::matrix(2, 2, {1.0, 0.0, 0.0, 1.0});
  const double eps = 1e-8;
  const double row = 0.9 * std::log(0.9 / (1.0 + eps)) + 0.1 * std::log(0.1 / eps);
  const double loss = fr::sdm_from_distributions(p, q, eps).item();
  EXPECT_NEAR(loss, row, 1e-12);
  EXPECT_NEAR(loss, 1.5170, 1e-3);
}

TEST(SdmValue, DuplicatedRowsLeaveValueUnchanged) {
  fr::Rng rng(3);
  const Tensor p = ad::softmax_rows(random_matrix(rng, 3, 4));
  const Tensor q = fr::match_distribution({0, 1, 2}, {0, 1, 2, 1});
  const std::vector<std::size_t> twice{0, 1, 2, 0, 1, 2};
  const double a = fr::sdm_from_distributions(p, q, 1e-8).item();
  const double b = fr::sdm_from_distributions(permute_rows(p, twice), permute_rows(q, twice), 1e-8).item();
  EXPECT_NEAR(a, b, 1e-12);
}

TEST(SdmValue, DirectionalMatchesFormula) {
  fr::Rng rng(4);
  const fr::Labels labels{0, 1, 1, 2};
  std::vector<double> s(16);
  for (auto& v : s) v = 2.0 * rng.uniform() - 1.0;
  const Tensor sim({4, 4}, s);
  const fr::SDMConfig cfg;
  double expected = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    double z = 0.0;
    for (std::size_t j = 0; j < 4; ++j) z += std::exp(sim.at(i, j) / cfg.temperature);
    std::size_t matches = 0;
    for (std::size_t j = 0; j < 4; ++j) matches += labels[i] == labels[j];
    for (std::size_t j = 0; j < 4; ++j) {
      const double p = std::exp(sim.at(i, j) / cfg.temperature) / z;
      const double q = labels[i] == labels[j] ? 1.0 / static_cast<double>(matches) : 0.0;
      expected += p * std::log(p / (q + cfg.epsilon));
    }
  }
  expected /= 4.0;
  EXPECT_NEAR(fr::sdm_directional(sim, labels, labels, cfg).item(), expected, 1e-9);
}

TEST(SdmDistributions, RowsAreDistributions) {
  fr::Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor logits = ad::scale(random_matrix(rng, 5, 7), 50.0);
    const Tensor p = ad::softmax_rows(logits);
    for (std::size_t i = 0; i < 5; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < 7; ++j) {
        EXPECT_GE(p.at(i, j), 0.0);
        total += p.at(i, j);
      }
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
  const Tensor q = fr::match_distribution({0, 1, 0}, {0, 0, 1, 2});
  for (std::size_t i = 0; i < 3; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < 4; ++j) total += q.at(i, j);
    EXPECT_DOUBLE_EQ(total, 1.0);
  }
  EXPECT_DOUBLE_EQ(q.at(0, 0), 0.5);
}

TEST(SdmDistributions, RowWithoutMatchIsRejected) {
  EXPECT_THROW(fr::match_distribution({0, 5}, {0, 1}), fr::Error);
}

TEST(SdmValue, InputValidation) {
  const fr::Labels labels{0, 1};
  EXPECT_THROW(fr::sdm_directional(Tensor::matrix(2, 2, {1.5, 0, 0, 1}), labels, labels, {}), fr::Error);
  EXPECT_THROW(fr::sdm_directional(Tensor::matrix(2, 3, {1, 0, 0, 0, 1, 0}), labels, labels, {}),
               fr::ShapeError);
  fr::SDMConfig bad;
  bad.temperature = 0.0;
  EXPECT_THROW(fr::sdm_directional(Tensor::matrix(2, 2, {1, 0, 0, 1}), labels, labels, bad), fr::Error);
}

TEST(SdmBidirectional, SymmetricBlockDoublesOneDirection) {
  fr::Rng rng(6);
  const Tensor x = random_matrix(rng, 4, 6);
  const fr::Labels labels{0, 1, 2, 3};
  const fr::SDMConfig cfg;
  const Tensor sim = fr::cosine_similarity(x, x);
  const double one = fr::sdm_directional(sim, labels, labels, cfg).item();
  const double other = fr::sdm_directional(ad::transpose(sim), labels, labels, cfg).item();
  EXPECT_NEAR(one, other, 1e-12 * std::max(1.0, std::abs(one)));
  EXPECT_NEAR(fr::sdm_bidirectional(x, x, labels, cfg).item(), 2.0 * one, 1e-12 * std::max(1.0, std::abs(one)));
}

TEST(SdmBidirectional, JointPermutationInvariance) {
  fr::Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor q = random_matrix(rng, 5, 6), g = random_matrix(rng, 5, 6);
    const fr::Labels labels{0, 1, 2, 1, 0};
    std::vector<std::size_t> perm(5);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(perm);
    fr::Labels permuted(5);
    for (std::size_t i = 0; i < 5; ++i) permuted[i] = labels[perm[i]];
    const double a = fr::sdm_bidirectional(q, g, labels, {}).item();
    const double b = fr::sdm_bidirectional(permute_rows(q, perm), permute_rows(g, perm), permuted, {}).item();
    EXPECT_NEAR(a, b, 1e-10 * std::max(1.0, std::abs(a)));
  }
}

TEST(SdmBidirectional, GradCheck) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    for (const auto& c : fr::module_cases(seed)) {
      if (c.name != "sdm_bidirectional") continue;
      const auto r = c.run();
      EXPECT_TRUE(r.pass) << "seed " << seed << " worst " << r.worst();
    }
  }
}

TEST(SdmSum, SevenIdenticalFamilies) {
  fr::Rng rng(8);
  const fr::Labels labels{0, 1, 2};
  std::vector<fr::FusedFeatureSet> batch(3);
  for (auto& s : batch) {
    const Tensor f = Tensor::vector(rng.normal_vector(6, 1.0));
    s.queries.fill(f);
    s.gallery = Tensor::vector(rng.normal_vector(6, 1.0));
  }
  std::vector<Tensor> q, g;
  for (const auto& s : batch) {
    q.push_back(s.queries[0]);
    g.push_back(s.gallery);
  }
  const double single = fr::sdm_bidirectional(fr::stack_rows(q), fr::stack_rows(g), labels, {}).item();
  std::array<double, 7> per_family{};
  const double total = fr::sdm_sum(batch, labels, {}, &per_family).item();
  EXPECT_NEAR(total, 7.0 * single, 1e-10 * std::abs(total));
  for (double f : per_family) EXPECT_EQ(f, single);
}

TEST(SdmSum, AdditiveOverFamilies) {
  fr::Rng rng(9);
  const fr::Labels labels{0, 1, 2, 3};
  std::vector<fr::FusedFeatureSet> batch(4);
  for (auto& s : batch) {
    for (auto& q : s.queries) q = Tensor::vector(rng.normal_vector(6, 1.0));
    s.gallery = Tensor::vector(rng.normal_vector(6, 1.0));
  }
  std::array<double, 7> per_family{};
  const double total = fr::sdm_sum(batch, labels, {}, &per_family).item();
  double acc = 0.0;
  for (double f : per_family) {
    EXPECT_TRUE(std::isfinite(f));
    acc += f;
  }
  EXPECT_NEAR(total, acc, 1e-12 * std::abs(total));
  // Dropping a family: replace it by a copy of family 0 and compare.
  for (auto& s : batch) s.queries[6] = s.queries[0];
  std::array<double, 7> replaced{};
  const double total2 = fr::sdm_sum(batch, labels, {}, &replaced).item();
  EXPECT_NEAR(total - per_family[6], total2 - replaced[0], 1e-10 * std::abs(total));
}

TEST(SdmSum, RejectsMismatchedLabels) {
  std::vector<fr::FusedFeatureSet> batch(2);
  EXPECT_THROW(fr::sdm_sum(batch, {0}, {}), fr::ShapeError);
}

TEST(TotalLoss, Arithmetic) {
  EXPECT_EQ(fr::total_loss(Tensor::scalar(3.0), Tensor::scalar(2.0), 0.5).item(), 4.0);
  EXPECT_EQ(fr::total_loss(Tensor::scalar(3.0), Tensor::scalar(2.0), 0.0).item(), 3.0);
  EXPECT_THROW(fr::total_loss(Tensor::scalar(3.0), Tensor::scalar(2.0), -1.0), fr::Error);
}

TEST(TotalLoss, Defaults) {
  const fr::SDMConfig cfg;
  EXPECT_EQ(cfg.temperature, 0.02);
  EXPECT_EQ(cfg.epsilon, 1e-8);
}
