// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "flexireid/evaluation.hpp"
#include "flexireid/experiments.hpp"
#include "flexireid/trainer.hpp"

namespace fr = flexireid;
namespace ad = flexireid::ad;
using ad::Tensor;

namespace {

fr::RunConfig tiny() {
  auto c = fr::RunConfig::parse(
      "data.num_identities = 8\n"
      "data.test_identities = 3\n"
      "train.batch_identities = 4\n"
      "train.epochs = 3\n");
  return c;
}

std::vector<std::vector<double>> values(const fr::ParameterSet& ps) {
  std::vector<std::vector<double>> out;
  for (const auto& e : ps.entries()) out.emplace_back(e.value.data().begin(), e.value.data().end());
  return out;
}

fr::Batch first_batch(const fr::DatasetSplit& split, std::size_t b) {
  fr::Rng rng(5);
  return fr::epoch_batches(split, b, rng).front();
}

}  // namespace

TEST(CosineLr, Schedule) {
  EXPECT_EQ(fr::cosine_lr(1e-3, 0, 10), 1e-3);
  EXPECT_NEAR(fr::cosine_lr(1e-3, 5, 10), 5e-4, 1e-18);
  EXPECT_NEAR(fr::cosine_lr(2.0, 10, 10), 0.0, 1e-15);
  for (std::size_t e = 1; e < 30; ++e) EXPECT_LT(fr::cosine_lr(1.0, e, 30), fr::cosine_lr(1.0, e - 1, 30));
}

TEST(ClipGradNorm, ScalesToMaxNorm) {
  fr::ParameterSet ps;
  ps.add("a", Tensor({2}, {0.0, 0.0}, true));
  ps.add("b", Tensor({1}, {0.0}, true));
  ps.add("c", Tensor({1}, {0.0}, true));  // no gradient
  auto ga = ps.entries()[0].value.grad_buffer();
  ga[0] = 3.0;
  ga[1] = 4.0;
  ps.entries()[1].value.grad_buffer()[0] = 12.0;
  EXPECT_DOUBLE_EQ(fr::clip_grad_norm(ps, 5.0), 13.0);
  EXPECT_NEAR(ps.entries()[0].value.grad()[0], 3.0 * 5.0 / 13.0, 1e-15);
  EXPECT_NEAR(ps.entries()[1].value.grad()[0], 12.0 * 5.0 / 13.0, 1e-15);
  EXPECT_FALSE(ps.entries()[2].value.has_grad());
  // Below the limit nothing changes.
  EXPECT_NEAR(fr::clip_grad_norm(ps, 100.0), 5.0, 1e-14);
  EXPECT_NEAR(ps.entries()[0].value.grad()[0], 3.0 * 5.0 / 13.0, 1e-15);
}

TEST(Adam, MatchesHandComputedSteps) {
  fr::ParameterSet ps;
  ps.add("w", Tensor({2}, {1.0, -1.0}, true));
  ps.add("idle", Tensor({1}, {7.0}, true));
  fr::Adam adam(ps, 0.9, 0.999, 1e-8);
  const double lr = 0.1;
  const std::vector<std::vector<double>> grads{{0.5, -2.0}, {1.0, 1.0}};
  double m[2] = {0, 0}, v[2] = {0, 0}, w[2] = {1.0, -1.0};
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    auto g = ps.entries()[0].value.grad_buffer();
    for (int i = 0; i < 2; ++i) {
      g[i] = grads[t - 1][i];
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      const double mh = m[i] / (1.0 - std::pow(0.9, t)), vh = v[i] / (1.0 - std::pow(0.999, t));
      w[i] -= lr * mh / (std::sqrt(vh) + 1e-8);
    }
    adam.step(ps, lr);
    ps.zero_grad();
    for (int i = 0; i < 2; ++i) EXPECT_NEAR(ps.entries()[0].value[i], w[i], 1e-14);
  }
  EXPECT_EQ(ps.entries()[1].value[0], 7.0);
  EXPECT_EQ(adam.steps(), 2u);
}

TEST(EpochBatches, FullBatchesOneSamplePerModality) {
  const auto cfg = tiny();
  const auto ds = fr::generate(cfg.data);
  fr::Rng rng(1);
  const auto batches = fr::epoch_batches(ds.train, 2, rng);
  // 5 identities, 2 per batch, 2 rounds: two full batches per round.
  ASSERT_EQ(batches.size(), 4u);
  for (const auto& b : batches) {
    ASSERT_EQ(b.labels.size(), 2u);
    EXPECT_NE(b.labels[0], b.labels[1]);
    for (std::size_t i = 0; i < 2; ++i) {
      for (std::size_t m = 0; m < 4; ++m) {
        EXPECT_EQ(b.samples[i][m]->identity, b.labels[i]);
        EXPECT_EQ(static_cast<std::size_t>(b.samples[i][m]->modality), m);
      }
    }
  }
  // Each round covers distinct identities.
  std::set<std::uint32_t> round(batches[0].labels.begin(), batches[0].labels.end());
  round.insert(batches[1].labels.begin(), batches[1].labels.end());
  EXPECT_EQ(round.size(), 4u);
}

TEST(BatchLoss, ObjectiveDecomposition) {
  auto cfg = tiny();
  const auto ds = fr::generate(cfg.data);
  for (double lambda : {0.0, 0.5, 2.0}) {
    const fr::FlexiReIDModel model(cfg.model);
    ad::Tape tape;
    ad::TapeScope scope(tape);
    const auto loss = fr::batch_loss(model, first_batch(ds.train, 4), cfg.loss, lambda);
    EXPECT_NEAR(loss.total.item(), loss.sdm.item() + lambda * loss.ada.item(), 1e-12);
    double families = 0.0;
    for (double f : loss.per_family) families += f;
    EXPECT_NEAR(families, loss.sdm.item(), 1e-10 * std::abs(families));
    EXPECT_GE(loss.ada.item(), 0.0);
    EXPECT_LE(loss.ada.item(), std::log(static_cast<double>(cfg.model.moe.num_experts)) + 1e-12);
  }
}

TEST(BatchLoss, SingleExpertWithoutAdaptiveLossIsPureSdm) {
  auto cfg = tiny();
  cfg.model.moe.num_experts = 1;
  cfg.model.moe.top_k = 1;
  const auto ds = fr::generate(cfg.data);
  const fr::FlexiReIDModel model(cfg.model);
  const auto batch = first_batch(ds.train, 4);
  ad::Tape tape;
  ad::TapeScope scope(tape);
  const auto loss = fr::batch_loss(model, batch, cfg.loss, 0.0);
  std::vector<fr::FusedFeatureSet> fused;
  for (const auto& q : batch.samples) fused.push_back(model.fused_set(model.encode_identity(*q[0], *q[1], *q[2], *q[3])));
  EXPECT_EQ(loss.total.item(), fr::sdm_sum(fused, batch.labels, cfg.loss).item());
  EXPECT_EQ(loss.mean_activated, 1.0);
}

TEST(TrainStep, UpdatesOnlyTheTrainablePartition) {
  auto cfg = tiny();
  const auto ds = fr::generate(cfg.data);
  fr::TrainState state(cfg);
  const auto part = state.model.freeze_partition();
  const auto frozen_before = values(part.frozen);
  const auto trainable_before = values(part.trainable);
  const auto digest = state.model.frozen_digest();
  const auto r = fr::train_step(state.model, first_batch(ds.train, 4), state.adam, 1e-3, cfg);
  EXPECT_TRUE(std::isfinite(r.total));
  EXPECT_GT(r.grad_norm, 0.0);
  EXPECT_EQ(values(part.frozen), frozen_before);
  EXPECT_EQ(state.model.frozen_digest(), digest);
  const auto trainable_after = values(part.trainable);
  std::size_t changed = 0;
  for (std::size_t k = 0; k < trainable_after.size(); ++k) changed += trainable_after[k] != trainable_before[k];
  EXPECT_GT(changed, trainable_after.size() / 2);
  for (const auto& e : part.trainable.entries()) EXPECT_FALSE(e.value.has_grad()) << e.name;
}

TEST(TrainStep, NonFiniteLossIsReported) {
  auto cfg = tiny();
  const auto ds = fr::generate(cfg.data);
  fr::TrainState state(cfg);
  auto part = state.model.freeze_partition();
  part.trainable.entries().back().value.mutable_data()[0] = std::nan("");
  EXPECT_THROW(fr::train_step(state.model, first_batch(ds.train, 4), state.adam, 1e-3, cfg), fr::NonFiniteError);
}

TEST(Fit, FrozenDigestConstantAndLossFinite) {
  auto cfg = tiny();
  cfg.train.epochs = 10;
  const auto ds = fr::generate(cfg.data);
  fr::TrainState state(cfg);
  const auto digest = state.model.frozen_digest();
  const auto trainable = state.model.trainable_digest();
  const auto curve = fr::fit(state, ds.train);
  ASSERT_EQ(curve.size(), 10u);
  for (const auto& r : curve) {
    EXPECT_EQ(r.frozen_digest, digest);
    EXPECT_TRUE(std::isfinite(r.total));
    EXPECT_EQ(r.steps, 2u);
  }
  EXPECT_NE(state.model.trainable_digest(), trainable);
  EXPECT_EQ(state.epochs_done, 10u);
}

TEST(Fit, SameSeedSameCurve) {
  const auto cfg = tiny();
  const auto ds = fr::generate(cfg.data);
  fr::TrainState a(cfg), b(cfg);
  const auto ca = fr::fit(a, ds.train), cb = fr::fit(b, ds.train);
  EXPECT_EQ(fr::loss_curve_csv(ca, cfg.hash()), fr::loss_curve_csv(cb, cfg.hash()));
  EXPECT_EQ(a.model.trainable_digest(), b.model.trainable_digest());
  auto other = cfg;
  other.train.seed = 2;
  other.sync();
  fr::TrainState c(other);
  EXPECT_NE(fr::loss_curve_csv(fr::fit(c, ds.train), cfg.hash()), fr::loss_curve_csv(ca, cfg.hash()));
}

TEST(Fit, ResumeFromCheckpointMatchesUninterruptedRun) {
  const auto cfg = tiny();
  const auto ds = fr::generate(cfg.data);
  fr::TrainState whole(cfg);
  const auto full = fr::fit(whole, ds.train);

  fr::TrainState first(cfg);
  auto curve = fr::fit(first, ds.train, {}, 1);
  ASSERT_EQ(curve.size(), 1u);
  fr::TrainState resumed = fr::deserialize_checkpoint(fr::serialize_checkpoint(first));
  EXPECT_EQ(resumed.epochs_done, 1u);
  const auto rest = fr::fit(resumed, ds.train);
  curve.insert(curve.end(), rest.begin(), rest.end());
  EXPECT_EQ(fr::loss_curve_csv(curve, ""), fr::loss_curve_csv(full, ""));
  EXPECT_EQ(resumed.model.trainable_digest(), whole.model.trainable_digest());
  EXPECT_EQ(resumed.adam, whole.adam);
}

TEST(Checkpoint, RoundTripGivesIdenticalForward) {
  auto cfg = tiny();
  cfg.train.epochs = 1;
  const auto ds = fr::generate(cfg.data);
  fr::TrainState state(cfg);
  fr::fit(state, ds.train);
  const auto path = std::filesystem::temp_directory_path() / "flexireid_test_trainer.flxr";
  fr::save_checkpoint(state, path);
  const auto back = fr::load_checkpoint(path);
  EXPECT_EQ(back.config.to_text(), cfg.to_text());
  EXPECT_EQ(fr::serialize_checkpoint(back), fr::serialize_checkpoint(state));
  const auto a = fr::evaluate_modes(state.model, ds.test, fr::all_modes(), 1, "");
  const auto b = fr::evaluate_modes(back.model, ds.test, fr::all_modes(), 1, "");
  EXPECT_EQ(fr::report_to_csv(a), fr::report_to_csv(b));
  const auto& s = ds.test.samples.front();
  const auto ea = state.model.encode(s), eb = back.model.encode(s);
  ASSERT_EQ(ea.global_feature.numel(), eb.global_feature.numel());
  for (std::size_t i = 0; i < ea.global_feature.numel(); ++i) EXPECT_EQ(ea.global_feature[i], eb.global_feature[i]);
}

TEST(Checkpoint, CorruptionIsDetected) {
  const fr::TrainState state(tiny());
  const auto bytes = fr::serialize_checkpoint(state);
  EXPECT_THROW(fr::deserialize_checkpoint(""), fr::TruncationError);
  auto bad = bytes;
  bad[1] = 'X';
  EXPECT_THROW(fr::deserialize_checkpoint(bad), fr::FormatError);
  bad = bytes;
  bad[4] = 2;
  EXPECT_THROW(fr::deserialize_checkpoint(bad), fr::FormatError);
  EXPECT_THROW(fr::deserialize_checkpoint(std::string_view(bytes).substr(0, bytes.size() / 2)), fr::Error);
  EXPECT_THROW(fr::deserialize_checkpoint(bytes + "z"), fr::FormatError);
  EXPECT_THROW(fr::load_checkpoint("/nonexistent/dir/ckpt.flxr"), fr::IoError);
}

TEST(Checkpoint, ArchitectureMismatchIsRejected) {
  // A checkpoint whose config text was altered no longer lines up with its tensors.
  auto cfg = tiny();
  const fr::TrainState state(cfg);
  auto bytes = fr::serialize_checkpoint(state);
  const std::string from = "moe.num_experts = 6", to = "moe.num_experts = 4";
  const auto at = bytes.find(from);
  ASSERT_NE(at, std::string::npos);
  bytes.replace(at, from.size(), to);
  EXPECT_THROW(fr::deserialize_checkpoint(bytes), fr::FormatError);
}

TEST(Experiments, RowSets) {
  const fr::RunConfig base;
  const auto comp = fr::component_ablation(base);
  ASSERT_EQ(comp.size(), 6u);
  EXPECT_EQ(comp[0].name, "zero-shot");
  EXPECT_FALSE(comp[0].train);
  EXPECT_FALSE(comp[0].config.model.use_moe);
  EXPECT_EQ(comp[1].config.model.moe.num_experts, 1u);
  EXPECT_EQ(comp[2].config.train.lambda, 0.0);
  EXPECT_EQ(comp[3].config.train.lambda, base.train.lambda);
  EXPECT_EQ(comp[4].config.model.placeholders, fr::PlaceholderKind::zeros);
  EXPECT_EQ(comp[5].config.model.fusion, fr::FusionKind::cmqf);
  EXPECT_EQ(comp[5].config.model.placeholders, fr::PlaceholderKind::learned);

  const auto routing = fr::routing_ablation(base);
  ASSERT_EQ(routing.size(), 4u);
  EXPECT_EQ(routing[3].config.model.moe.router, fr::RouterKind::adaptive);
  const auto fusion = fr::fusion_ablation(base);
  ASSERT_EQ(fusion.size(), 4u);
  EXPECT_EQ(fusion[3].config.model.fusion, fr::FusionKind::cmqf);

  const auto experts = fr::expert_sweep(base);
  ASSERT_EQ(experts.size(), 5u);
  for (const auto& s : experts) {
    EXPECT_EQ(s.config.model.moe.threshold, 0.4);
    EXPECT_NO_THROW(s.config.validate());
  }
  EXPECT_EQ(experts[4].config.model.moe.num_experts, 10u);
  const auto thresholds = fr::threshold_sweep(base);
  ASSERT_EQ(thresholds.size(), 9u);
  EXPECT_EQ(thresholds[8].config.model.moe.threshold, 0.9);
  EXPECT_THROW(fr::parse_ablation("lef"), fr::ConfigError);
  EXPECT_THROW(fr::parse_sweep("tau"), fr::ConfigError);
}

TEST(Experiments, CsvHasOneRowPerSpec) {
  auto cfg = tiny();
  cfg.train.epochs = 1;
  const auto ds = fr::generate(cfg.data);
  auto specs = fr::component_ablation(cfg);
  specs.resize(2);
  const auto rows = fr::run_experiments(specs, ds);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_FALSE(rows[0].trained);
  EXPECT_TRUE(rows[1].trained);
  const auto csv = fr::experiment_csv(rows, cfg.hash());
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  EXPECT_NE(csv.find("r1_t+s+ir"), std::string::npos);
}
