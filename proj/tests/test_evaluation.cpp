// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "flexireid/config.hpp"
#include "flexireid/evaluation.hpp"

namespace fr = flexireid;

namespace {

fr::RunConfig split_config(std::size_t ids, std::size_t test, std::uint64_t seed) {
  return fr::RunConfig::parse("data.num_identities = " + std::to_string(ids) +
                              "\ndata.test_identities = " + std::to_string(test) +
                              "\ndata.seed = " + std::to_string(seed) +
                              "\ntrain.seed = " + std::to_string(seed) + "\n");
}

}  // namespace

TEST(BinomialBand, KnownQuantiles) {
  // Binomial(100, 0.02): P(X <= 5) = 0.9845, P(X <= 6) = 0.9959.
  EXPECT_EQ(fr::binomial_upper_rate(100, 0.02), 0.06);
  EXPECT_EQ(fr::binomial_lower_rate(100, 0.02), 0.0);
  // Binomial(100, 0.5) has its 0.5% tails at 37 and 63.
  EXPECT_EQ(fr::binomial_lower_rate(100, 0.5), 0.37);
  EXPECT_EQ(fr::binomial_upper_rate(100, 0.5), 0.63);
  EXPECT_LE(fr::binomial_upper_rate(32, 1.0 / 16.0, 0.9), fr::binomial_upper_rate(32, 1.0 / 16.0, 0.99));
}

TEST(EvaluateModes, UntrainedTextQueriesAreAtChance) {
  // The text and visual encoders share no weights, so an untrained model
  // ranks the rgb gallery for text queries at random.
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto cfg = split_config(52, 50, seed);
    const auto ds = fr::generate(cfg.data);
    const fr::FlexiReIDModel model(cfg.model);
    const std::vector<fr::RetrievalMode> modes{fr::parse_mode("t")};
    const auto report = fr::evaluate_modes(model, ds.test, modes, seed, cfg.hash());
    const auto& m = report.modes.front();
    ASSERT_EQ(m.gallery, 100u);
    ASSERT_EQ(m.queries, 100u);
    const double p = 2.0 / 100.0;
    EXPECT_GE(m.r1, fr::binomial_lower_rate(m.queries, p)) << "seed " << seed;
    EXPECT_LE(m.r1, fr::binomial_upper_rate(m.queries, p)) << "seed " << seed;
  }
}

TEST(EvaluateModes, AllSevenModesDeterministic) {
  const auto cfg = split_config(12, 6, 3);
  const auto ds = fr::generate(cfg.data);
  const fr::FlexiReIDModel a(cfg.model), b(cfg.model);
  const auto ra = fr::evaluate_modes(a, ds.test, fr::all_modes(), 3, cfg.hash());
  const auto rb = fr::evaluate_modes(b, ds.test, fr::all_modes(), 3, cfg.hash());
  ASSERT_EQ(ra.modes.size(), 7u);
  EXPECT_EQ(fr::report_to_jsonl(ra), fr::report_to_jsonl(rb));
  EXPECT_EQ(fr::report_to_csv(ra), fr::report_to_csv(rb));
  for (std::size_t i = 0; i < 7; ++i) {
    EXPECT_EQ(ra.modes[i].mode, fr::all_modes()[i].name());
    EXPECT_EQ(ra.modes[i].queries, 12u);
    EXPECT_EQ(ra.modes[i].gallery, 12u);
  }
}

TEST(Report, JsonlRoundTrip) {
  const auto cfg = split_config(12, 6, 4);
  const auto ds = fr::generate(cfg.data);
  const fr::FlexiReIDModel model(cfg.model);
  const auto r = fr::evaluate_modes(model, ds.test, fr::all_modes(), 4, cfg.hash());
  const auto back = fr::report_from_jsonl(fr::report_to_jsonl(r));
  EXPECT_EQ(back.seed, 4u);
  EXPECT_EQ(back.config_hash, cfg.hash());
  ASSERT_EQ(back.modes.size(), r.modes.size());
  for (std::size_t i = 0; i < r.modes.size(); ++i) {
    EXPECT_EQ(back.modes[i].mode, r.modes[i].mode);
    EXPECT_EQ(back.modes[i].r1, r.modes[i].r1);
    EXPECT_EQ(back.modes[i].map, r.modes[i].map);
    EXPECT_EQ(back.modes[i].minp, r.modes[i].minp);
  }
  const auto csv = fr::report_to_csv(r);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 8);
}

TEST(EvaluateModes, Errors) {
  const auto cfg = split_config(8, 3, 1);
  const auto ds = fr::generate(cfg.data);
  const fr::FlexiReIDModel model(cfg.model);
  EXPECT_THROW(fr::evaluate_modes(model, fr::DatasetSplit{}, fr::all_modes(), 1, ""), fr::Error);
  fr::DatasetSplit no_text = ds.test;
  std::erase_if(no_text.samples, [](const fr::Sample& s) { return s.modality == fr::Modality::text; });
  const std::vector<fr::RetrievalMode> needs_text{fr::parse_mode("t+s")};
  EXPECT_THROW(fr::evaluate_modes(model, no_text, needs_text, 1, ""), fr::MissingModalityError);
  const std::vector<fr::RetrievalMode> sketch_only{fr::parse_mode("s")};
  EXPECT_NO_THROW(fr::evaluate_modes(model, no_text, sketch_only, 1, ""));
  fr::DatasetSplit no_rgb = ds.test;
  std::erase_if(no_rgb.samples, [](const fr::Sample& s) { return s.modality == fr::Modality::rgb; });
  EXPECT_THROW(fr::evaluate_modes(model, no_rgb, sketch_only, 1, ""), fr::MissingModalityError);
}

TEST(CheckCompatible, RejectsMismatchedDatasets) {
  const auto cfg = split_config(8, 3, 1);
  const auto ds = fr::generate(cfg.data);
  EXPECT_NO_THROW(fr::check_compatible(ds.test, cfg.model.encoder));
  auto enc = cfg.model.encoder;
  enc.patch_rows = 4;
  EXPECT_THROW(fr::check_compatible(ds.test, enc), fr::CompatibilityError);
  enc = cfg.model.encoder;
  enc.channels = 1;
  EXPECT_THROW(fr::check_compatible(ds.test, enc), fr::CompatibilityError);
  enc = cfg.model.encoder;
  enc.vocab_size = 4;
  EXPECT_THROW(fr::check_compatible(ds.test, enc), fr::CompatibilityError);
  enc = cfg.model.encoder;
  enc.max_text_len = cfg.data.text_tokens + 1;
  EXPECT_THROW(fr::check_compatible(ds.test, enc), fr::CompatibilityError);
}
