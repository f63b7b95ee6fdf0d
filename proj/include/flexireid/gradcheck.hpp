// SPDX-License-Identifier: Apache-2.0
#pragma once

// Finite-difference gradient checks over every tape primitive and the main
// composite modules, at a seeded random point.

#include <cstdlib>
#include <functional>
#include <string>
#include <vector>

#include "flexireid/autodiff.hpp"
#include "flexireid/fusion.hpp"
#include "flexireid/loss.hpp"
#include "flexireid/model.hpp"
#include "flexireid/moe.hpp"
#include "flexireid/nn.hpp"
#include "flexireid/rng.hpp"
#include "flexireid/synth.hpp"
#include "flexireid/trainer.hpp"

namespace flexireid {

struct GradientCase {
  std::string name;
  std::function<ad::CheckReport()> run;
};

struct GradientResult {
  std::string name;
  ad::CheckReport report;
};

namespace detail {

// Scalar readout sum(y * W) with a fixed pseudo-random W, so every output
// entry carries a distinct nonzero weight.
inline Tensor probe(const Tensor& y) {
  Rng rng(0x70726f6265);
  return ad::sum(ad::mul(y, Tensor(y.shape(), rng.normal_vector(y.numel(), 1.0))));
}

inline Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c, double stddev = 1.0) {
  return Tensor({r, c}, rng.normal_vector(r * c, stddev));
}

inline Tensor positive_matrix(Rng& rng, std::size_t r, std::size_t c) {
  std::vector<double> v(r * c);
  for (auto& x : v) x = 0.5 + rng.uniform();
  return Tensor({r, c}, std::move(v));
}

// Moves every trainable parameter off its initialization so no gradient is
// identically zero (zero-initialized up-projections otherwise block the
// layers beneath them).
inline void perturb(ParameterSet& ps, Rng& rng, double stddev) {
  for (auto& e : ps.entries()) {
    for (double& v : e.value.mutable_data()) v += stddev * rng.normal();
  }
}

inline ad::CheckReport check(const std::function<Tensor()>& f, std::vector<ad::NamedParam> params,
                             double step, double tol) {
  return ad::grad_check(f, std::move(params), step, tol);
}

// Micro configuration for end-to-end checks: small enough that two forward
// passes per scalar stay cheap.
inline RunConfig micro_config(std::uint64_t seed) {
  RunConfig cfg;
  cfg.model.encoder.model_dim = 8;
  cfg.model.encoder.num_blocks = 1;
  cfg.model.encoder.num_heads = 2;
  cfg.model.encoder.patch_rows = 2;
  cfg.model.encoder.patch_cols = 2;
  cfg.model.encoder.patch_height = 2;
  cfg.model.encoder.patch_width = 2;
  cfg.model.encoder.channels = 1;
  cfg.model.encoder.vocab_size = 16;
  cfg.model.encoder.max_text_len = 6;
  cfg.model.moe.num_experts = 3;
  cfg.model.placeholder_len = 2;
  cfg.data.num_identities = 5;
  cfg.data.test_identities = 1;
  cfg.data.samples_per_identity = 1;
  cfg.data.latent_dim = 4;
  cfg.data.text_levels = 4;
  cfg.data.text_tokens = 4;
  cfg.data.seed = seed;
  cfg.train.seed = seed;
  cfg.train.batch_identities = 4;
  cfg.sync();
  return cfg;
}

}  // namespace detail

// One case per tape primitive.
inline std::vector<GradientCase> primitive_cases(std::uint64_t seed, double step = 1e-6,
                                                 double tol = 1e-4) {
  using detail::probe;
  std::vector<GradientCase> cases;
  auto add_case = [&](std::string name, std::function<std::vector<ad::NamedParam>(Rng&)> make,
                      std::function<Tensor(const std::vector<ad::NamedParam>&)> f) {
    cases.push_back({name, [=] {
                       Rng rng(derive_seed(seed, fnv1a64(name)));
                       auto params = make(rng);
                       return detail::check([&] { return probe(f(params)); }, params, step, tol);
                     }});
  };
  using P = std::vector<ad::NamedParam>;
  auto mat = [](const char* n, std::size_t r, std::size_t c) {
    return [=](Rng& rng) { return ad::NamedParam{n, detail::random_matrix(rng, r, c)}; };
  };
  auto m34 = mat("a", 3, 4);
  auto b34 = mat("b", 3, 4);

  add_case("add", [=](Rng& r) { return P{m34(r), b34(r)}; },
           [](const P& p) { return ad::add(p[0].value, p[1].value); });
  add_case("sub", [=](Rng& r) { return P{m34(r), b34(r)}; },
           [](const P& p) { return ad::sub(p[0].value, p[1].value); });
  add_case("mul", [=](Rng& r) { return P{m34(r), b34(r)}; },
           [](const P& p) { return ad::mul(p[0].value, p[1].value); });
  add_case("scale", [=](Rng& r) { return P{m34(r)}; },
           [](const P& p) { return ad::scale(p[0].value, -1.7); });
  add_case("add_row", [=](Rng& r) { return P{m34(r), {"bias", Tensor::vector(r.normal_vector(4, 1.0))}}; },
           [](const P& p) { return ad::add_row(p[0].value, p[1].value); });
  add_case("matmul", [=](Rng& r) { return P{m34(r), mat("b", 4, 5)(r)}; },
           [](const P& p) { return ad::matmul(p[0].value, p[1].value); });
  add_case("matmul_nt", [=](Rng& r) { return P{m34(r), mat("b", 5, 4)(r)}; },
           [](const P& p) { return ad::matmul_nt(p[0].value, p[1].value); });
  add_case("transpose", [=](Rng& r) { return P{m34(r)}; },
           [](const P& p) { return ad::transpose(p[0].value); });
  add_case("scale_rows", [=](Rng& r) { return P{m34(r), {"w", Tensor::vector(r.normal_vector(3, 1.0))}}; },
           [](const P& p) { return ad::scale_rows(p[0].value, p[1].value); });
  add_case("softmax_rows", [=](Rng& r) { return P{m34(r)}; },
           [](const P& p) { return ad::softmax_rows(p[0].value); });
  add_case("log_softmax_rows", [=](Rng& r) { return P{m34(r)}; },
           [](const P& p) { return ad::log_softmax_rows(p[0].value); });
  add_case("layer_norm_rows",
           [=](Rng& r) {
             return P{m34(r), {"gamma", Tensor::vector(r.normal_vector(4, 1.0))},
                      {"beta", Tensor::vector(r.normal_vector(4, 1.0))}};
           },
           [](const P& p) { return ad::layer_norm_rows(p[0].value, p[1].value, p[2].value); });
  add_case("gelu", [=](Rng& r) { return P{m34(r)}; }, [](const P& p) { return ad::gelu(p[0].value); });
  add_case("log_clamped", [](Rng& r) { return P{{"a", detail::positive_matrix(r, 3, 4)}}; },
           [](const P& p) { return ad::log_clamped(p[0].value); });
  add_case("l2_normalize_rows", [=](Rng& r) { return P{m34(r)}; },
           [](const P& p) { return ad::l2_normalize_rows(p[0].value); });
  add_case("mean_rows", [=](Rng& r) { return P{m34(r)}; },
           [](const P& p) { return ad::mean_rows(p[0].value); });
  add_case("sum_rows", [=](Rng& r) { return P{m34(r)}; },
           [](const P& p) { return ad::sum_rows(p[0].value); });
  add_case("sum", [=](Rng& r) { return P{m34(r)}; }, [](const P& p) { return ad::sum(p[0].value); });
  add_case("concat_rows", [=](Rng& r) { return P{m34(r), mat("b", 2, 4)(r)}; },
           [](const P& p) { return ad::concat_rows({p[0].value, p[1].value}); });
  add_case("concat_cols", [=](Rng& r) { return P{m34(r), mat("b", 3, 2)(r)}; },
           [](const P& p) { return ad::concat_cols({p[0].value, p[1].value}); });
  add_case("slice_rows", [=](Rng& r) { return P{m34(r)}; },
           [](const P& p) { return ad::slice_rows(p[0].value, 1, 2); });
  add_case("slice_cols", [=](Rng& r) { return P{m34(r)}; },
           [](const P& p) { return ad::slice_cols(p[0].value, 1, 2); });
  add_case("column", [=](Rng& r) { return P{m34(r)}; },
           [](const P& p) { return ad::column(p[0].value, 2); });
  add_case("pad_rows", [=](Rng& r) { return P{m34(r)}; },
           [](const P& p) { return ad::pad_rows(p[0].value, 5); });
  add_case("reshape", [=](Rng& r) { return P{m34(r)}; },
           [](const P& p) { return ad::reshape(p[0].value, {4, 3}); });
  return cases;
}

// Composite modules: soft-routed MoE, query fusion, the bidirectional
// matching loss, and the full objective on a 4-identity micro-batch.
inline std::vector<GradientCase> module_cases(std::uint64_t seed, double step = 1e-6,
                                              double tol = 1e-4) {
  std::vector<GradientCase> cases;

  cases.push_back({"moe_forward_soft", [=] {
                     Rng rng(derive_seed(seed, 0x6d6f65));
                     MoeSettings s;
                     s.router = RouterKind::soft;
                     s.num_experts = 4;
                     s.adapter_up_stddev = 0.3;
                     AEAMoELayer layer(rng, 8, s);
                     Tensor x = detail::random_matrix(rng, 5, 8);
                     ParameterSet ps;
                     layer.collect(ps, "moe");
                     std::vector<ad::NamedParam> params{{"x", x}};
                     for (auto& e : ps.entries()) params.push_back({e.name, e.value});
                     return detail::check(
                         [&] {
                           const auto out = layer.forward(x);
                           return ad::add(detail::probe(out.y), out.entropy_sum);
                         },
                         params, step, tol);
                   }});

  cases.push_back({"cmqf_fuse", [=] {
                     Rng rng(derive_seed(seed, 0x636d7166));
                     FusionBlockParams fp(rng, 8, 2);
                     ParameterSet ps;
                     fp.collect(ps, "fusion");
                     detail::perturb(ps, rng, 0.5);
                     ModalityTriple t{detail::random_matrix(rng, 5, 8), detail::random_matrix(rng, 5, 8),
                                      detail::random_matrix(rng, 3, 8)};
                     std::vector<ad::NamedParam> params{
                         {"sketch", t.sketch}, {"infrared", t.infrared}, {"text", t.text}};
                     for (auto& e : ps.entries()) params.push_back({e.name, e.value});
                     return detail::check([&] { return detail::probe(cmqf_fuse(t, fp)); }, params, step,
                                          tol);
                   }});

  cases.push_back({"sdm_bidirectional", [=] {
                     Rng rng(derive_seed(seed, 0x73646d));
                     // Features clustered around a shared direction, as at
                     // initialization; well-separated random vectors saturate
                     // the sharp softmax and leave gradients at roundoff level.
                     const auto base = rng.normal_vector(6, 1.0);
                     auto clustered = [&] {
                       std::vector<double> v(4 * 6);
                       for (std::size_t i = 0; i < v.size(); ++i) v[i] = base[i % 6] + 0.05 * rng.normal();
                       return Tensor({4, 6}, std::move(v));
                     };
                     Tensor q = clustered();
                     Tensor g = clustered();
                     const Labels labels{0, 1, 2, 1};
                     const SDMConfig cfg;
                     return detail::check([&] { return sdm_bidirectional(q, g, labels, cfg); },
                                          {{"queries", q}, {"galleries", g}}, step, tol);
                   }});

  cases.push_back({"total_loss_end_to_end", [=] {
                     const RunConfig cfg = detail::micro_config(seed);
                     const auto ds = generate(cfg.data);
                     FlexiReIDModel model(cfg.model);
                     Rng rng(derive_seed(seed, 0x653265));
                     ParameterSet trainable = model.parameters().trainable();
                     detail::perturb(trainable, rng, 0.2);
                     Rng batch_rng(seed);
                     const Batch batch = epoch_batches(ds.train, 4, batch_rng).front();
                     std::vector<ad::NamedParam> params;
                     for (auto& e : trainable.entries()) params.push_back({e.name, e.value});
                     return detail::check(
                         [&] { return batch_loss(model, batch, cfg.loss, cfg.train.lambda).total; },
                         params, step, tol);
                   }});
  return cases;
}

inline std::vector<GradientResult> run_gradient_suite(std::uint64_t seed, double step = 1e-6,
                                                      double tol = 1e-4) {
  std::vector<GradientResult> out;
  for (const auto& group : {primitive_cases(seed, step, tol), module_cases(seed, step, tol)}) {
    for (const auto& c : group) out.push_back({c.name, c.run()});
  }
  return out;
}

}  // namespace flexireid
