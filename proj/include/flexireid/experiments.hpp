// SPDX-License-Identifier: Apache-2.0
#pragma once

// Ablation and sweep drivers. Each row is a config variant trained on the
// shared train split and scored on the test split over all seven modes.

#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "flexireid/config.hpp"
#include "flexireid/evaluation.hpp"
#include "flexireid/fusion.hpp"
#include "flexireid/metrics.hpp"
#include "flexireid/synth.hpp"
#include "flexireid/trainer.hpp"

namespace flexireid {

struct ExperimentSpec {
  std::string name;
  RunConfig config;
  bool train = true;
};

struct ExperimentRow {
  std::string name;
  std::string config_hash;
  bool trained = false;
  double final_loss = 0.0;
  double mean_activated = 0.0;
  RetrievalReport report;
};

enum class AblationKind { components, routing, fusion };
enum class SweepKind { experts, threshold };

inline AblationKind parse_ablation(const std::string& s) {
  if (s == "components") return AblationKind::components;
  if (s == "routing") return AblationKind::routing;
  if (s == "fusion") return AblationKind::fusion;
  throw ConfigError("unknown ablation kind '" + s + "' (expected components|routing|fusion)");
}

inline SweepKind parse_sweep(const std::string& s) {
  if (s == "experts") return SweepKind::experts;
  if (s == "threshold") return SweepKind::threshold;
  throw ConfigError("unknown sweep kind '" + s + "' (expected experts|threshold)");
}

// Rows build up the full model one component at a time:
//   zero-shot        frozen encoders only, untrained
//   +MLP-Adapter     one always-on adapter per block
//   +AEA-MoE w/o AL  adaptive routing, adaptive loss weight 0
//   +AEA-MoE w/ AL   adaptive routing with the adaptive loss
//   +CMQF w/o LEF    query fusion with zero placeholders
//   +CMQF w/ LEF     query fusion with learned placeholders
// The first four rows query with the mean of the normalized global
// features of the present modalities.
inline std::vector<ExperimentSpec> component_ablation(const RunConfig& base) {
  std::vector<ExperimentSpec> out;
  RunConfig c = base;
  c.model.use_moe = false;
  c.model.fusion = FusionKind::none;
  out.push_back({"zero-shot", c, false});

  c = base;
  c.model.use_moe = true;
  c.model.moe.num_experts = 1;
  c.model.moe.top_k = 1;
  c.model.moe.router = RouterKind::soft;
  c.model.fusion = FusionKind::none;
  out.push_back({"+MLP-Adapter", c, true});

  c = base;
  c.model.moe.router = RouterKind::adaptive;
  c.model.fusion = FusionKind::none;
  c.train.lambda = 0.0;
  out.push_back({"+AEA-MoE w/o AL", c, true});

  c.train.lambda = base.train.lambda;
  out.push_back({"+AEA-MoE w/ AL", c, true});

  c.model.fusion = FusionKind::cmqf;
  c.model.placeholders = PlaceholderKind::zeros;
  out.push_back({"+CMQF w/o LEF", c, true});

  c.model.placeholders = PlaceholderKind::learned;
  out.push_back({"+CMQF w/ LEF", c, true});
  return out;
}

inline std::vector<ExperimentSpec> routing_ablation(const RunConfig& base) {
  std::vector<ExperimentSpec> out;
  for (auto kind : {RouterKind::topk, RouterKind::soft, RouterKind::hash, RouterKind::adaptive}) {
    RunConfig c = base;
    c.model.moe.router = kind;
    out.push_back({router_name(kind), c, true});
  }
  return out;
}

inline std::vector<ExperimentSpec> fusion_ablation(const RunConfig& base) {
  std::vector<ExperimentSpec> out;
  for (auto kind : {FusionKind::concat, FusionKind::sum, FusionKind::hierarchical, FusionKind::cmqf}) {
    RunConfig c = base;
    c.model.fusion = kind;
    out.push_back({fusion_name(kind), c, true});
  }
  return out;
}

inline std::vector<ExperimentSpec> expert_sweep(const RunConfig& base) {
  std::vector<ExperimentSpec> out;
  for (auto n : base.sweep.experts) {
    RunConfig c = base;
    c.model.moe.router = RouterKind::adaptive;
    c.model.moe.num_experts = n;
    c.model.moe.top_k = std::min(c.model.moe.top_k, n);
    c.model.moe.threshold = base.sweep.expert_sweep_threshold;
    out.push_back({"n=" + std::to_string(n), c, true});
  }
  return out;
}

inline std::vector<ExperimentSpec> threshold_sweep(const RunConfig& base) {
  std::vector<ExperimentSpec> out;
  for (double t : base.sweep.thresholds) {
    RunConfig c = base;
    c.model.moe.router = RouterKind::adaptive;
    c.model.moe.threshold = t;
    std::ostringstream name;
    name << "tau=" << t;
    out.push_back({name.str(), c, true});
  }
  return out;
}

inline std::vector<ExperimentSpec> ablation_specs(AblationKind kind, const RunConfig& base) {
  switch (kind) {
    case AblationKind::components: return component_ablation(base);
    case AblationKind::routing: return routing_ablation(base);
    case AblationKind::fusion: return fusion_ablation(base);
  }
  return {};
}

inline std::vector<ExperimentSpec> sweep_specs(SweepKind kind, const RunConfig& base) {
  return kind == SweepKind::experts ? expert_sweep(base) : threshold_sweep(base);
}

inline ExperimentRow run_experiment(const ExperimentSpec& spec, const SyntheticDataset& data) {
  spec.config.validate();
  ExperimentRow row;
  row.name = spec.name;
  row.config_hash = spec.config.hash();
  TrainState state(spec.config);
  if (spec.train && state.model.parameters().trainable().size() > 0) {
    const auto curve = fit(state, data.train);
    row.trained = true;
    row.final_loss = curve.back().total;
    row.mean_activated = curve.back().mean_activated;
  }
  row.report = evaluate_modes(state.model, data.test, all_modes(), spec.config.train.seed, row.config_hash);
  return row;
}

using RowCallback = std::function<void(const ExperimentRow&)>;

inline std::vector<ExperimentRow> run_experiments(const std::vector<ExperimentSpec>& specs,
                                                  const SyntheticDataset& data,
                                                  const RowCallback& on_row = {}) {
  std::vector<ExperimentRow> rows;
  for (const auto& s : specs) {
    rows.push_back(run_experiment(s, data));
    if (on_row) on_row(rows.back());
  }
  return rows;
}

// avg_r1 is the mean Rank-1 over the seven modes.
inline std::string experiment_csv(const std::vector<ExperimentRow>& rows, const std::string& base_hash) {
  std::ostringstream os;
  os.precision(10);
  os << "row,name,avg_r1";
  for (const auto& m : all_modes()) os << ",r1_" << m.name();
  os << ",trained,final_loss,mean_activated,config_hash,base_config_hash\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    os << i << ',' << r.name << ',' << r.report.average_r1();
    for (const auto& m : r.report.modes) os << ',' << m.r1;
    os << ',' << (r.trained ? 1 : 0) << ',' << r.final_loss << ',' << r.mean_activated << ','
       << r.config_hash << ',' << base_hash << '\n';
  }
  return os.str();
}

}  // namespace flexireid
