// SPDX-License-Identifier: Apache-2.0
// flexireid: generate data, train, evaluate, ablate, sweep and gradcheck.
//
// Exit codes: 0 ok, 1 other failure, 2 config or compatibility error,
// 3 io/format error, 4 numeric failure. Errors also print one JSON line on
// stderr. FLEXIREID_LOG=quiet|info|debug sets log verbosity (default info).

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "flexireid/config.hpp"
#include "flexireid/evaluation.hpp"
#include "flexireid/experiments.hpp"
#include "flexireid/gradcheck.hpp"
#include "flexireid/synth.hpp"
#include "flexireid/trainer.hpp"

namespace fs = std::filesystem;
using namespace flexireid;

namespace {

enum class LogLevel { quiet = 0, info = 1, debug = 2 };

LogLevel log_level() {
  const char* env = std::getenv("FLEXIREID_LOG");
  if (env == nullptr) return LogLevel::info;
  const std::string v = env;
  if (v == "quiet" || v == "0") return LogLevel::quiet;
  if (v == "debug" || v == "2") return LogLevel::debug;
  return LogLevel::info;
}

void log(LogLevel level, const std::string& msg) {
  if (static_cast<int>(level) <= static_cast<int>(log_level())) std::cerr << msg << '\n';
}

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string data;
  std::string checkpoint;
  std::string modes;
  std::string kind;
};

RunConfig load_config(const Options& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : RunConfig::from_file(o.config);
  if (o.seed) {
    cfg.data.seed = *o.seed;
    cfg.train.seed = *o.seed;
    cfg.sync();
  }
  return cfg;
}

fs::path out_path(const Options& o, const std::string& name) {
  return (o.out.empty() ? fs::path(".") : fs::path(o.out)) / name;
}

// Dataset files carry the data section plus the hash of the whole config.
void tag_split(DatasetSplit& split, const RunConfig& cfg) {
  split.config_echo = cfg.data.to_text() + "config_hash=" + cfg.hash() + "\n";
}

SyntheticDataset dataset_for(const Options& o, const RunConfig& cfg) {
  SyntheticDataset ds;
  if (o.data.empty()) {
    ds = generate(cfg.data);
    log(LogLevel::debug, "generated dataset in memory");
  } else {
    ds.train = load(fs::path(o.data) / "train.cirs");
    ds.test = load(fs::path(o.data) / "test.cirs");
  }
  check_compatible(ds.train, cfg.model.encoder);
  check_compatible(ds.test, cfg.model.encoder);
  return ds;
}

int cmd_config(const Options& o) {
  const RunConfig cfg = load_config(o);
  std::cout << cfg.to_text() << "# config_hash = " << cfg.hash() << '\n';
  return 0;
}

int cmd_generate(const Options& o) {
  const RunConfig cfg = load_config(o);
  auto ds = generate(cfg.data);
  tag_split(ds.train, cfg);
  tag_split(ds.test, cfg);
  const fs::path dir = o.out.empty() ? fs::path(cfg.dataset_dir) : fs::path(o.out);
  save(ds.train, dir / "train.cirs");
  save(ds.test, dir / "test.cirs");
  write_file_atomic(dir / "config.txt", cfg.to_text() + "# config_hash = " + cfg.hash() + "\n");
  log(LogLevel::info, "wrote " + std::to_string(ds.train.samples.size()) + " train and " +
                          std::to_string(ds.test.samples.size()) + " test samples to " + dir.string());
  return 0;
}

int cmd_describe(const Options& o) {
  const fs::path dir = o.data.empty() ? fs::path(load_config(o).dataset_dir) : fs::path(o.data);
  for (const char* name : {"train.cirs", "test.cirs"}) {
    const auto split = load(dir / name);
    std::cout << describe(split);
  }
  return 0;
}

int cmd_train(const Options& o) {
  const RunConfig cfg = load_config(o);
  const auto ds = dataset_for(o, cfg);
  const std::string hash = cfg.hash();
  TrainState state(cfg);
  std::ostringstream run_log;
  const auto start = std::chrono::steady_clock::now();
  const auto curve = fit(state, ds.train, [&](const EpochRecord& r, const TrainState&) {
    nlohmann::ordered_json j;
    j["epoch"] = r.epoch;
    j["learning_rate"] = r.learning_rate;
    j["steps"] = r.steps;
    j["total"] = r.total;
    j["sdm"] = r.sdm;
    j["ada"] = r.ada;
    j["mean_activated"] = r.mean_activated;
    j["frozen_digest"] = hex64(r.frozen_digest);
    j["config_hash"] = hash;
    run_log << j.dump() << '\n';
    std::ostringstream msg;
    msg << "epoch " << r.epoch << " loss " << r.total << " (sdm " << r.sdm << ", ada " << r.ada << ")";
    log(LogLevel::info, msg.str());
  });
  save_checkpoint(state, out_path(o, cfg.checkpoint));
  write_file_atomic(out_path(o, "loss.csv"), loss_curve_csv(curve, hash));
  write_file_atomic(out_path(o, "run.jsonl"), run_log.str());
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  log(LogLevel::info, "trained " + std::to_string(curve.size()) + " epochs in " +
                          std::to_string(secs) + " s; outputs in " + out_path(o, "").string());
  return 0;
}

int cmd_eval(const Options& o) {
  if (o.checkpoint.empty()) throw ConfigError("eval: --checkpoint is required");
  TrainState state = load_checkpoint(o.checkpoint);
  const RunConfig& cfg = state.config;
  const auto ds = dataset_for(o, cfg);
  const auto modes = parse_mode_list(o.modes.empty() ? cfg.eval_modes : o.modes);
  const auto report = evaluate_modes(state.model, ds.test, modes, cfg.train.seed, cfg.hash());
  write_file_atomic(out_path(o, "report.jsonl"), report_to_jsonl(report));
  write_file_atomic(out_path(o, "report.csv"), report_to_csv(report));
  std::cout << report_to_csv(report);
  return 0;
}

int run_rows(const Options& o, const std::vector<ExperimentSpec>& specs, const std::string& file) {
  const RunConfig cfg = load_config(o);
  const auto ds = dataset_for(o, cfg);
  const auto rows = run_experiments(specs, ds, [](const ExperimentRow& r) {
    log(LogLevel::info, r.name + ": avg R@1 " + std::to_string(r.report.average_r1()));
  });
  const auto csv = experiment_csv(rows, cfg.hash());
  write_file_atomic(out_path(o, file), csv);
  std::cout << csv;
  return 0;
}

int cmd_ablate(const Options& o) {
  const auto kind = parse_ablation(o.kind);
  return run_rows(o, ablation_specs(kind, load_config(o)), "ablation_" + o.kind + ".csv");
}

int cmd_sweep(const Options& o) {
  const auto kind = parse_sweep(o.kind);
  return run_rows(o, sweep_specs(kind, load_config(o)), "sweep_" + o.kind + ".csv");
}

int cmd_gradcheck(const Options& o) {
  const RunConfig cfg = load_config(o);
  const auto results = run_gradient_suite(cfg.train.seed);
  std::ostringstream csv;
  csv.precision(6);
  csv << "case,max_rel_error,tolerance,pass,config_hash\n";
  bool all = true;
  for (const auto& r : results) {
    csv << r.name << ',' << r.report.worst() << ',' << r.report.tolerance << ','
        << (r.report.pass ? 1 : 0) << ',' << cfg.hash() << '\n';
    all = all && r.report.pass;
  }
  write_file_atomic(out_path(o, "gradcheck.csv"), csv.str());
  std::cout << csv.str();
  if (!all) {
    log(LogLevel::info, "gradient check failed");
    return 4;
  }
  return 0;
}

int fail(const char* category, int code, const std::string& message) {
  nlohmann::ordered_json j;
  j["error"] = category;
  j["exit_code"] = code;
  j["message"] = message;
  std::cerr << j.dump() << std::endl;
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Flexible multimodal person retrieval toolkit (toy scale)"};
  app.require_subcommand(1);
  Options o;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "configuration file");
    sub->add_option("--seed", o.seed, "overrides data.seed and train.seed");
    sub->add_option("--out", o.out, "output directory (generate: defaults to paths.dataset_dir)");
  };

  auto* config = app.add_subcommand("config", "print the effective configuration");
  common(config);
  auto* generate_cmd = app.add_subcommand("generate", "write the synthetic train/test splits");
  common(generate_cmd);
  auto* describe_cmd = app.add_subcommand("describe", "summarize dataset files");
  common(describe_cmd);
  describe_cmd->add_option("--data", o.data, "dataset directory (default: paths.dataset_dir)");
  auto* train = app.add_subcommand("train", "train and write checkpoint, loss CSV and run log");
  common(train);
  train->add_option("--data", o.data, "dataset directory (default: generate from config)");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  common(eval);
  eval->add_option("--checkpoint", o.checkpoint, "checkpoint file")->required();
  eval->add_option("--data", o.data, "dataset directory (default: generate from checkpoint config)");
  eval->add_option("--modes", o.modes, "comma-separated modes, e.g. t,s,ir,t+s+ir");
  auto* ablate = app.add_subcommand("ablate", "run an ablation table");
  common(ablate);
  ablate->add_option("kind", o.kind, "components|routing|fusion")->required();
  ablate->add_option("--data", o.data, "dataset directory");
  auto* sweep = app.add_subcommand("sweep", "run an expert-count or threshold sweep");
  common(sweep);
  sweep->add_option("kind", o.kind, "experts|threshold")->required();
  sweep->add_option("--data", o.data, "dataset directory");
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  common(gradcheck);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", 2, e.what());
  }

  try {
    if (*config) return cmd_config(o);
    if (*generate_cmd) return cmd_generate(o);
    if (*describe_cmd) return cmd_describe(o);
    if (*train) return cmd_train(o);
    if (*eval) return cmd_eval(o);
    if (*ablate) return cmd_ablate(o);
    if (*sweep) return cmd_sweep(o);
    if (*gradcheck) return cmd_gradcheck(o);
  } catch (const ConfigError& e) {
    return fail("config", 2, e.what());
  } catch (const CompatibilityError& e) {
    return fail("config", 2, e.what());
  } catch (const IoError& e) {
    return fail("io", 3, e.what());
  } catch (const FormatError& e) {
    return fail("io", 3, e.what());
  } catch (const NonFiniteError& e) {
    return fail("numeric", 4, e.what());
  } catch (const ad::NonDeterministicError& e) {
    return fail("numeric", 4, e.what());
  } catch (const std::exception& e) {
    return fail("internal", 1, e.what());
  }
  return 1;
}
