// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "flexireid/binary_io.hpp"

namespace fr = flexireid;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

// One scratch directory per test, so tests may run as separate processes.
fs::path work_dir() {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  const auto dir = fs::temp_directory_path() / "flexireid_test_cli" / info->name();
  static std::string prepared;
  if (prepared != dir.string()) {
    fs::remove_all(dir);
    fs::create_directories(dir);
    prepared = dir.string();
  }
  return dir;
}

Result run(const std::string& args) {
  const auto err_file = work_dir() / "stderr.txt";
  const std::string cmd = "cd '" + work_dir().string() + "' && '" FLEXIREID_CLI_PATH "' " + args +
                          " 2>'" + err_file.string() + "'";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = fr::read_file(err_file);
  return r;
}

std::string tiny_config() {
  const auto path = work_dir() / "tiny.txt";
  if (!fs::exists(path)) {
    fr::write_file_atomic(path,
                          "# small run for the command-line tests\n"
                          "data.num_identities = 8\n"
                          "data.test_identities = 3\n"
                          "train.batch_identities = 4\n"
                          "train.epochs = 2\n"
                          "paths.dataset_dir = tiny_data\n");
  }
  return path.string();
}

std::size_t lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST(Cli, ConfigPrintsHash) {
  const auto r = run("config --config " + tiny_config());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("data.num_identities = 8"), std::string::npos);
  EXPECT_NE(r.out.find("# config_hash = "), std::string::npos);
}

TEST(Cli, GenerateTrainEval) {
  const auto cfg = tiny_config();
  auto r = run("generate --config " + cfg);
  ASSERT_EQ(r.code, 0) << r.err;
  ASSERT_TRUE(fs::exists(work_dir() / "tiny_data" / "train.cirs"));
  const auto hash_line = fr::read_file(work_dir() / "tiny_data" / "config.txt");
  const auto at = hash_line.find("# config_hash = ");
  ASSERT_NE(at, std::string::npos);
  const std::string hash = hash_line.substr(at + 16, 16);
  EXPECT_NE(fr::read_file(work_dir() / "tiny_data" / "test.cirs").find("config_hash=" + hash), std::string::npos);

  r = run("describe --config " + cfg);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("split test: 3 identities"), std::string::npos) << r.out;

  r = run("train --config " + cfg + " --data tiny_data --out run_a");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto csv = fr::read_file(work_dir() / "run_a" / "loss.csv");
  EXPECT_EQ(lines(csv), 3u);
  EXPECT_NE(csv.find(hash), std::string::npos);
  const auto log = fr::read_file(work_dir() / "run_a" / "run.jsonl");
  ASSERT_EQ(lines(log), 2u);
  const auto first = nlohmann::json::parse(log.substr(0, log.find('\n')));
  EXPECT_EQ(first.at("epoch"), 1);
  EXPECT_EQ(first.at("config_hash"), hash);

  r = run("eval --checkpoint run_a/checkpoint.flxr --data tiny_data --out run_a");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(lines(r.out), 8u) << r.out;
  EXPECT_NE(r.out.find("t+s+ir,"), std::string::npos);
  EXPECT_EQ(lines(fr::read_file(work_dir() / "run_a" / "report.jsonl")), 8u);

  r = run("eval --checkpoint run_a/checkpoint.flxr --data tiny_data --modes t,s --out run_a");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(lines(r.out), 3u) << r.out;
}

TEST(Cli, TrainingTwiceGivesIdenticalOutputs) {
  const auto cfg = tiny_config();
  ASSERT_EQ(run("train --config " + cfg + " --seed 3 --out twice_a").code, 0);
  ASSERT_EQ(run("train --config " + cfg + " --seed 3 --out twice_b").code, 0);
  EXPECT_EQ(fr::read_file(work_dir() / "twice_a" / "loss.csv"), fr::read_file(work_dir() / "twice_b" / "loss.csv"));
  EXPECT_EQ(fr::read_file(work_dir() / "twice_a" / "checkpoint.flxr"),
            fr::read_file(work_dir() / "twice_b" / "checkpoint.flxr"));
}

TEST(Cli, GradcheckPasses) {
  const auto r = run("gradcheck --out gc");
  ASSERT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_NE(r.out.find("total_loss_end_to_end"), std::string::npos);
  EXPECT_TRUE(fs::exists(work_dir() / "gc" / "gradcheck.csv"));
}

TEST(Cli, ExitCodesAndErrorLine) {
  auto r = run("train --config missing.txt");
  EXPECT_EQ(r.code, 3);
  auto j = nlohmann::json::parse(r.err.substr(r.err.rfind('{')));
  EXPECT_EQ(j.at("exit_code"), 3);

  fr::write_file_atomic(work_dir() / "bad.txt", "train.epochs = 2\nmoe.thresold = 0.5\n");
  r = run("config --config bad.txt");
  EXPECT_EQ(r.code, 2);
  j = nlohmann::json::parse(r.err.substr(r.err.rfind('{')));
  EXPECT_NE(j.at("message").get<std::string>().find("line 2"), std::string::npos);

  EXPECT_EQ(run("ablate nonsense").code, 2);
  EXPECT_EQ(run("sweep tau").code, 2);
  EXPECT_EQ(run("no-such-command").code, 2);
  EXPECT_EQ(run("eval").code, 2);

  fr::write_file_atomic(work_dir() / "garbage.flxr", "not a checkpoint");
  EXPECT_EQ(run("eval --checkpoint garbage.flxr").code, 3);
}

TEST(Cli, RefusesDatasetWithDifferentGrid) {
  const auto cfg = tiny_config();
  ASSERT_EQ(run("generate --config " + cfg + " --out grid_data").code, 0);
  fr::write_file_atomic(work_dir() / "grid.txt", fr::read_file(cfg) + "encoder.patch_rows = 4\n");
  const auto r = run("train --config grid.txt --data grid_data --out grid_run");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("encoder expects"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(work_dir() / "grid_run" / "checkpoint.flxr"));
}
