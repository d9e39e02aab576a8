// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>
#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

struct Result {
  int status = -1;
  std::string output;
};

Result run(const std::string& args) {
  const std::string command = std::string(SELECTROSCOPE_CLI) + " " + args + " 2>&1";
  Result r;
  FILE* pipe = popen(command.c_str(), "r");
  if (pipe == nullptr) return r;
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), static_cast<int>(buf.size()), pipe) != nullptr) r.output += buf.data();
  const int raw = pclose(pipe);
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return r;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

std::vector<std::string> lines(const fs::path& path) {
  std::ifstream in(path);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  for (std::string cell; std::getline(ss, cell, ',');) out.push_back(cell);
  return out;
}

constexpr const char* kTinyConfig = R"([architecture]
blocks_per_module = 1, 1
channels_per_module = 4, 6
strides_per_module = 1, 2
input_shape = 1, 8, 8
num_classes = 4

[data]
train_per_class = 12
eval_per_class = 6
template_cell = 2
noise_sigma = 0.1

[optimizer]
learning_rate = 0.02
batch_size = 8
epochs = 1

[run]
seed = 3
sub_epoch_every = 0
)";

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / "selectroscope_test_cli";
    fs::remove_all(root_);
    fs::create_directories(root_);
    std::ofstream(root_ / "tiny.ini") << kTinyConfig;
    train_ = run("train --config " + (root_ / "tiny.ini").string() + " --out " + (root_ / "run").string());
  }

  static fs::path config() { return root_ / "tiny.ini"; }
  static fs::path run_dir() { return root_ / "run"; }
  static fs::path ckpts() { return root_ / "run" / "checkpoints"; }

  static inline fs::path root_;
  static inline Result train_;
};

}  // namespace

TEST_F(Cli, MissingConfigIsUsageError) {
  const Result r = run("train --config /no/such/file.ini --out " + (root_ / "never").string());
  EXPECT_EQ(r.status, 2);
  EXPECT_NE(r.output.find("/no/such/file.ini"), std::string::npos) << r.output;
}

TEST_F(Cli, UnknownSubcommandOrMissingOptionIsUsageError) {
  EXPECT_EQ(run("frobnicate").status, 2);
  EXPECT_EQ(run("ablate --module 0").status, 2);
}

TEST_F(Cli, TrainWritesRecordsAndCheckpoints) {
  ASSERT_EQ(train_.status, 0) << train_.output;
  EXPECT_EQ(lines(run_dir() / "metrics.jsonl").size(), 2u);
  EXPECT_TRUE(fs::exists(ckpts() / "ckpt_e000_b00000.selckpt"));
  EXPECT_TRUE(fs::exists(ckpts() / "ckpt_e001_b00000.selckpt"));
  EXPECT_TRUE(fs::exists(run_dir() / "si" / "si_e1_b0.csv"));
}

TEST_F(Cli, RerunIsByteIdentical) {
  ASSERT_EQ(train_.status, 0);
  const Result again = run("train --config " + config().string() + " --out " + (root_ / "run2").string());
  ASSERT_EQ(again.status, 0) << again.output;
  EXPECT_EQ(slurp(root_ / "run2" / "metrics.jsonl"), slurp(run_dir() / "metrics.jsonl"));
  EXPECT_EQ(slurp(root_ / "run2" / "checkpoints" / "ckpt_e001_b00000.selckpt"),
            slurp(ckpts() / "ckpt_e001_b00000.selckpt"));
}

TEST_F(Cli, ResumeFromInitialCheckpointMatches) {
  ASSERT_EQ(train_.status, 0);
  const fs::path out = root_ / "resumed";
  fs::create_directories(out);
  fs::copy_file(run_dir() / "metrics.jsonl", out / "metrics.jsonl", fs::copy_options::overwrite_existing);
  const Result r = run("train --config " + config().string() + " --out " + out.string() + " --resume " +
                       (ckpts() / "ckpt_e000_b00000.selckpt").string());
  ASSERT_EQ(r.status, 0) << r.output;
  EXPECT_EQ(slurp(out / "metrics.jsonl"), slurp(run_dir() / "metrics.jsonl"));
}

TEST_F(Cli, AblateSelectiveWritesOneCurve) {
  ASSERT_EQ(train_.status, 0);
  const fs::path out = root_ / "ablate_sel";
  const Result r = run("ablate --checkpoints " + (ckpts() / "ckpt_e001_b00000.selckpt").string() +
                       " --module 0 --ordering selective --steps 4 --out " + out.string());
  ASSERT_EQ(r.status, 0) << r.output;
  std::size_t curve_files = 0;
  for (const auto& e : fs::directory_iterator(out / "curves")) {
    ++curve_files;
    const auto rows = lines(e.path());
    ASSERT_EQ(rows.size(), 1u + 5u);
    EXPECT_EQ(rows[0], "checkpoint_id,epoch,batch_index,module,ordering,seed,step_fraction,raw_acc,norm_acc");
    EXPECT_EQ(std::stod(split(rows[1])[8]), 100.0);
    EXPECT_EQ(std::stod(split(rows[1])[6]), 0.0);
    EXPECT_EQ(std::stod(split(rows.back())[6]), 1.0);
  }
  EXPECT_EQ(curve_files, 1u);
  const auto auc = lines(out / "auc_m0_selective.csv");
  ASSERT_EQ(auc.size(), 2u);
  EXPECT_EQ(auc[0], "epoch,module,ordering,auc,ci_low,ci_high");
  EXPECT_EQ(split(auc[1])[2], "selective");
}

TEST_F(Cli, AblateRandomReportsInterval) {
  ASSERT_EQ(train_.status, 0);
  const fs::path out = root_ / "ablate_rand";
  const Result r = run("ablate --checkpoints '" + (ckpts() / "ckpt_e001*.selckpt").string() +
                       "' --module 1 --ordering random --seeds 3 --steps 3 --out " + out.string());
  ASSERT_EQ(r.status, 0) << r.output;
  EXPECT_TRUE(fs::exists(out / "curves" / "ckpt_e001_b00000_m1_random_s2.csv"));
  const auto auc = lines(out / "auc_m1_random.csv");
  ASSERT_EQ(auc.size(), 2u);
  const auto cells = split(auc[1]);
  ASSERT_EQ(cells.size(), 6u);
  const double value = std::stod(cells[3]);
  EXPECT_LE(std::stod(cells[4]), value);
  EXPECT_GE(std::stod(cells[5]), value);
}

TEST_F(Cli, AblateRejectsBadArguments) {
  ASSERT_EQ(train_.status, 0);
  const std::string ckpt = (ckpts() / "ckpt_e001_b00000.selckpt").string();
  EXPECT_EQ(run("ablate --checkpoints " + ckpt + " --module 5 --out " + (root_ / "x").string()).status, 2);
  EXPECT_EQ(run("ablate --checkpoints " + ckpt + " --module 0 --ordering best --out " + (root_ / "x").string()).status,
            2);
  EXPECT_EQ(run("ablate --checkpoints " + ckpt + " --module 0 --steps 0 --out " + (root_ / "x").string()).status, 2);
  const Result none = run("ablate --checkpoints '" + (root_ / "nothing*.selckpt").string() + "' --module 0 --out " +
                          (root_ / "x").string());
  EXPECT_EQ(none.status, 2);
  EXPECT_NE(none.output.find("no checkpoints"), std::string::npos);
}

TEST_F(Cli, SiHasOneRowPerUnit) {
  ASSERT_EQ(train_.status, 0);
  const fs::path out = root_ / "si.csv";
  const Result r = run("si --checkpoints " + (ckpts() / "ckpt_e001_b00000.selckpt").string() + " --out " + out.string());
  ASSERT_EQ(r.status, 0) << r.output;
  EXPECT_EQ(lines(out).size(), 1u + 4u + 6u);
}

TEST_F(Cli, CkaListsEachPairOnce) {
  ASSERT_EQ(train_.status, 0);
  const fs::path out = root_ / "cka.csv";
  const Result r = run("cka --checkpoints " + ckpts().string() + " --out " + out.string());
  ASSERT_EQ(r.status, 0) << r.output;
  const auto rows = lines(out);
  ASSERT_FALSE(rows.empty());
  EXPECT_EQ(rows[0], "epoch,tap_a,tap_b,cka");
  // Two checkpoints with two taps each.
  EXPECT_EQ(rows.size(), 1u + 2u * 1u);
}

TEST_F(Cli, BalanceCountsEvalSet) {
  ASSERT_EQ(train_.status, 0);
  const fs::path out = root_ / "balance.csv";
  const Result r = run("balance --checkpoints " + ckpts().string() + " --k 2 --out " + out.string());
  ASSERT_EQ(r.status, 0) << r.output;
  const auto rows = lines(out);
  ASSERT_EQ(rows.size(), 3u);
  const auto cells = split(rows[1]);
  ASSERT_EQ(cells.size(), 6u + 4u);
  int total = 0;
  for (std::size_t i = 6; i < cells.size(); ++i) total += std::stoi(cells[i]);
  EXPECT_EQ(total, 24);
}

TEST_F(Cli, ReportProducesTables) {
  ASSERT_EQ(train_.status, 0);
  const fs::path out = root_ / "report";
  const Result r = run("report --run " + run_dir().string() + " --seeds 2 --steps 2 --out " + out.string());
  ASSERT_EQ(r.status, 0) << r.output;
  for (const char* name : {"accuracy_trace.csv", "selectivity_vs_epoch.csv", "auc_vs_epoch.csv", "cka_vs_epoch.csv"}) {
    EXPECT_GE(lines(out / name).size(), 2u) << name;
  }
}

TEST_F(Cli, ReportOnEmptyDirectoryIsUsageError) {
  fs::create_directories(root_ / "empty");
  EXPECT_EQ(run("report --run " + (root_ / "empty").string() + " --out " + (root_ / "r").string()).status, 2);
}
