#include "twohop/harness.hpp"

#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <fstream>
#include <sstream>

using namespace twohop;
using namespace twohop::harness;

namespace {

class HarnessTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / ("twohop_" + std::to_string(::getpid()) + "_" + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  int cli(const std::string& args) const {
    const std::string cmd = std::string(TWOHOP_CLI_PATH) + " " + args + " >" + (dir_ / "stdout.txt").string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  fs::path dir_;
};

int count_lines(const fs::path& p) {
  std::ifstream in(p);
  int n = 0;
  for (std::string line; std::getline(in, line);) ++n;
  return n;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string part; std::getline(ss, part, sep);) out.push_back(part);
  return out;
}

}  // namespace

TEST_F(HarnessTest, GenIsByteIdenticalAcrossRuns) {
  ASSERT_EQ(cli("gen --n 20 --complexity 1 --out " + (dir_ / "a").string()), 0);
  ASSERT_EQ(cli("gen --n 20 --complexity 1 --out " + (dir_ / "b").string()), 0);
  EXPECT_EQ(read_text(dir_ / "a" / "dataset.json"), read_text(dir_ / "b" / "dataset.json"));
  const auto ds = load_dataset(dir_ / "a" / "dataset.json");
  EXPECT_EQ(ds.train.size(), 60u);
  EXPECT_EQ(ds.test_ood.size(), 20u);
  EXPECT_TRUE(fs::exists(dir_ / "a" / "meta.json"));
}

TEST_F(HarnessTest, InvalidInputsExitOne) {
  EXPECT_EQ(cli("gen --n 1 --out " + (dir_ / "x").string()), 1);
  EXPECT_EQ(cli("theory --n 1 --program id --out " + (dir_ / "y").string()), 1);
  EXPECT_EQ(cli("no-such-command"), 1);
  write_text(dir_ / "bad.json", "{ not json");
  EXPECT_EQ(cli("train --config " + (dir_ / "bad.json").string()), 1);
  write_text(dir_ / "unknown.json", R"({"n": 5, "program": "id", "colour": "blue"})");
  EXPECT_EQ(cli("theory --config " + (dir_ / "unknown.json").string()), 1);
}

TEST_F(HarnessTest, TheoryWritesReport) {
  ASSERT_EQ(cli("theory --n 5 --program noid --out " + dir_.string()), 0);
  const auto j = read_json(dir_ / "report.json");
  EXPECT_EQ(j["program"], "noid");
  for (const auto& q : j["margins"]) EXPECT_LT(q.get<double>(), 0.0);
}

TEST_F(HarnessTest, TrainThenAnalyze) {
  ASSERT_EQ(cli("gen --n 6 --complexity 2 --out " + (dir_ / "data").string()), 0);
  ASSERT_EQ(cli("train --dataset " + (dir_ / "data" / "dataset.json").string() + " --max-steps 0 --out " +
                (dir_ / "run").string()),
            0);
  EXPECT_EQ(count_lines(dir_ / "run" / "trace.csv"), 2);
  ASSERT_EQ(cli("analyze --checkpoint " + (dir_ / "run" / "checkpoint.bin").string() + " --dataset " +
                (dir_ / "data" / "dataset.json").string() + " --out " + (dir_ / "an").string()),
            0);
  // |V_in| = N + CN + C + 1 rows below a header of 1 + |V_out| columns.
  const auto text = read_text(dir_ / "an" / "logits.csv");
  const auto lines = split(text, '\n');
  ASSERT_EQ(lines.size(), 1u + 6 + 12 + 2 + 1);
  EXPECT_EQ(split(lines[0], ',').size(), 1u + 12 + 6);
  EXPECT_TRUE(read_json(dir_ / "an" / "patterns.json").contains("bridge_self_peak"));

  ASSERT_EQ(cli("gen --n 5 --complexity 2 --out " + (dir_ / "other").string()), 0);
  EXPECT_EQ(cli("analyze --checkpoint " + (dir_ / "run" / "checkpoint.bin").string() + " --dataset " +
                (dir_ / "other" / "dataset.json").string() + " --out " + (dir_ / "an2").string()),
            1);
}

TEST_F(HarnessTest, SweepRowsAndAggregates) {
  SweepConfig c;
  c.n_entities = 6;
  c.emb.max_steps = 200;
  c.out = dir_.string();
  const auto res = cmd_sweep(c);
  EXPECT_EQ(res.rows.size(), 9u);
  EXPECT_EQ(res.aggregates.size(), 3u);
  const auto lines = split(read_text(res.csv), '\n');
  ASSERT_EQ(lines.size(), 1u + 9 + 3);
  EXPECT_EQ(lines[0], kResultsHeader);
  EXPECT_NE(lines.back().find("agg"), std::string::npos);
  EXPECT_TRUE(read_json(dir_ / "meta.json")["details"]["failures"].empty());
}

TEST_F(HarnessTest, SweepIsReproducibleApartFromTiming) {
  SweepConfig c;
  c.n_entities = 4;
  c.complexities = {1};
  c.seeds = {0, 1};
  c.emb.max_steps = 50;
  c.out = (dir_ / "a").string();
  const auto a = cmd_sweep(c);
  c.out = (dir_ / "b").string();
  const auto b = cmd_sweep(c);
  ASSERT_EQ(a.rows.size(), b.rows.size());
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    EXPECT_EQ(a.rows[i].ood_acc, b.rows[i].ood_acc);
    EXPECT_EQ(a.rows[i].train_acc, b.rows[i].train_acc);
    EXPECT_EQ(a.rows[i].steps, b.rows[i].steps);
  }
}

TEST_F(HarnessTest, FailedTrialsAreRecordedNotThrown) {
  SweepConfig c;
  c.n_entities = 4;
  c.complexities = {1};
  c.seeds = {0};
  c.emb.learning_rate = 1e6;
  c.emb.init = InitPolicy::small(0.6);
  c.out = dir_.string();
  try {
    cmd_sweep(c);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Diverged);
  }
  EXPECT_EQ(read_json(dir_ / "meta.json")["details"]["failures"].size(), 1u);
}

TEST(Config, UnknownKeysRejected) {
  EXPECT_THROW(run_config_from_json(Json{{"epochs", 3}}), Error);
  EXPECT_THROW(run_config_from_json(Json{{"model", {{"kind", "embmlp"}, {"lr", 0.1}}}}), Error);
  EXPECT_THROW(sweep_config_from_json(Json{{"variant", {"embmlp_id"}}}), Error);
  EXPECT_THROW(theory_config_from_json(Json{{"size", 4}}), Error);
}

TEST(Config, RunDocumentParses) {
  const auto rc = run_config_from_json(Json::parse(R"({
    "dataset": {"n_entities": 8, "complexity": 2},
    "model": {"kind": "nanoformer", "init": {"kind": "small", "gamma": 1.0}, "max_steps": 10, "n_layers": 1},
    "out": "x", "checkpoints_every": 5})"));
  EXPECT_EQ(rc.model, ModelKind::Nanoformer);
  EXPECT_EQ(rc.dataset.complexity, 2);
  EXPECT_EQ(rc.tf.n_layers, 1);
  EXPECT_EQ(rc.tf_train.max_steps, 10);
  EXPECT_EQ(rc.tf.init.kind, InitPolicy::Kind::Small);
  EXPECT_EQ(rc.checkpoints_every, 5);
}

TEST(Config, VariantNamesRoundTrip) {
  for (auto v : {Variant::EmbMlpId, Variant::EmbMlpNoId, Variant::TfStandard, Variant::TfSmallInit,
                 Variant::TfWeightDecay})
    EXPECT_EQ(variant_from_string(to_string(v)), v);
  EXPECT_THROW(variant_from_string("mlp"), Error);
}

TEST(Aggregates, SampleStandardDeviation) {
  std::vector<ResultRow> rows(3);
  rows[0].ood_acc = 1.0;
  rows[1].ood_acc = 0.5;
  rows[1].seed = 1;
  rows[2].ood_acc = 0.0;
  rows[2].seed = 2;
  const auto agg = aggregate(rows);
  ASSERT_EQ(agg.size(), 1u);
  EXPECT_DOUBLE_EQ(agg[0].ood_mean, 0.5);
  EXPECT_DOUBLE_EQ(agg[0].ood_sd, 0.5);
}
