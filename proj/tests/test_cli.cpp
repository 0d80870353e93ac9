#include "test_util.hpp"

#include <abq/cli.hpp>

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <fstream>
#include <map>
#include <sstream>

using namespace abq;
using abq::testing::scratch_dir;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code;
  std::string out;
  std::string err;
};

CliResult run(std::vector<std::string> args) {
  args.insert(args.begin(), "abq");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string config(const char* name) { return (fs::path(ABQ_SOURCE_DIR) / "configs" / name).string(); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// "key value" lines printed by the subcommands.
std::map<std::string, std::string> fields(const std::string& text) {
  std::map<std::string, std::string> m;
  std::istringstream in(text);
  std::string k, v;
  while (in >> k >> v) m[k] = v;
  return m;
}

/// Trained synthetic model shared by the eval and quantize tests.
const fs::path& synthetic_run() {
  static const fs::path dir = [] {
    const fs::path d = scratch_dir("cli_synth");
    const auto r = run({"train", "--config", config("synthetic.json"), "--out", d.string()});
    EXPECT_EQ(r.code, 0) << r.err;
    return d;
  }();
  return dir;
}

double total_error(const std::string& quantize_output) {
  double sum = 0.0;
  std::istringstream in(quantize_output);
  std::string line;
  while (std::getline(in, line)) {
    const auto at = line.find(" error ");
    if (at != std::string::npos) sum += std::stod(line.substr(at + 7));
  }
  return sum;
}

}  // namespace

TEST(Cli, ToyRunWritesArtifacts) {
  const fs::path dir = scratch_dir("cli_toy");
  const auto r = run({"train", "--config", config("toy.json"), "--out", dir.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"config.json", "metrics.csv", "model.abq", "summary.json"}) EXPECT_TRUE(fs::exists(dir / f)) << f;
  const auto s = fields(r.out);
  EXPECT_EQ(std::stod(s.at("w_q")), 6.0);
  EXPECT_EQ(std::stod(s.at("final_alpha")), 1.0);
  const auto rows = read_metrics_csv(dir / "metrics.csv");
  EXPECT_EQ(rows.size(), 21u);
  EXPECT_EQ(slurp(dir / "metrics.csv").substr(0, std::string(kMetricsHeader).size()), kMetricsHeader);
  ExperimentConfig expected = load_config(config("toy.json"));
  expected.output_dir = dir.string();
  EXPECT_EQ(load_config(dir / "config.json"), expected);
}

TEST(Cli, OverridesAndSeedApply) {
  const fs::path dir = scratch_dir("cli_set");
  const auto r = run({"train", "--config", config("toy.json"), "--set", "steps=10", "--set", "t1=10", "--seed", "7",
                      "--out", dir.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const ExperimentConfig c = load_config(dir / "config.json");
  EXPECT_EQ(c.steps, 10);
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(read_metrics_csv(dir / "metrics.csv").size(), 11u);
}

TEST(Cli, Fp32SyntheticReachesHighAccuracy) {
  const fs::path dir = scratch_dir("cli_fp32");
  const auto r = run({"train", "--config", config("synthetic.json"), "--set", "gradient_mode=fp32", "--set",
                      "weight_bits=32", "--set", "act_bits=0", "--set", "first_layer_act_bits=0", "--out", dir.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_GT(std::stod(fields(r.out).at("final_acc_w")), 0.99);
}

TEST(Cli, RerunGivesByteIdenticalMetrics) {
  const fs::path a = scratch_dir("cli_det_a"), b = scratch_dir("cli_det_b");
  ASSERT_EQ(run({"train", "--config", config("synthetic.json"), "--set", "steps=200", "--set", "t0=50", "--set", "t1=150",
                 "--out", a.string()}).code, 0);
  ASSERT_EQ(run({"train", "--config", config("synthetic.json"), "--set", "steps=200", "--set", "t0=50", "--set", "t1=150",
                 "--out", b.string()}).code, 0);
  EXPECT_EQ(slurp(a / "metrics.csv"), slurp(b / "metrics.csv"));
  EXPECT_EQ(slurp(a / "model.abq"), slurp(b / "model.abq"));
}

TEST(Cli, EvalFloatAndIntPathsAgree) {
  const std::string ck = (synthetic_run() / "model.abq").string();
  const auto f = run({"eval", "--config", config("synthetic.json"), "--checkpoint", ck, "--path", "float"});
  const auto i = run({"eval", "--config", config("synthetic.json"), "--checkpoint", ck, "--path", "int"});
  ASSERT_EQ(f.code, 0) << f.err;
  ASSERT_EQ(i.code, 0) << i.err;
  EXPECT_GT(std::stod(fields(f.out).at("accuracy")), 0.99);
  EXPECT_EQ(fields(f.out).at("accuracy"), fields(i.out).at("accuracy"));
  EXPECT_EQ(run({"eval", "--config", config("synthetic.json"), "--checkpoint", ck, "--path", "double"}).code, 1);
}

TEST(Cli, QuantizeBitsAndGranularity) {
  const fs::path dir = synthetic_run();
  const std::string ck = (dir / "model.abq").string();
  EXPECT_EQ(run({"quantize", "--checkpoint", ck, "--bits", "3"}).code, kExitConfig);
  for (const char* bits : {"1", "4", "8"}) {
    const auto r = run({"quantize", "--checkpoint", ck, "--bits", bits, "--out", (dir / "q.abq").string()});
    ASSERT_EQ(r.code, 0) << bits << r.err;
    EXPECT_FALSE(load_checkpoint(dir / "q.abq").has_fp_weights);
  }
  const auto layer = run({"quantize", "--checkpoint", ck, "--bits", "4", "--out", (dir / "l.abq").string()});
  const auto chan = run({"quantize", "--checkpoint", ck, "--bits", "4", "--granularity", "per_channel", "--out",
                         (dir / "c.abq").string()});
  ASSERT_EQ(chan.code, 0) << chan.err;
  EXPECT_LE(total_error(chan.out), total_error(layer.out));
  EXPECT_EQ(load_checkpoint(dir / "c.abq").layers[0].gamma.size(), 32u);
  // A stripped checkpoint has nothing left to re-quantize.
  EXPECT_EQ(run({"quantize", "--checkpoint", (dir / "c.abq").string()}).code, kExitData);
}

TEST(Cli, ExportCurves) {
  const fs::path dir = synthetic_run();
  const auto r = run({"export-curves", "--metrics", (dir / "metrics.csv").string(), "--out", (dir / "c.svg").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string svg = slurp(dir / "c.svg");
  std::size_t series = 0;
  for (std::size_t at = svg.find("<polyline"); at != std::string::npos; at = svg.find("<polyline", at + 1)) ++series;
  EXPECT_EQ(series, 3u);
  const auto rows = read_metrics_csv(dir / "metrics.csv");
  EXPECT_EQ(rows.front().alpha, 0.0);
  EXPECT_EQ(rows.back().alpha, 1.0);

  std::ofstream(dir / "empty.csv") << "";
  EXPECT_EQ(run({"export-curves", "--metrics", (dir / "empty.csv").string()}).code, kExitData);
}

TEST(Cli, ErrorsMapToExitCodes) {
  EXPECT_EQ(run({}).code, kExitFailure);
  EXPECT_EQ(run({"fly"}).code, kExitFailure);
  EXPECT_EQ(run({"train", "--config", "/nonexistent.json"}).code, kExitConfig);
  EXPECT_EQ(run({"train", "--config", config("toy.json"), "--set", "t0=30"}).code, kExitConfig);
  EXPECT_EQ(run({"eval", "--config", config("synthetic.json"), "--checkpoint", "/nonexistent.abq"}).code, kExitData);
  const fs::path dir = scratch_dir("cli_err");
  EXPECT_EQ(run({"train", "--config", config("synthetic.json"), "--set", "learning_rate=1e30", "--out", dir.string()}).code,
            kExitNumeric);
}

TEST(Cli, BinaryRunsAsSubprocess) {
  const fs::path dir = scratch_dir("cli_proc");
  const std::string cmd = std::string(ABQ_CLI_PATH) + " train --config " + config("toy.json") + " --out " +
                          dir.string() + " > " + (dir / "stdout.txt").string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  ASSERT_TRUE(WIFEXITED(status));
  EXPECT_EQ(WEXITSTATUS(status), 0) << slurp(dir / "stdout.txt");
  EXPECT_NE(slurp(dir / "stdout.txt").find("w_q 6"), std::string::npos);

  const std::string bad = std::string(ABQ_CLI_PATH) + " eval --config " + config("synthetic.json") +
                          " --checkpoint /nonexistent.abq > /dev/null 2>&1";
  const int bad_status = std::system(bad.c_str());
  ASSERT_TRUE(WIFEXITED(bad_status));
  EXPECT_EQ(WEXITSTATUS(bad_status), kExitData);
}
