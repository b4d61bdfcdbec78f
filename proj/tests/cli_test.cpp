#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>
#include <unistd.h>

#include "xutt/io.hpp"

namespace xutt {
namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(XUTT_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    // ctest runs each case in its own process, possibly concurrently
    dir_ = fs::temp_directory_path() / ("xutt_cli_test_" + std::to_string(::getpid()));
    fs::remove_all(dir_);
    ASSERT_EQ(run("fixture --seed 3 --spec '{\"n_conversations\":2,\"utterances_per_conv\":3,\"frames\":24}' --out-dir " +
                  (dir_ / "fx").string()),
              0);
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }

  static std::string p(const std::string& rel) { return (dir_ / rel).string(); }
  static std::string corpus() { return "--manifest " + p("fx/manifest.jsonl") + " --weights " + p("fx/weights.tlmw"); }

  static fs::path dir_;
};

fs::path Cli::dir_;

TEST_F(Cli, DecodeThenScore) {
  ASSERT_EQ(run("decode " + corpus() + " --context-tokens 50 --out " + p("hyp.jsonl")), 0);
  ASSERT_EQ(run("wer --hyp " + p("hyp.jsonl") + " --ref " + p("fx/manifest.jsonl") + " --out " + p("wer.json")), 0);
  const auto report = Json::parse(detail::read_file(p("wer.json")));
  EXPECT_EQ(report["metric"], "WER");
  EXPECT_GE(report["value"].get<double>(), 0.0);
}

TEST_F(Cli, DecodeOutputIndependentOfThreadCount) {
  ASSERT_EQ(run("--threads 1 decode " + corpus() + " --context-tokens 20 --out " + p("t1.jsonl")), 0);
  ASSERT_EQ(run("--threads 3 decode " + corpus() + " --context-tokens 20 --out " + p("t3.jsonl")), 0);
  EXPECT_EQ(detail::read_file(p("t1.jsonl")), detail::read_file(p("t3.jsonl")));
}

TEST_F(Cli, GroundTruthHistoryAndGapReset) {
  EXPECT_EQ(run("decode " + corpus() + " --context-tokens 50 --history gth --max-gap-seconds 0.5 --out " + p("g.jsonl")),
            0);
}

TEST_F(Cli, RescoreWritesNBestLists) {
  ASSERT_EQ(run("rescore " + corpus() + " --width 20 --nbest 5 --context-tokens 50 --out " + p("nb.jsonl")), 0);
  std::ifstream in(p("nb.jsonl"));
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) {
    const auto j = Json::parse(line);
    EXPECT_LE(j["hyps"].size(), 5u);
    for (const auto& h : j["hyps"]) {
      EXPECT_TRUE(h.contains("first_pass"));
      EXPECT_TRUE(h["tlm"].is_number());
      EXPECT_TRUE(h["final"].is_number());
    }
    ++lines;
  }
  EXPECT_EQ(lines, 6u);
}

TEST_F(Cli, PerplexityOverSeveralContexts) {
  ASSERT_EQ(run("ppl " + corpus() + " --context-tokens 0 50 100 --out " + p("ppl.json")), 0);
  const auto j = Json::parse(detail::read_file(p("ppl.json")));
  ASSERT_EQ(j.size(), 3u);
  EXPECT_EQ(j[0]["count"], j[2]["count"]);
}

TEST_F(Cli, TuneWritesTrialLog) {
  ASSERT_EQ(run("tune --mode fusion " + corpus() + " --trials 3 --seed 1 --beam-width 4 --out " + p("trials.jsonl")), 0);
  ASSERT_EQ(run("tune --mode fusion " + corpus() + " --trials 3 --seed 1 --beam-width 4 --out " + p("trials2.jsonl")), 0);
  EXPECT_EQ(detail::read_file(p("trials.jsonl")), detail::read_file(p("trials2.jsonl")));
  ASSERT_EQ(run("tune --mode rescore " + corpus() + " --trials 2 --width 10 --nbest 4 --out " + p("rt.jsonl")), 0);
}

TEST_F(Cli, BenchToyWeights) {
  ASSERT_EQ(run("bench --weights " + p("fx/weights.tlmw") + " --batch 2 --cache 16 --out " + p("bench.json")), 0);
  const auto j = Json::parse(detail::read_file(p("bench.json")));
  ASSERT_EQ(j.size(), 2u);
  EXPECT_EQ(j[1]["cache_bytes_per_token_per_layer"].get<std::size_t>() /
                j[0]["cache_bytes_per_token_per_layer"].get<std::size_t>(),
            4u);
}

TEST_F(Cli, InputErrorsExitWithTwo) {
  EXPECT_EQ(run("decode --manifest " + p("missing.jsonl") + " --weights " + p("fx/weights.tlmw")), 2);
  EXPECT_EQ(run("frobnicate"), 2);
  EXPECT_EQ(run("decode " + corpus() + " --history sideways"), 2);
  // corrupt one posterior
  const auto post = p("fx2/posteriors/conv0-u1.post");
  fs::copy(dir_ / "fx", dir_ / "fx2", fs::copy_options::recursive | fs::copy_options::overwrite_existing);
  auto bytes = detail::read_file(post);
  bytes.resize(bytes.size() - 8);
  detail::write_file(post, bytes);
  EXPECT_EQ(run("decode --manifest " + p("fx2/manifest.jsonl") + " --weights " + p("fx/weights.tlmw")), 2);
  EXPECT_EQ(run("fixture --spec '{\"frames\": 1}' --out-dir " + p("bad")), 2);
}

TEST(ExitCodes, ErrorFamilies) {
  EXPECT_EQ(exit_code_for(InputError("x")), 2);
  EXPECT_EQ(exit_code_for(FormatError("x")), 2);
  EXPECT_EQ(exit_code_for(ValidationError("x")), 2);
  EXPECT_EQ(exit_code_for(SchemaError("x")), 2);
  EXPECT_EQ(exit_code_for(SearchError("x")), 3);
  EXPECT_EQ(exit_code_for(StateError("x")), 3);
}

}  // namespace
}  // namespace xutt
