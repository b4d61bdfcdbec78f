#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "xutt/fixture.hpp"
#include "xutt/io.hpp"
#include "xutt/vocab.hpp"

namespace xutt {
namespace {

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() /
            ("xutt_io_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
             ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

TEST(Normalize, LowerCasesAndStripsPunctuation) {
  EXPECT_EQ(normalize_text("Hello, World!"), "hello world");
  EXPECT_EQ(normalize_text("  it 's   fine. "), "it's fine");
  EXPECT_EQ(normalize_text("Don't STOP"), "don't stop");
  EXPECT_EQ(normalize_text("...?!"), "");
}

TEST(VocabTest, SpecialIdsFollowContentUnits) {
  const auto v = Vocab::synthetic(14);
  EXPECT_EQ(v.content_size(), 14u);
  EXPECT_EQ(v.blank(), 14u);
  EXPECT_EQ(v.bos(), 14u);
  EXPECT_EQ(v.sep(), 15u);
  EXPECT_EQ(v.am_size(), 15u);
  EXPECT_EQ(v.lm_size(), 16u);
  EXPECT_NO_THROW(v.check_model(ModelConfig::toy(16)));
  EXPECT_THROW(v.check_model(ModelConfig::toy(18)), SchemaError);
}

TEST(VocabTest, SyntheticUnitsRoundTrip) {
  const auto v = Vocab::synthetic(300);
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<TokenId> ids(rng.below(12));
    for (auto& t : ids) t = static_cast<TokenId>(rng.below(300));
    EXPECT_EQ(v.encode(v.decode(ids)), ids);
  }
}

TEST(VocabTest, SubwordSegmentation) {
  const Vocab v({"\xe2\x96\x81" "a", "\xe2\x96\x81" "ab", "c", "\xe2\x96\x81" "b"});
  EXPECT_EQ(v.encode("abc b a"), (std::vector<TokenId>{1, 2, 3, 0}));
  EXPECT_EQ(v.decode(std::vector<TokenId>{1, 2, 3, 0}), "abc b a");
  EXPECT_THROW(v.encode("x"), InputError);
  EXPECT_THROW(v.unit(4), VocabError);
  EXPECT_THROW(Vocab({"a", "a"}), InputError);
}

TEST(Weights, SaveLoadIsBitExact) {
  TempDir dir;
  const auto cfg = ModelConfig::toy();
  const auto w = generate_weights(0, cfg);
  const auto vocab = Vocab::synthetic(14);
  save_weights(dir.path() / "w.tlmw", cfg, w, &vocab);
  const auto m = load_weights(dir.path() / "w.tlmw");
  EXPECT_EQ(m.config, cfg);
  EXPECT_EQ(m.weights, w);
  ASSERT_TRUE(m.vocab);
  EXPECT_EQ(m.vocab->units(), vocab.units());
}

TEST(Weights, TruncatedPayloadNamesTensor) {
  const auto cfg = ModelConfig::toy();
  auto bytes = serialize_weights(cfg, generate_weights(0, cfg));
  bytes.resize(bytes.size() - 10);
  try {
    parse_weights(bytes);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("initial.beta"), std::string::npos) << e.what();
  }
}

TEST(Weights, BadMagic) {
  const auto cfg = ModelConfig::toy();
  auto bytes = serialize_weights(cfg, generate_weights(0, cfg));
  bytes[0] = 'X';
  EXPECT_THROW(parse_weights(bytes), FormatError);
  EXPECT_THROW(parse_weights("TLM"), FormatError);
}

TEST(Weights, ConfigVocabDisagreeingWithEmbedding) {
  const auto cfg = ModelConfig::toy();
  const auto bytes = serialize_weights(cfg, generate_weights(0, cfg));
  const auto c = detail::unpack(bytes, kWeightsMagic, "w");
  Json h = c.header;
  h["config"]["vocab_size"] = 18;
  const auto bad = detail::pack(kWeightsMagic, h, std::string(c.payload));
  try {
    parse_weights(bad);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("embedding"), std::string::npos) << e.what();
  }
}

TEST(Weights, MissingConfigField) {
  const auto cfg = ModelConfig::toy();
  const auto bytes = serialize_weights(cfg, generate_weights(0, cfg));
  const auto c = detail::unpack(bytes, kWeightsMagic, "w");
  Json h = c.header;
  h["config"].erase("head_dim");
  EXPECT_THROW(parse_weights(detail::pack(kWeightsMagic, h, std::string(c.payload))), FormatError);
}

AMPosterior uniform_posterior(std::size_t T, std::size_t V) {
  AMPosterior p;
  p.utterance_id = "u1";
  p.blank_id = static_cast<TokenId>(V - 1);
  p.log_probs = Matrix(T, V);
  for (float& x : p.log_probs.data()) x = static_cast<float>(std::log(1.0 / static_cast<double>(V)));
  return p;
}

TEST(Posteriors, UniformRowLoads) {
  const auto p = parse_posterior(serialize_posterior(uniform_posterior(1, 4)));
  EXPECT_NEAR(p.log_probs(0, 2), std::log(0.25), 1e-7);
  EXPECT_EQ(p.blank_id, 3u);
}

TEST(Posteriors, RoundTripIsBitExact) {
  Rng rng(2);
  AMPosterior p = uniform_posterior(7, 5);
  for (std::size_t t = 0; t < 7; ++t) {
    std::vector<float> z(5);
    for (auto& x : z) x = static_cast<float>(rng.normal());
    const auto lp = log_softmax(z);
    for (std::size_t v = 0; v < 5; ++v) p.log_probs(t, v) = static_cast<float>(lp[v]);
  }
  const auto q = parse_posterior(serialize_posterior(p));
  EXPECT_EQ(q.log_probs, p.log_probs);
  EXPECT_EQ(q.utterance_id, p.utterance_id);
}

TEST(Posteriors, HeaderFrameCountMismatch) {
  auto bytes = serialize_posterior(uniform_posterior(3, 4));
  bytes.resize(bytes.size() - 16);
  EXPECT_THROW(parse_posterior(bytes), FormatError);
}

TEST(Posteriors, UnnormalizedRowNamesFrame) {
  auto p = uniform_posterior(4, 4);
  p.log_probs(2, 0) = 0.0f;
  try {
    parse_posterior(serialize_posterior(p));
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("frame 2"), std::string::npos) << e.what();
  }
}

TEST(Posteriors, StorageRoundingTolerated) {
  auto p = uniform_posterior(2, 4);
  p.log_probs(1, 0) += 2e-4f;
  EXPECT_NO_THROW(parse_posterior(serialize_posterior(p)));
}

TEST(ManifestTest, GroupsAndSortsByStartTime) {
  const std::string text =
      R"({"conversation_id":"b","utterance_id":"b2","start_s":5,"end_s":6,"posterior":"b2.post"})"
      "\n"
      R"({"conversation_id":"a","utterance_id":"a1","start_s":0,"end_s":1,"posterior":"a1.post","reference":"hi"})"
      "\n\n"
      R"({"conversation_id":"b","utterance_id":"b1","start_s":1,"end_s":2,"posterior":"b1.post"})"
      "\n";
  const auto m = parse_manifest(text);
  ASSERT_EQ(m.size(), 2u);
  EXPECT_EQ(m[0].conversation_id, "b");
  EXPECT_EQ(m[0].utterances[0].utterance_id, "b1");
  EXPECT_EQ(m[0].utterances[1].utterance_id, "b2");
  EXPECT_EQ(m[1].utterances[0].reference, "hi");
  EXPECT_FALSE(m[0].utterances[0].reference);
}

TEST(ManifestTest, SerializeParseRoundTrip) {
  std::vector<ConversationManifest> m{{"c1", {{"u1", 0.5, 1.25, "p/u1.post", "hello there"}, {"u2", 2, 3, "u2.post", std::nullopt}}},
                                      {"c0", {{"x", 0, 0, "x.post", ""}}}};
  EXPECT_EQ(parse_manifest(serialize_manifest(m)), m);
}

TEST(ManifestTest, Errors) {
  EXPECT_THROW(parse_manifest("{not json}\n"), FormatError);
  EXPECT_THROW(parse_manifest(R"({"conversation_id":"a","utterance_id":"u","start_s":0,"end_s":1})"), FormatError);
  EXPECT_THROW(
      parse_manifest(R"({"conversation_id":"a","utterance_id":"u","start_s":2,"end_s":1,"posterior":"p"})"),
      InputError);
  EXPECT_THROW(parse_manifest(R"({"conversation_id":"a","utterance_id":"u","start_s":0,"end_s":1,"posterior":"p"})"
                              "\n"
                              R"({"conversation_id":"a","utterance_id":"u","start_s":1,"end_s":2,"posterior":"p"})"),
               InputError);
}

FixtureSpec small_spec() {
  FixtureSpec s;
  s.n_conversations = 2;
  s.utterances_per_conv = 3;
  s.frames = 20;
  return s;
}

TEST(FixtureTest, NoiselessPosteriorsDecodeToReferencesGreedily) {
  auto spec = small_spec();
  spec.noise = 0.0;
  const auto fx = make_fixture(3, spec);
  for (const auto& conv : fx.conversations) {
    for (const auto& u : conv) {
      EXPECT_FALSE(u.tokens.empty());
      EXPECT_EQ(greedy_decode(u.posterior), u.tokens);
      EXPECT_EQ(u.posterior.frames(), spec.frames);
      EXPECT_NO_THROW(u.posterior.validate());
    }
  }
}

TEST(FixtureTest, FullBlankRateDecodesEmpty) {
  auto spec = small_spec();
  spec.noise = 0.0;
  spec.blank_rate = 1.0;
  const auto fx = make_fixture(4, spec);
  for (const auto& conv : fx.conversations) {
    for (const auto& u : conv) EXPECT_TRUE(greedy_decode(u.posterior).empty());
  }
}

TEST(FixtureTest, SameSeedWritesIdenticalFiles) {
  TempDir a, b;
  const auto spec = small_spec();
  write_fixture(make_fixture(5, spec), spec, a.path() / "fx");
  write_fixture(make_fixture(5, spec), spec, b.path() / "fx");
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a.path() / "fx")) {
    if (!e.is_regular_file()) continue;
    ++files;
    const auto rel = fs::relative(e.path(), a.path());
    EXPECT_EQ(detail::read_file(e.path()), detail::read_file(b.path() / rel)) << rel;
  }
  EXPECT_EQ(files, 2u * 3u + 3u);
  const auto other = make_fixture(6, spec);
  EXPECT_NE(other.conversations[0][0].tokens, make_fixture(5, spec).conversations[0][0].tokens);
}

TEST(FixtureTest, WrittenCorpusLoadsBack) {
  TempDir dir;
  const auto spec = small_spec();
  const auto fx = make_fixture(7, spec);
  write_fixture(fx, spec, dir.path());
  const auto model = load_weights(dir.path() / "weights.tlmw");
  EXPECT_EQ(model.weights, fx.weights);
  const auto vocab = vocab_for(model);
  const auto manifest = load_manifest(dir.path() / "manifest.jsonl");
  const auto convs = load_conversations(manifest, vocab, 2);
  ASSERT_EQ(convs.size(), fx.conversations.size());
  for (std::size_t c = 0; c < convs.size(); ++c) {
    for (std::size_t i = 0; i < convs[c].size(); ++i) {
      EXPECT_EQ(convs[c][i].reference, fx.conversations[c][i].tokens);
      EXPECT_EQ(convs[c][i].posterior.log_probs, fx.conversations[c][i].posterior.log_probs);
    }
  }
  EXPECT_EQ(reference_corpus(manifest, vocab), fx.references());
}

TEST(FixtureTest, SpecParsing) {
  const auto s = fixture_spec_from_json(Json::parse(R"({"n_conversations": 3, "frames": 30, "noise": 0.5})"));
  EXPECT_EQ(s.n_conversations, 3u);
  EXPECT_EQ(s.frames, 30u);
  EXPECT_EQ(s.noise, 0.5);
  EXPECT_THROW(fixture_spec_from_json(Json::parse(R"({"bogus": 1})")), FormatError);
  EXPECT_THROW(fixture_spec_from_json(Json::parse(R"({"frames": "many"})")), FormatError);
  EXPECT_THROW(fixture_spec_from_json(Json::parse(R"({"blank_rate": 2})")), InputError);
}

TEST(Texts, LoadsTextOrReferenceField) {
  TempDir dir;
  std::ofstream(dir.path() / "h.jsonl") << R"({"utterance_id":"a","text":"Hello, there"})" << "\n"
                                        << R"({"utterance_id":"b","reference":"x y"})" << "\n";
  const auto t = load_texts(dir.path() / "h.jsonl");
  EXPECT_EQ(t.at("a"), (WordSeq{"hello", "there"}));
  EXPECT_EQ(t.at("b"), (WordSeq{"x", "y"}));
}

}  // namespace
}  // namespace xutt
