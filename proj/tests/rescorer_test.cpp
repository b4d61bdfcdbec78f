#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "oracles/alignment_oracle.hpp"
#include "xutt/rescorer.hpp"

namespace xutt {
namespace {

NBestList hand_list() {
  NBestList l{"u", {}};
  l.entries.push_back({{1}, -1.0, -10.0, std::nullopt});
  l.entries.push_back({{1, 2}, -2.0, -4.0, std::nullopt});
  l.entries.push_back({{1, 2, 3}, -3.0, -7.0, std::nullopt});
  return l;
}

std::vector<std::vector<TokenId>> order_of(const NBestList& l) {
  std::vector<std::vector<TokenId>> out;
  for (const auto& e : l.entries) out.push_back(e.tokens);
  return out;
}

TEST(Standardize, HandExample) {
  const std::vector<double> s{-1, -2, -3};
  const auto z = standardize(s);
  EXPECT_NEAR(z[0], 1.22474, 1e-5);
  EXPECT_NEAR(z[1], 0.0, 1e-12);
  EXPECT_NEAR(z[2], -1.22474, 1e-5);
}

TEST(Standardize, ConstantListGivesZeros) {
  const std::vector<double> s(7, -3.25);
  EXPECT_EQ(standardize(s), std::vector<double>(7, 0.0));
  EXPECT_EQ(standardize(std::vector<double>{4.0}), std::vector<double>{0.0});
  EXPECT_THROW(standardize(std::vector<double>{}), InputError);
}

TEST(Standardize, ZeroMeanUnitStdOnRandomInput) {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> s(2 + rng.below(50));
    for (double& x : s) x = rng.normal() * 30.0 - 100.0;
    const auto z = standardize(s);
    double mean = 0, var = 0;
    for (double x : z) mean += x;
    mean /= static_cast<double>(z.size());
    for (double x : z) var += (x - mean) * (x - mean);
    EXPECT_NEAR(mean, 0.0, 1e-9);
    EXPECT_NEAR(std::sqrt(var / static_cast<double>(z.size())), 1.0, 1e-9);
  }
}

TEST(Rescore, HandComputedPermutation) {
  // tlm standardized: mean -7, std sqrt(6) -> [-1.2247, 1.2247, 0]
  // finals with lp 0.1: [-2.1247, -0.5753, -2.7]
  const auto r = rescore(hand_list(), {1.0, 1.0, 0.1, 100});
  EXPECT_EQ(order_of(r), (std::vector<std::vector<TokenId>>{{1, 2}, {1}, {1, 2, 3}}));
  EXPECT_NEAR(*r.entries[0].final_score, -2.0 + std::sqrt(1.5) + 0.2, 1e-12);
}

TEST(Rescore, DisabledLmKeepsFirstPassOrder) {
  const auto r = rescore(hand_list(), {1.0, 0.0, 0.0, 100});
  EXPECT_EQ(order_of(r), order_of(hand_list()));
}

TEST(Rescore, PureLmRanking) {
  const auto r = rescore(hand_list(), {0.0, 1.0, 0.0, 100});
  EXPECT_EQ(order_of(r), (std::vector<std::vector<TokenId>>{{1, 2}, {1, 2, 3}, {1}}));
}

TEST(Rescore, MissingTlmIsAStateError) {
  auto l = hand_list();
  l.entries[1].tlm.reset();
  EXPECT_THROW(rescore(l, {}), StateError);
}

TEST(Rescore, TiesKeepInputOrder) {
  NBestList l{"u", {}};
  for (TokenId t = 0; t < 4; ++t) l.entries.push_back({{t}, -1.0, -2.0, std::nullopt});
  EXPECT_EQ(order_of(rescore(l, {})), order_of(l));
}

TEST(Rescore, FirstPassRankInvariantUnderAffineMap) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    NBestList l{"u", {}};
    for (TokenId t = 0; t < 10; ++t) l.entries.push_back({{t}, rng.normal() * 5, rng.normal(), std::nullopt});
    NBestList m = l;
    const double a = 0.1 + rng.uniform() * 5, b = rng.normal() * 100;
    for (auto& e : m.entries) e.first_pass = a * e.first_pass + b;
    EXPECT_EQ(order_of(rescore(l, {1, 0, 0, 100})), order_of(rescore(m, {1, 0, 0, 100})));
  }
}

TEST(Rescore, PermutingDistinctEntriesGivesTheSameRanking) {
  Rng rng(3);
  NBestList l{"u", {}};
  for (TokenId t = 0; t < 12; ++t) l.entries.push_back({{t}, rng.normal(), rng.normal() * 4, std::nullopt});
  const auto base = order_of(rescore(l, {1.0, 0.7, -0.2, 100}));
  for (int trial = 0; trial < 20; ++trial) {
    auto m = l;
    std::shuffle(m.entries.begin(), m.entries.end(), rng.engine());
    EXPECT_EQ(order_of(rescore(m, {1.0, 0.7, -0.2, 100})), base);
  }
}

TEST(GenerateNBest, MatchesExhaustiveTopN) {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const auto post = oracle::random_posterior(rng, 4, 4);
    const auto ranking = oracle::fused_ranking(post, [](const oracle::Sequence&) { return 0.0; });
    const auto list = generate_nbest(post, 4096, 6);
    ASSERT_EQ(list.entries.size(), 6u);
    for (std::size_t i = 0; i < 6; ++i) {
      EXPECT_EQ(list.entries[i].tokens, ranking[i].seq);
      EXPECT_NEAR(list.entries[i].first_pass, ranking[i].score, 1e-9);
    }
  }
}

TEST(GenerateNBest, SingleBestEqualsUnfusedDecode) {
  Rng rng(5);
  const auto cfg = ModelConfig::toy();
  const auto w = generate_weights(0, cfg);
  for (int trial = 0; trial < 10; ++trial) {
    const auto post = oracle::random_posterior(rng, 10, cfg.content_size() + 1, 3.0);
    const auto list = generate_nbest(post, 16, 1, -8.0);
    const auto dec = decode_utterance(post, w, cfg, {0.0, 0.0, -8.0, 16}, start_state(w, cfg));
    ASSERT_EQ(list.entries.size(), 1u);
    EXPECT_EQ(list.entries[0].tokens, dec.hypotheses.front().tokens);
  }
}

TEST(GenerateNBest, BlankDominantPosteriorGivesEmptyEntry) {
  AMPosterior post;
  post.blank_id = 3;
  post.log_probs = Matrix(5, 4);
  for (std::size_t t = 0; t < 5; ++t) {
    for (std::size_t v = 0; v < 3; ++v) post.log_probs(t, v) = static_cast<float>(std::log(0.01));
    post.log_probs(t, 3) = static_cast<float>(std::log(0.97));
  }
  const auto list = generate_nbest(post, 8, 5, -3.0);
  ASSERT_EQ(list.entries.size(), 1u);
  EXPECT_TRUE(list.entries[0].tokens.empty());
}

TEST(GenerateNBest, Preconditions) {
  Rng rng(6);
  const auto post = oracle::random_posterior(rng, 3, 4);
  EXPECT_THROW(generate_nbest(post, 3, 5), InputError);
  AMPosterior empty;
  empty.blank_id = 3;
  empty.log_probs = Matrix(0, 4);
  EXPECT_THROW(generate_nbest(empty, 10, 5), InputError);
}

TEST(TlmScore, EmptyEntryScoresZero) {
  const auto cfg = ModelConfig::toy();
  const auto w = generate_weights(0, cfg);
  NBestList l{"u", {{{}, -1.0, std::nullopt, std::nullopt}}};
  EXPECT_EQ(*tlm_score_nbest(l, w, cfg, start_state(w, cfg)).entries[0].tlm, 0.0);
}

TEST(TlmScore, SingleTokenMatchesFullForwardRow) {
  const auto cfg = ModelConfig::toy();
  const auto w = generate_weights(0, cfg);
  const auto row = forward_full(w, cfg, std::vector<TokenId>{static_cast<TokenId>(cfg.vocab_size - 2)});
  for (TokenId t = 0; t < cfg.content_size(); ++t) {
    NBestList l{"u", {{{t}, 0.0, std::nullopt, std::nullopt}}};
    double z = 0;
    for (std::size_t i = 0; i < cfg.content_size(); ++i) z += std::exp(static_cast<double>(row(0, i)));
    EXPECT_NEAR(*tlm_score_nbest(l, w, cfg, start_state(w, cfg)).entries[0].tlm, row(0, t) - std::log(z), 1e-9);
  }
}

TEST(TlmScore, MultiTokenMatchesFullForward) {
  const auto cfg = ModelConfig::toy();
  const auto w = generate_weights(3, cfg);
  const std::vector<TokenId> seq{4, 9, 9, 0, 13};
  std::vector<TokenId> input{static_cast<TokenId>(cfg.vocab_size - 2)};
  input.insert(input.end(), seq.begin(), seq.end() - 1);
  const auto logits = forward_full(w, cfg, input);
  double expected = 0;
  for (std::size_t k = 0; k < seq.size(); ++k) {
    double z = 0;
    for (std::size_t i = 0; i < cfg.content_size(); ++i) z += std::exp(static_cast<double>(logits(k, i)));
    expected += logits(k, seq[k]) - std::log(z);
  }
  NBestList l{"u", {{seq, 0.0, std::nullopt, std::nullopt}}};
  EXPECT_NEAR(*tlm_score_nbest(l, w, cfg, start_state(w, cfg)).entries[0].tlm, expected, 1e-9);
}

TEST(TlmScore, FirstTokenAfterBoundaryUsesInitialHead) {
  const auto cfg = ModelConfig::toy();
  auto w = generate_weights(0, cfg);
  for (float& g : w.init_gamma.data()) g = 0.0f;
  w.init_beta(0, 3) = 5.0f;
  const auto ctx = end_utterance(advance(start_state(w, cfg), w, cfg, {1, 2}).state, w, cfg,
                                 SpecialTokens::for_config(cfg));
  NBestList l{"u", {{{3}, 0.0, std::nullopt, std::nullopt}, {{4}, 0.0, std::nullopt, std::nullopt}}};
  const auto scored = tlm_score_nbest(l, w, cfg, ctx);
  // gamma 0: softmax over beta restricted to content = e^5 / (e^5 + 13)
  EXPECT_NEAR(*scored.entries[0].tlm, 5.0 - std::log(std::exp(5.0) + 13.0), 1e-9);
  EXPECT_NEAR(*scored.entries[1].tlm, -std::log(std::exp(5.0) + 13.0), 1e-9);
}

TEST(TlmScore, IndependentOfEntryOrder) {
  const auto cfg = ModelConfig::toy();
  const auto w = generate_weights(1, cfg);
  NBestList l{"u", {}};
  for (TokenId t = 0; t < 5; ++t) l.entries.push_back({{t, static_cast<TokenId>(t + 2)}, 0.0, std::nullopt, std::nullopt});
  auto rev = l;
  std::reverse(rev.entries.begin(), rev.entries.end());
  const auto a = tlm_score_nbest(l, w, cfg, start_state(w, cfg));
  const auto b = tlm_score_nbest(rev, w, cfg, start_state(w, cfg));
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(*a.entries[i].tlm, *b.entries[4 - i].tlm);
}

TEST(TlmScore, OutOfVocabularyTokenIsASchemaError) {
  const auto cfg = ModelConfig::toy();
  const auto w = generate_weights(1, cfg);
  NBestList l{"u", {{{static_cast<TokenId>(cfg.content_size())}, 0.0, std::nullopt, std::nullopt}}};
  EXPECT_THROW(tlm_score_nbest(l, w, cfg, start_state(w, cfg)), SchemaError);
}

TEST(RescoreConversation, ZeroContextEqualsIndependentRescoring) {
  Rng rng(7);
  const auto cfg = ModelConfig::toy();
  const auto w = generate_weights(2, cfg);
  std::vector<UtteranceInput> conv;
  for (int i = 0; i < 3; ++i) {
    UtteranceInput u{"u" + std::to_string(i), i * 2.0, i * 2.0 + 1, oracle::random_posterior(rng, 6, 15, 2.0),
                     std::nullopt};
    conv.push_back(std::move(u));
  }
  RescoreOptions opts{{1.0, 0.8, 0.1, 8}, 32, {0, HistoryMode::decoded, std::nullopt}};
  const auto out = rescore_conversation(conv, w, cfg, opts);
  for (std::size_t i = 0; i < conv.size(); ++i) {
    const auto single = rescore(tlm_score_nbest(generate_nbest(conv[i].posterior, 32, 8), w, cfg, start_state(w, cfg)),
                                opts.params);
    EXPECT_EQ(order_of(out[i]), order_of(single));
  }
  opts.context.max_context_tokens = 50;
  const auto with_ctx = rescore_conversation(conv, w, cfg, opts);
  EXPECT_EQ(order_of(with_ctx[0]), order_of(out[0]));
  EXPECT_NE(*with_ctx[1].entries[0].tlm, *out[1].entries[0].tlm);
}

}  // namespace
}  // namespace xutt
