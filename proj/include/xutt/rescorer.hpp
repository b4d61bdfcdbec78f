#pragma once

// Two-pass decoding: an acoustic-only wide beam produces an n-best list,
// which the transformer LM then rescores with cross-utterance context.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xutt/ctc_decoder.hpp"
#include "xutt/error.hpp"
#include "xutt/model.hpp"
#include "xutt/parallel.hpp"
#include "xutt/session.hpp"

namespace xutt {

struct NBestEntry {
  std::vector<TokenId> tokens;
  double first_pass = 0;
  std::optional<double> tlm;          // summed LM log-prob, filled by tlm_score_nbest
  std::optional<double> final_score;  // filled by rescore

  std::size_t length() const { return tokens.size(); }
};

struct NBestList {
  std::string utterance_id;
  std::vector<NBestEntry> entries;
};

struct RescoreParams {
  double w_first = 1.0;
  double w_tlm = 1.0;
  double length_penalty = 0.0;  // added per token
  std::size_t n_best_size = 100;

  void validate() const {
    if (n_best_size < 1) throw InputError("n_best_size must be >= 1");
  }
};

/// AM-only prefix beam search of the given width; keeps the n best distinct
/// collapsed sequences by acoustic path mass. A finite cutoff prunes frame
/// candidates as in fused decoding; the default keeps every unit.
inline NBestList generate_nbest(const AMPosterior& post, std::size_t width, std::size_t n,
                                double cutoff = -std::numeric_limits<double>::infinity()) {
  if (n < 1) throw InputError("n-best size must be >= 1");
  if (width < n) throw InputError("beam width " + std::to_string(width) + " is smaller than n-best size " +
                                  std::to_string(n));
  const FusionParams p{0.0, 0.0, cutoff, width};
  const auto res = prefix_beam_search(post, NullScorer(post.vocab() - 1), p, NullScorer::State{});
  NBestList out{post.utterance_id, {}};
  for (std::size_t i = 0; i < res.hypotheses.size() && i < n; ++i) {
    out.entries.push_back({res.hypotheses[i].prefix, res.hypotheses[i].am_score(), std::nullopt, std::nullopt});
  }
  return out;
}

/// Fills each entry's tlm score given `context`. A context that ends at an
/// utterance boundary scores the first token with the initial-token head.
inline NBestList tlm_score_nbest(NBestList list, const WeightStore& w, const ModelConfig& cfg,
                                 const LMState& context) {
  for (auto& e : list.entries) e.tlm = score_continuation(context, w, cfg, e.tokens).total();
  return list;
}

/// (s - mean) / std with the population std; all zeros when std < 1e-8.
inline std::vector<double> standardize(std::span<const double> scores) {
  if (scores.empty()) throw InputError("standardize: empty score list");
  const double n = static_cast<double>(scores.size());
  const double mean = std::accumulate(scores.begin(), scores.end(), 0.0) / n;
  double var = 0;
  for (double s : scores) var += (s - mean) * (s - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> out(scores.size(), 0.0);
  if (sd < 1e-8) return out;
  for (std::size_t i = 0; i < scores.size(); ++i) out[i] = (scores[i] - mean) / sd;
  return out;
}

/// final = w_first * first_pass + w_tlm * standardized tlm + length_penalty * length,
/// sorted descending; equal finals keep their input order.
inline NBestList rescore(NBestList list, const RescoreParams& p) {
  if (list.entries.empty()) return list;
  std::vector<double> tlm;
  for (const auto& e : list.entries) {
    if (!e.tlm) throw StateError("rescore: entry without tlm score in '" + list.utterance_id + "'");
    tlm.push_back(*e.tlm);
  }
  const auto z = standardize(tlm);
  for (std::size_t i = 0; i < list.entries.size(); ++i) {
    auto& e = list.entries[i];
    e.final_score = p.w_first * e.first_pass + p.w_tlm * z[i] + p.length_penalty * static_cast<double>(e.length());
  }
  std::stable_sort(list.entries.begin(), list.entries.end(),
                   [](const NBestEntry& a, const NBestEntry& b) { return *a.final_score > *b.final_score; });
  return list;
}

struct RescoreOptions {
  RescoreParams params;
  std::size_t width = 1000;
  ContextOptions context;
};

/// Rescores a conversation in order. The history passed on is the rescored
/// best hypothesis (or the reference in ground-truth mode).
inline std::vector<NBestList> rescore_conversation(std::span<const UtteranceInput> utts, const WeightStore& w,
                                                   const ModelConfig& cfg, const RescoreOptions& opts) {
  opts.params.validate();
  check_order(utts);
  std::vector<NBestList> out;
  LMState context = start_state(w, cfg);
  for (std::size_t i = 0; i < utts.size(); ++i) {
    const auto& u = utts[i];
    if (i > 0 && gap_resets(utts[i - 1], u, opts.context)) context = start_state(w, cfg);
    const auto width = std::max(opts.width, opts.params.n_best_size);
    auto list = rescore(tlm_score_nbest(generate_nbest(u.posterior, width, opts.params.n_best_size), w, cfg, context),
                        opts.params);
    if (i + 1 < utts.size()) {
      const auto& best = list.entries.front().tokens;
      const LMState decoded = score_continuation(context, w, cfg, best).state;
      context = carry_context(history_after(u, context, decoded, w, cfg, opts.context.history), w, cfg,
                              opts.context.max_context_tokens);
    }
    out.push_back(std::move(list));
  }
  return out;
}

inline std::vector<std::vector<NBestList>> rescore_corpus(std::span<const std::vector<UtteranceInput>> conversations,
                                                          const WeightStore& w, const ModelConfig& cfg,
                                                          const RescoreOptions& opts, std::size_t threads = 1) {
  return parallel_map(conversations.size(), threads,
                      [&](std::size_t i) { return rescore_conversation(conversations[i], w, cfg, opts); });
}

inline UtteranceTranscript best_transcript(const NBestList& list) {
  if (list.entries.empty()) return {list.utterance_id, {}, 0.0};
  const auto& e = list.entries.front();
  return {list.utterance_id, e.tokens, e.final_score.value_or(e.first_pass)};
}

}  // namespace xutt
