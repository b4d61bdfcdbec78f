#pragma once

// CTC prefix beam search with shallow fusion of an external LM.
//
// Each hypothesis is a collapsed, blank-free prefix carrying separate
// log-masses for alignments ending in blank and in a non-blank symbol. A
// frame step scores symbol i as
//
//   log P_AM(i) + 0                           if i is blank or repeats the
//                                             previous frame's symbol
//   log P_AM(i) + alpha * log P_LM(i) + beta  otherwise
//
// so the LM part of a prefix's score depends only on the prefix and is
// carried alongside the acoustic masses.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "xutt/error.hpp"
#include "xutt/model.hpp"
#include "xutt/parallel.hpp"
#include "xutt/session.hpp"
#include "xutt/tensor.hpp"

namespace xutt {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// Per-frame log-softmax outputs of a CTC acoustic model. The AM vocabulary
/// is the content units (ids shared with the LM) followed by blank, so
/// blank_id == vocab() - 1.
struct AMPosterior {
  std::string utterance_id;
  TokenId blank_id = 0;
  Matrix log_probs;  // frames x am_vocab

  std::size_t frames() const { return log_probs.rows(); }
  std::size_t vocab() const { return log_probs.cols(); }

  /// Throws ValidationError naming the first frame whose probabilities do
  /// not sum to one within tol.
  void validate(double tol = 1e-4) const {
    if (vocab() < 2) throw ValidationError("posterior '" + utterance_id + "': vocabulary needs blank + 1 unit");
    if (blank_id != vocab() - 1) {
      throw ValidationError("posterior '" + utterance_id + "': blank must be the last AM unit");
    }
    for (std::size_t t = 0; t < frames(); ++t) {
      double s = 0;
      for (float v : log_probs.row(t)) s += std::exp(static_cast<double>(v));
      if (!(std::abs(s - 1.0) <= tol)) {
        throw ValidationError("posterior '" + utterance_id + "': frame " + std::to_string(t) +
                              " probabilities sum to " + std::to_string(s));
      }
    }
  }
};

struct FusionParams {
  double alpha = 0.5;        // LM weight
  double beta_bonus = 0.0;   // insertion bonus per fused token
  double cutoff = -8.0;      // candidates within this log-distance of the frame argmax
  std::size_t beam_width = 25;

  void validate() const {
    if (beam_width < 1) throw InputError("beam_width must be >= 1");
    if (!(cutoff < 0)) throw InputError("cutoff must be negative");
  }
};

/// LM contribution of emitting `token` at a frame whose predecessor frame
/// emitted `prev_token` (nullopt at the first frame).
inline double lm_token_score(TokenId token, std::optional<TokenId> prev_token, double lm_logprob,
                             const FusionParams& p, TokenId blank) {
  if (token == blank || (prev_token && *prev_token == token)) return 0.0;
  return p.alpha * lm_logprob + p.beta_bonus;
}

/// Units whose log-probability is within `cutoff` of the frame maximum.
inline std::vector<TokenId> frame_candidates(std::span<const float> row, double cutoff) {
  const float best = *std::max_element(row.begin(), row.end());
  const double threshold = static_cast<double>(best) + cutoff;
  std::vector<TokenId> out;
  for (std::size_t i = 0; i < row.size(); ++i) {
    if (row[i] == best || static_cast<double>(row[i]) >= threshold) out.push_back(static_cast<TokenId>(i));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scorers

/// An LM usable by the search: per-prefix states, extended one unit at a
/// time, that expose next-unit log-probabilities over content units.
template <class S>
concept FusionScorer = requires(const S& s, const typename S::State& st, TokenId t) {
  { s.extend(st, t) } -> std::same_as<typename S::State>;
  { s.log_prob(st, t) } -> std::convertible_to<double>;
  { s.content_size() } -> std::convertible_to<std::size_t>;
};

/// The transformer LM with a KV-cached state per prefix.
class TransformerScorer {
 public:
  struct State {
    LMState lm;
    std::vector<double> lookahead;  // masked log-probs over content units
  };

  TransformerScorer(const WeightStore& w, const ModelConfig& cfg) : w_(&w), cfg_(&cfg) {}

  State wrap(LMState context) const {
    auto la = lookahead_log_probs(context, *w_, *cfg_);
    return {std::move(context), std::move(la)};
  }

  State extend(const State& s, TokenId t) const {
    auto r = advance(s.lm, *w_, *cfg_, {t});
    auto la = lookahead_log_probs(r.state, *w_, *cfg_);
    return {std::move(r.state), std::move(la)};
  }

  double log_prob(const State& s, TokenId t) const { return s.lookahead[t]; }
  std::size_t content_size() const { return cfg_->content_size(); }

 private:
  const WeightStore* w_;
  const ModelConfig* cfg_;
};

/// No LM: acoustic-only search.
class NullScorer {
 public:
  struct State {};
  explicit NullScorer(std::size_t content_size) : content_size_(content_size) {}
  State extend(const State&, TokenId) const { return {}; }
  double log_prob(const State&, TokenId) const { return 0.0; }
  std::size_t content_size() const { return content_size_; }

 private:
  std::size_t content_size_;
};

// ---------------------------------------------------------------------------
// Search

template <class State>
struct Hypothesis {
  std::vector<TokenId> prefix;
  double log_p_blank = kNegInf;
  double log_p_nonblank = kNegInf;
  double lm_score = 0.0;
  std::shared_ptr<const State> state;

  double am_score() const { return log_add_exp(log_p_blank, log_p_nonblank); }
  double total() const { return am_score() + lm_score; }
};

template <class State>
struct SearchResult {
  std::vector<Hypothesis<State>> hypotheses;  // best first
  std::size_t lm_extensions = 0;              // LM advances performed
};

/// Strict ranking: higher score, then longer prefix, then smaller token ids.
template <class H>
bool ranks_before(double score_a, const H& a, double score_b, const H& b) {
  if (score_a != score_b) return score_a > score_b;
  if (a.prefix.size() != b.prefix.size()) return a.prefix.size() > b.prefix.size();
  return a.prefix < b.prefix;
}

namespace detail {

struct PrefixHash {
  std::size_t operator()(const std::vector<TokenId>& v) const {
    std::size_t h = 1469598103934665603ull;
    for (TokenId t : v) h = (h ^ t) * 1099511628211ull;
    return h;
  }
};

template <class State>
struct Beam : Hypothesis<State> {
  // Set while `state` is pending: the parent's state, extended by prefix.back().
  std::shared_ptr<const State> parent;
};

}  // namespace detail

template <FusionScorer Scorer>
SearchResult<typename Scorer::State> prefix_beam_search(const AMPosterior& post, const Scorer& scorer,
                                                        const FusionParams& p, typename Scorer::State initial) {
  using State = typename Scorer::State;
  using Beam = detail::Beam<State>;
  p.validate();
  if (post.frames() == 0) throw InputError("posterior '" + post.utterance_id + "' has no frames");
  if (post.vocab() != scorer.content_size() + 1 || post.blank_id != post.vocab() - 1) {
    throw SchemaError("posterior '" + post.utterance_id + "' has " + std::to_string(post.vocab()) +
                      " AM units; the LM expects " + std::to_string(scorer.content_size()) + " + blank");
  }
  const TokenId blank = post.blank_id;
  std::size_t extensions = 0;

  auto materialize = [&](Beam& b) {
    if (b.state) return;
    b.state = std::make_shared<const State>(scorer.extend(*b.parent, b.prefix.back()));
    b.parent.reset();
    ++extensions;
  };

  std::vector<Beam> beams(1);
  beams[0].log_p_blank = 0.0;
  beams[0].state = std::make_shared<const State>(std::move(initial));

  using Index = std::unordered_map<std::vector<TokenId>, std::size_t, detail::PrefixHash>;
  for (std::size_t t = 0; t < post.frames(); ++t) {
    const auto row = post.log_probs.row(t);
    const auto cands = frame_candidates(row, p.cutoff);
    Index current;
    for (std::size_t i = 0; i < beams.size(); ++i) current.emplace(beams[i].prefix, i);

    std::vector<Beam> next;
    Index index;
    auto slot = [&](const Beam& src) -> Beam& {
      auto [it, inserted] = index.emplace(src.prefix, next.size());
      if (inserted) {
        Beam b;
        b.prefix = src.prefix;
        b.lm_score = src.lm_score;
        b.state = src.state;
        b.parent = src.parent;
        next.push_back(std::move(b));
      } else if (!next[it->second].state && src.state) {
        next[it->second].state = src.state;
        next[it->second].parent.reset();
      }
      return next[it->second];
    };
    auto extension = [&](const Beam& src, TokenId c) -> Beam& {
      std::vector<TokenId> prefix = src.prefix;
      prefix.push_back(c);
      if (auto it = index.find(prefix); it != index.end()) return next[it->second];
      Beam b;
      b.lm_score = src.lm_score + lm_token_score(c, std::nullopt, scorer.log_prob(*src.state, c), p, blank);
      if (auto cur = current.find(prefix); cur != current.end() && beams[cur->second].state) {
        b.state = beams[cur->second].state;
      } else {
        b.parent = src.state;
      }
      b.prefix = std::move(prefix);
      index.emplace(b.prefix, next.size());
      next.push_back(std::move(b));
      return next.back();
    };

    // LM states are only computed for beams that survived pruning and
    // actually grow at this frame.
    for (auto& beam : beams) {
      const std::optional<TokenId> last =
          beam.prefix.empty() ? std::nullopt : std::optional<TokenId>(beam.prefix.back());
      const bool extends = std::any_of(cands.begin(), cands.end(), [&](TokenId c) {
        return c != blank && (c != last || beam.log_p_blank > kNegInf);
      });
      if (extends) materialize(beam);
    }

    for (auto& beam : beams) {
      const std::optional<TokenId> last =
          beam.prefix.empty() ? std::nullopt : std::optional<TokenId>(beam.prefix.back());
      const double am = beam.am_score();
      for (TokenId c : cands) {
        const double lp = row[c];
        if (c == blank) {
          Beam& s = slot(beam);
          s.log_p_blank = log_add_exp(s.log_p_blank, am + lp);
        } else if (c == last) {
          // repeat without an intervening blank collapses into the same prefix
          Beam& s = slot(beam);
          s.log_p_nonblank = log_add_exp(s.log_p_nonblank, beam.log_p_nonblank + lp);
          if (beam.log_p_blank > kNegInf) {
            Beam& e = extension(beam, c);
            e.log_p_nonblank = log_add_exp(e.log_p_nonblank, beam.log_p_blank + lp);
          }
        } else {
          Beam& e = extension(beam, c);
          e.log_p_nonblank = log_add_exp(e.log_p_nonblank, am + lp);
        }
      }
    }

    std::erase_if(next, [](const Beam& b) { return !std::isfinite(b.total()); });
    if (next.empty()) {
      throw SearchError("no finite hypothesis survives frame " + std::to_string(t) + " of '" + post.utterance_id +
                        "'");
    }
    const auto keep = std::min(p.beam_width, next.size());
    auto cmp = [](const Beam& a, const Beam& b) { return ranks_before(a.total(), a, b.total(), b); };
    std::partial_sort(next.begin(), next.begin() + static_cast<std::ptrdiff_t>(keep), next.end(), cmp);
    next.resize(keep);
    beams = std::move(next);
  }

  SearchResult<State> result;
  for (auto& b : beams) {
    materialize(b);
    result.hypotheses.push_back(static_cast<Hypothesis<State>&&>(std::move(b)));
  }
  result.lm_extensions = extensions;
  return result;
}

// ---------------------------------------------------------------------------
// Transformer fusion entry points

struct DecodedHypothesis {
  std::vector<TokenId> tokens;
  double am_score = 0;
  double lm_score = 0;
  double total = 0;
  LMState state;  // context extended by `tokens`
};

struct UtteranceDecode {
  std::vector<DecodedHypothesis> hypotheses;  // best first
  std::size_t lm_extensions = 0;
};

inline UtteranceDecode decode_utterance(const AMPosterior& post, const WeightStore& w, const ModelConfig& cfg,
                                        const FusionParams& p, const LMState& context) {
  const TransformerScorer scorer(w, cfg);
  auto res = prefix_beam_search(post, scorer, p, scorer.wrap(context));
  UtteranceDecode out;
  out.lm_extensions = res.lm_extensions;
  for (auto& h : res.hypotheses) {
    out.hypotheses.push_back({std::move(h.prefix), h.am_score(), h.lm_score, h.total(), h.state->lm});
  }
  return out;
}

enum class HistoryMode { decoded, ground_truth };

inline HistoryMode history_mode_from_string(const std::string& s) {
  if (s == "decoded") return HistoryMode::decoded;
  if (s == "gth" || s == "ground-truth" || s == "ground_truth") return HistoryMode::ground_truth;
  throw InputError("unknown history mode '" + s + "'");
}

struct UtteranceInput {
  std::string utterance_id;
  double start_s = 0;
  double end_s = 0;
  AMPosterior posterior;
  std::optional<std::vector<TokenId>> reference;  // LM token ids
};

struct ContextOptions {
  std::size_t max_context_tokens = 0;  // prior-utterance tokens kept (BOS excluded); 0 = independent
  HistoryMode history = HistoryMode::decoded;
  std::optional<double> max_gap_seconds;  // reset the history across longer silences
};

struct UtteranceTranscript {
  std::string utterance_id;
  std::vector<TokenId> tokens;
  double score = 0;
};

inline void check_order(std::span<const UtteranceInput> utts) {
  for (std::size_t i = 1; i < utts.size(); ++i) {
    if (utts[i].start_s < utts[i - 1].start_s) {
      throw InputError("utterance '" + utts[i].utterance_id + "' starts before its predecessor");
    }
  }
}

/// Carries the LM history from one utterance to the next: appends SEP to
/// `history` and keeps BOS plus the last max_context_tokens positions.
inline LMState carry_context(const LMState& history, const WeightStore& w, const ModelConfig& cfg,
                             std::size_t max_context_tokens) {
  if (max_context_tokens == 0) return start_state(w, cfg);
  const auto closed = end_utterance(history, w, cfg, SpecialTokens::for_config(cfg));
  return truncate(closed, max_context_tokens + 1);
}

/// History state after utterance i, given the state it was decoded from.
inline LMState history_after(const UtteranceInput& u, const LMState& context, const LMState& decoded_state,
                             const WeightStore& w, const ModelConfig& cfg, HistoryMode mode) {
  if (mode == HistoryMode::decoded) return decoded_state;
  if (!u.reference) throw InputError("ground-truth history needs a reference for '" + u.utterance_id + "'");
  if (u.reference->empty()) return context;
  return advance(context, w, cfg, *u.reference).state;
}

inline bool gap_resets(const UtteranceInput& prev, const UtteranceInput& cur, const ContextOptions& opts) {
  return opts.max_gap_seconds && cur.start_s - prev.end_s > *opts.max_gap_seconds;
}

/// Decodes a conversation in order, passing the top beam's history (or the
/// reference, in ground-truth mode) across utterance boundaries.
inline std::vector<UtteranceTranscript> decode_conversation(std::span<const UtteranceInput> utts,
                                                            const WeightStore& w, const ModelConfig& cfg,
                                                            const FusionParams& p, const ContextOptions& opts) {
  check_order(utts);
  std::vector<UtteranceTranscript> out;
  LMState context = start_state(w, cfg);
  for (std::size_t i = 0; i < utts.size(); ++i) {
    const auto& u = utts[i];
    if (i > 0 && gap_resets(utts[i - 1], u, opts)) context = start_state(w, cfg);
    auto dec = decode_utterance(u.posterior, w, cfg, p, context);
    auto& top = dec.hypotheses.front();
    out.push_back({u.utterance_id, top.tokens, top.total});
    if (i + 1 < utts.size()) {
      context = carry_context(history_after(u, context, top.state, w, cfg, opts.history), w, cfg,
                              opts.max_context_tokens);
    }
  }
  return out;
}

/// Conversations are independent and decoded in parallel; results keep input order.
inline std::vector<std::vector<UtteranceTranscript>> decode_corpus(
    std::span<const std::vector<UtteranceInput>> conversations, const WeightStore& w, const ModelConfig& cfg,
    const FusionParams& p, const ContextOptions& opts, std::size_t threads = 1) {
  return parallel_map(conversations.size(), threads,
                      [&](std::size_t i) { return decode_conversation(conversations[i], w, cfg, p, opts); });
}

/// Best-path decoding: argmax per frame, merge repeats, drop blanks.
inline std::vector<TokenId> greedy_decode(const AMPosterior& post) {
  std::vector<TokenId> out;
  std::optional<TokenId> prev;
  for (std::size_t t = 0; t < post.frames(); ++t) {
    const auto row = post.log_probs.row(t);
    const auto best = static_cast<TokenId>(std::max_element(row.begin(), row.end()) - row.begin());
    if (best != post.blank_id && best != prev) out.push_back(best);
    prev = best;
  }
  return out;
}

}  // namespace xutt
