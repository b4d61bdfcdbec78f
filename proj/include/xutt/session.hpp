#pragma once

// Cross-utterance language-model state. An LMState is an immutable value:
// advancing, truncating or closing an utterance returns a new state and
// leaves the input untouched. Cached rows live in shared immutable blocks,
// so sibling beams that branch from one parent share its history.

#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "xutt/error.hpp"
#include "xutt/model.hpp"
#include "xutt/tensor.hpp"

namespace xutt {

struct SpecialTokens {
  TokenId bos = 0;
  TokenId sep = 0;

  /// LM vocabularies place content units first, then BOS, then SEP.
  static SpecialTokens for_config(const ModelConfig& cfg) {
    return {static_cast<TokenId>(cfg.vocab_size - 2), static_cast<TokenId>(cfg.vocab_size - 1)};
  }

  void validate(const ModelConfig& cfg) const {
    if (bos == sep) throw SchemaError("BOS and SEP must differ");
    if (bos >= cfg.vocab_size || sep >= cfg.vocab_size) throw SchemaError("special token outside vocabulary");
  }
};

/// A run of cached positions: the token ids plus, per layer, their
/// normalized keys and values.
struct KVBlock {
  std::vector<TokenId> tokens;
  std::vector<Matrix> keys;
  std::vector<Matrix> values;
};

class LMState {
 public:
  LMState() = default;

  /// Builds a state directly from cached rows (one block). Used for
  /// compaction and by benchmarks that need a cache of a given length
  /// without running the model over it.
  static LMState from_rows(std::vector<TokenId> tokens, std::vector<Matrix> keys, std::vector<Matrix> values,
                           bool bos_present) {
    if (keys.size() != values.size()) throw StateError("key/value layer counts differ");
    for (std::size_t l = 0; l < keys.size(); ++l) {
      if (keys[l].rows() != tokens.size() || values[l].rows() != tokens.size()) {
        throw StateError("cached rows do not match token count in layer " + std::to_string(l));
      }
    }
    LMState s;
    s.length_ = tokens.size();
    s.layers_ = keys.size();
    s.bos_present_ = bos_present && !tokens.empty();
    if (!tokens.empty()) {
      s.blocks_.push_back(std::make_shared<const KVBlock>(KVBlock{std::move(tokens), std::move(keys), std::move(values)}));
    }
    return s;
  }

  std::size_t size() const { return length_; }
  bool empty() const { return length_ == 0; }
  std::size_t layers() const { return layers_; }
  bool bos_present() const { return bos_present_; }
  std::size_t block_count() const { return blocks_.size(); }

  /// Logits at the most recent position (at SEP after end_utterance).
  const std::optional<std::vector<float>>& last_logits() const { return last_logits_; }

  /// True when the state was closed by end_utterance and no token has been
  /// consumed since; the next token is then predicted by the initial-token head.
  bool at_boundary() const { return at_boundary_; }

  std::vector<TokenId> tokens() const {
    std::vector<TokenId> out;
    out.reserve(length_);
    for (const auto& b : blocks_) out.insert(out.end(), b->tokens.begin(), b->tokens.end());
    return out;
  }

  /// Cached segments per layer, in position order.
  std::vector<std::vector<KVSegment>> segments() const {
    std::vector<std::vector<KVSegment>> out(layers_);
    for (std::size_t l = 0; l < layers_; ++l) {
      for (const auto& b : blocks_) out[l].push_back({&b->keys[l], &b->values[l]});
    }
    return out;
  }

  /// Gathered key (or value) rows of one layer.
  Matrix gather_keys(std::size_t layer) const { return gather(layer, true); }
  Matrix gather_values(std::size_t layer) const { return gather(layer, false); }

  /// Bytes held by this state's keys and values (shared blocks counted in full).
  std::size_t cache_bytes() const {
    std::size_t n = 0;
    for (const auto& b : blocks_) {
      for (const auto& m : b->keys) n += m.size() * sizeof(float);
      for (const auto& m : b->values) n += m.size() * sizeof(float);
    }
    return n;
  }

 private:
  friend struct LMStateAccess;

  Matrix gather(std::size_t layer, bool keys) const {
    std::size_t cols = 0;
    if (!blocks_.empty()) cols = (keys ? blocks_[0]->keys[layer] : blocks_[0]->values[layer]).cols();
    Matrix out(length_, cols);
    std::size_t r = 0;
    for (const auto& b : blocks_) {
      const Matrix& m = keys ? b->keys[layer] : b->values[layer];
      std::copy(m.data().begin(), m.data().end(), out.row(r).begin());
      r += m.rows();
    }
    return out;
  }

  std::vector<std::shared_ptr<const KVBlock>> blocks_;
  std::size_t length_ = 0;
  std::size_t layers_ = 0;
  bool bos_present_ = false;
  bool at_boundary_ = false;
  std::optional<std::vector<float>> last_logits_;
};

struct LMStateAccess {
  static auto& blocks(LMState& s) { return s.blocks_; }
  static auto& length(LMState& s) { return s.length_; }
  static auto& layers(LMState& s) { return s.layers_; }
  static auto& bos_present(LMState& s) { return s.bos_present_; }
  static auto& at_boundary(LMState& s) { return s.at_boundary_; }
  static auto& last_logits(LMState& s) { return s.last_logits_; }
};

// Block count above which advance folds the history into a single block.
inline constexpr std::size_t kMaxCacheBlocks = 32;

struct AdvanceResult {
  Matrix logits;  // one row per new token
  LMState state;
};

inline LMState compact(const LMState& s) {
  if (s.block_count() <= 1) return s;
  std::vector<Matrix> keys, values;
  for (std::size_t l = 0; l < s.layers(); ++l) {
    keys.push_back(s.gather_keys(l));
    values.push_back(s.gather_values(l));
  }
  LMState out = LMState::from_rows(s.tokens(), std::move(keys), std::move(values), s.bos_present());
  LMStateAccess::at_boundary(out) = s.at_boundary();
  LMStateAccess::last_logits(out) = s.last_logits();
  return out;
}

/// Feeds tokens after the cached history. The logits equal the matching rows
/// of forward_full over (cached tokens ++ tokens).
inline AdvanceResult advance(const LMState& state, const WeightStore& w, const ModelConfig& cfg,
                             std::span<const TokenId> tokens) {
  if (tokens.empty()) throw InputError("advance: empty token sequence");
  if (!state.empty() && state.layers() != cfg.n_layers) {
    throw StateError("state caches " + std::to_string(state.layers()) + " layers, model has " +
                     std::to_string(cfg.n_layers));
  }
  const auto past = state.segments();
  StepOutput step = forward_step(w, cfg, tokens, past);

  AdvanceResult res{std::move(step.logits), state.empty() ? LMState{} : state};
  LMState& next = res.state;
  auto block = std::make_shared<KVBlock>();
  block->tokens.assign(tokens.begin(), tokens.end());
  block->keys = std::move(step.keys);
  block->values = std::move(step.values);
  if (state.empty()) {
    LMStateAccess::bos_present(next) = tokens[0] == SpecialTokens::for_config(cfg).bos;
  }
  LMStateAccess::blocks(next).push_back(std::move(block));
  LMStateAccess::length(next) = state.size() + tokens.size();
  LMStateAccess::layers(next) = cfg.n_layers;
  LMStateAccess::at_boundary(next) = false;
  const auto last = res.logits.row(res.logits.rows() - 1);
  LMStateAccess::last_logits(next) = std::vector<float>(last.begin(), last.end());
  if (next.block_count() > kMaxCacheBlocks) next = compact(next);
  return res;
}

inline AdvanceResult advance(const LMState& state, const WeightStore& w, const ModelConfig& cfg,
                             std::initializer_list<TokenId> tokens) {
  return advance(state, w, cfg, std::span<const TokenId>(tokens.begin(), tokens.size()));
}

/// The conversation-start state: only BOS consumed.
inline LMState start_state(const WeightStore& w, const ModelConfig& cfg) {
  return advance(LMState{}, w, cfg, {SpecialTokens::for_config(cfg).bos}).state;
}

/// Keeps BOS plus the most recent (max_tokens - 1) positions. Positions are
/// re-based, so relative distances afterwards reflect the compacted cache.
inline LMState truncate(const LMState& state, std::size_t max_tokens) {
  if (max_tokens < 1) throw InputError("truncate: max_tokens must be >= 1");
  if (state.size() <= max_tokens) return state;
  const std::size_t n = state.size();
  std::vector<std::size_t> keep;
  keep.reserve(max_tokens);
  if (state.bos_present()) {
    keep.push_back(0);
    for (std::size_t i = n - (max_tokens - 1); i < n; ++i) keep.push_back(i);
  } else {
    for (std::size_t i = n - max_tokens; i < n; ++i) keep.push_back(i);
  }
  const auto all_tokens = state.tokens();
  std::vector<TokenId> tokens;
  for (std::size_t i : keep) tokens.push_back(all_tokens[i]);
  std::vector<Matrix> keys, values;
  for (std::size_t l = 0; l < state.layers(); ++l) {
    const Matrix k = state.gather_keys(l), v = state.gather_values(l);
    Matrix kk(keep.size(), k.cols()), vv(keep.size(), v.cols());
    for (std::size_t r = 0; r < keep.size(); ++r) {
      std::copy(k.row(keep[r]).begin(), k.row(keep[r]).end(), kk.row(r).begin());
      std::copy(v.row(keep[r]).begin(), v.row(keep[r]).end(), vv.row(r).begin());
    }
    keys.push_back(std::move(kk));
    values.push_back(std::move(vv));
  }
  LMState out = LMState::from_rows(std::move(tokens), std::move(keys), std::move(values), state.bos_present());
  LMStateAccess::at_boundary(out) = state.at_boundary();
  LMStateAccess::last_logits(out) = state.last_logits();
  return out;
}

/// Appends SEP. SEP is never a scoring target; its logits become the input
/// of the initial-token head for the next utterance.
inline LMState end_utterance(const LMState& state, const WeightStore& w, const ModelConfig& cfg,
                             const SpecialTokens& toks) {
  if (state.empty()) throw StateError("end_utterance on an empty state");
  LMState next = advance(state, w, cfg, {toks.sep}).state;
  LMStateAccess::at_boundary(next) = true;
  return next;
}

/// Modulated logits l * gamma + beta over the full LM vocabulary.
inline std::vector<double> initial_token_logits(const LMState& state, std::span<const float> gamma,
                                                std::span<const float> beta) {
  const auto& last = state.last_logits();
  if (!last) throw StateError("initial-token prediction needs the previous utterance's final logits");
  if (gamma.size() != last->size() || beta.size() != last->size()) {
    throw ShapeError("initial-token gamma/beta width does not match the logits");
  }
  std::vector<double> z(last->size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    z[i] = static_cast<double>((*last)[i]) * gamma[i] + beta[i];
  }
  return z;
}

/// softmax(last_logits * gamma + beta).
inline std::vector<double> initial_token_distribution(const LMState& state, std::span<const float> gamma,
                                                      std::span<const float> beta) {
  auto z = initial_token_logits(state, gamma, beta);
  softmax_inplace(z);
  return z;
}

inline std::vector<double> initial_token_distribution(const LMState& state, const WeightStore& w) {
  return initial_token_distribution(state, w.init_gamma.data(), w.init_beta.data());
}

/// Log-softmax restricted to the first n_content entries, i.e. BOS and SEP
/// masked out and the rest renormalized.
template <class T>
std::vector<double> content_log_probs(std::span<const T> logits, std::size_t n_content) {
  if (n_content > logits.size() || n_content == 0) throw ShapeError("content size exceeds logit width");
  std::vector<double> out(logits.begin(), logits.begin() + static_cast<std::ptrdiff_t>(n_content));
  const double lse = log_sum_exp(out);
  for (double& x : out) x -= lse;
  return out;
}

/// Next-token log-probabilities over content units for a state: the
/// initial-token head right after end_utterance, plain logits otherwise.
inline std::vector<double> lookahead_log_probs(const LMState& state, const WeightStore& w, const ModelConfig& cfg) {
  const auto& last = state.last_logits();
  if (!last) throw StateError("lookahead on a state without logits");
  if (state.at_boundary()) {
    const auto z = initial_token_logits(state, w.init_gamma.data(), w.init_beta.data());
    return content_log_probs<double>(z, cfg.content_size());
  }
  return content_log_probs<float>(*last, cfg.content_size());
}

struct ScoredContinuation {
  std::vector<double> token_log_probs;  // one per token, BOS/SEP masked
  LMState state;                        // state extended by the tokens
  double total() const {
    double s = 0;
    for (double x : token_log_probs) s += x;
    return s;
  }
};

/// Log-probabilities of `tokens` continuing `state`; the first token comes
/// from lookahead_log_probs, so it uses the initial-token head at a boundary.
inline ScoredContinuation score_continuation(const LMState& state, const WeightStore& w, const ModelConfig& cfg,
                                             std::span<const TokenId> tokens) {
  ScoredContinuation out{{}, state};
  if (tokens.empty()) return out;
  const std::size_t C = cfg.content_size();
  for (TokenId t : tokens) {
    if (t >= C) throw SchemaError("token id " + std::to_string(t) + " is outside the LM content vocabulary");
  }
  out.token_log_probs.push_back(lookahead_log_probs(state, w, cfg)[tokens[0]]);
  auto res = advance(state, w, cfg, tokens);
  for (std::size_t k = 1; k < tokens.size(); ++k) {
    out.token_log_probs.push_back(content_log_probs<float>(res.logits.row(k - 1), C)[tokens[k]]);
  }
  out.state = std::move(res.state);
  return out;
}

}  // namespace xutt
