#pragma once

// Perplexity under a cross-utterance context budget and corpus-level word
// error rate.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "xutt/ctc_decoder.hpp"
#include "xutt/error.hpp"
#include "xutt/parallel.hpp"
#include "xutt/session.hpp"

namespace xutt {

enum class Metric { ppl, wer };

inline std::string to_string(Metric m) { return m == Metric::ppl ? "PPL" : "WER"; }

struct EvalReport {
  std::string dataset;
  std::size_t context_tokens = 0;
  Metric metric = Metric::ppl;
  double value = 0;
  std::size_t count = 0;  // scored tokens (PPL) or reference words (WER)
  // WER only
  std::size_t substitutions = 0;
  std::size_t deletions = 0;
  std::size_t insertions = 0;
  double log_prob = 0;  // PPL only: summed natural-log probability
};

/// A conversation as a sequence of utterance references (LM token ids).
using TokenConversation = std::vector<std::vector<TokenId>>;

/// Summed log-probability and token count of one conversation. Each
/// utterance is scored given the previous references, joined by SEP and cut
/// to `context_tokens` positions after BOS.
inline std::pair<double, std::size_t> conversation_log_prob(const TokenConversation& conv, const WeightStore& w,
                                                            const ModelConfig& cfg, std::size_t context_tokens) {
  double lp = 0;
  std::size_t n = 0;
  LMState context = start_state(w, cfg);
  for (std::size_t i = 0; i < conv.size(); ++i) {
    auto scored = score_continuation(context, w, cfg, conv[i]);
    lp += scored.total();
    n += conv[i].size();
    if (i + 1 < conv.size()) context = carry_context(scored.state, w, cfg, context_tokens);
  }
  return {lp, n};
}

/// exp(-(1/N) sum log P) over every content token of every reference.
inline EvalReport perplexity(std::span<const TokenConversation> corpus, const WeightStore& w, const ModelConfig& cfg,
                             std::size_t context_tokens, std::string dataset = "", std::size_t threads = 1) {
  if (corpus.empty()) throw InputError("perplexity: empty corpus");
  const auto parts = parallel_map(corpus.size(), threads, [&](std::size_t i) {
    return conversation_log_prob(corpus[i], w, cfg, context_tokens);
  });
  double lp = 0;
  std::size_t n = 0;
  for (const auto& [l, c] : parts) {
    lp += l;
    n += c;
  }
  if (n == 0) throw InputError("perplexity: corpus has no tokens to score");
  EvalReport r;
  r.dataset = std::move(dataset);
  r.context_tokens = context_tokens;
  r.metric = Metric::ppl;
  r.value = std::exp(-lp / static_cast<double>(n));
  r.count = n;
  r.log_prob = lp;
  return r;
}

struct EditCounts {
  std::size_t substitutions = 0;
  std::size_t deletions = 0;
  std::size_t insertions = 0;
  std::size_t total() const { return substitutions + deletions + insertions; }
};

/// Minimum-edit alignment of hyp against ref. Among equal-cost alignments
/// the backtrace prefers substitutions, then deletions.
template <class T>
EditCounts edit_counts(std::span<const T> hyp, std::span<const T> ref) {
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<std::size_t> d((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return d[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = i;
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = j;
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      const std::size_t sub = at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      at(i, j) = std::min({sub, at(i - 1, j) + 1, at(i, j - 1) + 1});
    }
  }
  EditCounts c;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && at(i, j) == at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1)) {
      if (ref[i - 1] != hyp[j - 1]) ++c.substitutions;
      --i, --j;
    } else if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
      ++c.deletions;
      --i;
    } else {
      ++c.insertions;
      --j;
    }
  }
  return c;
}

using WordSeq = std::vector<std::string>;

inline WordSeq split_words(const std::string& text) {
  std::istringstream in(text);
  WordSeq out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

/// (S + D + I) / N summed over the corpus.
inline EvalReport wer(std::span<const WordSeq> hyps, std::span<const WordSeq> refs, std::string dataset = "") {
  if (hyps.size() != refs.size()) {
    throw InputError("wer: " + std::to_string(hyps.size()) + " hypotheses for " + std::to_string(refs.size()) +
                     " references");
  }
  EvalReport r;
  r.dataset = std::move(dataset);
  r.metric = Metric::wer;
  for (std::size_t u = 0; u < refs.size(); ++u) {
    const auto c = edit_counts<std::string>(hyps[u], refs[u]);
    r.substitutions += c.substitutions;
    r.deletions += c.deletions;
    r.insertions += c.insertions;
    r.count += refs[u].size();
  }
  if (r.count == 0) throw InputError("wer: references contain no words");
  r.value = static_cast<double>(r.substitutions + r.deletions + r.insertions) / static_cast<double>(r.count);
  return r;
}

/// Plain-text table, one row per report.
inline std::string format_table(std::span<const EvalReport> reports) {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof line, "%-16s %8s %6s %10s %10s\n", "dataset", "context", "metric", "value", "count");
  out << line;
  for (const auto& r : reports) {
    const double shown = r.metric == Metric::wer ? 100.0 * r.value : r.value;
    std::snprintf(line, sizeof line, "%-16s %8zu %6s %10.3f %10zu\n", r.dataset.empty() ? "-" : r.dataset.c_str(),
                  r.context_tokens, to_string(r.metric).c_str(), shown, r.count);
    out << line;
  }
  return out.str();
}

}  // namespace xutt
