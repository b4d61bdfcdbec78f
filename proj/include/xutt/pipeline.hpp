#pragma once

// Corpus-level glue: decode or rescore every conversation and score the
// result against the references, and the matching tuner objectives.

#include <vector>

#include "xutt/ctc_decoder.hpp"
#include "xutt/evalkit.hpp"
#include "xutt/rescorer.hpp"
#include "xutt/tuner.hpp"
#include "xutt/vocab.hpp"

namespace xutt {

using Corpus = std::vector<std::vector<UtteranceInput>>;

inline std::vector<WordSeq> transcript_words(const std::vector<std::vector<UtteranceTranscript>>& out,
                                             const Vocab& vocab) {
  std::vector<WordSeq> words;
  for (const auto& conv : out) {
    for (const auto& t : conv) words.push_back(split_words(vocab.decode(t.tokens)));
  }
  return words;
}

inline std::vector<WordSeq> reference_words(const Corpus& corpus, const Vocab& vocab) {
  std::vector<WordSeq> words;
  for (const auto& conv : corpus) {
    for (const auto& u : conv) {
      if (!u.reference) throw InputError("utterance '" + u.utterance_id + "' has no reference");
      words.push_back(split_words(vocab.decode(*u.reference)));
    }
  }
  return words;
}

inline std::vector<std::vector<UtteranceTranscript>> best_transcripts(const std::vector<std::vector<NBestList>>& lists) {
  std::vector<std::vector<UtteranceTranscript>> out;
  for (const auto& conv : lists) {
    auto& o = out.emplace_back();
    for (const auto& l : conv) o.push_back(best_transcript(l));
  }
  return out;
}

inline EvalReport fusion_wer(const Corpus& corpus, const WeightStore& w, const ModelConfig& cfg, const Vocab& vocab,
                             const FusionParams& p, const ContextOptions& ctx, std::size_t threads = 1) {
  const auto out = decode_corpus(corpus, w, cfg, p, ctx, threads);
  auto r = wer(transcript_words(out, vocab), reference_words(corpus, vocab));
  r.context_tokens = ctx.max_context_tokens;
  return r;
}

inline EvalReport rescore_wer(const Corpus& corpus, const WeightStore& w, const ModelConfig& cfg, const Vocab& vocab,
                              const RescoreOptions& opts, std::size_t threads = 1) {
  const auto out = rescore_corpus(corpus, w, cfg, opts, threads);
  auto r = wer(transcript_words(best_transcripts(out), vocab), reference_words(corpus, vocab));
  r.context_tokens = opts.context.max_context_tokens;
  return r;
}

inline FusionParams with_params(FusionParams p, const ParamSet& s) {
  if (auto it = s.find("alpha"); it != s.end()) p.alpha = it->second;
  if (auto it = s.find("beta"); it != s.end()) p.beta_bonus = it->second;
  if (auto it = s.find("cutoff"); it != s.end()) p.cutoff = it->second;
  return p;
}

inline RescoreOptions with_params(RescoreOptions o, const ParamSet& s) {
  if (auto it = s.find("w_first"); it != s.end()) o.params.w_first = it->second;
  if (auto it = s.find("w_tlm"); it != s.end()) o.params.w_tlm = it->second;
  if (auto it = s.find("length_penalty"); it != s.end()) o.params.length_penalty = it->second;
  return o;
}

/// Random search of fusion parameters minimizing corpus WER. Trials run
/// sequentially; each decodes the corpus with `threads` workers.
inline SearchOutcome tune_fusion(const Corpus& corpus, const WeightStore& w, const ModelConfig& cfg,
                                 const Vocab& vocab, const SearchSpace& space, const FusionParams& base,
                                 const ContextOptions& ctx, std::size_t threads = 1) {
  return random_search(space, [&](const ParamSet& s) {
    return fusion_wer(corpus, w, cfg, vocab, with_params(base, s), ctx, threads).value;
  });
}

/// Each trial reruns whole conversations: the history carried between
/// utterances follows the rescored best hypothesis, which the weights change.
inline SearchOutcome tune_rescore(const Corpus& corpus, const WeightStore& w, const ModelConfig& cfg,
                                  const Vocab& vocab, const SearchSpace& space, const RescoreOptions& base,
                                  std::size_t threads = 1) {
  return random_search(space, [&](const ParamSet& s) {
    return rescore_wer(corpus, w, cfg, vocab, with_params(base, s), threads).value;
  });
}

}  // namespace xutt
