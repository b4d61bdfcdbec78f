#pragma once

// Synthetic conversational corpus. References are sampled from a toy LM
// with cross-utterance history; posteriors are noisy one-hot CTC alignments
// of those references.

#include <cmath>
#include <string>
#include <vector>

#include "xutt/ctc_decoder.hpp"
#include "xutt/io.hpp"
#include "xutt/model.hpp"
#include "xutt/random.hpp"
#include "xutt/session.hpp"
#include "xutt/vocab.hpp"

namespace xutt {

struct FixtureSpec {
  std::size_t n_conversations = 4;
  std::size_t utterances_per_conv = 6;
  std::size_t frames = 40;  // per utterance, 40 ms each
  std::size_t vocab = 16;   // LM vocabulary incl. BOS and SEP
  double blank_rate = 0.4;  // per-frame chance that a token run turns blank
  double noise = 1.5;       // std of Gaussian noise added to AM logits
  double am_sharpness = 4.0;
  double lm_sharpness = 4.0;            // scales the LM output projection
  std::size_t history_tokens = 1000;    // context used when sampling references

  void validate() const {
    if (n_conversations < 1 || utterances_per_conv < 1) throw InputError("fixture needs at least one utterance");
    if (frames < 2) throw InputError("fixture frames must be >= 2");
    if (vocab < 4) throw InputError("fixture vocab must be >= 4");
    if (blank_rate < 0 || blank_rate > 1) throw InputError("fixture blank_rate must lie in [0, 1]");
    if (noise < 0) throw InputError("fixture noise must be >= 0");
  }
};

inline FixtureSpec fixture_spec_from_json(const Json& j) {
  FixtureSpec s;
  if (!j.is_object()) throw FormatError("fixture spec must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "n_conversations") s.n_conversations = value.get<std::size_t>();
      else if (key == "utterances_per_conv") s.utterances_per_conv = value.get<std::size_t>();
      else if (key == "frames") s.frames = value.get<std::size_t>();
      else if (key == "vocab") s.vocab = value.get<std::size_t>();
      else if (key == "blank_rate") s.blank_rate = value.get<double>();
      else if (key == "noise") s.noise = value.get<double>();
      else if (key == "am_sharpness") s.am_sharpness = value.get<double>();
      else if (key == "lm_sharpness") s.lm_sharpness = value.get<double>();
      else if (key == "history_tokens") s.history_tokens = value.get<std::size_t>();
      else throw FormatError("fixture spec: unknown field '" + key + "'");
    } catch (const Json::exception&) {
      throw FormatError("fixture spec: field '" + key + "' has the wrong type");
    }
  }
  s.validate();
  return s;
}

inline Json fixture_spec_to_json(const FixtureSpec& s) {
  return {{"n_conversations", s.n_conversations}, {"utterances_per_conv", s.utterances_per_conv},
          {"frames", s.frames},                   {"vocab", s.vocab},
          {"blank_rate", s.blank_rate},           {"noise", s.noise},
          {"am_sharpness", s.am_sharpness},       {"lm_sharpness", s.lm_sharpness},
          {"history_tokens", s.history_tokens}};
}

struct FixtureUtterance {
  std::string utterance_id;
  double start_s = 0;
  double end_s = 0;
  std::vector<TokenId> tokens;
  AMPosterior posterior;
};

struct Fixture {
  ModelConfig config;
  WeightStore weights;
  Vocab vocab;
  std::vector<std::string> conversation_ids;
  std::vector<std::vector<FixtureUtterance>> conversations;

  /// Decoder inputs with the references attached.
  std::vector<std::vector<UtteranceInput>> inputs() const {
    std::vector<std::vector<UtteranceInput>> out;
    for (const auto& conv : conversations) {
      auto& o = out.emplace_back();
      for (const auto& u : conv) o.push_back({u.utterance_id, u.start_s, u.end_s, u.posterior, u.tokens});
    }
    return out;
  }

  std::vector<TokenConversation> references() const {
    std::vector<TokenConversation> out;
    for (const auto& conv : conversations) {
      auto& o = out.emplace_back();
      for (const auto& u : conv) o.push_back(u.tokens);
    }
    return out;
  }
};

namespace detail {

inline TokenId sample_categorical(Rng& rng, std::span<const double> log_probs) {
  const double u = rng.uniform();
  double acc = 0;
  for (std::size_t i = 0; i < log_probs.size(); ++i) {
    acc += std::exp(log_probs[i]);
    if (u < acc) return static_cast<TokenId>(i);
  }
  return static_cast<TokenId>(log_probs.size() - 1);
}

/// Frame labels for a reference: each token gets a run of frames that starts
/// with the token and may trail off into blank; identical adjacent
/// tokens are separated by a blank; spare frames are spread at random.
inline std::vector<TokenId> align(Rng& rng, std::span<const TokenId> tokens, std::size_t frames, TokenId blank,
                                  double blank_rate) {
  std::size_t separators = 0;
  for (std::size_t i = 1; i < tokens.size(); ++i) separators += tokens[i] == tokens[i - 1];
  const std::size_t L = tokens.size();
  std::vector<std::size_t> run(L + 1, 0);  // last slot: trailing silence
  for (std::size_t i = 0; i < L; ++i) run[i] = 1;
  for (std::size_t k = L + separators; k < frames; ++k) ++run[rng.below(L + 1)];
  std::vector<TokenId> out;
  for (std::size_t i = 0; i < L; ++i) {
    if (i > 0 && tokens[i] == tokens[i - 1]) out.push_back(blank);
    // once a run turns blank it stays blank, so the token is emitted once
    bool blanked = blank_rate >= 1.0;
    for (std::size_t f = 0; f < run[i]; ++f) {
      if (f > 0 && !blanked) blanked = rng.uniform() < blank_rate;
      out.push_back(blanked ? blank : tokens[i]);
    }
  }
  out.insert(out.end(), run[L], blank);
  return out;
}

}  // namespace detail

/// Deterministic in (seed, spec).
inline Fixture make_fixture(std::uint64_t seed, const FixtureSpec& spec) {
  spec.validate();
  Fixture fx;
  fx.config = ModelConfig::toy(spec.vocab);
  fx.weights = generate_weights(seed, fx.config);
  for (float& x : fx.weights.output.data()) x *= static_cast<float>(spec.lm_sharpness);
  fx.vocab = Vocab::synthetic(fx.config.content_size());
  const auto& cfg = fx.config;
  const auto& w = fx.weights;
  const TokenId blank = fx.vocab.blank();
  const std::size_t am_vocab = fx.vocab.am_size();
  const std::size_t max_len = std::max<std::size_t>(1, spec.frames / 2);

  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  for (std::size_t c = 0; c < spec.n_conversations; ++c) {
    const std::string conv_id = "conv" + std::to_string(c);
    fx.conversation_ids.push_back(conv_id);
    auto& conv = fx.conversations.emplace_back();
    LMState history = start_state(w, cfg);
    double clock = 0;
    for (std::size_t u = 0; u < spec.utterances_per_conv; ++u) {
      FixtureUtterance fu;
      fu.utterance_id = conv_id + "-u" + std::to_string(u);
      const std::size_t len = 1 + rng.below(max_len);
      LMState state = history;
      for (std::size_t k = 0; k < len; ++k) {
        const auto lp = lookahead_log_probs(state, w, cfg);
        fu.tokens.push_back(detail::sample_categorical(rng, lp));
        state = advance(state, w, cfg, {fu.tokens.back()}).state;
      }
      history = carry_context(state, w, cfg, spec.history_tokens);

      const auto labels = detail::align(rng, fu.tokens, spec.frames, blank, spec.blank_rate);
      fu.posterior.utterance_id = fu.utterance_id;
      fu.posterior.blank_id = blank;
      fu.posterior.log_probs = Matrix(labels.size(), am_vocab);
      std::vector<float> z(am_vocab);
      for (std::size_t t = 0; t < labels.size(); ++t) {
        for (std::size_t v = 0; v < am_vocab; ++v) {
          z[v] = static_cast<float>((v == labels[t] ? spec.am_sharpness : 0.0) + spec.noise * rng.normal());
        }
        const auto lp = log_softmax(z);
        for (std::size_t v = 0; v < am_vocab; ++v) fu.posterior.log_probs(t, v) = static_cast<float>(lp[v]);
      }
      clock += 0.2 + 0.8 * rng.uniform();
      fu.start_s = clock;
      clock += 0.04 * static_cast<double>(labels.size());
      fu.end_s = clock;
      conv.push_back(std::move(fu));
    }
  }
  return fx;
}

/// Writes manifest.jsonl, posteriors/<id>.post, weights.tlmw and spec.json.
inline void write_fixture(const Fixture& fx, const FixtureSpec& spec, const fs::path& dir) {
  fs::create_directories(dir / "posteriors");
  std::vector<ConversationManifest> manifest;
  for (std::size_t c = 0; c < fx.conversations.size(); ++c) {
    auto& m = manifest.emplace_back();
    m.conversation_id = fx.conversation_ids[c];
    for (const auto& u : fx.conversations[c]) {
      const std::string rel = "posteriors/" + u.utterance_id + ".post";
      save_posterior(dir / rel, u.posterior);
      m.utterances.push_back({u.utterance_id, u.start_s, u.end_s, rel, fx.vocab.decode(u.tokens)});
    }
  }
  detail::write_file(dir / "manifest.jsonl", serialize_manifest(manifest));
  save_weights(dir / "weights.tlmw", fx.config, fx.weights, &fx.vocab);
  detail::write_file(dir / "spec.json", fixture_spec_to_json(spec).dump(2) + "\n");
}

}  // namespace xutt
