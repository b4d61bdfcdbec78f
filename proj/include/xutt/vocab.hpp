#pragma once

// Subword inventory shared by the acoustic model and the LM, plus the text
// normalizer applied to references and hypotheses before scoring.

#include <cctype>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "xutt/error.hpp"
#include "xutt/model.hpp"

namespace xutt {

// Word-start marker carried by subword strings.
inline constexpr std::string_view kWordMarker = "\xe2\x96\x81";  // U+2581

/// Content units have ids 0..C-1 on both sides. The AM appends blank (id C);
/// the LM appends BOS (C) and SEP (C + 1).
class Vocab {
 public:
  Vocab() = default;
  explicit Vocab(std::vector<std::string> units) : units_(std::move(units)) {
    if (units_.empty()) throw InputError("vocabulary has no units");
    for (std::size_t i = 0; i < units_.size(); ++i) {
      if (units_[i].empty()) throw InputError("vocabulary unit " + std::to_string(i) + " is empty");
      if (!index_.emplace(units_[i], static_cast<TokenId>(i)).second) {
        throw InputError("duplicate vocabulary unit '" + units_[i] + "'");
      }
      max_len_ = std::max(max_len_, units_[i].size());
    }
  }

  std::size_t content_size() const { return units_.size(); }
  std::size_t am_size() const { return units_.size() + 1; }
  std::size_t lm_size() const { return units_.size() + 2; }
  TokenId blank() const { return static_cast<TokenId>(units_.size()); }
  TokenId bos() const { return static_cast<TokenId>(units_.size()); }
  TokenId sep() const { return static_cast<TokenId>(units_.size() + 1); }
  const std::vector<std::string>& units() const { return units_; }
  const std::string& unit(TokenId id) const {
    if (id >= units_.size()) throw VocabError("token id " + std::to_string(id) + " is not a content unit");
    return units_[id];
  }

  /// Throws SchemaError unless the LM vocabulary is this inventory + BOS + SEP.
  void check_model(const ModelConfig& cfg) const {
    if (cfg.vocab_size != lm_size()) {
      throw SchemaError("model vocabulary " + std::to_string(cfg.vocab_size) + " does not match " +
                        std::to_string(content_size()) + " units + BOS + SEP");
    }
  }

  /// Greedy longest-match segmentation of normalized text; each word is
  /// prefixed with the word marker.
  std::vector<TokenId> encode(std::string_view text) const {
    std::string marked;
    for (const auto& w : split(text)) {
      marked += kWordMarker;
      marked += w;
    }
    std::vector<TokenId> out;
    std::size_t pos = 0;
    while (pos < marked.size()) {
      std::size_t len = std::min(max_len_, marked.size() - pos);
      for (; len > 0; --len) {
        if (auto it = index_.find(marked.substr(pos, len)); it != index_.end()) {
          out.push_back(it->second);
          break;
        }
      }
      if (len == 0) throw InputError("text '" + std::string(text) + "' cannot be segmented at byte " + std::to_string(pos));
      pos += len;
    }
    return out;
  }

  /// Joins units, turning word markers into single spaces.
  std::string decode(std::span<const TokenId> ids) const {
    std::string joined;
    for (TokenId id : ids) joined += unit(id);
    std::string out;
    for (std::size_t i = 0; i < joined.size();) {
      if (joined.compare(i, kWordMarker.size(), kWordMarker) == 0) {
        if (!out.empty() && out.back() != ' ') out += ' ';
        i += kWordMarker.size();
      } else {
        out += joined[i++];
      }
    }
    while (!out.empty() && out.back() == ' ') out.pop_back();
    return out;
  }

  static std::vector<std::string> split(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : text) {
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!cur.empty()) out.push_back(std::move(cur));
        cur.clear();
      } else {
        cur += c;
      }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
  }

  /// Whole-word synthetic inventory of n units: consonant-vowel syllable
  /// words, each carrying the word marker, so any unit sequence round-trips
  /// through decode/encode.
  static Vocab synthetic(std::size_t n) {
    static constexpr std::string_view consonants = "bdfgklmnprstvz";
    static constexpr std::string_view vowels = "aeiou";
    std::vector<std::string> syllables;
    for (char c : consonants) {
      for (char v : vowels) syllables.push_back(std::string{c, v});
    }
    std::vector<std::string> units;
    for (std::size_t i = 0; units.size() < n; ++i) {
      std::string word;
      std::size_t k = i;
      do {
        word += syllables[k % syllables.size()];
        k /= syllables.size();
      } while (k > 0);
      units.push_back(std::string(kWordMarker) + word);
    }
    return Vocab(std::move(units));
  }

 private:
  std::vector<std::string> units_;
  std::unordered_map<std::string, TokenId> index_;
  std::size_t max_len_ = 0;
};

/// Lower-cases ASCII, drops punctuation other than apostrophes, collapses
/// whitespace, and rejoins split contractions ("it 's" -> "it's").
inline std::string normalize_text(std::string_view text) {
  std::string kept;
  for (char c : text) {
    const auto u = static_cast<unsigned char>(c);
    if (std::isalnum(u) || c == '\'' || u >= 0x80) {
      kept += static_cast<char>(std::tolower(u));
    } else if (std::isspace(u)) {
      kept += ' ';
    }
  }
  std::string out;
  for (const auto& w : Vocab::split(kept)) {
    if (!out.empty() && w.front() != '\'') out += ' ';
    out += w;
  }
  return out;
}

}  // namespace xutt
