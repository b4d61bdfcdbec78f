#pragma once

// On-disk formats. Tensors (weights, posteriors) share one container:
//   4-byte magic | u64 LE header length | JSON header | LE float32 payload
// Everything multi-record is JSON lines.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "xutt/ctc_decoder.hpp"
#include "xutt/error.hpp"
#include "xutt/evalkit.hpp"
#include "xutt/model.hpp"
#include "xutt/rescorer.hpp"
#include "xutt/tuner.hpp"
#include "xutt/vocab.hpp"

namespace xutt {

using Json = nlohmann::json;
namespace fs = std::filesystem;

inline constexpr char kWeightsMagic[4] = {'T', 'L', 'M', 'W'};
inline constexpr char kPosteriorMagic[4] = {'C', 'T', 'C', 'P'};

namespace detail {

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("write to '" + path.string() + "' failed");
}

inline void append_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out += static_cast<char>((v >> (8 * i)) & 0xff);
}

inline void append_floats_le(std::string& out, std::span<const float> v) {
  const std::size_t at = out.size();
  out.resize(at + 4 * v.size());
  std::memcpy(out.data() + at, v.data(), 4 * v.size());
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = at; i < out.size(); i += 4) std::reverse(out.begin() + i, out.begin() + i + 4);
  }
}

inline void read_floats_le(const char* src, std::span<float> dst) {
  std::memcpy(dst.data(), src, 4 * dst.size());
  if constexpr (std::endian::native == std::endian::big) {
    auto* bytes = reinterpret_cast<char*>(dst.data());
    for (std::size_t i = 0; i < 4 * dst.size(); i += 4) std::reverse(bytes + i, bytes + i + 4);
  }
}

struct Container {
  Json header;
  std::string_view payload;
};

inline std::string pack(const char (&magic)[4], const Json& header, const std::string& payload) {
  const std::string h = header.dump();
  std::string out(magic, 4);
  append_u64_le(out, h.size());
  out += h;
  out += payload;
  return out;
}

inline Container unpack(const std::string& bytes, const char (&magic)[4], const std::string& what) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), magic, 4) != 0) {
    throw FormatError(what + ": bad magic, expected '" + std::string(magic, 4) + "'");
  }
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[4 + i])) << (8 * i);
  if (len > bytes.size() - 12) throw FormatError(what + ": header length exceeds file size");
  Container c;
  try {
    c.header = Json::parse(bytes.begin() + 12, bytes.begin() + 12 + static_cast<std::ptrdiff_t>(len));
  } catch (const Json::exception& e) {
    throw FormatError(what + ": header is not valid JSON (" + e.what() + ")");
  }
  c.payload = std::string_view(bytes).substr(12 + len);
  return c;
}

template <class T>
T field(const Json& j, const char* key, const std::string& what) {
  if (!j.is_object() || !j.contains(key)) throw FormatError(what + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const Json::exception&) {
    throw FormatError(what + ": field '" + key + "' has the wrong type");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Model config and weights

inline Json config_to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers},         {"d_model", c.d_model},
          {"n_query_heads", c.n_query_heads}, {"head_dim", c.head_dim},
          {"ffn_expansion", c.ffn_expansion}, {"vocab_size", c.vocab_size},
          {"pos_bias_hidden", c.pos_bias_hidden}, {"eps_norm", c.eps_norm},
          {"attention", to_string(c.attention)}};
}

inline ModelConfig config_from_json(const Json& j) {
  const std::string what = "model config";
  ModelConfig c;
  c.n_layers = detail::field<std::size_t>(j, "n_layers", what);
  c.d_model = detail::field<std::size_t>(j, "d_model", what);
  c.n_query_heads = detail::field<std::size_t>(j, "n_query_heads", what);
  c.head_dim = detail::field<std::size_t>(j, "head_dim", what);
  c.ffn_expansion = detail::field<std::size_t>(j, "ffn_expansion", what);
  c.vocab_size = detail::field<std::size_t>(j, "vocab_size", what);
  c.pos_bias_hidden = detail::field<std::size_t>(j, "pos_bias_hidden", what);
  c.eps_norm = detail::field<double>(j, "eps_norm", what);
  try {
    c.attention = attention_variant_from_string(detail::field<std::string>(j, "attention", what));
  } catch (const InputError& e) {
    throw FormatError(std::string("model config: ") + e.what());
  }
  return c;
}

struct LoadedModel {
  ModelConfig config;
  WeightStore weights;
  std::optional<Vocab> vocab;  // present when the file carries its unit inventory
};

inline std::string serialize_weights(const ModelConfig& cfg, const WeightStore& w, const Vocab* vocab = nullptr) {
  check_shapes(w, cfg);
  Json index = Json::array();
  std::string payload;
  w.for_each([&](const std::string& name, const Matrix& m) {
    index.push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}, {"dtype", "f32"}, {"offset", payload.size()}});
    detail::append_floats_le(payload, m.data());
  });
  Json header{{"config", config_to_json(cfg)}, {"tensors", index}};
  if (vocab) header["vocab"] = vocab->units();
  return detail::pack(kWeightsMagic, header, payload);
}

inline LoadedModel parse_weights(const std::string& bytes, const std::string& what = "weights") {
  const auto c = detail::unpack(bytes, kWeightsMagic, what);
  LoadedModel out;
  out.config = config_from_json(detail::field<Json>(c.header, "config", what));
  try {
    out.config.validate();
  } catch (const SchemaError& e) {
    throw FormatError(what + ": " + e.what());
  }
  const auto schema = tensor_schema(out.config);
  const auto index = detail::field<Json>(c.header, "tensors", what);
  if (!index.is_array()) throw FormatError(what + ": tensor index is not a list");
  out.weights = empty_store(out.config);
  std::size_t i = 0;
  out.weights.for_each([&](const std::string& name, Matrix& m) {
    if (i >= index.size()) throw FormatError(what + ": tensor '" + name + "' missing from the index");
    const Json& entry = index[i];
    const auto& spec = schema[i++];
    const auto got = detail::field<std::string>(entry, "name", what);
    if (got != name) throw FormatError(what + ": expected tensor '" + name + "', index has '" + got + "'");
    const auto shape = detail::field<std::vector<std::size_t>>(entry, "shape", what);
    if (shape.size() != 2 || shape[0] != spec.rows || shape[1] != spec.cols) {
      throw FormatError(what + ": tensor '" + name + "' shape disagrees with the config (expected " +
                        std::to_string(spec.rows) + "x" + std::to_string(spec.cols) + ")");
    }
    if (detail::field<std::string>(entry, "dtype", what) != "f32") {
      throw FormatError(what + ": tensor '" + name + "' has unsupported dtype");
    }
    const auto offset = detail::field<std::size_t>(entry, "offset", what);
    const std::size_t nbytes = 4 * spec.rows * spec.cols;
    if (offset > c.payload.size() || c.payload.size() - offset < nbytes) {
      throw FormatError(what + ": payload truncated inside tensor '" + name + "'");
    }
    m = Matrix(spec.rows, spec.cols);
    detail::read_floats_le(c.payload.data() + offset, m.data());
  });
  if (i != index.size()) throw FormatError(what + ": index lists more tensors than the config implies");
  if (c.header.contains("vocab")) {
    try {
      out.vocab = Vocab(c.header["vocab"].get<std::vector<std::string>>());
    } catch (const InputError& e) {
      throw FormatError(what + ": " + e.what());
    } catch (const Json::exception&) {
      throw FormatError(what + ": vocab is not a list of strings");
    }
    if (out.vocab->lm_size() != out.config.vocab_size) {
      throw FormatError(what + ": vocab lists " + std::to_string(out.vocab->content_size()) +
                        " units but the config vocabulary is " + std::to_string(out.config.vocab_size));
    }
  }
  return out;
}

inline void save_weights(const fs::path& path, const ModelConfig& cfg, const WeightStore& w,
                         const Vocab* vocab = nullptr) {
  detail::write_file(path, serialize_weights(cfg, w, vocab));
}

inline LoadedModel load_weights(const fs::path& path) {
  return parse_weights(detail::read_file(path), "weights '" + path.string() + "'");
}

/// The file's own inventory, or the synthetic one matching its size.
inline Vocab vocab_for(const LoadedModel& m) {
  return m.vocab ? *m.vocab : Vocab::synthetic(m.config.content_size());
}

// ---------------------------------------------------------------------------
// Posteriors

inline std::string serialize_posterior(const AMPosterior& p) {
  const Json header{{"utterance_id", p.utterance_id}, {"T", p.frames()}, {"vocab", p.vocab()}, {"blank_id", p.blank_id}};
  std::string payload;
  detail::append_floats_le(payload, p.log_probs.data());
  return detail::pack(kPosteriorMagic, header, payload);
}

/// Rows must exponentiate to one within `tol`.
inline AMPosterior parse_posterior(const std::string& bytes, const std::string& what = "posterior",
                                   double tol = 1e-3) {
  const auto c = detail::unpack(bytes, kPosteriorMagic, what);
  AMPosterior p;
  p.utterance_id = detail::field<std::string>(c.header, "utterance_id", what);
  const auto T = detail::field<std::size_t>(c.header, "T", what);
  const auto V = detail::field<std::size_t>(c.header, "vocab", what);
  p.blank_id = detail::field<TokenId>(c.header, "blank_id", what);
  if (c.payload.size() != 4 * T * V) {
    throw FormatError(what + ": header says " + std::to_string(T) + "x" + std::to_string(V) + " but payload holds " +
                      std::to_string(c.payload.size()) + " bytes");
  }
  p.log_probs = Matrix(T, V);
  detail::read_floats_le(c.payload.data(), p.log_probs.data());
  p.validate(tol);
  return p;
}

inline void save_posterior(const fs::path& path, const AMPosterior& p) { detail::write_file(path, serialize_posterior(p)); }

inline AMPosterior load_posterior(const fs::path& path) {
  return parse_posterior(detail::read_file(path), "posterior '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// Manifests

struct ManifestUtterance {
  std::string utterance_id;
  double start_s = 0;
  double end_s = 0;
  std::string posterior;  // path, relative to the manifest's directory unless absolute
  std::optional<std::string> reference;

  bool operator==(const ManifestUtterance&) const = default;
};

struct ConversationManifest {
  std::string conversation_id;
  std::vector<ManifestUtterance> utterances;

  bool operator==(const ConversationManifest&) const = default;
};

/// One record per line. Conversations appear in order of first mention and
/// their utterances are sorted by start time.
inline std::vector<ConversationManifest> parse_manifest(const std::string& text) {
  std::vector<ConversationManifest> out;
  std::map<std::string, std::size_t> where;
  std::istringstream in(text);
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string what = "manifest line " + std::to_string(lineno);
    Json j;
    try {
      j = Json::parse(line);
    } catch (const Json::exception& e) {
      throw FormatError(what + ": " + e.what());
    }
    ManifestUtterance u;
    const auto conv = detail::field<std::string>(j, "conversation_id", what);
    u.utterance_id = detail::field<std::string>(j, "utterance_id", what);
    u.start_s = detail::field<double>(j, "start_s", what);
    u.end_s = detail::field<double>(j, "end_s", what);
    u.posterior = detail::field<std::string>(j, "posterior", what);
    if (j.contains("reference") && !j["reference"].is_null()) u.reference = detail::field<std::string>(j, "reference", what);
    if (u.start_s > u.end_s) throw InputError(what + ": utterance '" + u.utterance_id + "' ends before it starts");
    auto [it, fresh] = where.emplace(conv, out.size());
    if (fresh) out.push_back({conv, {}});
    out[it->second].utterances.push_back(std::move(u));
  }
  for (auto& c : out) {
    std::stable_sort(c.utterances.begin(), c.utterances.end(),
                     [](const auto& a, const auto& b) { return a.start_s < b.start_s; });
    std::map<std::string, int> seen;
    for (const auto& u : c.utterances) {
      if (seen[u.utterance_id]++) {
        throw InputError("conversation '" + c.conversation_id + "' repeats utterance id '" + u.utterance_id + "'");
      }
    }
  }
  return out;
}

inline std::string serialize_manifest(const std::vector<ConversationManifest>& convs) {
  std::string out;
  for (const auto& c : convs) {
    for (const auto& u : c.utterances) {
      Json j{{"conversation_id", c.conversation_id}, {"utterance_id", u.utterance_id}, {"start_s", u.start_s},
             {"end_s", u.end_s}, {"posterior", u.posterior}};
      if (u.reference) j["reference"] = *u.reference;
      out += j.dump() + "\n";
    }
  }
  return out;
}

struct Manifest {
  fs::path base_dir;
  std::vector<ConversationManifest> conversations;
};

inline Manifest load_manifest(const fs::path& path) {
  Manifest m{path.parent_path(), parse_manifest(detail::read_file(path))};
  if (m.conversations.empty()) throw InputError("manifest '" + path.string() + "' has no utterances");
  return m;
}

/// Normalized, tokenized reference words of a manifest utterance.
inline std::vector<TokenId> reference_tokens(const ManifestUtterance& u, const Vocab& vocab) {
  if (!u.reference) throw InputError("utterance '" + u.utterance_id + "' has no reference");
  return vocab.encode(normalize_text(*u.reference));
}

/// Loads posteriors and (when present) tokenized references.
inline std::vector<std::vector<UtteranceInput>> load_conversations(const Manifest& m, const Vocab& vocab,
                                                                   std::size_t threads = 1) {
  std::vector<std::pair<std::size_t, std::size_t>> flat;
  for (std::size_t c = 0; c < m.conversations.size(); ++c) {
    for (std::size_t i = 0; i < m.conversations[c].utterances.size(); ++i) flat.emplace_back(c, i);
  }
  auto loaded = parallel_map(flat.size(), threads, [&](std::size_t k) {
    const auto& u = m.conversations[flat[k].first].utterances[flat[k].second];
    const fs::path p = fs::path(u.posterior).is_absolute() ? fs::path(u.posterior) : m.base_dir / u.posterior;
    UtteranceInput in{u.utterance_id, u.start_s, u.end_s, load_posterior(p), std::nullopt};
    if (in.posterior.vocab() != vocab.am_size()) {
      throw SchemaError("posterior '" + u.utterance_id + "' has " + std::to_string(in.posterior.vocab()) +
                        " units, vocabulary expects " + std::to_string(vocab.am_size()));
    }
    if (u.reference) in.reference = reference_tokens(u, vocab);
    return in;
  });
  std::vector<std::vector<UtteranceInput>> out(m.conversations.size());
  for (std::size_t k = 0; k < flat.size(); ++k) out[flat[k].first].push_back(std::move(loaded[k]));
  return out;
}

inline std::vector<TokenConversation> reference_corpus(const Manifest& m, const Vocab& vocab) {
  std::vector<TokenConversation> out;
  for (const auto& c : m.conversations) {
    TokenConversation conv;
    for (const auto& u : c.utterances) conv.push_back(reference_tokens(u, vocab));
    out.push_back(std::move(conv));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Results

inline Json transcript_json(const std::string& conversation_id, const UtteranceTranscript& t, const Vocab& vocab) {
  return {{"conversation_id", conversation_id}, {"utterance_id", t.utterance_id}, {"tokens", t.tokens},
          {"text", vocab.decode(t.tokens)}, {"score", t.score}};
}

inline Json nbest_json(const NBestList& l, const Vocab& vocab) {
  Json hyps = Json::array();
  for (const auto& e : l.entries) {
    hyps.push_back({{"tokens", e.tokens},
                    {"text", vocab.decode(e.tokens)},
                    {"first_pass", e.first_pass},
                    {"tlm", e.tlm ? Json(*e.tlm) : Json(nullptr)},
                    {"final", e.final_score ? Json(*e.final_score) : Json(nullptr)}});
  }
  return {{"utterance_id", l.utterance_id}, {"hyps", hyps}};
}

inline Json report_json(const EvalReport& r) {
  Json j{{"dataset", r.dataset}, {"context_tokens", r.context_tokens}, {"metric", to_string(r.metric)},
         {"value", r.value}, {"count", r.count}};
  if (r.metric == Metric::wer) {
    j["substitutions"] = r.substitutions;
    j["deletions"] = r.deletions;
    j["insertions"] = r.insertions;
  } else {
    j["log_prob"] = r.log_prob;
  }
  return j;
}

inline Json trial_json(const Trial& t) {
  Json j{{"trial", t.index}, {"params", t.params}};
  if (t.value) {
    j["status"] = "ok";
    j["value"] = *t.value;
  } else {
    j["status"] = "failed";
    j["error"] = t.error;
  }
  return j;
}

/// Word sequences keyed by utterance id from JSON lines carrying either
/// "text" or "reference".
inline std::map<std::string, WordSeq> load_texts(const fs::path& path) {
  std::map<std::string, WordSeq> out;
  std::istringstream in(detail::read_file(path));
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string what = path.string() + " line " + std::to_string(lineno);
    Json j;
    try {
      j = Json::parse(line);
    } catch (const Json::exception& e) {
      throw FormatError(what + ": " + e.what());
    }
    const auto id = detail::field<std::string>(j, "utterance_id", what);
    const char* key = j.contains("text") ? "text" : "reference";
    if (!out.emplace(id, split_words(normalize_text(detail::field<std::string>(j, key, what)))).second) {
      throw InputError(what + ": duplicate utterance id '" + id + "'");
    }
  }
  return out;
}

}  // namespace xutt
