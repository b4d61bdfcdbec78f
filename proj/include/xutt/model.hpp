#pragma once

// Decoder-only transformer language model: pre-norm residual blocks of
// key-query-normalized attention (shared single-head keys/values by default)
// and SwiGLU feed-forward layers, with an MLP position bias over relative
// distance. Inference only.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "xutt/error.hpp"
#include "xutt/random.hpp"
#include "xutt/tensor.hpp"

namespace xutt {

using TokenId = std::uint32_t;

enum class AttentionVariant {
  multi_query,  // one key/value head shared by every query head
  multi_head,   // one key/value head per query head (reference layout)
};

inline const char* to_string(AttentionVariant v) {
  return v == AttentionVariant::multi_query ? "multiquery" : "multihead";
}

inline AttentionVariant attention_variant_from_string(const std::string& s) {
  if (s == "multiquery" || s == "multi_query") return AttentionVariant::multi_query;
  if (s == "multihead" || s == "multi_head") return AttentionVariant::multi_head;
  throw InputError("unknown attention variant '" + s + "'");
}

struct ModelConfig {
  std::size_t n_layers = 12;
  std::size_t d_model = 256;
  std::size_t n_query_heads = 8;
  std::size_t head_dim = 32;
  std::size_t ffn_expansion = 4;
  // content tokens + BOS + SEP; 128 BPE units by default
  std::size_t vocab_size = 130;
  std::size_t pos_bias_hidden = 32;
  double eps_norm = kDefaultNormEps;
  AttentionVariant attention = AttentionVariant::multi_query;

  std::size_t kv_heads() const { return attention == AttentionVariant::multi_query ? 1 : n_query_heads; }
  std::size_t kv_dim() const { return kv_heads() * head_dim; }
  std::size_t ffn_dim() const { return ffn_expansion * d_model; }
  std::size_t content_size() const { return vocab_size - 2; }

  void validate() const {
    if (n_layers < 1 || d_model < 1 || n_query_heads < 1 || head_dim < 1 || ffn_expansion < 1 ||
        pos_bias_hidden < 1) {
      throw SchemaError("model config: every count must be >= 1");
    }
    if (d_model != n_query_heads * head_dim) {
      throw SchemaError("model config: d_model must equal n_query_heads * head_dim");
    }
    if (vocab_size < 4) throw SchemaError("model config: vocab_size must be >= 4");
    if (!(eps_norm > 0.0)) throw SchemaError("model config: eps_norm must be > 0");
  }

  /// 12 layers, width 256, 8 query heads, SwiGLU x4, 128 BPE units.
  static ModelConfig base() { return {}; }

  /// Desk-scale model used by tests and fixtures.
  static ModelConfig toy(std::size_t vocab = 16) {
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 32;
    c.n_query_heads = 4;
    c.head_dim = 8;
    c.vocab_size = vocab;
    return c;
  }

  bool operator==(const ModelConfig&) const = default;
};

struct LayerWeights {
  Matrix attn_norm_gain, attn_norm_bias;  // 1 x d
  Matrix wq;                              // d x d
  Matrix wk, wv;                          // d x kv_dim
  Matrix wo;                              // d x d
  Matrix g;                               // 1 x 1
  Matrix ffn_norm_gain, ffn_norm_bias;    // 1 x d
  Matrix w_gate, w_up;                    // d x ffn
  Matrix w_down;                          // ffn x d

  bool operator==(const LayerWeights&) const = default;
};

struct WeightStore {
  Matrix embedding;  // vocab x d
  std::vector<LayerWeights> layers;
  Matrix pos_w1, pos_b1;  // 1 x hidden
  Matrix pos_w2;          // hidden x n_query_heads
  Matrix pos_b2;          // 1 x n_query_heads
  Matrix final_norm_gain, final_norm_bias;
  Matrix output;                    // d x vocab
  Matrix init_gamma, init_beta;     // 1 x vocab, initial-token modulation

  /// Visits every tensor with its serialized name, in storage order.
  template <class Self, class Fn>
  static void visit(Self& self, Fn&& fn) {
    fn("embedding", self.embedding);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      auto& L = self.layers[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      fn(p + "attn_norm.gain", L.attn_norm_gain);
      fn(p + "attn_norm.bias", L.attn_norm_bias);
      fn(p + "attn.wq", L.wq);
      fn(p + "attn.wk", L.wk);
      fn(p + "attn.wv", L.wv);
      fn(p + "attn.wo", L.wo);
      fn(p + "attn.g", L.g);
      fn(p + "ffn_norm.gain", L.ffn_norm_gain);
      fn(p + "ffn_norm.bias", L.ffn_norm_bias);
      fn(p + "ffn.w_gate", L.w_gate);
      fn(p + "ffn.w_up", L.w_up);
      fn(p + "ffn.w_down", L.w_down);
    }
    fn("pos_bias.w1", self.pos_w1);
    fn("pos_bias.b1", self.pos_b1);
    fn("pos_bias.w2", self.pos_w2);
    fn("pos_bias.b2", self.pos_b2);
    fn("final_norm.gain", self.final_norm_gain);
    fn("final_norm.bias", self.final_norm_bias);
    fn("output", self.output);
    fn("initial.gamma", self.init_gamma);
    fn("initial.beta", self.init_beta);
  }
  template <class Fn>
  void for_each(Fn&& fn) { visit(*this, std::forward<Fn>(fn)); }
  template <class Fn>
  void for_each(Fn&& fn) const { visit(*this, std::forward<Fn>(fn)); }

  bool operator==(const WeightStore&) const = default;
};

enum class TensorKind { weight, gain, bias, scale, modulation_gamma, modulation_beta };

struct TensorSpec {
  std::string name;
  std::size_t rows;
  std::size_t cols;
  TensorKind kind;
};

/// Every tensor implied by a config, in storage order.
inline std::vector<TensorSpec> tensor_schema(const ModelConfig& cfg) {
  const std::size_t d = cfg.d_model, v = cfg.vocab_size, f = cfg.ffn_dim(), kv = cfg.kv_dim();
  const std::size_t ph = cfg.pos_bias_hidden, h = cfg.n_query_heads;
  std::vector<TensorSpec> s;
  s.push_back({"embedding", v, d, TensorKind::weight});
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    s.push_back({p + "attn_norm.gain", 1, d, TensorKind::gain});
    s.push_back({p + "attn_norm.bias", 1, d, TensorKind::bias});
    s.push_back({p + "attn.wq", d, d, TensorKind::weight});
    s.push_back({p + "attn.wk", d, kv, TensorKind::weight});
    s.push_back({p + "attn.wv", d, kv, TensorKind::weight});
    s.push_back({p + "attn.wo", d, d, TensorKind::weight});
    s.push_back({p + "attn.g", 1, 1, TensorKind::scale});
    s.push_back({p + "ffn_norm.gain", 1, d, TensorKind::gain});
    s.push_back({p + "ffn_norm.bias", 1, d, TensorKind::bias});
    s.push_back({p + "ffn.w_gate", d, f, TensorKind::weight});
    s.push_back({p + "ffn.w_up", d, f, TensorKind::weight});
    s.push_back({p + "ffn.w_down", f, d, TensorKind::weight});
  }
  s.push_back({"pos_bias.w1", 1, ph, TensorKind::weight});
  s.push_back({"pos_bias.b1", 1, ph, TensorKind::bias});
  s.push_back({"pos_bias.w2", ph, h, TensorKind::weight});
  s.push_back({"pos_bias.b2", 1, h, TensorKind::bias});
  s.push_back({"final_norm.gain", 1, d, TensorKind::gain});
  s.push_back({"final_norm.bias", 1, d, TensorKind::bias});
  s.push_back({"output", d, v, TensorKind::weight});
  s.push_back({"initial.gamma", 1, v, TensorKind::modulation_gamma});
  s.push_back({"initial.beta", 1, v, TensorKind::modulation_beta});
  return s;
}

/// An empty store with the layer count implied by cfg, ready to be filled by
/// name through for_each.
inline WeightStore empty_store(const ModelConfig& cfg) {
  WeightStore w;
  w.layers.resize(cfg.n_layers);
  return w;
}

/// Throws SchemaError naming the first tensor whose shape disagrees with cfg.
inline void check_shapes(const WeightStore& w, const ModelConfig& cfg) {
  cfg.validate();
  if (w.layers.size() != cfg.n_layers) {
    throw SchemaError("weight store has " + std::to_string(w.layers.size()) + " layers, config says " +
                      std::to_string(cfg.n_layers));
  }
  const auto schema = tensor_schema(cfg);
  std::size_t i = 0;
  w.for_each([&](const std::string& name, const Matrix& m) {
    const auto& spec = schema[i++];
    if (m.rows() != spec.rows || m.cols() != spec.cols) {
      throw SchemaError("tensor '" + name + "' has shape " + shape_string(m) + ", expected " +
                        std::to_string(spec.rows) + "x" + std::to_string(spec.cols));
    }
  });
}

// Attention scale given to freshly generated layers.
inline constexpr float kInitialAttentionScale = 8.0f;

/// Deterministic test weights. Every "weight" tensor is drawn i.i.d. from
/// the Irwin-Hall normal approximation scaled by 1/sqrt(d_model), in
/// storage order, from mt19937_64(seed). Norm gains are 1, biases 0, the
/// attention scale g is kInitialAttentionScale, and the initial-token
/// modulation starts at identity (gamma 1, beta 0).
inline WeightStore generate_weights(std::uint64_t seed, const ModelConfig& cfg) {
  cfg.validate();
  Rng rng(seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  WeightStore w = empty_store(cfg);
  const auto schema = tensor_schema(cfg);
  std::size_t i = 0;
  w.for_each([&](const std::string&, Matrix& m) {
    const auto& spec = schema[i++];
    m = Matrix(spec.rows, spec.cols);
    switch (spec.kind) {
      case TensorKind::weight:
        for (float& x : m.data()) x = static_cast<float>(rng.normal() * scale);
        break;
      case TensorKind::gain:
      case TensorKind::modulation_gamma:
        for (float& x : m.data()) x = 1.0f;
        break;
      case TensorKind::scale:
        m(0, 0) = kInitialAttentionScale;
        break;
      case TensorKind::bias:
      case TensorKind::modulation_beta:
        break;
    }
  });
  return w;
}

// ---------------------------------------------------------------------------
// Position bias

/// Input feature for a signed relative distance: sign(d) * log(1 + |d|).
inline double position_feature(double distance) {
  const double mag = std::log1p(std::abs(distance));
  return distance < 0 ? -mag : mag;
}

/// Bias values for query-key distances 0..max_distance (key j = i - dist).
class PositionBiasTable {
 public:
  PositionBiasTable() = default;
  PositionBiasTable(std::size_t heads, std::size_t max_distance)
      : heads_(heads), values_((max_distance + 1) * heads, 0.0) {}

  std::size_t heads() const { return heads_; }
  std::size_t max_distance() const { return heads_ == 0 ? 0 : values_.size() / heads_ - 1; }

  /// dist = i - j >= 0 for query position i and key position j.
  double operator()(std::size_t dist, std::size_t head) const { return values_[dist * heads_ + head]; }
  double& at(std::size_t dist, std::size_t head) { return values_[dist * heads_ + head]; }

  /// All-zero table (no positional information), mostly for tests.
  static PositionBiasTable zeros(std::size_t heads, std::size_t max_distance) { return {heads, max_distance}; }

 private:
  std::size_t heads_ = 0;
  std::vector<double> values_;
};

/// Evaluates the two-layer position MLP for one signed distance (j - i).
inline std::vector<double> position_bias(const WeightStore& w, double signed_distance) {
  const double x = position_feature(signed_distance);
  const std::size_t hidden = w.pos_w1.cols();
  const std::size_t heads = w.pos_w2.cols();
  std::vector<double> h(hidden);
  for (std::size_t k = 0; k < hidden; ++k) h[k] = silu(x * w.pos_w1(0, k) + w.pos_b1(0, k));
  std::vector<double> out(heads);
  for (std::size_t o = 0; o < heads; ++o) {
    double acc = w.pos_b2(0, o);
    for (std::size_t k = 0; k < hidden; ++k) acc += h[k] * w.pos_w2(k, o);
    out[o] = acc;
  }
  return out;
}

inline PositionBiasTable position_bias_table(const WeightStore& w, std::size_t max_distance) {
  PositionBiasTable t(w.pos_w2.cols(), max_distance);
  for (std::size_t d = 0; d <= max_distance; ++d) {
    const auto b = position_bias(w, -static_cast<double>(d));
    for (std::size_t h = 0; h < b.size(); ++h) t.at(d, h) = b[h];
  }
  return t;
}

// ---------------------------------------------------------------------------
// Layers

/// Cached rows for one layer: normalized keys and values, kv_dim wide.
struct KVSegment {
  const Matrix* keys = nullptr;
  const Matrix* values = nullptr;
};

struct AttentionOutput {
  Matrix output;  // T_new x d_model, after the output projection
  Matrix keys;    // T_new x kv_dim, normalized
  Matrix values;  // T_new x kv_dim
};

/// Attention for T_new rows of (already normalized) input x that follow the
/// cached rows in `past`. Query row i sits at absolute position past_len + i
/// and may attend to every position <= its own.
inline AttentionOutput attention_layer(const Matrix& x, const LayerWeights& w, const ModelConfig& cfg,
                                       const PositionBiasTable& bias, std::span<const KVSegment> past = {}) {
  const std::size_t T = x.rows();
  const std::size_t H = cfg.n_query_heads, hd = cfg.head_dim, kvh = cfg.kv_heads();
  const double eps = cfg.eps_norm;

  Matrix q = matmul(x, w.wq);
  AttentionOutput res{Matrix(T, cfg.d_model), matmul(x, w.wk), matmul(x, w.wv)};
  for (std::size_t i = 0; i < T; ++i) {
    auto qr = q.row(i);
    for (std::size_t h = 0; h < H; ++h) l2_normalize(qr.subspan(h * hd, hd), qr.subspan(h * hd, hd), eps);
    auto kr = res.keys.row(i);
    for (std::size_t h = 0; h < kvh; ++h) l2_normalize(kr.subspan(h * hd, hd), kr.subspan(h * hd, hd), eps);
  }

  std::vector<const float*> krows, vrows;
  for (const auto& seg : past) {
    if (seg.keys->cols() != cfg.kv_dim() || seg.values->cols() != cfg.kv_dim()) {
      throw StateError("cached key/value width does not match the model");
    }
    for (std::size_t r = 0; r < seg.keys->rows(); ++r) {
      krows.push_back(seg.keys->row(r).data());
      vrows.push_back(seg.values->row(r).data());
    }
  }
  const std::size_t past_len = krows.size();
  for (std::size_t r = 0; r < T; ++r) {
    krows.push_back(res.keys.row(r).data());
    vrows.push_back(res.values.row(r).data());
  }
  const std::size_t total = krows.size();
  if (bias.max_distance() + 1 < total || bias.heads() != H) {
    throw ShapeError("position bias table too small for attention span");
  }

  const double g = w.g(0, 0);
  constexpr double kMasked = -std::numeric_limits<double>::infinity();
  // Heads sharing a key/value head are scored together, so each cached row is
  // read once per group rather than once per query head.
  const std::size_t group = H / kvh;
  std::vector<std::vector<double>> scores(group, std::vector<double>(total));
  std::vector<double> acc(group * hd);
  for (std::size_t i = 0; i < T; ++i) {
    const std::size_t pos = past_len + i;
    for (std::size_t kv = 0; kv < kvh; ++kv) {
      const std::size_t kv_off = kv * hd, h0 = kv * group;
      for (std::size_t j = 0; j <= pos; ++j) {
        const float* kj = krows[j] + kv_off;
        for (std::size_t a = 0; a < group; ++a) {
          const float* qh = q.row(i).data() + (h0 + a) * hd;
          double dot = 0.0;
          for (std::size_t c = 0; c < hd; ++c) dot += static_cast<double>(qh[c]) * kj[c];
          scores[a][j] = g * dot + bias(pos - j, h0 + a);
        }
      }
      for (auto& s : scores) {
        std::fill(s.begin() + static_cast<std::ptrdiff_t>(pos + 1), s.end(), kMasked);
        softmax_inplace(s);
      }
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t j = 0; j <= pos; ++j) {
        const float* vj = vrows[j] + kv_off;
        for (std::size_t a = 0; a < group; ++a) {
          const double p = scores[a][j];
          double* ac = acc.data() + a * hd;
          for (std::size_t c = 0; c < hd; ++c) ac[c] += p * vj[c];
        }
      }
      for (std::size_t a = 0; a < group; ++a) {
        float* orow = res.output.row(i).data() + (h0 + a) * hd;
        for (std::size_t c = 0; c < hd; ++c) orow[c] = static_cast<float>(acc[a * hd + c]);
      }
    }
  }
  res.output = matmul(res.output, w.wo);
  return res;
}

/// down( silu(x W_gate) * (x W_up) ); the inner width is taken from the weights.
inline Matrix swiglu_ffn(const Matrix& x, const Matrix& w_gate, const Matrix& w_up, const Matrix& w_down) {
  Matrix gate = matmul(x, w_gate);
  const Matrix up = matmul(x, w_up);
  if (gate.rows() != up.rows() || gate.cols() != up.cols()) {
    throw ShapeError("swiglu: gate and up projections disagree");
  }
  auto gd = gate.data();
  const auto ud = up.data();
  for (std::size_t i = 0; i < gd.size(); ++i) gd[i] = static_cast<float>(silu(gd[i]) * ud[i]);
  return matmul(gate, w_down);
}

inline Matrix swiglu_ffn(const Matrix& x, const LayerWeights& w) {
  return swiglu_ffn(x, w.w_gate, w.w_up, w.w_down);
}

// ---------------------------------------------------------------------------
// Forward passes

struct StepOutput {
  Matrix logits;              // T_new x vocab
  std::vector<Matrix> keys;   // per layer, T_new x kv_dim
  std::vector<Matrix> values;
};

inline void check_tokens(std::span<const TokenId> tokens, const ModelConfig& cfg) {
  for (TokenId t : tokens) {
    if (t >= cfg.vocab_size) {
      throw VocabError("token id " + std::to_string(t) + " out of range for vocab of " +
                       std::to_string(cfg.vocab_size));
    }
  }
}

/// Runs `tokens` through the model after `past_len` cached positions.
/// past[l] lists layer l's cached segments in order (empty span = no cache).
inline StepOutput forward_step(const WeightStore& w, const ModelConfig& cfg, std::span<const TokenId> tokens,
                               std::span<const std::vector<KVSegment>> past = {}) {
  if (tokens.empty()) throw InputError("forward: empty token sequence");
  check_tokens(tokens, cfg);
  if (!past.empty() && past.size() != cfg.n_layers) {
    throw StateError("cache has " + std::to_string(past.size()) + " layers, model has " +
                     std::to_string(cfg.n_layers));
  }
  std::size_t past_len = 0;
  if (!past.empty()) {
    for (const auto& seg : past[0]) past_len += seg.keys->rows();
  }
  const std::size_t T = tokens.size();

  Matrix x(T, cfg.d_model);
  for (std::size_t t = 0; t < T; ++t) {
    const auto e = w.embedding.row(tokens[t]);
    std::copy(e.begin(), e.end(), x.row(t).begin());
  }
  const PositionBiasTable bias = position_bias_table(w, past_len + T - 1);

  StepOutput out;
  out.keys.reserve(cfg.n_layers);
  out.values.reserve(cfg.n_layers);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& L = w.layers[l];
    const Matrix h = layer_norm_rows(x, L.attn_norm_gain, L.attn_norm_bias, cfg.eps_norm);
    std::span<const KVSegment> layer_past;
    if (!past.empty()) layer_past = past[l];
    auto att = attention_layer(h, L, cfg, bias, layer_past);
    add_inplace(x, att.output);
    const Matrix h2 = layer_norm_rows(x, L.ffn_norm_gain, L.ffn_norm_bias, cfg.eps_norm);
    add_inplace(x, swiglu_ffn(h2, L));
    out.keys.push_back(std::move(att.keys));
    out.values.push_back(std::move(att.values));
  }
  const Matrix hf = layer_norm_rows(x, w.final_norm_gain, w.final_norm_bias, cfg.eps_norm);
  out.logits = matmul(hf, w.output);
  return out;
}

/// Row t holds next-token logits after consuming tokens[0..t].
inline Matrix forward_full(const WeightStore& w, const ModelConfig& cfg, std::span<const TokenId> tokens) {
  return forward_step(w, cfg, tokens).logits;
}

/// Multi-head copy of a multi-query model: the shared key/value head is
/// replicated once per query head, so both compute the same function.
inline std::pair<ModelConfig, WeightStore> replicate_kv_heads(const WeightStore& w, const ModelConfig& cfg) {
  if (cfg.attention != AttentionVariant::multi_query) throw InputError("model is already multi-head");
  ModelConfig mh = cfg;
  mh.attention = AttentionVariant::multi_head;
  WeightStore out = w;
  auto replicate = [&](const Matrix& m) {
    Matrix r(m.rows(), mh.kv_dim());
    for (std::size_t i = 0; i < m.rows(); ++i) {
      for (std::size_t h = 0; h < mh.n_query_heads; ++h) {
        for (std::size_t c = 0; c < cfg.head_dim; ++c) r(i, h * cfg.head_dim + c) = m(i, c);
      }
    }
    return r;
  };
  for (auto& L : out.layers) {
    L.wk = replicate(L.wk);
    L.wv = replicate(L.wv);
  }
  return {mh, std::move(out)};
}

inline std::size_t parameter_count(const WeightStore& w) {
  std::size_t n = 0;
  w.for_each([&](const std::string&, const Matrix& m) { n += m.size(); });
  return n;
}

}  // namespace xutt
