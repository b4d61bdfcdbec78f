#pragma once

// Steady-state incremental decoding cost for the shared-K/V attention
// layout against the per-head reference layout.

#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include "xutt/error.hpp"
#include "xutt/model.hpp"
#include "xutt/random.hpp"
#include "xutt/session.hpp"

namespace xutt {

struct BenchResult {
  std::string label;
  AttentionVariant variant = AttentionVariant::multi_query;
  std::size_t batch = 0;
  std::size_t cache_len = 0;
  double mean_ms = 0;    // one iteration = one token advanced for every batch member
  double stddev_ms = 0;
  std::size_t cache_bytes_per_token_per_layer = 0;
  std::size_t cache_bytes_total = 0;
  std::size_t iterations = 0;
};

/// Bytes of keys plus values one position occupies in one layer.
inline std::size_t cache_bytes_per_token_per_layer(const ModelConfig& cfg) {
  return 2 * cfg.kv_dim() * sizeof(float);
}

/// A state holding `len` cached positions with random unit-norm keys, built
/// without running the model; only its shape matters for timing.
inline LMState synthetic_cache(const ModelConfig& cfg, std::size_t len, Rng& rng) {
  std::vector<TokenId> tokens(len);
  for (auto& t : tokens) t = static_cast<TokenId>(rng.below(cfg.content_size()));
  if (len > 0) tokens[0] = static_cast<TokenId>(cfg.vocab_size - 2);
  std::vector<Matrix> keys, values;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    Matrix k(len, cfg.kv_dim()), v(len, cfg.kv_dim());
    for (float& x : k.data()) x = static_cast<float>(rng.normal());
    for (float& x : v.data()) x = static_cast<float>(rng.normal());
    for (std::size_t r = 0; r < len; ++r) {
      auto row = k.row(r);
      for (std::size_t h = 0; h < cfg.kv_heads(); ++h) {
        auto part = row.subspan(h * cfg.head_dim, cfg.head_dim);
        l2_normalize(part, part, cfg.eps_norm);
      }
    }
    keys.push_back(std::move(k));
    values.push_back(std::move(v));
  }
  auto s = LMState::from_rows(std::move(tokens), std::move(keys), std::move(values), len > 0);
  return s;
}

/// Times `iterations` rounds of one-token advances over `batch` states that
/// each hold `cache_len` positions. Multi-query weights are expanded to the
/// per-head layout when `variant` asks for it; setup is not timed.
inline BenchResult bench_incremental(const WeightStore& w, const ModelConfig& cfg, AttentionVariant variant,
                                     std::size_t batch, std::size_t cache_len, std::size_t iterations = 10,
                                     std::uint64_t seed = 0) {
  if (batch < 1) throw InputError("bench batch must be >= 1");
  iterations = std::max<std::size_t>(iterations, 10);
  ModelConfig run_cfg = cfg;
  WeightStore expanded;
  const WeightStore* run_w = &w;
  if (variant != cfg.attention) {
    if (variant != AttentionVariant::multi_head) {
      throw InputError("multi-head weights cannot be reduced to the multi-query layout");
    }
    std::tie(run_cfg, expanded) = replicate_kv_heads(w, cfg);
    run_w = &expanded;
  }
  Rng rng(seed);
  std::vector<LMState> states;
  for (std::size_t b = 0; b < batch; ++b) states.push_back(synthetic_cache(run_cfg, cache_len, rng));
  std::vector<TokenId> next(batch);
  for (auto& t : next) t = static_cast<TokenId>(rng.below(run_cfg.content_size()));

  std::vector<double> ms;
  for (std::size_t it = 0; it < iterations; ++it) {
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t b = 0; b < batch; ++b) {
      // every iteration starts from the same cache length
      const auto r = advance(states[b], *run_w, run_cfg, {next[b]});
      if (r.logits.rows() != 1) throw StateError("bench: unexpected logits shape");
    }
    const auto t1 = std::chrono::steady_clock::now();
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  BenchResult out;
  out.variant = variant;
  out.label = std::string(to_string(variant)) + " b" + std::to_string(batch) + " c" + std::to_string(cache_len);
  out.batch = batch;
  out.cache_len = cache_len;
  out.iterations = iterations;
  double sum = 0;
  for (double x : ms) sum += x;
  out.mean_ms = sum / static_cast<double>(ms.size());
  double var = 0;
  for (double x : ms) var += (x - out.mean_ms) * (x - out.mean_ms);
  out.stddev_ms = std::sqrt(var / static_cast<double>(ms.size()));
  out.cache_bytes_per_token_per_layer = cache_bytes_per_token_per_layer(run_cfg);
  out.cache_bytes_total = batch * cache_len * run_cfg.n_layers * out.cache_bytes_per_token_per_layer;
  return out;
}

}  // namespace xutt
