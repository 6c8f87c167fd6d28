#pragma once

// Reference single-head causal softmax attention with an append-only KV
// cache. Shares ModelConfig with the bounded layer (d_model, d_k, d_v);
// capacity and n_heads are ignored. Scores use the conventional 1/sqrt(d_k).

#include <cstddef>

#include "bct/config.hpp"
#include "bct/numerics.hpp"

namespace bct {

template <typename T>
struct BaselineParams {
  Matrix<T> W_q;  // d_model x d_k
  Matrix<T> W_k;  // d_model x d_k
  Matrix<T> W_v;  // d_model x d_v
  Matrix<T> W_o;  // d_v x d_model

  template <typename F>
  void for_each_tensor(F&& f) const {
    f("W_q", W_q);
    f("W_k", W_k);
    f("W_v", W_v);
    f("W_o", W_o);
  }

  bool operator==(const BaselineParams&) const = default;
};

template <typename T>
struct GrowingCache {
  Matrix<T> keys;    // T x d_k
  Matrix<T> values;  // T x d_v

  std::size_t tokens() const { return keys.rows(); }
  std::size_t payload_bytes() const { return keys.payload_bytes() + values.payload_bytes(); }
  void reserve(std::size_t n) {
    keys.reserve_rows(n);
    values.reserve_rows(n);
  }
  // Drops rows beyond n (benchmarks rewind after a timed step).
  void truncate(std::size_t n) {
    keys.truncate_rows(n);
    values.truncate_rows(n);
  }
};

// n_tokens * (d_k + d_v) * element_bytes.
std::size_t growing_cache_bytes(const ModelConfig& config, std::size_t n_tokens);

template <typename T>
BaselineParams<T> init_baseline(const ModelConfig& config, Rng& rng);

template <typename T>
GrowingCache<T> empty_cache(const ModelConfig& config);

// Appends k = x W_k, v = x W_v, then attends q = x W_q over every cached row
// (including the new one): y = softmax(q keys^T / sqrt(d_k)) values W_o.
template <typename T>
Matrix<T> baseline_step(const Matrix<T>& x, GrowingCache<T>& cache, const BaselineParams<T>& params,
                        const ModelConfig& config);

// Appends keys/values for every row of xs without computing outputs.
template <typename T>
void baseline_prefill(const Matrix<T>& xs, GrowingCache<T>& cache, const BaselineParams<T>& params);

// Token-by-token decoding over xs from an empty cache.
template <typename T>
Matrix<T> baseline_decode(const Matrix<T>& xs, const BaselineParams<T>& params,
                          const ModelConfig& config);

// Full-matrix causal-masked attention over xs in one shot.
template <typename T>
Matrix<T> causal_attention(const Matrix<T>& xs, const BaselineParams<T>& params,
                           const ModelConfig& config);

}  // namespace bct
