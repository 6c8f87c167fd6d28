#pragma once

// Bounded-cache attention layer.
//
// Each head owns a fixed bank of `capacity` slots: keys MK (capacity x d_k)
// and values MV (capacity x d_v). A token x writes into the bank by
//
//   wq = x W_wq,  wv = x W_wv,  ww = softmax(s * wq MK^T),  MV += ww^T wv
//
// and reads back by
//
//   rw = softmax(s * (x W_rq) MK^T),  z = rw MV,
//
// with per-head reads concatenated and projected by W_o. Within a step the
// write happens before the read. MK is a learned parameter and is never
// modified by writes, so the write terms of different tokens are independent
// and MV after N tokens is MV_0 plus their sum in any order.

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "bct/config.hpp"
#include "bct/numerics.hpp"

namespace bct {

template <typename T>
struct HeadParams {
  Matrix<T> W_wq;  // d_model x d_k
  Matrix<T> W_wv;  // d_model x d_v
  Matrix<T> W_rq;  // d_model x d_k
  Matrix<T> MK;    // capacity x d_k

  bool operator==(const HeadParams&) const = default;
};

template <typename T>
struct LayerParams {
  std::vector<HeadParams<T>> heads;
  Matrix<T> W_o;  // (n_heads * d_v) x d_model

  // Visits every tensor in a fixed order: per head W_wq, W_wv, W_rq, MK,
  // then W_o. Serialization and SGD both rely on this order.
  template <typename F>
  void for_each_tensor(F&& f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each_tensor(F&& f) const {
    visit(*this, f);
  }

  bool operator==(const LayerParams&) const = default;

 private:
  template <typename Self, typename F>
  static void visit(Self& self, F& f) {
    for (std::size_t h = 0; h < self.heads.size(); ++h) {
      const std::string p = "head" + std::to_string(h) + ".";
      f(p + "W_wq", self.heads[h].W_wq);
      f(p + "W_wv", self.heads[h].W_wv);
      f(p + "W_rq", self.heads[h].W_rq);
      f(p + "MK", self.heads[h].MK);
    }
    f(std::string("W_o"), self.W_o);
  }
};

// Gradients share LayerParams' layout tensor-for-tensor.
template <typename T>
using Gradients = LayerParams<T>;

template <typename T>
LayerParams<T> zeros_like(const LayerParams<T>& p);

template <typename T>
struct HeadCache {
  Matrix<T> MK;  // capacity x d_k, copy of the head's key parameter
  Matrix<T> MV;  // capacity x d_v

  bool operator==(const HeadCache&) const = default;
};

template <typename T>
struct CacheState {
  std::vector<HeadCache<T>> heads;
  std::size_t tokens_seen = 0;  // metadata only

  // Bytes of MK + MV payload across heads; fixed at construction.
  std::size_t payload_bytes() const {
    std::size_t total = 0;
    for (const auto& h : heads) total += h.MK.payload_bytes() + h.MV.payload_bytes();
    return total;
  }

  bool operator==(const CacheState&) const = default;
};

// capacity * (d_k + d_v) * element_bytes * n_heads.
std::size_t bounded_cache_bytes(const ModelConfig& config);

// Standard deviation of the gaussian MV initialisation.
double mv_init_stddev(const ModelConfig& config);

template <typename T>
struct LayerInit {
  LayerParams<T> params;
  CacheState<T> state;
};

template <typename T>
LayerInit<T> init_layer(const ModelConfig& config, Rng& rng);

// Fresh cache for `params` with MV zeroed.
template <typename T>
CacheState<T> zero_state(const LayerParams<T>& params, const ModelConfig& config);

template <typename T>
struct WriteProjection {
  Matrix<T> wq;  // 1 x d_k
  Matrix<T> wv;  // 1 x d_v
};

template <typename T>
WriteProjection<T> project_write(const Matrix<T>& x, const HeadParams<T>& head);

// softmax(factor * wq MK^T)
template <typename T>
Matrix<T> write_weights(const Matrix<T>& wq, const Matrix<T>& MK, double factor);

// MV_prev + ww^T wv; MV_prev is taken by value and left untouched for the caller.
template <typename T>
Matrix<T> update_cache(Matrix<T> MV_prev, const Matrix<T>& ww, const Matrix<T>& wv);

// Sequential write path over the rows of `xs` (N x d_model), all heads.
template <typename T>
CacheState<T> update_sequence(const Matrix<T>& xs, CacheState<T> state,
                              const LayerParams<T>& params, const ModelConfig& config);

struct ParallelOptions {
  std::size_t chunk_tokens = 16;  // partition size; fixes the reduction tree
  std::size_t threads = 0;        // 0 = hardware concurrency
};

// Accumulation form of the write path: per-token terms summed within fixed
// chunks, chunk sums combined by a pairwise tree, then added to MV_0. The
// result depends on chunk_tokens but not on the thread count.
template <typename T>
CacheState<T> update_parallel(const Matrix<T>& xs, CacheState<T> state,
                              const LayerParams<T>& params, const ModelConfig& config,
                              ParallelOptions options = {});

template <typename T>
Matrix<T> read_cache(const Matrix<T>& x, const CacheState<T>& state, const LayerParams<T>& params,
                     const ModelConfig& config);

// One decode step: write x into `state` in place, then read with x.
template <typename T>
Matrix<T> layer_step(const Matrix<T>& x, CacheState<T>& state, const LayerParams<T>& params,
                     const ModelConfig& config);

template <typename T>
struct ForwardResult {
  Matrix<T> ys;  // N x d_model
  CacheState<T> final_state;
};

template <typename T>
ForwardResult<T> layer_forward(const Matrix<T>& xs, const LayerParams<T>& params,
                               CacheState<T> initial, const ModelConfig& config);

template <typename T>
ForwardResult<T> layer_forward(const Matrix<T>& xs, const LayerParams<T>& params,
                               const ModelConfig& config) {
  return layer_forward(xs, params, zero_state(params, config), config);
}

// Throws DimensionError unless params match config.
template <typename T>
void check_params(const LayerParams<T>& params, const ModelConfig& config);

}  // namespace bct
