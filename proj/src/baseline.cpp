#include "bct/baseline.hpp"

#include <cmath>

namespace bct {

std::size_t growing_cache_bytes(const ModelConfig& config, std::size_t n_tokens) {
  return n_tokens * (config.d_k + config.d_v) * config.element_bytes();
}

template <typename T>
BaselineParams<T> init_baseline(const ModelConfig& config, Rng& rng) {
  config.validate();
  const double in_std = 1.0 / std::sqrt(static_cast<double>(config.d_model));
  const double out_std = 1.0 / std::sqrt(static_cast<double>(config.d_v));
  BaselineParams<T> p;
  p.W_q = gaussian_matrix<T>(config.d_model, config.d_k, in_std, rng);
  p.W_k = gaussian_matrix<T>(config.d_model, config.d_k, in_std, rng);
  p.W_v = gaussian_matrix<T>(config.d_model, config.d_v, in_std, rng);
  p.W_o = gaussian_matrix<T>(config.d_v, config.d_model, out_std, rng);
  return p;
}

template <typename T>
GrowingCache<T> empty_cache(const ModelConfig& config) {
  return {Matrix<T>(0, config.d_k), Matrix<T>(0, config.d_v)};
}

template <typename T>
Matrix<T> baseline_step(const Matrix<T>& x, GrowingCache<T>& cache, const BaselineParams<T>& params,
                        const ModelConfig& config) {
  if (x.rows() != 1 || x.cols() != params.W_q.rows()) {
    throw DimensionError("baseline_step: x must be 1x" + std::to_string(params.W_q.rows()) +
                         ", got " + x.shape_string());
  }
  const auto q = matmul(x, params.W_q);
  cache.keys.append_row(matmul(x, params.W_k).data());
  cache.values.append_row(matmul(x, params.W_v).data());

  auto scores = matmul_bt(q, cache.keys);
  scale_inplace(scores, static_cast<T>(1.0 / std::sqrt(static_cast<double>(config.d_k))));
  const auto weights = softmax_row(scores);
  return matmul(matmul(weights, cache.values), params.W_o);
}

template <typename T>
void baseline_prefill(const Matrix<T>& xs, GrowingCache<T>& cache, const BaselineParams<T>& params) {
  const auto k = matmul(xs, params.W_k);
  const auto v = matmul(xs, params.W_v);
  cache.reserve(cache.tokens() + xs.rows());
  for (std::size_t t = 0; t < xs.rows(); ++t) {
    cache.keys.append_row(k.row(t));
    cache.values.append_row(v.row(t));
  }
}

template <typename T>
Matrix<T> baseline_decode(const Matrix<T>& xs, const BaselineParams<T>& params,
                          const ModelConfig& config) {
  auto cache = empty_cache<T>(config);
  cache.reserve(xs.rows());
  Matrix<T> ys(xs.rows(), params.W_o.cols());
  for (std::size_t t = 0; t < xs.rows(); ++t) {
    try {
      const auto y = baseline_step(xs.row_copy(t), cache, params, config);
      std::copy(y.data().begin(), y.data().end(), ys.row(t).begin());
    } catch (const Error& e) {
      rethrow_with_token(e, t);
    }
  }
  return ys;
}

template <typename T>
Matrix<T> causal_attention(const Matrix<T>& xs, const BaselineParams<T>& params,
                           const ModelConfig& config) {
  const auto q = matmul(xs, params.W_q);
  const auto k = matmul(xs, params.W_k);
  const auto v = matmul(xs, params.W_v);
  auto scores = matmul_bt(q, k);
  scale_inplace(scores, static_cast<T>(1.0 / std::sqrt(static_cast<double>(config.d_k))));

  Matrix<T> weights(xs.rows(), xs.rows());
  for (std::size_t i = 0; i < xs.rows(); ++i) {
    const auto masked = Matrix<T>::row_vector(scores.row(i).first(i + 1));
    const auto w = softmax_row(masked);
    std::copy(w.data().begin(), w.data().end(), weights.row(i).begin());
  }
  return matmul(matmul(weights, v), params.W_o);
}

#define BCT_INSTANTIATE_BASELINE(T)                                                             \
  template BaselineParams<T> init_baseline(const ModelConfig&, Rng&);                           \
  template GrowingCache<T> empty_cache(const ModelConfig&);                                     \
  template Matrix<T> baseline_step(const Matrix<T>&, GrowingCache<T>&, const BaselineParams<T>&, \
                                   const ModelConfig&);                                         \
  template void baseline_prefill(const Matrix<T>&, GrowingCache<T>&, const BaselineParams<T>&); \
  template Matrix<T> baseline_decode(const Matrix<T>&, const BaselineParams<T>&,                \
                                     const ModelConfig&);                                       \
  template Matrix<T> causal_attention(const Matrix<T>&, const BaselineParams<T>&,               \
                                      const ModelConfig&);

BCT_INSTANTIATE_BASELINE(float)
BCT_INSTANTIATE_BASELINE(double)

}  // namespace bct
