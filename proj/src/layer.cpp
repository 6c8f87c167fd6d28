#include "bct/layer.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <thread>

namespace bct {

namespace {

template <typename T>
void expect_shape(const Matrix<T>& m, std::size_t rows, std::size_t cols, const char* what) {
  if (m.rows() != rows || m.cols() != cols) {
    throw DimensionError(std::string(what) + ": expected " + std::to_string(rows) + "x" +
                         std::to_string(cols) + ", got " + m.shape_string());
  }
}

template <typename T>
void expect_input(const Matrix<T>& xs, const ModelConfig& config, const char* what) {
  if (xs.cols() != config.d_model) {
    throw DimensionError(std::string(what) + ": input width " + std::to_string(xs.cols()) +
                         " != d_model " + std::to_string(config.d_model));
  }
  if (xs.rows() == 0) throw DimensionError(std::string(what) + ": empty input sequence");
}

template <typename T>
void expect_state(const CacheState<T>& state, const ModelConfig& config) {
  if (state.heads.size() != config.n_heads) {
    throw DimensionError("cache state has " + std::to_string(state.heads.size()) +
                         " heads, config has " + std::to_string(config.n_heads));
  }
  for (const auto& h : state.heads) {
    expect_shape(h.MK, config.capacity, config.d_k, "cache MK");
    expect_shape(h.MV, config.capacity, config.d_v, "cache MV");
  }
}

// Write term of a single token for one head: (ww, wv). MK is the cache's
// key bank, which starts as a copy of the head's key parameter.
template <typename T>
std::pair<Matrix<T>, Matrix<T>> write_term(const Matrix<T>& x, const HeadParams<T>& head,
                                           const Matrix<T>& MK, double factor) {
  auto proj = project_write(x, head);
  auto ww = write_weights(proj.wq, MK, factor);
  return {std::move(ww), std::move(proj.wv)};
}

}  // namespace

std::size_t bounded_cache_bytes(const ModelConfig& config) {
  return config.n_heads * config.capacity * (config.d_k + config.d_v) * config.element_bytes();
}

double mv_init_stddev(const ModelConfig& config) {
  return 1.0 / std::sqrt(static_cast<double>(config.d_v));
}

template <typename T>
void check_params(const LayerParams<T>& params, const ModelConfig& config) {
  if (params.heads.size() != config.n_heads) {
    throw DimensionError("params have " + std::to_string(params.heads.size()) +
                         " heads, config has " + std::to_string(config.n_heads));
  }
  for (const auto& h : params.heads) {
    expect_shape(h.W_wq, config.d_model, config.d_k, "W_wq");
    expect_shape(h.W_wv, config.d_model, config.d_v, "W_wv");
    expect_shape(h.W_rq, config.d_model, config.d_k, "W_rq");
    expect_shape(h.MK, config.capacity, config.d_k, "MK");
  }
  expect_shape(params.W_o, config.n_heads * config.d_v, config.d_model, "W_o");
}

template <typename T>
LayerParams<T> zeros_like(const LayerParams<T>& p) {
  LayerParams<T> out = p;
  out.for_each_tensor([](const std::string&, Matrix<T>& m) {
    std::fill(m.data().begin(), m.data().end(), T(0));
  });
  return out;
}

template <typename T>
LayerInit<T> init_layer(const ModelConfig& config, Rng& rng) {
  config.validate();
  const double in_std = 1.0 / std::sqrt(static_cast<double>(config.d_model));
  const double key_std = 1.0 / std::sqrt(static_cast<double>(config.d_k));
  const double out_std = 1.0 / std::sqrt(static_cast<double>(config.n_heads * config.d_v));

  LayerInit<T> init;
  for (std::size_t h = 0; h < config.n_heads; ++h) {
    HeadParams<T> head;
    head.W_wq = gaussian_matrix<T>(config.d_model, config.d_k, in_std, rng);
    head.W_wv = gaussian_matrix<T>(config.d_model, config.d_v, in_std, rng);
    head.W_rq = gaussian_matrix<T>(config.d_model, config.d_k, in_std, rng);
    head.MK = gaussian_matrix<T>(config.capacity, config.d_k, key_std, rng);

    HeadCache<T> cache;
    cache.MK = head.MK;
    cache.MV = config.mv_init == MvInit::kGaussian
                   ? gaussian_matrix<T>(config.capacity, config.d_v, mv_init_stddev(config), rng)
                   : Matrix<T>::zeros(config.capacity, config.d_v);

    init.params.heads.push_back(std::move(head));
    init.state.heads.push_back(std::move(cache));
  }
  init.params.W_o = gaussian_matrix<T>(config.n_heads * config.d_v, config.d_model, out_std, rng);
  return init;
}

template <typename T>
CacheState<T> zero_state(const LayerParams<T>& params, const ModelConfig& config) {
  CacheState<T> state;
  for (const auto& h : params.heads) {
    state.heads.push_back({h.MK, Matrix<T>::zeros(config.capacity, config.d_v)});
  }
  return state;
}

template <typename T>
WriteProjection<T> project_write(const Matrix<T>& x, const HeadParams<T>& head) {
  if (!x.is_row_vector()) throw DimensionError("project_write: x must be 1xd, got " + x.shape_string());
  return {matmul(x, head.W_wq), matmul(x, head.W_wv)};
}

template <typename T>
Matrix<T> write_weights(const Matrix<T>& wq, const Matrix<T>& MK, double factor) {
  if (!wq.is_row_vector()) throw DimensionError("write_weights: wq must be 1xd_k, got " + wq.shape_string());
  auto scores = matmul_bt(wq, MK);
  if (factor != 1.0) scale_inplace(scores, static_cast<T>(factor));
  return softmax_row(scores);
}

template <typename T>
Matrix<T> update_cache(Matrix<T> MV_prev, const Matrix<T>& ww, const Matrix<T>& wv) {
  add_outer_inplace(MV_prev, ww, wv);
  return MV_prev;
}

template <typename T>
CacheState<T> update_sequence(const Matrix<T>& xs, CacheState<T> state,
                              const LayerParams<T>& params, const ModelConfig& config) {
  check_params(params, config);
  expect_input(xs, config, "update_sequence");
  expect_state(state, config);
  const double factor = config.score_factor();
  for (std::size_t t = 0; t < xs.rows(); ++t) {
    try {
      const auto x = xs.row_copy(t);
      for (std::size_t h = 0; h < params.heads.size(); ++h) {
        auto [ww, wv] = write_term(x, params.heads[h], state.heads[h].MK, factor);
        state.heads[h].MV = update_cache(std::move(state.heads[h].MV), ww, wv);
      }
    } catch (const Error& e) {
      rethrow_with_token(e, t);
    }
    ++state.tokens_seen;
  }
  return state;
}

template <typename T>
CacheState<T> update_parallel(const Matrix<T>& xs, CacheState<T> state,
                              const LayerParams<T>& params, const ModelConfig& config,
                              ParallelOptions options) {
  check_params(params, config);
  expect_input(xs, config, "update_parallel");
  expect_state(state, config);
  const double factor = config.score_factor();
  const std::size_t n = xs.rows();
  const std::size_t chunk = std::max<std::size_t>(1, options.chunk_tokens);
  const std::size_t n_chunks = (n + chunk - 1) / chunk;
  const std::size_t n_heads = params.heads.size();

  // partial[c * n_heads + h] = sum of write terms of chunk c for head h.
  std::vector<Matrix<T>> partial(n_chunks * n_heads);
  std::vector<std::exception_ptr> errors(n_chunks);

  auto run_chunk = [&](std::size_t c) {
    const std::size_t begin = c * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    std::size_t t = begin;
    try {
      for (std::size_t h = 0; h < n_heads; ++h) {
        partial[c * n_heads + h] = Matrix<T>::zeros(config.capacity, config.d_v);
      }
      for (; t < end; ++t) {
        const auto x = xs.row_copy(t);
        for (std::size_t h = 0; h < n_heads; ++h) {
          auto [ww, wv] = write_term(x, params.heads[h], state.heads[h].MK, factor);
          add_outer_inplace(partial[c * n_heads + h], ww, wv);
        }
      }
    } catch (const Error& e) {
      try {
        rethrow_with_token(e, t);
      } catch (...) {
        errors[c] = std::current_exception();
      }
    }
  };

  std::size_t threads = options.threads ? options.threads : std::thread::hardware_concurrency();
  threads = std::clamp<std::size_t>(threads, 1, n_chunks);
  if (threads == 1) {
    for (std::size_t c = 0; c < n_chunks; ++c) run_chunk(c);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t c = w; c < n_chunks; c += threads) run_chunk(c);
      });
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  // Pairwise tree over chunks: stride 1, 2, 4, ...
  for (std::size_t stride = 1; stride < n_chunks; stride *= 2) {
    for (std::size_t c = 0; c + stride < n_chunks; c += 2 * stride) {
      for (std::size_t h = 0; h < n_heads; ++h) {
        add_inplace(partial[c * n_heads + h], partial[(c + stride) * n_heads + h]);
      }
    }
  }
  for (std::size_t h = 0; h < n_heads; ++h) add_inplace(state.heads[h].MV, partial[h]);
  state.tokens_seen += n;
  return state;
}

namespace {

// Concatenated per-head reads, 1 x (n_heads * d_v).
template <typename T>
Matrix<T> read_heads(const Matrix<T>& x, const CacheState<T>& state, const LayerParams<T>& params,
                     double factor) {
  const std::size_t d_v = params.heads.front().W_wv.cols();
  Matrix<T> z(1, params.heads.size() * d_v);
  for (std::size_t h = 0; h < params.heads.size(); ++h) {
    const auto rq = matmul(x, params.heads[h].W_rq);
    const auto rw = write_weights(rq, state.heads[h].MK, factor);
    const auto zh = matmul(rw, state.heads[h].MV);
    std::copy(zh.data().begin(), zh.data().end(), z.data().begin() + h * d_v);
  }
  return z;
}

}  // namespace

template <typename T>
Matrix<T> read_cache(const Matrix<T>& x, const CacheState<T>& state, const LayerParams<T>& params,
                     const ModelConfig& config) {
  check_params(params, config);
  expect_state(state, config);
  if (x.rows() != 1 || x.cols() != config.d_model) {
    throw DimensionError("read_cache: x must be 1x" + std::to_string(config.d_model) + ", got " +
                         x.shape_string());
  }
  return matmul(read_heads(x, state, params, config.score_factor()), params.W_o);
}

template <typename T>
Matrix<T> layer_step(const Matrix<T>& x, CacheState<T>& state, const LayerParams<T>& params,
                     const ModelConfig& config) {
  if (x.rows() != 1 || x.cols() != config.d_model) {
    throw DimensionError("layer_step: x must be 1x" + std::to_string(config.d_model) + ", got " +
                         x.shape_string());
  }
  const double factor = config.score_factor();
  for (std::size_t h = 0; h < params.heads.size(); ++h) {
    auto [ww, wv] = write_term(x, params.heads[h], state.heads[h].MK, factor);
    add_outer_inplace(state.heads[h].MV, ww, wv);
  }
  ++state.tokens_seen;
  return matmul(read_heads(x, state, params, factor), params.W_o);
}

template <typename T>
ForwardResult<T> layer_forward(const Matrix<T>& xs, const LayerParams<T>& params,
                               CacheState<T> initial, const ModelConfig& config) {
  check_params(params, config);
  expect_input(xs, config, "layer_forward");
  expect_state(initial, config);
  ForwardResult<T> out{Matrix<T>(xs.rows(), config.d_model), std::move(initial)};
  for (std::size_t t = 0; t < xs.rows(); ++t) {
    try {
      const auto y = layer_step(xs.row_copy(t), out.final_state, params, config);
      std::copy(y.data().begin(), y.data().end(), out.ys.row(t).begin());
    } catch (const Error& e) {
      rethrow_with_token(e, t);
    }
  }
  return out;
}

#define BCT_INSTANTIATE_LAYER(T)                                                              \
  template void check_params(const LayerParams<T>&, const ModelConfig&);                     \
  template LayerParams<T> zeros_like(const LayerParams<T>&);                                  \
  template LayerInit<T> init_layer(const ModelConfig&, Rng&);                                 \
  template CacheState<T> zero_state(const LayerParams<T>&, const ModelConfig&);               \
  template WriteProjection<T> project_write(const Matrix<T>&, const HeadParams<T>&);          \
  template Matrix<T> write_weights(const Matrix<T>&, const Matrix<T>&, double);               \
  template Matrix<T> update_cache(Matrix<T>, const Matrix<T>&, const Matrix<T>&);             \
  template CacheState<T> update_sequence(const Matrix<T>&, CacheState<T>,                     \
                                         const LayerParams<T>&, const ModelConfig&);          \
  template CacheState<T> update_parallel(const Matrix<T>&, CacheState<T>,                     \
                                         const LayerParams<T>&, const ModelConfig&,           \
                                         ParallelOptions);                                    \
  template Matrix<T> read_cache(const Matrix<T>&, const CacheState<T>&, const LayerParams<T>&, \
                                const ModelConfig&);                                          \
  template Matrix<T> layer_step(const Matrix<T>&, CacheState<T>&, const LayerParams<T>&,      \
                                const ModelConfig&);                                          \
  template ForwardResult<T> layer_forward(const Matrix<T>&, const LayerParams<T>&,            \
                                          CacheState<T>, const ModelConfig&);

BCT_INSTANTIATE_LAYER(float)
BCT_INSTANTIATE_LAYER(double)

}  // namespace bct
