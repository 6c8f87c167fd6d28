#pragma once

// Reference implementations used only by tests. They work on nested
// std::vector<double> and never call into the library's kernels, so they
// stay independent of the code paths they check.

#include <cmath>
#include <cstddef>
#include <vector>

#include "bct/baseline.hpp"
#include "bct/layer.hpp"

namespace oracle {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

template <typename T>
Mat from(const bct::Matrix<T>& m) {
  Mat out(m.rows(), Vec(m.cols()));
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out[i][j] = static_cast<double>(m(i, j));
  return out;
}

inline Vec row(const Mat& m, std::size_t r) { return m[r]; }

inline Mat matmul(const Mat& a, const Mat& b) {
  const std::size_t n = a.size(), k = b.size(), m = b.empty() ? 0 : b[0].size();
  Mat out(n, Vec(m, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a[i][p] * b[p][j];
      out[i][j] = acc;
    }
  return out;
}

// v (row) times matrix.
inline Vec vecmat(const Vec& v, const Mat& m) {
  const std::size_t cols = m.empty() ? 0 : m[0].size();
  Vec out(cols, 0.0);
  for (std::size_t j = 0; j < cols; ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) acc += v[i] * m[i][j];
    out[j] = acc;
  }
  return out;
}

inline double dot(const Vec& a, const Vec& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

// exp / sum without max subtraction.
inline Vec softmax(const Vec& s) {
  Vec out(s.size());
  double total = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) total += out[i] = std::exp(s[i]);
  for (auto& x : out) x /= total;
  return out;
}

inline Vec scores(const Vec& q, const Mat& keys, double factor) {
  Vec out(keys.size());
  for (std::size_t i = 0; i < keys.size(); ++i) out[i] = factor * dot(q, keys[i]);
  return out;
}

inline Mat outer(const Vec& u, const Vec& v) {
  Mat out(u.size(), Vec(v.size()));
  for (std::size_t i = 0; i < u.size(); ++i)
    for (std::size_t j = 0; j < v.size(); ++j) out[i][j] = u[i] * v[j];
  return out;
}

// One head of the bounded layer, scripted from the definitions.
struct Head {
  Mat W_wq, W_wv, W_rq, MK;
};

struct Layer {
  std::vector<Head> heads;
  Mat W_o;
  double factor = 1.0;
};

template <typename T>
Layer from(const bct::LayerParams<T>& p, const bct::ModelConfig& c) {
  Layer l;
  for (const auto& h : p.heads) l.heads.push_back({from(h.W_wq), from(h.W_wv), from(h.W_rq), from(h.MK)});
  l.W_o = from(p.W_o);
  l.factor = c.score_scale == bct::ScoreScale::kNone ? 1.0 : 1.0 / std::sqrt(double(c.d_k));
  return l;
}

// Write path only; returns final MV per head.
inline std::vector<Mat> write_sequence(const Layer& l, const Mat& xs, std::vector<Mat> mv) {
  for (const auto& x : xs) {
    for (std::size_t h = 0; h < l.heads.size(); ++h) {
      const Vec wq = vecmat(x, l.heads[h].W_wq);
      const Vec wv = vecmat(x, l.heads[h].W_wv);
      const Vec ww = softmax(scores(wq, l.heads[h].MK, l.factor));
      for (std::size_t i = 0; i < ww.size(); ++i)
        for (std::size_t j = 0; j < wv.size(); ++j) mv[h][i][j] += ww[i] * wv[j];
    }
  }
  return mv;
}

inline Vec read(const Layer& l, const Vec& x, const std::vector<Mat>& mv) {
  Vec z;
  for (std::size_t h = 0; h < l.heads.size(); ++h) {
    const Vec rw = softmax(scores(vecmat(x, l.heads[h].W_rq), l.heads[h].MK, l.factor));
    const Vec zh = vecmat(rw, mv[h]);
    z.insert(z.end(), zh.begin(), zh.end());
  }
  return vecmat(z, l.W_o);
}

// Write-then-read per token.
inline Mat forward(const Layer& l, const Mat& xs, std::vector<Mat> mv) {
  Mat ys;
  for (const auto& x : xs) {
    mv = write_sequence(l, Mat{x}, std::move(mv));
    ys.push_back(read(l, x, mv));
  }
  return ys;
}

inline double objective(const Layer& l, const Mat& xs, const std::vector<Mat>& mv0, const Mat& g) {
  const Mat ys = forward(l, xs, mv0);
  double total = 0.0;
  for (std::size_t t = 0; t < ys.size(); ++t) total += dot(ys[t], g[t]);
  return total;
}

// Full causal softmax attention over a prefix, 1/sqrt(d_k) scaling.
template <typename T>
Mat causal_attention(const bct::BaselineParams<T>& p, const Mat& xs) {
  const Mat q = matmul(xs, from(p.W_q)), k = matmul(xs, from(p.W_k)), v = matmul(xs, from(p.W_v));
  const double scale = 1.0 / std::sqrt(double(p.W_k.cols()));
  Mat ys;
  for (std::size_t t = 0; t < xs.size(); ++t) {
    const Mat prefix_keys(k.begin(), k.begin() + long(t) + 1);
    const Mat prefix_vals(v.begin(), v.begin() + long(t) + 1);
    const Vec w = softmax(scores(q[t], prefix_keys, scale));
    ys.push_back(vecmat(vecmat(w, prefix_vals), from(p.W_o)));
  }
  return ys;
}

inline double max_abs_diff(const Mat& a, const Mat& b) {
  double out = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) out = std::max(out, std::abs(a[i][j] - b[i][j]));
  return out;
}

template <typename T>
double max_abs_diff(const bct::Matrix<T>& a, const Mat& b) {
  return max_abs_diff(from(a), b);
}

}  // namespace oracle
