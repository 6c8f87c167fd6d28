#pragma once

// Dense row-major matrices and the handful of kernels the attention layers
// need. Everything here is a pure function of its inputs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "bct/errors.hpp"

namespace bct {

template <typename T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw DimensionError("matrix data length " + std::to_string(data_.size()) +
                           " does not match shape " + std::to_string(rows_) + "x" +
                           std::to_string(cols_));
    }
  }
  Matrix(std::initializer_list<std::initializer_list<T>> rows) {
    rows_ = rows.size();
    cols_ = rows_ ? rows.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw DimensionError("ragged matrix literal");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix zeros(std::size_t rows, std::size_t cols) { return Matrix(rows, cols); }
  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
    return m;
  }
  static Matrix row_vector(std::span<const T> v) {
    return Matrix(1, v.size(), std::vector<T>(v.begin(), v.end()));
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool is_row_vector() const { return rows_ == 1; }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  Matrix row_copy(std::size_t r) const { return row_vector(row(r)); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }

  // Bytes held by the element payload (excludes the object header and any
  // spare vector capacity).
  std::size_t payload_bytes() const { return data_.size() * sizeof(T); }

  std::string shape_string() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

  // Appends one row; used by the growing baseline cache.
  void append_row(std::span<const T> r) {
    if (rows_ == 0 && cols_ == 0) cols_ = r.size();
    if (r.size() != cols_) {
      throw DimensionError("append_row: row of width " + std::to_string(r.size()) +
                           " into " + shape_string());
    }
    data_.insert(data_.end(), r.begin(), r.end());
    ++rows_;
  }
  void truncate_rows(std::size_t n) {
    if (n > rows_) throw DimensionError("truncate_rows beyond current row count");
    rows_ = n;
    data_.resize(rows_ * cols_);
  }
  void reserve_rows(std::size_t n) { data_.reserve(n * cols_); }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

// Floating-point operation tally for the current thread. Kernels below add
// their multiply/add counts so cost scaling can be asserted exactly.
inline std::uint64_t& flop_counter() {
  thread_local std::uint64_t count = 0;
  return count;
}

template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + a.shape_string() + " * " + b.shape_string());
  }
  Matrix<T> out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto orow = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const T aik = a(i, k);
      auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aik * brow[j];
    }
  }
  flop_counter() += 2ULL * a.rows() * a.cols() * b.cols();
  return out;
}

// a * b^T without materialising the transpose.
template <typename T>
Matrix<T> matmul_bt(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_bt: " + a.shape_string() + " * (" + b.shape_string() + ")^T");
  }
  Matrix<T> out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto arow = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto brow = b.row(j);
      T acc = T(0);
      for (std::size_t k = 0; k < a.cols(); ++k) acc += arow[k] * brow[k];
      out(i, j) = acc;
    }
  }
  flop_counter() += 2ULL * a.rows() * a.cols() * b.rows();
  return out;
}

template <typename T>
Matrix<T> transpose(const Matrix<T>& a) {
  Matrix<T> out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

template <typename T>
Matrix<T> outer(const Matrix<T>& u, const Matrix<T>& v) {
  if (!u.is_row_vector() || !v.is_row_vector()) {
    throw DimensionError("outer: expected row vectors, got " + u.shape_string() + " and " +
                         v.shape_string());
  }
  Matrix<T> out(u.cols(), v.cols());
  for (std::size_t i = 0; i < u.cols(); ++i) {
    auto orow = out.row(i);
    for (std::size_t j = 0; j < v.cols(); ++j) orow[j] = u[i] * v[j];
  }
  flop_counter() += static_cast<std::uint64_t>(u.cols()) * v.cols();
  return out;
}

// acc += u^T v, the in-place form of outer() used on the hot write path.
template <typename T>
void add_outer_inplace(Matrix<T>& acc, const Matrix<T>& u, const Matrix<T>& v) {
  if (!u.is_row_vector() || !v.is_row_vector() || acc.rows() != u.cols() ||
      acc.cols() != v.cols()) {
    throw DimensionError("add_outer: " + acc.shape_string() + " += (" + u.shape_string() +
                         ")^T * " + v.shape_string());
  }
  for (std::size_t i = 0; i < u.cols(); ++i) {
    const T ui = u[i];
    auto arow = acc.row(i);
    for (std::size_t j = 0; j < v.cols(); ++j) arow[j] += ui * v[j];
  }
  flop_counter() += 2ULL * u.cols() * v.cols();
}

template <typename T>
void add_inplace(Matrix<T>& acc, const Matrix<T>& b) {
  if (acc.rows() != b.rows() || acc.cols() != b.cols()) {
    throw DimensionError("add: " + acc.shape_string() + " + " + b.shape_string());
  }
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += b[i];
  flop_counter() += acc.size();
}

template <typename T>
Matrix<T> add(Matrix<T> a, const Matrix<T>& b) {
  add_inplace(a, b);
  return a;
}

template <typename T>
void scale_inplace(Matrix<T>& a, T s) {
  for (auto& x : a.data()) x *= s;
  flop_counter() += a.size();
}

// Numerically stable softmax over a single row (max-subtracted).
template <typename T>
Matrix<T> softmax_row(const Matrix<T>& scores) {
  if (!scores.is_row_vector()) {
    throw DimensionError("softmax_row: expected 1xm, got " + scores.shape_string());
  }
  if (scores.cols() == 0) throw DimensionError("softmax_row: empty row");
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t i = 0; i < scores.cols(); ++i) {
    if (std::isnan(scores[i])) {
      throw NumericError("softmax_row: NaN score at index " + std::to_string(i));
    }
    mx = std::max(mx, scores[i]);
  }
  Matrix<T> out(1, scores.cols());
  T sum = T(0);
  for (std::size_t i = 0; i < scores.cols(); ++i) {
    out[i] = std::exp(scores[i] - mx);
    sum += out[i];
  }
#ifndef BCT_FAULT_UNNORMALIZED_SOFTMAX
  for (auto& x : out.data()) x /= sum;
#else
  (void)sum;
#endif
  flop_counter() += 4ULL * scores.cols();
  return out;
}

template <typename T>
bool all_finite(const Matrix<T>& m) {
  return std::all_of(m.data().begin(), m.data().end(), [](T x) { return std::isfinite(x); });
}

template <typename T>
double max_abs(const Matrix<T>& m) {
  double out = 0.0;
  for (T x : m.data()) out = std::max(out, std::abs(static_cast<double>(x)));
  return out;
}

template <typename T>
double max_abs_diff(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError("max_abs_diff: " + a.shape_string() + " vs " + b.shape_string());
  }
  double out = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    out = std::max(out, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return out;
}

// max|a - b| / max|reference|; the norm-wise error used by the tolerance
// checks. A zero reference falls back to absolute error.
template <typename T>
double max_rel_diff(const Matrix<T>& a, const Matrix<T>& reference) {
  const double denom = max_abs(reference);
  const double diff = max_abs_diff(a, reference);
  return denom > 0.0 ? diff / denom : diff;
}

template <typename To, typename From>
Matrix<To> cast(const Matrix<From>& m) {
  std::vector<To> data(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) data[i] = static_cast<To>(m[i]);
  return Matrix<To>(m.rows(), m.cols(), std::move(data));
}

// Seeded generator: MT19937-64 (bit-exact across standard libraries) with
// hand-rolled distributions, since std:: distributions are
// implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Unbiased integer in [0, n) by rejection.
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw ConfigError("uniform_int: empty range");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t r;
    do {
      r = engine_();
    } while (r >= limit);
    return r % n;
  }

  // Box-Muller, caching the second variate.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  // Independent child stream derived from this generator.
  Rng split() { return Rng(engine_() ^ 0x9E3779B97F4A7C15ULL); }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

template <typename T>
Matrix<T> gaussian_matrix(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  Matrix<T> m(rows, cols);
  for (auto& x : m.data()) x = static_cast<T>(stddev * rng.normal());
  return m;
}

}  // namespace bct
