// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensor and the raw kernels shared by the autograd ops and
// the frozen (tape-free) encoders.

#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace vidprompt {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(shape_product(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (data_.size() != shape_product(shape_)) {
      throw std::invalid_argument("Tensor: data length " + std::to_string(data_.size()) +
                                  " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, T fill = T(0)) {
    return Tensor(Shape{rows, cols}, fill);
  }

  static Tensor row_vector(std::vector<T> values) {
    const std::size_t n = values.size();
    return Tensor(Shape{1, n}, std::move(values));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  bool is_matrix() const { return shape_.size() == 2; }

  std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t cols() const { return shape_.size() < 2 ? 1 : data_.size() / shape_[0]; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  std::span<T> row(std::size_t r) { return std::span<T>(data_).subspan(r * cols(), cols()); }
  std::span<const T> row(std::size_t r) const {
    return std::span<const T>(data_).subspan(r * cols(), cols());
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void validate_shape() const {
    for (std::size_t d : shape_) {
      if (d == 0) throw std::invalid_argument("Tensor: zero-sized dimension in " + shape_string(shape_));
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

namespace kernels {

inline void require_matrix(const Shape& s, const char* what) {
  if (s.size() != 2) throw std::invalid_argument(std::string(what) + ": expected a matrix, got " + shape_string(s));
}

// out (+)= op(A) * op(B), where op transposes when the flag is set.
template <class T>
void gemm(const Tensor<T>& a, bool trans_a, const Tensor<T>& b, bool trans_b, Tensor<T>& out,
          bool accumulate) {
  const std::size_t m = trans_a ? a.cols() : a.rows();
  const std::size_t k = trans_a ? a.rows() : a.cols();
  const std::size_t kb = trans_b ? b.cols() : b.rows();
  const std::size_t n = trans_b ? b.rows() : b.cols();
  if (k != kb) {
    throw std::invalid_argument("matmul: inner dimensions differ (" + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()) + ")");
  }
  if (out.rows() != m || out.cols() != n) throw std::invalid_argument("matmul: output shape mismatch");
  if (!accumulate) out.fill(T(0));
  const T* A = a.values().data();
  const T* B = b.values().data();
  T* C = out.values().data();
  const std::size_t lda = a.cols();
  const std::size_t ldb = b.cols();
  if (!trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      T* crow = C + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = trans_a ? A[p * lda + i] : A[i * lda + p];
        if (av == T(0)) continue;
        const T* brow = B + p * ldb;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      T* crow = C + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        const T* brow = B + j * ldb;
        T acc = T(0);
        if (!trans_a) {
          const T* arow = A + i * lda;
          for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
        } else {
          for (std::size_t p = 0; p < k; ++p) acc += A[p * lda + i] * brow[p];
        }
        crow[j] += acc;
      }
    }
  }
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a.shape(), "matmul");
  require_matrix(b.shape(), "matmul");
  Tensor<T> out = Tensor<T>::matrix(a.rows(), b.cols());
  gemm(a, false, b, false, out, false);
  return out;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_matrix(a.shape(), "transpose");
  Tensor<T> out = Tensor<T>::matrix(a.cols(), a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) out(c, r) = a(r, c);
  return out;
}

// Mean of rows [begin, end) of a matrix; the single summation order used for
// every pooling path.
template <class T>
Tensor<T> mean_of_rows(const Tensor<T>& a, std::span<const std::size_t> rows) {
  require_matrix(a.shape(), "mean_of_rows");
  if (rows.empty()) throw std::invalid_argument("mean_of_rows: no rows selected");
  Tensor<T> out = Tensor<T>::matrix(1, a.cols());
  for (std::size_t r : rows) {
    auto src = a.row(r);
    for (std::size_t c = 0; c < a.cols(); ++c) out[c] += src[c];
  }
  const T inv = T(1) / static_cast<T>(rows.size());
  for (auto& v : out.values()) v *= inv;
  return out;
}

template <class T>
Tensor<T> mean_of_rows(const Tensor<T>& a) {
  std::vector<std::size_t> all(a.rows());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return mean_of_rows(a, std::span<const std::size_t>(all));
}

}  // namespace kernels
}  // namespace vidprompt
