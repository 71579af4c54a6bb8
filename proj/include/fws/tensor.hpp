// Tensor<S>: a dense row-major N-d array with shared storage. Copies are
// cheap handles; graph code treats values as immutable after construction.
// Matrix products map onto Eigen.
#pragma once

#include <Eigen/Core>
#include <cstring>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <vector>

#include "fws/common.hpp"

namespace fws {

using Shape = std::vector<i64>;

inline i64 shape_numel(const Shape& s) {
  i64 n = 1;
  for (i64 d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

template <typename S>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)), numel_(shape_numel(shape_)),
        data_(new S[static_cast<size_t>(numel_)]()) {}

  Tensor(Shape shape, S fill) : Tensor(uninit(std::move(shape))) {
    for (i64 i = 0; i < numel_; ++i) data_.get()[i] = fill;
  }

  // Skips zero-initialization; the caller must write every element.
  static Tensor uninit(Shape shape) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.numel_ = shape_numel(t.shape_);
    t.data_ = std::shared_ptr<S[]>(new S[static_cast<size_t>(t.numel_)]);
    return t;
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, S v) { return Tensor(std::move(shape), v); }

  static Tensor from_vector(Shape shape, const std::vector<S>& v) {
    Tensor t = uninit(std::move(shape));
    check(static_cast<i64>(v.size()) == t.numel_, "Tensor::from_vector: size mismatch");
    std::memcpy(t.data(), v.data(), sizeof(S) * v.size());
    return t;
  }

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  i64 numel() const { return numel_; }
  i64 dim(size_t i) const { return shape_.at(i); }
  size_t ndim() const { return shape_.size(); }

  S* data() { return data_.get(); }
  const S* data() const { return data_.get(); }
  S& operator[](i64 i) { return data_.get()[i]; }
  const S& operator[](i64 i) const { return data_.get()[i]; }

  // Shares storage; shapes must cover the same element count.
  Tensor reshaped(Shape s) const {
    check(shape_numel(s) == numel_, "reshape: numel mismatch " + shape_str(shape_) + " -> " + shape_str(s));
    Tensor t = *this;
    t.shape_ = std::move(s);
    return t;
  }

  Tensor clone() const {
    Tensor t = uninit(shape_);
    std::memcpy(t.data(), data(), sizeof(S) * static_cast<size_t>(numel_));
    return t;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (i64 i = 0; i < numel_; ++i)
      if (!std::isfinite(static_cast<double>(data_.get()[i]))) return false;
    return true;
  }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> out = Tensor<T>::uninit(shape_);
    for (i64 i = 0; i < numel_; ++i) out[i] = static_cast<T>((*this)[i]);
    return out;
  }

 private:
  Shape shape_;
  i64 numel_ = 0;
  std::shared_ptr<S[]> data_;
};

// ---- raw (non-graph) helpers used by optimizers, init, and op kernels ----

template <typename S>
using EigenMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename S>
using ConstEigenMap = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename S>
EigenMap<S> as_matrix(Tensor<S>& t, i64 rows, i64 cols) {
  check(rows * cols == t.numel(), "as_matrix: numel mismatch");
  return EigenMap<S>(t.data(), rows, cols);
}

template <typename S>
ConstEigenMap<S> as_matrix(const Tensor<S>& t, i64 rows, i64 cols) {
  check(rows * cols == t.numel(), "as_matrix: numel mismatch");
  return ConstEigenMap<S>(t.data(), rows, cols);
}

// C(m×n) = A(m×k) · B(k×n)
template <typename S>
Tensor<S> matmul_raw(const Tensor<S>& a, i64 m, i64 k, const Tensor<S>& b, i64 n) {
  Tensor<S> c = Tensor<S>::uninit(Shape{m, n});
  as_matrix(c, m, n).noalias() = as_matrix(a, m, k) * as_matrix(b, k, n);
  return c;
}

template <typename S, typename F>
Tensor<S> map_tensor(const Tensor<S>& a, F f) {
  Tensor<S> out = Tensor<S>::uninit(a.shape());
  const i64 n = a.numel();
  for (i64 i = 0; i < n; ++i) out[i] = f(a[i]);
  return out;
}

template <typename S, typename F>
Tensor<S> zip_tensors(const Tensor<S>& a, const Tensor<S>& b, F f) {
  check(a.same_shape(b), "zip: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<S> out = Tensor<S>::uninit(a.shape());
  const i64 n = a.numel();
  for (i64 i = 0; i < n; ++i) out[i] = f(a[i], b[i]);
  return out;
}

template <typename S>
void axpy_raw(Tensor<S>& y, S alpha, const Tensor<S>& x) {  // y += alpha * x
  check(y.same_shape(x), "axpy: shape mismatch");
  const i64 n = y.numel();
  for (i64 i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename S>
double max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
  check(a.same_shape(b), "max_abs_diff: shape mismatch");
  double m = 0;
  for (i64 i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

}  // namespace fws
