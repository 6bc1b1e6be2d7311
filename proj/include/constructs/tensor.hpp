#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace constructs {

// Dense row-major tensor over a flat Eigen array. Rank is small: [C,H,W] for
// feature maps, [rows,cols] for matrices, [1] for scalars. Matrix views map
// onto the flat storage without copying so GEMM-heavy code stays in Eigen.
template <typename T>
struct Tensor {
  using Scalar = T;
  using Flat = Eigen::Array<T, Eigen::Dynamic, 1>;
  using MatrixRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatMap = Eigen::Map<MatrixRM>;
  using ConstMatMap = Eigen::Map<const MatrixRM>;

  std::vector<int> dims;
  Flat data;

  Tensor() = default;
  explicit Tensor(std::vector<int> d) : dims(std::move(d)), data(Flat::Zero(count(dims))) {}
  Tensor(std::vector<int> d, Flat values) : dims(std::move(d)), data(std::move(values)) {
    if (data.size() != count(dims)) throw std::invalid_argument("tensor: dims/data mismatch");
  }

  static Tensor zeros(std::vector<int> d) { return Tensor(std::move(d)); }

  static Tensor full(std::vector<int> d, T v) {
    Tensor t(std::move(d));
    t.data.setConstant(v);
    return t;
  }

  static Tensor scalar(T v) {
    Tensor t({1});
    t.data[0] = v;
    return t;
  }

  static Tensor from(std::vector<int> d, std::initializer_list<T> values) {
    Tensor t(std::move(d));
    if (static_cast<std::int64_t>(values.size()) != t.size())
      throw std::invalid_argument("tensor: initializer size mismatch");
    std::int64_t i = 0;
    for (T v : values) t.data[i++] = v;
    return t;
  }

  static std::int64_t count(const std::vector<int>& d) {
    std::int64_t n = 1;
    for (int x : d) n *= x;
    return n;
  }

  std::int64_t size() const { return data.size(); }
  int rank() const { return static_cast<int>(dims.size()); }
  int dim(int i) const { return dims[static_cast<std::size_t>(i)]; }

  T& operator[](std::int64_t i) { return data[i]; }
  T operator[](std::int64_t i) const { return data[i]; }

  // [C,H,W]
  T& at(int c, int h, int w) {
    return data[(static_cast<std::int64_t>(c) * dim(1) + h) * dim(2) + w];
  }
  T at(int c, int h, int w) const {
    return data[(static_cast<std::int64_t>(c) * dim(1) + h) * dim(2) + w];
  }

  // [rows,cols]
  T& at(int r, int c) { return data[static_cast<std::int64_t>(r) * dim(1) + c]; }
  T at(int r, int c) const { return data[static_cast<std::int64_t>(r) * dim(1) + c]; }

  MatMap mat(int rows, int cols) {
    if (static_cast<std::int64_t>(rows) * cols != size())
      throw std::invalid_argument("tensor: matrix view size mismatch");
    return MatMap(data.data(), rows, cols);
  }
  ConstMatMap mat(int rows, int cols) const {
    if (static_cast<std::int64_t>(rows) * cols != size())
      throw std::invalid_argument("tensor: matrix view size mismatch");
    return ConstMatMap(data.data(), rows, cols);
  }

  // rank-2 view using own dims
  MatMap mat() { return mat(dim(0), dim(1)); }
  ConstMatMap mat() const { return mat(dim(0), dim(1)); }

  Tensor reshaped(std::vector<int> d) const {
    if (count(d) != size()) throw std::invalid_argument("tensor: reshape size mismatch");
    return Tensor(std::move(d), data);
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.dims = dims;
    out.data = data.template cast<U>();
    return out;
  }

  bool same_shape(const Tensor& other) const { return dims == other.dims; }
};

inline std::string shape_str(const std::vector<int>& d) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < d.size(); ++i) os << (i ? "," : "") << d[i];
  os << ']';
  return os.str();
}

template <typename T>
void require_shape(const Tensor<T>& t, const std::vector<int>& d, const char* what) {
  if (t.dims != d)
    throw std::invalid_argument(std::string(what) + ": expected " + shape_str(d) + ", got " +
                                shape_str(t.dims));
}

}  // namespace constructs
