// Dense row-major tensors over a scalar type. The float instantiation is the
// product type; tests may instantiate double for high-precision oracles.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace qcdet {

template <typename T>
struct basic_tensor {
  std::vector<int> shape;
  std::vector<T> data;

  basic_tensor() = default;

  explicit basic_tensor(std::vector<int> s, T fill = T(0)) : shape(std::move(s)) {
    data.assign(numel_of(shape), fill);
  }

  basic_tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<std::size_t>(numel_of(shape)) != data.size())
      throw std::invalid_argument("tensor: shape/data size mismatch");
  }

  static std::size_t numel_of(const std::vector<int>& s) {
    std::size_t n = 1;
    for (int e : s) {
      if (e < 0) throw std::invalid_argument("tensor: negative extent");
      n *= static_cast<std::size_t>(e);
    }
    return n;
  }

  std::size_t numel() const { return data.size(); }
  int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }
  int ndim() const { return static_cast<int>(shape.size()); }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  // 2D / 3D / 4D indexing, row-major.
  T& at(int i, int j) { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
  const T& at(int i, int j) const { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
  T& at(int c, int i, int j) {
    return data[(static_cast<std::size_t>(c) * shape[1] + i) * shape[2] + j];
  }
  const T& at(int c, int i, int j) const {
    return data[(static_cast<std::size_t>(c) * shape[1] + i) * shape[2] + j];
  }
  T& at(int n, int c, int i, int j) {
    return data[((static_cast<std::size_t>(n) * shape[1] + c) * shape[2] + i) * shape[3] + j];
  }
  const T& at(int n, int c, int i, int j) const {
    return data[((static_cast<std::size_t>(n) * shape[1] + c) * shape[2] + i) * shape[3] + j];
  }

  bool same_shape(const basic_tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  T min_value() const { return *std::min_element(data.begin(), data.end()); }
  T max_value() const { return *std::max_element(data.begin(), data.end()); }

  // Reductions accumulate in double regardless of T.
  double sum64() const {
    double s = 0.0;
    for (T v : data) s += static_cast<double>(v);
    return s;
  }

  double abs_max() const {
    double m = 0.0;
    for (T v : data) m = std::max(m, std::abs(static_cast<double>(v)));
    return m;
  }

  double norm_l2() const {
    double s = 0.0;
    for (T v : data) s += static_cast<double>(v) * static_cast<double>(v);
    return std::sqrt(s);
  }

  static basic_tensor zeros_like(const basic_tensor& o) { return basic_tensor(o.shape); }

  static basic_tensor full(std::vector<int> s, T v) { return basic_tensor(std::move(s), v); }
};

using Tensor = basic_tensor<float>;

inline std::string shape_str(const std::vector<int>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

template <typename T>
void require_same_shape(const basic_tensor<T>& a, const basic_tensor<T>& b, const char* op) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                                " vs " + shape_str(b.shape));
}

}  // namespace qcdet
