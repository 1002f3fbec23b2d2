#pragma once

#include <algorithm>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace deltagan {

/// Dense n-dimensional array, row-major, owning its storage.
/// Image batches use the layout (N, C, H, W); vectors use (N, D);
/// scalars are shape {1}.
template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(checked_numel(shape)) {}
  Tensor(std::vector<int> s, T fill_value)
      : shape(std::move(s)), data(checked_numel(shape), fill_value) {}

  static Tensor scalar(T v) {
    Tensor t({1});
    t.data[0] = v;
    return t;
  }

  static std::size_t checked_numel(const std::vector<int>& s) {
    std::size_t n = 1;
    for (int d : s) {
      if (d < 0) throw std::invalid_argument("tensor: negative dimension");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  T& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

  // 4D accessors for (N, C, H, W) tensors.
  T& at4(int n, int c, int h, int w) {
    return data[idx4(n, c, h, w)];
  }
  const T& at4(int n, int c, int h, int w) const {
    return data[idx4(n, c, h, w)];
  }
  std::size_t idx4(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w;
  }

  T& at2(int n, int d) { return data[static_cast<std::size_t>(n) * shape[1] + d]; }
  const T& at2(int n, int d) const { return data[static_cast<std::size_t>(n) * shape[1] + d]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape);
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

inline std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ')';
  return os.str();
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_str(a.shape) +
                                " vs " + shape_str(b.shape));
}

}  // namespace deltagan
