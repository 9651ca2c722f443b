#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "veinseg/errors.hpp"

namespace veinseg {

// Dense NCHW shape.
struct Shape4 {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t size() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  bool operator==(const Shape4&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << "(" << n << "," << c << "," << h << "," << w << ")";
    return os.str();
  }
};

// Rank-4 dense tensor, row-major NCHW. `grad` is either empty or holds a
// same-shape gradient buffer.
template <typename T>
struct Tensor4 {
  Shape4 shape{};
  std::vector<T> data;
  std::vector<T> grad;

  Tensor4() = default;
  explicit Tensor4(Shape4 s, T fill = T(0))
      : shape(s), data(s.size(), fill) {}

  static Tensor4 zeros(Shape4 s) { return Tensor4(s); }

  std::size_t size() const { return data.size(); }

  std::size_t index(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * shape.c + c) * shape.h + y) *
               shape.w +
           x;
  }
  T& operator()(int n, int c, int y, int x) { return data[index(n, c, y, x)]; }
  const T& operator()(int n, int c, int y, int x) const {
    return data[index(n, c, y, x)];
  }

  // Pointer to the start of one image (all channels of batch element n).
  T* image_ptr(int n) {
    return data.data() + static_cast<std::size_t>(n) * shape.c * shape.h * shape.w;
  }
  const T* image_ptr(int n) const {
    return data.data() + static_cast<std::size_t>(n) * shape.c * shape.h * shape.w;
  }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
  bool has_grad() const { return grad.size() == data.size(); }

  bool all_finite() const {
    for (const T v : data) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }
};

template <typename T>
void require_finite(const Tensor4<T>& t, const std::string& what) {
  if (!t.all_finite()) {
    throw numeric_error("non-finite values in " + what + " " + t.shape.str());
  }
}

// A named model tensor. `dims` carry the logical rank used in checkpoints
// (rank 4 for conv kernels, rank 1 for biases and per-channel vectors).
template <typename T>
struct Parameter {
  std::string name;
  std::vector<int> dims;
  std::vector<T> value;
  std::vector<T> grad;
  bool trainable = true;
  bool weight_decayed = false;

  Parameter() = default;
  Parameter(std::string name_, std::vector<int> dims_, bool trainable_,
            bool decayed_)
      : name(std::move(name_)), dims(std::move(dims_)), trainable(trainable_),
        weight_decayed(decayed_) {
    std::size_t n = 1;
    for (const int d : dims) n *= static_cast<std::size_t>(d);
    value.assign(n, T(0));
    grad.assign(n, T(0));
  }

  std::size_t size() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

}  // namespace veinseg
