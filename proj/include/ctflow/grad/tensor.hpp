#pragma once

#include <cstddef>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "ctflow/core/error.hpp"

namespace ctflow::grad {

// Contiguous row-major buffer with a shape. The buffer is written once at
// creation and shared afterwards, so copies are cheap and views are safe.
// `node` ties the tensor to a recording tape; -1 means detached.
template <typename T>
struct Tensor {
  std::vector<std::size_t> shape;
  std::shared_ptr<std::vector<T>> data;
  int node = -1;

  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> shape) {
    Tensor t;
    t.shape = std::move(shape);
    t.data = std::make_shared<std::vector<T>>(product(t.shape), T(0));
    return t;
  }

  static Tensor full(std::vector<std::size_t> shape, T value) {
    Tensor t = zeros(std::move(shape));
    for (auto& v : *t.data) v = value;
    return t;
  }

  static Tensor from(std::vector<std::size_t> shape, std::vector<T> values) {
    if (product(shape) != values.size()) {
      throw DimensionError("tensor: value count does not match shape");
    }
    Tensor t;
    t.shape = std::move(shape);
    t.data = std::make_shared<std::vector<T>>(std::move(values));
    return t;
  }

  static std::size_t product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
  }

  std::size_t numel() const { return data ? data->size() : 0; }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  T* ptr() { return data->data(); }
  const T* ptr() const { return data->data(); }
};

template <typename T>
bool same_shape(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape == b.shape;
}

inline std::string shape_string(const std::vector<std::size_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* where) {
  if (t.shape.size() != rank) {
    throw DimensionError(std::string(where) + ": expected rank " + std::to_string(rank) +
                         ", got " + shape_string(t.shape));
  }
}

}  // namespace ctflow::grad
