#pragma once

#include <cmath>
#include <cstddef>
#include <string>

#include "ctflow/core/rng.hpp"
#include "ctflow/grad/ops.hpp"
#include "ctflow/grad/parameter.hpp"
#include "ctflow/grad/tape.hpp"
#include "ctflow/grad/tensor.hpp"

namespace ctflow::flow {

using grad::ParameterStore;
using grad::Tape;
using grad::Tensor;

inline constexpr double kLeakySlope = 0.01;

namespace detail {

template <typename T>
Tensor<T> he_normal(Rng& rng, std::vector<std::size_t> shape, std::size_t fan_in) {
  Tensor<T> t = Tensor<T>::zeros(shape);
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (std::size_t i = 0; i < t.numel(); ++i) {
    t.ptr()[i] = static_cast<T>(rng.normal() * stddev);
  }
  return t;
}

}  // namespace detail

// Three convolutions with LeakyReLU between them, stride 1, padding chosen to
// preserve the spatial size. The final layer starts at zero so a freshly built
// coupling is the identity.
template <typename T>
class ConvSubnet {
 public:
  ConvSubnet() = default;

  ConvSubnet(ParameterStore<T>& store, const std::string& prefix, std::size_t c_in,
             std::size_t w1, std::size_t w2, std::size_t c_out, std::size_t kernel, Rng& rng)
      : store_(&store), prefix_(prefix), kernel_(kernel) {
    store.add(prefix + ".w1", detail::he_normal<T>(rng, {w1, c_in, kernel, kernel},
                                                   c_in * kernel * kernel));
    store.add(prefix + ".b1", Tensor<T>::zeros({w1}));
    store.add(prefix + ".w2", detail::he_normal<T>(rng, {w2, w1, kernel, kernel},
                                                   w1 * kernel * kernel));
    store.add(prefix + ".b2", Tensor<T>::zeros({w2}));
    store.add(prefix + ".w3", Tensor<T>::zeros({c_out, w2, kernel, kernel}));
    store.add(prefix + ".b3", Tensor<T>::zeros({c_out}));
  }

  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x) const {
    const std::size_t pad = (kernel_ - 1) / 2;
    Tensor<T> h = grad::conv2d(tape, x, value(".w1"), value(".b1"), 1, pad);
    h = grad::leaky_relu(tape, h, T(kLeakySlope));
    h = grad::conv2d(tape, h, value(".w2"), value(".b2"), 1, pad);
    h = grad::leaky_relu(tape, h, T(kLeakySlope));
    return grad::conv2d(tape, h, value(".w3"), value(".b3"), 1, pad);
  }

 private:
  const Tensor<T>& value(const char* suffix) const { return store_->at(prefix_ + suffix).value; }

  ParameterStore<T>* store_ = nullptr;
  std::string prefix_;
  std::size_t kernel_ = 1;
};

// Three dense layers with LeakyReLU between them; zero final layer.
template <typename T>
class DenseSubnet {
 public:
  DenseSubnet() = default;

  DenseSubnet(ParameterStore<T>& store, const std::string& prefix, std::size_t d_in,
              std::size_t width, std::size_t d_out, Rng& rng)
      : store_(&store), prefix_(prefix) {
    store.add(prefix + ".w1", detail::he_normal<T>(rng, {width, d_in}, d_in));
    store.add(prefix + ".b1", Tensor<T>::zeros({width}));
    store.add(prefix + ".w2", detail::he_normal<T>(rng, {width, width}, width));
    store.add(prefix + ".b2", Tensor<T>::zeros({width}));
    store.add(prefix + ".w3", Tensor<T>::zeros({d_out, width}));
    store.add(prefix + ".b3", Tensor<T>::zeros({d_out}));
  }

  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x) const {
    Tensor<T> h = grad::dense(tape, x, value(".w1"), value(".b1"));
    h = grad::leaky_relu(tape, h, T(kLeakySlope));
    h = grad::dense(tape, h, value(".w2"), value(".b2"));
    h = grad::leaky_relu(tape, h, T(kLeakySlope));
    return grad::dense(tape, h, value(".w3"), value(".b3"));
  }

 private:
  const Tensor<T>& value(const char* suffix) const { return store_->at(prefix_ + suffix).value; }

  ParameterStore<T>* store_ = nullptr;
  std::string prefix_;
};

}  // namespace ctflow::flow
