#pragma once

#include <cmath>
#include <cstddef>
#include <string>

#include "ctflow/core/error.hpp"
#include "ctflow/grad/ops.hpp"

namespace ctflow::train {

using grad::Tape;
using grad::Tensor;

// Mean negative log-likelihood under a standard normal base density:
// mean_i(|z_i|^2/2 - logdet_i). The additive (D/2)*log(2*pi) is dropped:
// it shifts every sample by the same constant and carries no gradient.
// bits_per_dim() restores it for reporting.
template <typename T>
Tensor<T> nll_loss(Tape<T>* tape, const Tensor<T>& z, const Tensor<T>& logdet) {
  grad::require_rank(z, 2, "nll_loss latent");
  grad::require_rank(logdet, 1, "nll_loss logdet");
  if (z.dim(0) != logdet.dim(0)) {
    throw DimensionError("nll_loss: latent batch " + std::to_string(z.dim(0)) +
                         " does not match logdet batch " + std::to_string(logdet.dim(0)));
  }
  const std::size_t n = z.dim(0);
  const std::size_t d = z.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      if (!std::isfinite(static_cast<double>(z.ptr()[i * d + j]))) {
        throw DiagnosticError("nll_loss: non-finite latent in sample " + std::to_string(i));
      }
    }
    if (!std::isfinite(static_cast<double>(logdet.ptr()[i]))) {
      throw DiagnosticError("nll_loss: non-finite log-determinant in sample " +
                            std::to_string(i));
    }
  }
  Tensor<T> energy =
      grad::scale(tape, grad::sum_per_sample(tape, grad::mul(tape, z, z)), T(0.5));
  return grad::mean_all(tape, grad::sub(tape, energy, logdet));
}

// Reporting-only conversion: adds back the Gaussian normalizer and rescales
// from nats per sample to bits per latent dimension.
inline double bits_per_dim(double nll_nats, std::size_t dim) {
  if (dim == 0) throw DimensionError("bits_per_dim: dim must be >= 1");
  const double normalizer =
      0.5 * static_cast<double>(dim) * std::log(2.0 * 3.14159265358979323846);
  return (nll_nats + normalizer) / (static_cast<double>(dim) * std::log(2.0));
}

}  // namespace ctflow::train
