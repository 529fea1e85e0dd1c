#pragma once

#include <cstddef>
#include <string>
#include <utility>

#include "ctflow/core/error.hpp"
#include "ctflow/core/rng.hpp"
#include "ctflow/grad/ops.hpp"
#include "ctflow/grad/parameter.hpp"
#include "ctflow/grad/tape.hpp"
#include "ctflow/grad/tensor.hpp"
#include "ctflow/flow/subnet.hpp"

namespace ctflow::flow {

// Soft clamp for coupling scales: alpha * tanh(s / alpha). Keeps exp(s)
// bounded in (e^-alpha, e^alpha) without losing differentiability; the
// log-det uses the clamped value, so it stays exact.
template <typename T>
Tensor<T> clamp_scale(Tape<T>* tape, const Tensor<T>& s, T alpha) {
  return grad::scale(tape, grad::tanh_of(tape, grad::scale(tape, s, T(1) / alpha)), alpha);
}

// Affine coupling on the channel axis. Each half is transformed by scales and
// shifts predicted from the other half (the second half sees the already
// updated first half), with the conditioning features concatenated to the
// subnet input. One subnet per half emits scale and shift stacked along the
// channel axis. cond_channels == 0 builds the unconditional variant.
template <typename T>
class ConvCoupling {
 public:
  ConvCoupling() = default;

  ConvCoupling(ParameterStore<T>& store, const std::string& prefix, std::size_t channels,
               std::size_t cond_channels, std::size_t kernel, std::size_t w1, std::size_t w2,
               T alpha, Rng& rng)
      : channels_(channels),
        cond_channels_(cond_channels),
        c1_(channels / 2),
        alpha_(alpha) {
    if (channels < 2) throw ConfigError("coupling: needs at least 2 channels");
    const std::size_t c2 = channels - c1_;
    net1_ = ConvSubnet<T>(store, prefix + ".net1", c2 + cond_channels, w1, w2, 2 * c1_, kernel,
                          rng);
    net2_ = ConvSubnet<T>(store, prefix + ".net2", c1_ + cond_channels, w1, w2, 2 * c2, kernel,
                          rng);
  }

  std::pair<Tensor<T>, Tensor<T>> forward(Tape<T>* tape, const Tensor<T>& u,
                                          const Tensor<T>& cond) const {
    check_shapes(u, cond);
    const std::size_t c2 = channels_ - c1_;
    Tensor<T> u1 = grad::slice_axis1(tape, u, 0, c1_);
    Tensor<T> u2 = grad::slice_axis1(tape, u, c1_, channels_);

    Tensor<T> st1 = net1_.forward(tape, with_cond(tape, u2, cond));
    Tensor<T> sh1 = clamp_scale(tape, grad::slice_axis1(tape, st1, 0, c1_), alpha_);
    Tensor<T> t1 = grad::slice_axis1(tape, st1, c1_, 2 * c1_);
    Tensor<T> v1 = grad::add(tape, grad::mul(tape, u1, grad::exp_of(tape, sh1)), t1);

    Tensor<T> st2 = net2_.forward(tape, with_cond(tape, v1, cond));
    Tensor<T> sh2 = clamp_scale(tape, grad::slice_axis1(tape, st2, 0, c2), alpha_);
    Tensor<T> t2 = grad::slice_axis1(tape, st2, c2, 2 * c2);
    Tensor<T> v2 = grad::add(tape, grad::mul(tape, u2, grad::exp_of(tape, sh2)), t2);

    Tensor<T> v = grad::concat_axis1(tape, v1, v2);
    Tensor<T> logdet = grad::add(tape, grad::sum_per_sample(tape, sh1),
                                 grad::sum_per_sample(tape, sh2));
    return {v, logdet};
  }

  // Inverse in evaluation mode: the first half must be restored last because
  // the forward updates it first.
  Tensor<T> inverse(const Tensor<T>& v, const Tensor<T>& cond) const {
    check_shapes(v, cond);
    const std::size_t c2 = channels_ - c1_;
    Tensor<T> v1 = grad::slice_axis1<T>(nullptr, v, 0, c1_);
    Tensor<T> v2 = grad::slice_axis1<T>(nullptr, v, c1_, channels_);

    Tensor<T> st2 = net2_.forward(nullptr, with_cond(nullptr, v1, cond));
    Tensor<T> sh2 = clamp_scale<T>(nullptr, grad::slice_axis1<T>(nullptr, st2, 0, c2), alpha_);
    Tensor<T> t2 = grad::slice_axis1<T>(nullptr, st2, c2, 2 * c2);
    Tensor<T> u2 = grad::mul<T>(nullptr, grad::sub<T>(nullptr, v2, t2),
                                grad::exp_of<T>(nullptr, grad::scale<T>(nullptr, sh2, T(-1))));

    Tensor<T> st1 = net1_.forward(nullptr, with_cond(nullptr, u2, cond));
    Tensor<T> sh1 = clamp_scale<T>(nullptr, grad::slice_axis1<T>(nullptr, st1, 0, c1_), alpha_);
    Tensor<T> t1 = grad::slice_axis1<T>(nullptr, st1, c1_, 2 * c1_);
    Tensor<T> u1 = grad::mul<T>(nullptr, grad::sub<T>(nullptr, v1, t1),
                                grad::exp_of<T>(nullptr, grad::scale<T>(nullptr, sh1, T(-1))));

    return grad::concat_axis1<T>(nullptr, u1, u2);
  }

 private:
  Tensor<T> with_cond(Tape<T>* tape, const Tensor<T>& half, const Tensor<T>& cond) const {
    if (cond_channels_ == 0) return half;
    return grad::concat_axis1(tape, half, cond);
  }

  void check_shapes(const Tensor<T>& u, const Tensor<T>& cond) const {
    grad::require_rank(u, 4, "coupling input");
    if (u.dim(1) != channels_) throw DimensionError("coupling: channel mismatch");
    if (cond_channels_ == 0) return;
    grad::require_rank(cond, 4, "coupling condition");
    if (cond.dim(0) != u.dim(0) || cond.dim(1) != cond_channels_ || cond.dim(2) != u.dim(2) ||
        cond.dim(3) != u.dim(3)) {
      throw DimensionError("coupling: condition shape " + grad::shape_string(cond.shape) +
                           " does not match input " + grad::shape_string(u.shape));
    }
  }

  ConvSubnet<T> net1_, net2_;
  std::size_t channels_ = 0, cond_channels_ = 0, c1_ = 0;
  T alpha_ = T(0);
};

// Affine coupling on flattened vectors [N, D], conditioned on a feature
// vector [N, cond_dim].
template <typename T>
class DenseCoupling {
 public:
  DenseCoupling() = default;

  DenseCoupling(ParameterStore<T>& store, const std::string& prefix, std::size_t dim,
                std::size_t cond_dim, std::size_t width, T alpha, Rng& rng)
      : dim_(dim), cond_dim_(cond_dim), d1_(dim / 2), alpha_(alpha) {
    if (dim < 2) throw ConfigError("coupling: needs at least 2 features");
    const std::size_t d2 = dim - d1_;
    net1_ = DenseSubnet<T>(store, prefix + ".net1", d2 + cond_dim, width, 2 * d1_, rng);
    net2_ = DenseSubnet<T>(store, prefix + ".net2", d1_ + cond_dim, width, 2 * d2, rng);
  }

  std::pair<Tensor<T>, Tensor<T>> forward(Tape<T>* tape, const Tensor<T>& u,
                                          const Tensor<T>& cond) const {
    check_shapes(u, cond);
    const std::size_t d2 = dim_ - d1_;
    Tensor<T> u1 = grad::slice_axis1(tape, u, 0, d1_);
    Tensor<T> u2 = grad::slice_axis1(tape, u, d1_, dim_);

    Tensor<T> st1 = net1_.forward(tape, with_cond(tape, u2, cond));
    Tensor<T> sh1 = clamp_scale(tape, grad::slice_axis1(tape, st1, 0, d1_), alpha_);
    Tensor<T> t1 = grad::slice_axis1(tape, st1, d1_, 2 * d1_);
    Tensor<T> v1 = grad::add(tape, grad::mul(tape, u1, grad::exp_of(tape, sh1)), t1);

    Tensor<T> st2 = net2_.forward(tape, with_cond(tape, v1, cond));
    Tensor<T> sh2 = clamp_scale(tape, grad::slice_axis1(tape, st2, 0, d2), alpha_);
    Tensor<T> t2 = grad::slice_axis1(tape, st2, d2, 2 * d2);
    Tensor<T> v2 = grad::add(tape, grad::mul(tape, u2, grad::exp_of(tape, sh2)), t2);

    Tensor<T> v = grad::concat_axis1(tape, v1, v2);
    Tensor<T> logdet = grad::add(tape, grad::sum_per_sample(tape, sh1),
                                 grad::sum_per_sample(tape, sh2));
    return {v, logdet};
  }

  Tensor<T> inverse(const Tensor<T>& v, const Tensor<T>& cond) const {
    check_shapes(v, cond);
    const std::size_t d2 = dim_ - d1_;
    Tensor<T> v1 = grad::slice_axis1<T>(nullptr, v, 0, d1_);
    Tensor<T> v2 = grad::slice_axis1<T>(nullptr, v, d1_, dim_);

    Tensor<T> st2 = net2_.forward(nullptr, with_cond(nullptr, v1, cond));
    Tensor<T> sh2 = clamp_scale<T>(nullptr, grad::slice_axis1<T>(nullptr, st2, 0, d2), alpha_);
    Tensor<T> t2 = grad::slice_axis1<T>(nullptr, st2, d2, 2 * d2);
    Tensor<T> u2 = grad::mul<T>(nullptr, grad::sub<T>(nullptr, v2, t2),
                                grad::exp_of<T>(nullptr, grad::scale<T>(nullptr, sh2, T(-1))));

    Tensor<T> st1 = net1_.forward(nullptr, with_cond(nullptr, u2, cond));
    Tensor<T> sh1 = clamp_scale<T>(nullptr, grad::slice_axis1<T>(nullptr, st1, 0, d1_), alpha_);
    Tensor<T> t1 = grad::slice_axis1<T>(nullptr, st1, d1_, 2 * d1_);
    Tensor<T> u1 = grad::mul<T>(nullptr, grad::sub<T>(nullptr, v1, t1),
                                grad::exp_of<T>(nullptr, grad::scale<T>(nullptr, sh1, T(-1))));

    return grad::concat_axis1<T>(nullptr, u1, u2);
  }

 private:
  Tensor<T> with_cond(Tape<T>* tape, const Tensor<T>& half, const Tensor<T>& cond) const {
    if (cond_dim_ == 0) return half;
    return grad::concat_axis1(tape, half, cond);
  }

  void check_shapes(const Tensor<T>& u, const Tensor<T>& cond) const {
    grad::require_rank(u, 2, "coupling input");
    if (u.dim(1) != dim_) throw DimensionError("coupling: feature mismatch");
    if (cond_dim_ == 0) return;
    grad::require_rank(cond, 2, "coupling condition");
    if (cond.dim(0) != u.dim(0) || cond.dim(1) != cond_dim_) {
      throw DimensionError("coupling: condition shape " + grad::shape_string(cond.shape) +
                           " does not match input " + grad::shape_string(u.shape));
    }
  }

  DenseSubnet<T> net1_, net2_;
  std::size_t dim_ = 0, cond_dim_ = 0, d1_ = 0;
  T alpha_ = T(0);
};

}  // namespace ctflow::flow
