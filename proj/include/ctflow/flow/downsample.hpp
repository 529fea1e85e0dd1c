#pragma once

#include <cstddef>
#include <memory>
#include <vector>

#include "ctflow/core/error.hpp"
#include "ctflow/grad/ops.hpp"
#include "ctflow/grad/tape.hpp"
#include "ctflow/grad/tensor.hpp"

namespace ctflow::flow {

using grad::Tape;
using grad::Tensor;

namespace detail {

// Orthonormal 2x2 Haar analysis: rows of the 4x4 transform are +-1/2, so the
// matrix is orthogonal and the synthesis step is its transpose. Band order in
// the output is [LL all C, LH all C, HL all C, HH all C].
template <typename T>
void haar_forward_data(const Tensor<T>& x, Tensor<T>& out) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h / 2, ow = w / 2;
  const T half = T(0.5);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* src = x.ptr() + (s * c + ch) * h * w;
      for (std::size_t i = 0; i < oh; ++i) {
        for (std::size_t j = 0; j < ow; ++j) {
          const T a = src[(2 * i) * w + 2 * j];
          const T b = src[(2 * i) * w + 2 * j + 1];
          const T cc = src[(2 * i + 1) * w + 2 * j];
          const T d = src[(2 * i + 1) * w + 2 * j + 1];
          const std::size_t pix = i * ow + j;
          T* dst = out.ptr() + s * 4 * c * oh * ow;
          dst[(0 * c + ch) * oh * ow + pix] = half * (a + b + cc + d);
          dst[(1 * c + ch) * oh * ow + pix] = half * (a - b + cc - d);
          dst[(2 * c + ch) * oh * ow + pix] = half * (a + b - cc - d);
          dst[(3 * c + ch) * oh * ow + pix] = half * (a - b - cc + d);
        }
      }
    }
  }
}

template <typename T>
void haar_inverse_data(const Tensor<T>& y, Tensor<T>& out) {
  const std::size_t n = y.dim(0), c4 = y.dim(1), oh = y.dim(2), ow = y.dim(3);
  const std::size_t c = c4 / 4, h = oh * 2, w = ow * 2;
  const T half = T(0.5);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* src = y.ptr() + s * c4 * oh * ow;
      T* dst = out.ptr() + (s * c + ch) * h * w;
      for (std::size_t i = 0; i < oh; ++i) {
        for (std::size_t j = 0; j < ow; ++j) {
          const std::size_t pix = i * ow + j;
          const T ll = src[(0 * c + ch) * oh * ow + pix];
          const T lh = src[(1 * c + ch) * oh * ow + pix];
          const T hl = src[(2 * c + ch) * oh * ow + pix];
          const T hh = src[(3 * c + ch) * oh * ow + pix];
          dst[(2 * i) * w + 2 * j] = half * (ll + lh + hl + hh);
          dst[(2 * i) * w + 2 * j + 1] = half * (ll - lh + hl - hh);
          dst[(2 * i + 1) * w + 2 * j] = half * (ll + lh - hl - hh);
          dst[(2 * i + 1) * w + 2 * j + 1] = half * (ll - lh - hl + hh);
        }
      }
    }
  }
}

// Pixel shuffle: each 2x2 spatial block of channel c becomes output channels
// 4c..4c+3 in row-major block order (top-left, top-right, bottom-left,
// bottom-right).
template <typename T>
void irevnet_forward_data(const Tensor<T>& x, Tensor<T>& out) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h / 2, ow = w / 2;
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* src = x.ptr() + (s * c + ch) * h * w;
      T* dst = out.ptr() + (s * c + ch) * 4 * oh * ow;
      for (std::size_t i = 0; i < oh; ++i) {
        for (std::size_t j = 0; j < ow; ++j) {
          const std::size_t pix = i * ow + j;
          dst[0 * oh * ow + pix] = src[(2 * i) * w + 2 * j];
          dst[1 * oh * ow + pix] = src[(2 * i) * w + 2 * j + 1];
          dst[2 * oh * ow + pix] = src[(2 * i + 1) * w + 2 * j];
          dst[3 * oh * ow + pix] = src[(2 * i + 1) * w + 2 * j + 1];
        }
      }
    }
  }
}

template <typename T>
void irevnet_inverse_data(const Tensor<T>& y, Tensor<T>& out) {
  const std::size_t n = y.dim(0), c4 = y.dim(1), oh = y.dim(2), ow = y.dim(3);
  const std::size_t c = c4 / 4, h = oh * 2, w = ow * 2;
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* src = y.ptr() + (s * c + ch) * 4 * oh * ow;
      T* dst = out.ptr() + (s * c + ch) * h * w;
      for (std::size_t i = 0; i < oh; ++i) {
        for (std::size_t j = 0; j < ow; ++j) {
          const std::size_t pix = i * ow + j;
          dst[(2 * i) * w + 2 * j] = src[0 * oh * ow + pix];
          dst[(2 * i) * w + 2 * j + 1] = src[1 * oh * ow + pix];
          dst[(2 * i + 1) * w + 2 * j] = src[2 * oh * ow + pix];
          dst[(2 * i + 1) * w + 2 * j + 1] = src[3 * oh * ow + pix];
        }
      }
    }
  }
}

template <typename T>
void require_even_spatial(const Tensor<T>& x, const char* name) {
  grad::require_rank(x, 4, name);
  if (x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0) {
    throw DimensionError(std::string(name) + ": spatial size must be even, got " +
                         grad::shape_string(x.shape));
  }
}

template <typename T>
void require_quad_channels(const Tensor<T>& y, const char* name) {
  grad::require_rank(y, 4, name);
  if (y.dim(1) % 4 != 0) {
    throw DimensionError(std::string(name) + ": channels must be divisible by 4, got " +
                         grad::shape_string(y.shape));
  }
}

}  // namespace detail

// [N,C,H,W] -> [N,4C,H/2,W/2], orthonormal Haar bands. The map is orthogonal,
// so log-det is 0 and the gradient is the inverse transform of the upstream
// gradient.
template <typename T>
Tensor<T> haar_downsample(Tape<T>* tape, const Tensor<T>& x) {
  detail::require_even_spatial(x, "haar_downsample");
  Tensor<T> out = Tensor<T>::zeros({x.dim(0), 4 * x.dim(1), x.dim(2) / 2, x.dim(3) / 2});
  detail::haar_forward_data(x, out);
  if (tape && x.node >= 0) {
    out.node = tape->record(out.numel(), {x.node}, [x, shape = out.shape](Tape<T>& tp, int self) {
      Tensor<T> g;
      g.shape = shape;
      g.data = std::make_shared<std::vector<T>>(tp.grad(self));
      Tensor<T> dx = Tensor<T>::zeros(x.shape);
      detail::haar_inverse_data(g, dx);
      grad::accumulate(tp, x.node, *dx.data);
    });
  }
  return out;
}

// [N,4C,H,W] -> [N,C,2H,2W], transpose of haar_downsample.
template <typename T>
Tensor<T> haar_upsample(Tape<T>* tape, const Tensor<T>& y) {
  detail::require_quad_channels(y, "haar_upsample");
  Tensor<T> out = Tensor<T>::zeros({y.dim(0), y.dim(1) / 4, y.dim(2) * 2, y.dim(3) * 2});
  detail::haar_inverse_data(y, out);
  if (tape && y.node >= 0) {
    out.node = tape->record(out.numel(), {y.node}, [y, shape = out.shape](Tape<T>& tp, int self) {
      Tensor<T> g;
      g.shape = shape;
      g.data = std::make_shared<std::vector<T>>(tp.grad(self));
      Tensor<T> dy = Tensor<T>::zeros(y.shape);
      detail::haar_forward_data(g, dy);
      grad::accumulate(tp, y.node, *dy.data);
    });
  }
  return out;
}

// [N,C,H,W] -> [N,4C,H/2,W/2] pixel shuffle; a pure permutation of entries.
template <typename T>
Tensor<T> irevnet_downsample(Tape<T>* tape, const Tensor<T>& x) {
  detail::require_even_spatial(x, "irevnet_downsample");
  Tensor<T> out = Tensor<T>::zeros({x.dim(0), 4 * x.dim(1), x.dim(2) / 2, x.dim(3) / 2});
  detail::irevnet_forward_data(x, out);
  if (tape && x.node >= 0) {
    out.node = tape->record(out.numel(), {x.node}, [x, shape = out.shape](Tape<T>& tp, int self) {
      Tensor<T> g;
      g.shape = shape;
      g.data = std::make_shared<std::vector<T>>(tp.grad(self));
      Tensor<T> dx = Tensor<T>::zeros(x.shape);
      detail::irevnet_inverse_data(g, dx);
      grad::accumulate(tp, x.node, *dx.data);
    });
  }
  return out;
}

template <typename T>
Tensor<T> irevnet_upsample(Tape<T>* tape, const Tensor<T>& y) {
  detail::require_quad_channels(y, "irevnet_upsample");
  Tensor<T> out = Tensor<T>::zeros({y.dim(0), y.dim(1) / 4, y.dim(2) * 2, y.dim(3) * 2});
  detail::irevnet_inverse_data(y, out);
  if (tape && y.node >= 0) {
    out.node = tape->record(out.numel(), {y.node}, [y, shape = out.shape](Tape<T>& tp, int self) {
      Tensor<T> g;
      g.shape = shape;
      g.data = std::make_shared<std::vector<T>>(tp.grad(self));
      Tensor<T> dy = Tensor<T>::zeros(y.shape);
      detail::irevnet_forward_data(g, dy);
      grad::accumulate(tp, y.node, *dy.data);
    });
  }
  return out;
}

// Gather along axis 1 of [N, D]: out[:, j] = x[:, perm[j]]. Used for the fixed
// seed-derived permutations in the dense section; log-det 0.
template <typename T>
Tensor<T> permute_axis1(Tape<T>* tape, const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  grad::require_rank(x, 2, "permute_axis1");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (perm.size() != d) throw DimensionError("permute_axis1: permutation size mismatch");
  Tensor<T> out = Tensor<T>::zeros(x.shape);
  for (std::size_t s = 0; s < n; ++s) {
    const T* src = x.ptr() + s * d;
    T* dst = out.ptr() + s * d;
    for (std::size_t j = 0; j < d; ++j) dst[j] = src[perm[j]];
  }
  if (tape && x.node >= 0) {
    out.node = tape->record(out.numel(), {x.node}, [x, perm, n, d](Tape<T>& tp, int self) {
      const std::vector<T>& g = tp.grad(self);
      auto& dx = tp.grad(x.node);
      for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t j = 0; j < d; ++j) dx[s * d + perm[j]] += g[s * d + j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> unpermute_axis1(Tape<T>* tape, const Tensor<T>& y, const std::vector<std::size_t>& perm) {
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t j = 0; j < perm.size(); ++j) inv[perm[j]] = j;
  return permute_axis1(tape, y, inv);
}

}  // namespace ctflow::flow
