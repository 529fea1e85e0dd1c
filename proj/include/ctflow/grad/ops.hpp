#pragma once

#include <cblas.h>

#include <cmath>
#include <cstddef>
#include <memory>
#include <type_traits>
#include <vector>

#include "ctflow/grad/tape.hpp"
#include "ctflow/grad/tensor.hpp"

namespace ctflow::grad {

// When enabled, every primitive validates its output for NaN/Inf. Off by
// default; the training loop enables it for early-instability hunts.
inline bool& debug_checks() {
  static bool on = false;
  return on;
}

namespace detail {

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
  if (!debug_checks()) return;
  for (const T v : *t.data) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw DiagnosticError(std::string(op) + ": non-finite value produced");
    }
  }
}

// The three accumulating products below back every conv and dense layer.
// float/double go through BLAS; the loops remain for any other scalar.

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, std::size_t m_dim, std::size_t k_dim,
              std::size_t n_dim) {
  if (m_dim == 0 || k_dim == 0 || n_dim == 0) return;
  if constexpr (std::is_same_v<T, float>) {
    cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(m_dim),
                static_cast<int>(n_dim), static_cast<int>(k_dim), 1.0f, a,
                static_cast<int>(k_dim), b, static_cast<int>(n_dim), 1.0f, c,
                static_cast<int>(n_dim));
  } else if constexpr (std::is_same_v<T, double>) {
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(m_dim),
                static_cast<int>(n_dim), static_cast<int>(k_dim), 1.0, a,
                static_cast<int>(k_dim), b, static_cast<int>(n_dim), 1.0, c,
                static_cast<int>(n_dim));
  } else {
    for (std::size_t m = 0; m < m_dim; ++m) {
      T* crow = c + m * n_dim;
      for (std::size_t k = 0; k < k_dim; ++k) {
        const T av = a[m * k_dim + k];
        const T* brow = b + k * n_dim;
        for (std::size_t n = 0; n < n_dim; ++n) crow[n] += av * brow[n];
      }
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T
template <typename T>
void gemm_abt(const T* a, const T* b, T* c, std::size_t m_dim, std::size_t k_dim,
              std::size_t n_dim) {
  if (m_dim == 0 || k_dim == 0 || n_dim == 0) return;
  if constexpr (std::is_same_v<T, float>) {
    cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(m_dim),
                static_cast<int>(n_dim), static_cast<int>(k_dim), 1.0f, a,
                static_cast<int>(k_dim), b, static_cast<int>(k_dim), 1.0f, c,
                static_cast<int>(n_dim));
  } else if constexpr (std::is_same_v<T, double>) {
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(m_dim),
                static_cast<int>(n_dim), static_cast<int>(k_dim), 1.0, a,
                static_cast<int>(k_dim), b, static_cast<int>(k_dim), 1.0, c,
                static_cast<int>(n_dim));
  } else {
    for (std::size_t m = 0; m < m_dim; ++m) {
      const T* arow = a + m * k_dim;
      for (std::size_t n = 0; n < n_dim; ++n) {
        const T* brow = b + n * k_dim;
        T acc = T(0);
        for (std::size_t k = 0; k < k_dim; ++k) acc += arow[k] * brow[k];
        c[m * n_dim + n] += acc;
      }
    }
  }
}

// C[M,N] += A[K,M]^T * B[K,N]
template <typename T>
void gemm_atb(const T* a, const T* b, T* c, std::size_t m_dim, std::size_t k_dim,
              std::size_t n_dim) {
  if (m_dim == 0 || k_dim == 0 || n_dim == 0) return;
  if constexpr (std::is_same_v<T, float>) {
    cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(m_dim),
                static_cast<int>(n_dim), static_cast<int>(k_dim), 1.0f, a,
                static_cast<int>(m_dim), b, static_cast<int>(n_dim), 1.0f, c,
                static_cast<int>(n_dim));
  } else if constexpr (std::is_same_v<T, double>) {
    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(m_dim),
                static_cast<int>(n_dim), static_cast<int>(k_dim), 1.0, a,
                static_cast<int>(m_dim), b, static_cast<int>(n_dim), 1.0, c,
                static_cast<int>(n_dim));
  } else {
    for (std::size_t k = 0; k < k_dim; ++k) {
      const T* arow = a + k * m_dim;
      const T* brow = b + k * n_dim;
      for (std::size_t m = 0; m < m_dim; ++m) {
        const T av = arow[m];
        T* crow = c + m * n_dim;
        for (std::size_t n = 0; n < n_dim; ++n) crow[n] += av * brow[n];
      }
    }
  }
}

template <typename T>
void im2col(const T* x, std::size_t channels, std::size_t h, std::size_t w, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow, T* cols) {
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        T* row = cols + ((c * k + ki) * k + kj) * (oh * ow);
        for (std::size_t i = 0; i < oh; ++i) {
          const std::ptrdiff_t ih =
              static_cast<std::ptrdiff_t>(i * stride + ki) - static_cast<std::ptrdiff_t>(pad);
          const bool in_h = ih >= 0 && ih < static_cast<std::ptrdiff_t>(h);
          for (std::size_t j = 0; j < ow; ++j) {
            const std::ptrdiff_t iw =
                static_cast<std::ptrdiff_t>(j * stride + kj) - static_cast<std::ptrdiff_t>(pad);
            const bool in_w = iw >= 0 && iw < static_cast<std::ptrdiff_t>(w);
            row[i * ow + j] = (in_h && in_w)
                                  ? x[(c * h + static_cast<std::size_t>(ih)) * w +
                                      static_cast<std::size_t>(iw)]
                                  : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_acc(const T* cols, std::size_t channels, std::size_t h, std::size_t w, std::size_t k,
                std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow, T* x) {
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        const T* row = cols + ((c * k + ki) * k + kj) * (oh * ow);
        for (std::size_t i = 0; i < oh; ++i) {
          const std::ptrdiff_t ih =
              static_cast<std::ptrdiff_t>(i * stride + ki) - static_cast<std::ptrdiff_t>(pad);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t j = 0; j < ow; ++j) {
            const std::ptrdiff_t iw =
                static_cast<std::ptrdiff_t>(j * stride + kj) - static_cast<std::ptrdiff_t>(pad);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(w)) continue;
            x[(c * h + static_cast<std::size_t>(ih)) * w + static_cast<std::size_t>(iw)] +=
                row[i * ow + j];
          }
        }
      }
    }
  }
}

inline std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride,
                                 std::size_t pad) {
  if (in + 2 * pad < k) throw DimensionError("conv2d: kernel larger than padded input");
  return (in + 2 * pad - k) / stride + 1;
}

}  // namespace detail

// Cross-correlation over [N,C,H,W] with weight [Co,C,k,k] and bias [Co].
// Output size uses floor semantics, matching the stride arithmetic of the
// conditioning network at every scale.
template <typename T>
Tensor<T> conv2d(Tape<T>* tape, const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias, std::size_t stride, std::size_t pad) {
  require_rank(input, 4, "conv2d input");
  require_rank(weight, 4, "conv2d weight");
  require_rank(bias, 1, "conv2d bias");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t co = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != c) throw DimensionError("conv2d: channel mismatch");
  if (weight.dim(3) != k) throw DimensionError("conv2d: kernel must be square");
  if (bias.dim(0) != co) throw DimensionError("conv2d: bias size mismatch");
  if (stride < 1) throw DimensionError("conv2d: stride must be >= 1");
  const std::size_t oh = detail::conv_out_size(h, k, stride, pad);
  const std::size_t ow = detail::conv_out_size(w, k, stride, pad);
  const std::size_t ckk = c * k * k, p = oh * ow;

  Tensor<T> out = Tensor<T>::zeros({n, co, oh, ow});
  std::vector<T> cols(ckk * p);
  for (std::size_t s = 0; s < n; ++s) {
    detail::im2col(input.ptr() + s * c * h * w, c, h, w, k, stride, pad, oh, ow, cols.data());
    T* o = out.ptr() + s * co * p;
    for (std::size_t f = 0; f < co; ++f) {
      const T b = bias.ptr()[f];
      for (std::size_t i = 0; i < p; ++i) o[f * p + i] = b;
    }
    detail::gemm_acc(weight.ptr(), cols.data(), o, co, ckk, p);
  }
  detail::check_finite(out, "conv2d");

  if (tape && (input.node >= 0 || weight.node >= 0 || bias.node >= 0)) {
    out.node = tape->record(
        out.numel(), {input.node, weight.node, bias.node},
        [input, weight, bias, stride, pad, n, c, h, w, co, k, oh, ow, ckk,
         p](Tape<T>& tp, int self) {
          const std::vector<T>& g = tp.grad(self);
          std::vector<T> cols(ckk * p);
          std::vector<T> dcols(ckk * p);
          for (std::size_t s = 0; s < n; ++s) {
            const T* gs = g.data() + s * co * p;
            if (weight.node >= 0 || input.node >= 0) {
              detail::im2col(input.ptr() + s * c * h * w, c, h, w, k, stride, pad, oh, ow,
                             cols.data());
            }
            if (weight.node >= 0) {
              detail::gemm_abt(gs, cols.data(), tp.grad(weight.node).data(), co, p, ckk);
            }
            if (input.node >= 0) {
              std::fill(dcols.begin(), dcols.end(), T(0));
              detail::gemm_atb(weight.ptr(), gs, dcols.data(), ckk, co, p);
              detail::col2im_acc(dcols.data(), c, h, w, k, stride, pad, oh, ow,
                                 tp.grad(input.node).data() + s * c * h * w);
            }
            if (bias.node >= 0) {
              auto& db = tp.grad(bias.node);
              for (std::size_t f = 0; f < co; ++f) {
                T acc = T(0);
                for (std::size_t i = 0; i < p; ++i) acc += gs[f * p + i];
                db[f] += acc;
              }
            }
          }
        });
  }
  return out;
}

// Affine map out = input * weight^T + bias over [N,F].
template <typename T>
Tensor<T> dense(Tape<T>* tape, const Tensor<T>& input, const Tensor<T>& weight,
                const Tensor<T>& bias) {
  require_rank(input, 2, "dense input");
  require_rank(weight, 2, "dense weight");
  require_rank(bias, 1, "dense bias");
  const std::size_t n = input.dim(0), f = input.dim(1), fo = weight.dim(0);
  if (weight.dim(1) != f) throw DimensionError("dense: feature mismatch");
  if (bias.dim(0) != fo) throw DimensionError("dense: bias size mismatch");

  Tensor<T> out = Tensor<T>::zeros({n, fo});
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t j = 0; j < fo; ++j) out.ptr()[s * fo + j] = bias.ptr()[j];
  }
  detail::gemm_abt(input.ptr(), weight.ptr(), out.ptr(), n, f, fo);
  detail::check_finite(out, "dense");

  if (tape && (input.node >= 0 || weight.node >= 0 || bias.node >= 0)) {
    out.node = tape->record(out.numel(), {input.node, weight.node, bias.node},
                            [input, weight, bias, n, f, fo](Tape<T>& tp, int self) {
                              const std::vector<T>& g = tp.grad(self);
                              if (input.node >= 0) {
                                detail::gemm_acc(g.data(), weight.ptr(),
                                                 tp.grad(input.node).data(), n, fo, f);
                              }
                              if (weight.node >= 0) {
                                detail::gemm_atb(g.data(), input.ptr(),
                                                 tp.grad(weight.node).data(), fo, n, f);
                              }
                              if (bias.node >= 0) {
                                auto& db = tp.grad(bias.node);
                                for (std::size_t s = 0; s < n; ++s) {
                                  for (std::size_t j = 0; j < fo; ++j) db[j] += g[s * fo + j];
                                }
                              }
                            });
  }
  return out;
}

template <typename T>
Tensor<T> leaky_relu(Tape<T>* tape, const Tensor<T>& input, T slope) {
  Tensor<T> out = Tensor<T>::zeros(input.shape);
  for (std::size_t i = 0; i < input.numel(); ++i) {
    const T x = input.ptr()[i];
    out.ptr()[i] = x >= T(0) ? x : slope * x;
  }
  detail::check_finite(out, "leaky_relu");
  if (tape && input.node >= 0) {
    out.node = tape->record(out.numel(), {input.node}, [input, slope](Tape<T>& tp, int self) {
      const std::vector<T>& g = tp.grad(self);
      auto& dx = tp.grad(input.node);
      for (std::size_t i = 0; i < g.size(); ++i) {
        dx[i] += input.ptr()[i] >= T(0) ? g[i] : slope * g[i];
      }
    });
  }
  return out;
}

template <typename T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;

  explicit BatchNormState(std::size_t channels = 0)
      : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

// Per-channel normalization over [N,C,H,W]. Train mode uses batch statistics
// (biased variance, which is also what the running buffers track) and updates
// the running stats in place; eval mode reads them. Gradients flow to input,
// scale, and shift; running stats are not differentiated through.
template <typename T>
Tensor<T> batch_norm(Tape<T>* tape, const Tensor<T>& input, const Tensor<T>& scale,
                     const Tensor<T>& shift, BatchNormState<T>& state, bool train,
                     T momentum = T(0.1), T eps = T(1e-5)) {
  require_rank(input, 4, "batch_norm input");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (scale.numel() != c || shift.numel() != c || state.running_mean.size() != c ||
      state.running_var.size() != c) {
    throw DimensionError("batch_norm: channel mismatch");
  }
  const std::size_t m = n * h * w;
  if (train && m < 2) throw DimensionError("batch_norm: batch too small for training statistics");

  std::vector<T> mean(c), invstd(c);
  if (train) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double acc = 0.0;
      for (std::size_t s = 0; s < n; ++s) {
        const T* x = input.ptr() + (s * c + ch) * h * w;
        for (std::size_t i = 0; i < h * w; ++i) acc += static_cast<double>(x[i]);
      }
      const double mu = acc / static_cast<double>(m);
      double var = 0.0;
      for (std::size_t s = 0; s < n; ++s) {
        const T* x = input.ptr() + (s * c + ch) * h * w;
        for (std::size_t i = 0; i < h * w; ++i) {
          const double d = static_cast<double>(x[i]) - mu;
          var += d * d;
        }
      }
      var /= static_cast<double>(m);
      mean[ch] = static_cast<T>(mu);
      invstd[ch] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      state.running_mean[ch] =
          (T(1) - momentum) * state.running_mean[ch] + momentum * static_cast<T>(mu);
      state.running_var[ch] =
          (T(1) - momentum) * state.running_var[ch] + momentum * static_cast<T>(var);
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = state.running_mean[ch];
      invstd[ch] = static_cast<T>(
          1.0 / std::sqrt(static_cast<double>(state.running_var[ch]) + static_cast<double>(eps)));
    }
  }

  auto xhat = std::make_shared<std::vector<T>>(input.numel());
  Tensor<T> out = Tensor<T>::zeros(input.shape);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* x = input.ptr() + (s * c + ch) * h * w;
      T* xh = xhat->data() + (s * c + ch) * h * w;
      T* o = out.ptr() + (s * c + ch) * h * w;
      const T mu = mean[ch], is = invstd[ch], ga = scale.ptr()[ch], be = shift.ptr()[ch];
      for (std::size_t i = 0; i < h * w; ++i) {
        xh[i] = (x[i] - mu) * is;
        o[i] = ga * xh[i] + be;
      }
    }
  }
  detail::check_finite(out, "batch_norm");

  if (tape && (input.node >= 0 || scale.node >= 0 || shift.node >= 0)) {
    auto invstd_saved = std::make_shared<std::vector<T>>(invstd);
    out.node = tape->record(
        out.numel(), {input.node, scale.node, shift.node},
        [input, scale, shift, xhat, invstd_saved, train, n, c, h, w, m](Tape<T>& tp, int self) {
          const std::vector<T>& g = tp.grad(self);
          const std::size_t hw = h * w;
          for (std::size_t ch = 0; ch < c; ++ch) {
            double sum_g = 0.0, sum_gx = 0.0;
            for (std::size_t s = 0; s < n; ++s) {
              const T* gs = g.data() + (s * c + ch) * hw;
              const T* xh = xhat->data() + (s * c + ch) * hw;
              for (std::size_t i = 0; i < hw; ++i) {
                sum_g += static_cast<double>(gs[i]);
                sum_gx += static_cast<double>(gs[i]) * static_cast<double>(xh[i]);
              }
            }
            if (shift.node >= 0) tp.grad(shift.node)[ch] += static_cast<T>(sum_g);
            if (scale.node >= 0) tp.grad(scale.node)[ch] += static_cast<T>(sum_gx);
            if (input.node < 0) continue;
            const T ga = scale.ptr()[ch], is = (*invstd_saved)[ch];
            auto& dx = tp.grad(input.node);
            if (train) {
              const T mm = static_cast<T>(m);
              for (std::size_t s = 0; s < n; ++s) {
                const T* gs = g.data() + (s * c + ch) * hw;
                const T* xh = xhat->data() + (s * c + ch) * hw;
                T* d = dx.data() + (s * c + ch) * hw;
                for (std::size_t i = 0; i < hw; ++i) {
                  d[i] += ga * is *
                          (gs[i] - static_cast<T>(sum_g) / mm -
                           xh[i] * static_cast<T>(sum_gx) / mm);
                }
              }
            } else {
              for (std::size_t s = 0; s < n; ++s) {
                const T* gs = g.data() + (s * c + ch) * hw;
                T* d = dx.data() + (s * c + ch) * hw;
                for (std::size_t i = 0; i < hw; ++i) d[i] += ga * is * gs[i];
              }
            }
          }
        });
  }
  return out;
}

template <typename T>
Tensor<T> avg_pool_global(Tape<T>* tape, const Tensor<T>& input) {
  require_rank(input, 4, "avg_pool_global input");
  const std::size_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  Tensor<T> out = Tensor<T>::zeros({n, c});
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* x = input.ptr() + (s * c + ch) * hw;
      T acc = T(0);
      for (std::size_t i = 0; i < hw; ++i) acc += x[i];
      out.ptr()[s * c + ch] = acc / static_cast<T>(hw);
    }
  }
  detail::check_finite(out, "avg_pool_global");
  if (tape && input.node >= 0) {
    out.node = tape->record(out.numel(), {input.node}, [input, n, c, hw](Tape<T>& tp, int self) {
      const std::vector<T>& g = tp.grad(self);
      auto& dx = tp.grad(input.node);
      for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T gv = g[s * c + ch] / static_cast<T>(hw);
          T* d = dx.data() + (s * c + ch) * hw;
          for (std::size_t i = 0; i < hw; ++i) d[i] += gv;
        }
      }
    });
  }
  return out;
}

namespace detail {

template <typename T, typename Fwd, typename Bwd>
Tensor<T> binary_elementwise(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd,
                             Bwd bwd, const char* name) {
  if (!same_shape(a, b)) {
    throw DimensionError(std::string(name) + ": shape mismatch " + shape_string(a.shape) +
                         " vs " + shape_string(b.shape));
  }
  Tensor<T> out = Tensor<T>::zeros(a.shape);
  for (std::size_t i = 0; i < a.numel(); ++i) out.ptr()[i] = fwd(a.ptr()[i], b.ptr()[i]);
  check_finite(out, name);
  if (tape && (a.node >= 0 || b.node >= 0)) {
    out.node = tape->record(out.numel(), {a.node, b.node}, [a, b, bwd](Tape<T>& tp, int self) {
      const std::vector<T>& g = tp.grad(self);
      for (std::size_t i = 0; i < g.size(); ++i) {
        T da = T(0), db = T(0);
        bwd(a.ptr()[i], b.ptr()[i], g[i], da, db);
        if (a.node >= 0) tp.grad(a.node)[i] += da;
        if (b.node >= 0) tp.grad(b.node)[i] += db;
      }
    });
  }
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_elementwise(
      tape, a, b, [](T x, T y) { return x + y; },
      [](T, T, T g, T& da, T& db) {
        da = g;
        db = g;
      },
      "add");
}

template <typename T>
Tensor<T> sub(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_elementwise(
      tape, a, b, [](T x, T y) { return x - y; },
      [](T, T, T g, T& da, T& db) {
        da = g;
        db = -g;
      },
      "sub");
}

template <typename T>
Tensor<T> mul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_elementwise(
      tape, a, b, [](T x, T y) { return x * y; },
      [](T x, T y, T g, T& da, T& db) {
        da = g * y;
        db = g * x;
      },
      "mul");
}

template <typename T>
Tensor<T> exp_of(Tape<T>* tape, const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::zeros(a.shape);
  for (std::size_t i = 0; i < a.numel(); ++i) out.ptr()[i] = std::exp(a.ptr()[i]);
  detail::check_finite(out, "exp");
  if (tape && a.node >= 0) {
    out.node = tape->record(out.numel(), {a.node}, [a, out](Tape<T>& tp, int self) {
      const std::vector<T>& g = tp.grad(self);
      auto& dx = tp.grad(a.node);
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * out.ptr()[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> tanh_of(Tape<T>* tape, const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::zeros(a.shape);
  for (std::size_t i = 0; i < a.numel(); ++i) out.ptr()[i] = std::tanh(a.ptr()[i]);
  detail::check_finite(out, "tanh");
  if (tape && a.node >= 0) {
    out.node = tape->record(out.numel(), {a.node}, [a, out](Tape<T>& tp, int self) {
      const std::vector<T>& g = tp.grad(self);
      auto& dx = tp.grad(a.node);
      for (std::size_t i = 0; i < g.size(); ++i) {
        dx[i] += g[i] * (T(1) - out.ptr()[i] * out.ptr()[i]);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(Tape<T>* tape, const Tensor<T>& a, T factor) {
  Tensor<T> out = Tensor<T>::zeros(a.shape);
  for (std::size_t i = 0; i < a.numel(); ++i) out.ptr()[i] = factor * a.ptr()[i];
  detail::check_finite(out, "scale");
  if (tape && a.node >= 0) {
    out.node = tape->record(out.numel(), {a.node}, [a, factor](Tape<T>& tp, int self) {
      const std::vector<T>& g = tp.grad(self);
      auto& dx = tp.grad(a.node);
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += factor * g[i];
    });
  }
  return out;
}

// Sum over every axis but the first: [N, ...] -> [N].
template <typename T>
Tensor<T> sum_per_sample(Tape<T>* tape, const Tensor<T>& a) {
  if (a.shape.empty()) throw DimensionError("sum_per_sample: rank must be >= 1");
  const std::size_t n = a.dim(0);
  const std::size_t inner = a.numel() / n;
  Tensor<T> out = Tensor<T>::zeros({n});
  for (std::size_t s = 0; s < n; ++s) {
    T acc = T(0);
    const T* x = a.ptr() + s * inner;
    for (std::size_t i = 0; i < inner; ++i) acc += x[i];
    out.ptr()[s] = acc;
  }
  detail::check_finite(out, "sum_per_sample");
  if (tape && a.node >= 0) {
    out.node = tape->record(out.numel(), {a.node}, [a, n, inner](Tape<T>& tp, int self) {
      const std::vector<T>& g = tp.grad(self);
      auto& dx = tp.grad(a.node);
      for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t i = 0; i < inner; ++i) dx[s * inner + i] += g[s];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean_all(Tape<T>* tape, const Tensor<T>& a) {
  const std::size_t n = a.numel();
  if (n == 0) throw DimensionError("mean_all: empty tensor");
  Tensor<T> out = Tensor<T>::zeros({1});
  T acc = T(0);
  for (std::size_t i = 0; i < n; ++i) acc += a.ptr()[i];
  out.ptr()[0] = acc / static_cast<T>(n);
  detail::check_finite(out, "mean_all");
  if (tape && a.node >= 0) {
    out.node = tape->record(out.numel(), {a.node}, [a, n](Tape<T>& tp, int self) {
      const T g = tp.grad(self)[0] / static_cast<T>(n);
      auto& dx = tp.grad(a.node);
      for (std::size_t i = 0; i < n; ++i) dx[i] += g;
    });
  }
  return out;
}

// Concatenation along axis 1; works for [N,F] and [N,C,H,W] alike.
template <typename T>
Tensor<T> concat_axis1(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape.size() < 2 || a.shape.size() != b.shape.size()) {
    throw DimensionError("concat_axis1: rank mismatch");
  }
  for (std::size_t d = 0; d < a.shape.size(); ++d) {
    if (d != 1 && a.shape[d] != b.shape[d]) {
      throw DimensionError("concat_axis1: shapes differ outside axis 1");
    }
  }
  const std::size_t n = a.dim(0);
  std::size_t inner = 1;
  for (std::size_t d = 2; d < a.shape.size(); ++d) inner *= a.shape[d];
  const std::size_t ca = a.dim(1), cb = b.dim(1);
  std::vector<std::size_t> shape = a.shape;
  shape[1] = ca + cb;
  Tensor<T> out = Tensor<T>::zeros(shape);
  for (std::size_t s = 0; s < n; ++s) {
    T* o = out.ptr() + s * (ca + cb) * inner;
    std::copy(a.ptr() + s * ca * inner, a.ptr() + (s + 1) * ca * inner, o);
    std::copy(b.ptr() + s * cb * inner, b.ptr() + (s + 1) * cb * inner, o + ca * inner);
  }
  if (tape && (a.node >= 0 || b.node >= 0)) {
    out.node =
        tape->record(out.numel(), {a.node, b.node}, [a, b, n, ca, cb, inner](Tape<T>& tp, int self) {
          const std::vector<T>& g = tp.grad(self);
          for (std::size_t s = 0; s < n; ++s) {
            const T* gs = g.data() + s * (ca + cb) * inner;
            if (a.node >= 0) {
              T* da = tp.grad(a.node).data() + s * ca * inner;
              for (std::size_t i = 0; i < ca * inner; ++i) da[i] += gs[i];
            }
            if (b.node >= 0) {
              T* db = tp.grad(b.node).data() + s * cb * inner;
              for (std::size_t i = 0; i < cb * inner; ++i) db[i] += gs[ca * inner + i];
            }
          }
        });
  }
  return out;
}

// Slice [from, to) along axis 1.
template <typename T>
Tensor<T> slice_axis1(Tape<T>* tape, const Tensor<T>& a, std::size_t from, std::size_t to) {
  if (a.shape.size() < 2) throw DimensionError("slice_axis1: rank must be >= 2");
  if (from >= to || to > a.dim(1)) throw DimensionError("slice_axis1: bad range");
  const std::size_t n = a.dim(0), c = a.dim(1), cs = to - from;
  std::size_t inner = 1;
  for (std::size_t d = 2; d < a.shape.size(); ++d) inner *= a.shape[d];
  std::vector<std::size_t> shape = a.shape;
  shape[1] = cs;
  Tensor<T> out = Tensor<T>::zeros(shape);
  for (std::size_t s = 0; s < n; ++s) {
    std::copy(a.ptr() + (s * c + from) * inner, a.ptr() + (s * c + to) * inner,
              out.ptr() + s * cs * inner);
  }
  if (tape && a.node >= 0) {
    out.node =
        tape->record(out.numel(), {a.node}, [a, n, c, cs, from, inner](Tape<T>& tp, int self) {
          const std::vector<T>& g = tp.grad(self);
          auto& dx = tp.grad(a.node);
          for (std::size_t s = 0; s < n; ++s) {
            T* d = dx.data() + (s * c + from) * inner;
            const T* gs = g.data() + s * cs * inner;
            for (std::size_t i = 0; i < cs * inner; ++i) d[i] += gs[i];
          }
        });
  }
  return out;
}

// Same buffer under a new shape; gradient reshapes back.
template <typename T>
Tensor<T> reshape(Tape<T>* tape, const Tensor<T>& a, std::vector<std::size_t> shape) {
  if (Tensor<T>::product(shape) != a.numel()) {
    throw DimensionError("reshape: element count mismatch");
  }
  Tensor<T> out;
  out.shape = std::move(shape);
  out.data = a.data;
  if (tape && a.node >= 0) {
    out.node = tape->record(out.numel(), {a.node}, [a](Tape<T>& tp, int self) {
      accumulate(tp, a.node, tp.grad(self));
    });
  }
  return out;
}

}  // namespace ctflow::grad
