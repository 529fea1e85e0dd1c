#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "ctflow/core/error.hpp"
#include "ctflow/core/rng.hpp"
#include "ctflow/grad/ops.hpp"
#include "ctflow/grad/parameter.hpp"
#include "ctflow/grad/tape.hpp"
#include "ctflow/grad/tensor.hpp"

namespace ctflow::flow {

using grad::Parameter;
using grad::ParameterStore;
using grad::Tape;
using grad::Tensor;

namespace detail {

// Householder QR of a square Gaussian matrix, returning Q with positive R
// diagonal. Only |det Q| = 1 matters downstream.
inline std::vector<double> random_orthogonal(std::size_t c, Rng& rng) {
  std::vector<double> a(c * c);
  for (double& v : a) v = rng.normal();
  std::vector<double> q(c * c, 0.0);
  for (std::size_t i = 0; i < c; ++i) q[i * c + i] = 1.0;

  std::vector<double> v(c);
  for (std::size_t k = 0; k < c; ++k) {
    double norm = 0.0;
    for (std::size_t i = k; i < c; ++i) norm += a[i * c + k] * a[i * c + k];
    norm = std::sqrt(norm);
    if (norm == 0.0) continue;
    const double alpha = a[k * c + k] >= 0.0 ? -norm : norm;
    double vnorm2 = 0.0;
    for (std::size_t i = k; i < c; ++i) {
      v[i] = a[i * c + k] - (i == k ? alpha : 0.0);
      vnorm2 += v[i] * v[i];
    }
    if (vnorm2 == 0.0) continue;
    // Apply H = I - 2 v v^T / (v^T v) to A (left) and accumulate into Q.
    for (std::size_t j = k; j < c; ++j) {
      double dot = 0.0;
      for (std::size_t i = k; i < c; ++i) dot += v[i] * a[i * c + j];
      const double f = 2.0 * dot / vnorm2;
      for (std::size_t i = k; i < c; ++i) a[i * c + j] -= f * v[i];
    }
    for (std::size_t j = 0; j < c; ++j) {
      double dot = 0.0;
      for (std::size_t i = k; i < c; ++i) dot += v[i] * q[i * c + j];
      const double f = 2.0 * dot / vnorm2;
      for (std::size_t i = k; i < c; ++i) q[i * c + j] -= f * v[i];
    }
  }
  // q currently holds the product of reflectors applied to I, i.e. Q^T.
  std::vector<double> qt(c * c);
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = 0; j < c; ++j) qt[i * c + j] = q[j * c + i];
  }
  // Flip columns so the implied R diagonal is positive.
  for (std::size_t j = 0; j < c; ++j) {
    if (a[j * c + j] < 0.0) {
      for (std::size_t i = 0; i < c; ++i) qt[i * c + j] = -qt[i * c + j];
    }
  }
  return qt;
}

struct PluFactors {
  std::vector<std::size_t> perm;  // row permutation: M[perm[i], :] = (L U)[i, :]
  std::vector<double> lower;      // strict lower triangle, unit diagonal implied
  std::vector<double> upper;      // strict upper triangle
  std::vector<double> sign;       // signs of the U diagonal
  std::vector<double> logdiag;    // log magnitudes of the U diagonal
};

inline PluFactors plu_decompose(std::vector<double> m, std::size_t c) {
  PluFactors f;
  f.perm.resize(c);
  for (std::size_t i = 0; i < c; ++i) f.perm[i] = i;
  for (std::size_t k = 0; k < c; ++k) {
    std::size_t piv = k;
    for (std::size_t r = k + 1; r < c; ++r) {
      if (std::abs(m[r * c + k]) > std::abs(m[piv * c + k])) piv = r;
    }
    if (piv != k) {
      for (std::size_t j = 0; j < c; ++j) std::swap(m[k * c + j], m[piv * c + j]);
      std::swap(f.perm[k], f.perm[piv]);
    }
    const double d = m[k * c + k];
    for (std::size_t i = k + 1; i < c; ++i) {
      m[i * c + k] /= d;
      for (std::size_t j = k + 1; j < c; ++j) m[i * c + j] -= m[i * c + k] * m[k * c + j];
    }
  }
  f.lower.assign(c * c, 0.0);
  f.upper.assign(c * c, 0.0);
  f.sign.resize(c);
  f.logdiag.resize(c);
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = 0; j < i; ++j) f.lower[i * c + j] = m[i * c + j];
    for (std::size_t j = i + 1; j < c; ++j) f.upper[i * c + j] = m[i * c + j];
    f.sign[i] = m[i * c + i] >= 0.0 ? 1.0 : -1.0;
    f.logdiag[i] = std::log(std::abs(m[i * c + i]));
  }
  return f;
}

}  // namespace detail

// Channel mixing y = W x per pixel with W = P L U: P a fixed permutation, L
// unit lower triangular, U upper triangular with its diagonal stored as fixed
// signs and trainable log magnitudes. W is invertible by construction and
// log|det W| = sum(logdiag), so the per-sample log-det is H*W*sum(logdiag).
// Initialized from a random rotation, which makes the initial log-det 0.
template <typename T>
class Inv1x1 {
 public:
  Inv1x1() = default;

  Inv1x1(ParameterStore<T>& store, const std::string& prefix, std::size_t channels, Rng& rng)
      : store_(&store), prefix_(prefix), channels_(channels) {
    detail::PluFactors f = detail::plu_decompose(detail::random_orthogonal(channels, rng),
                                                 channels);
    auto to_tensor = [](const std::vector<double>& v, std::vector<std::size_t> shape) {
      Tensor<T> t = Tensor<T>::zeros(shape);
      for (std::size_t i = 0; i < v.size(); ++i) t.ptr()[i] = static_cast<T>(v[i]);
      return t;
    };
    Tensor<T> perm = Tensor<T>::zeros({channels});
    for (std::size_t i = 0; i < channels; ++i) perm.ptr()[i] = static_cast<T>(f.perm[i]);
    store.add(prefix + ".perm", perm, false);
    store.add(prefix + ".sign", to_tensor(f.sign, {channels}), false);
    store.add(prefix + ".lower", to_tensor(f.lower, {channels, channels}));
    store.add(prefix + ".upper", to_tensor(f.upper, {channels, channels}));
    store.add(prefix + ".logdiag", to_tensor(f.logdiag, {channels}));
  }

  std::size_t channels() const { return channels_; }

  // Returns (y, logdet[N]).
  std::pair<Tensor<T>, Tensor<T>> forward(Tape<T>* tape, const Tensor<T>& x) const {
    grad::require_rank(x, 4, "inv1x1 input");
    if (x.dim(1) != channels_) throw DimensionError("inv1x1: channel mismatch");
    const std::size_t n = x.dim(0), c = channels_, h = x.dim(2), w = x.dim(3);
    const std::size_t hw = h * w;

    const Tensor<T>& lower = param(".lower").value;
    const Tensor<T>& upper = param(".upper").value;
    const Tensor<T>& logdiag = param(".logdiag").value;
    const std::vector<double> wm = materialize();

    Tensor<T> y = Tensor<T>::zeros(x.shape);
    apply_matrix(wm, x, y);
    grad::detail::check_finite(y, "inv1x1");

    double ld = 0.0;
    for (std::size_t i = 0; i < c; ++i) ld += static_cast<double>(logdiag.ptr()[i]);
    ld *= static_cast<double>(hw);
    Tensor<T> logdet = Tensor<T>::full({n}, static_cast<T>(ld));

    if (tape) {
      if (x.node >= 0 || lower.node >= 0 || upper.node >= 0 || logdiag.node >= 0) {
        auto factors = current_factors();
        y.node = tape->record(
            y.numel(), {x.node, lower.node, upper.node, logdiag.node},
            [x, lower, upper, logdiag, wm, factors, n, c, hw](Tape<T>& tp, int self) {
              const std::vector<T>& g = tp.grad(self);
              // dx = W^T g.
              if (x.node >= 0) {
                auto& dx = tp.grad(x.node);
                for (std::size_t s = 0; s < n; ++s) {
                  for (std::size_t p = 0; p < hw; ++p) {
                    const T* gv = g.data() + s * c * hw + p;
                    T* dv = dx.data() + s * c * hw + p;
                    for (std::size_t i = 0; i < c; ++i) {
                      double acc = 0.0;
                      for (std::size_t r = 0; r < c; ++r) {
                        acc += wm[r * c + i] * static_cast<double>(gv[r * hw]);
                      }
                      dv[i * hw] += static_cast<T>(acc);
                    }
                  }
                }
              }
              if (lower.node < 0 && upper.node < 0 && logdiag.node < 0) return;
              // dW = sum over pixels of g x^T, then rows unpermuted by P.
              std::vector<double> dw(c * c, 0.0);
              for (std::size_t s = 0; s < n; ++s) {
                for (std::size_t p = 0; p < hw; ++p) {
                  const T* gv = g.data() + s * c * hw + p;
                  const T* xv = x.ptr() + s * c * hw + p;
                  for (std::size_t i = 0; i < c; ++i) {
                    const double gi = static_cast<double>(gv[i * hw]);
                    for (std::size_t j = 0; j < c; ++j) {
                      dw[i * c + j] += gi * static_cast<double>(xv[j * hw]);
                    }
                  }
                }
              }
              std::vector<double> dwp(c * c);
              for (std::size_t i = 0; i < c; ++i) {
                for (std::size_t j = 0; j < c; ++j) {
                  dwp[i * c + j] = dw[factors.perm[i] * c + j];
                }
              }
              // W_p = L U: dL = dW_p U^T (strict lower), dU = L^T dW_p (upper).
              if (lower.node >= 0) {
                auto& dl = tp.grad(lower.node);
                for (std::size_t i = 1; i < c; ++i) {
                  for (std::size_t j = 0; j < i; ++j) {
                    double acc = 0.0;
                    for (std::size_t k = j; k < c; ++k) {
                      const double u = k == j ? factors.sign[j] * std::exp(factors.logdiag[j])
                                              : (k > j ? factors.upper[j * c + k] : 0.0);
                      acc += dwp[i * c + k] * u;
                    }
                    dl[i * c + j] += static_cast<T>(acc);
                  }
                }
              }
              if (upper.node >= 0 || logdiag.node >= 0) {
                for (std::size_t i = 0; i < c; ++i) {
                  for (std::size_t j = i; j < c; ++j) {
                    double acc = dwp[i * c + j];
                    for (std::size_t k = i + 1; k < c; ++k) {
                      acc += factors.lower[k * c + i] * dwp[k * c + j];
                    }
                    if (j > i && upper.node >= 0) {
                      tp.grad(upper.node)[i * c + j] += static_cast<T>(acc);
                    } else if (j == i && logdiag.node >= 0) {
                      const double uii = factors.sign[i] * std::exp(factors.logdiag[i]);
                      tp.grad(logdiag.node)[i] += static_cast<T>(acc * uii);
                    }
                  }
                }
              }
            });
        if (logdiag.node >= 0) {
          logdet.node = tape->record(n, {logdiag.node}, [logdiag, n, c, hw](Tape<T>& tp,
                                                                            int self) {
            const std::vector<T>& g = tp.grad(self);
            T total = T(0);
            for (std::size_t s = 0; s < n; ++s) total += g[s];
            auto& dd = tp.grad(logdiag.node);
            for (std::size_t i = 0; i < c; ++i) dd[i] += static_cast<T>(hw) * total;
          });
        }
      }
    }
    return {y, logdet};
  }

  Tensor<T> inverse(const Tensor<T>& y) const {
    grad::require_rank(y, 4, "inv1x1 input");
    if (y.dim(1) != channels_) throw DimensionError("inv1x1: channel mismatch");
    const std::size_t n = y.dim(0), c = channels_, hw = y.dim(2) * y.dim(3);
    const auto f = current_factors();
    Tensor<T> x = Tensor<T>::zeros(y.shape);
    std::vector<double> r(c), t(c);
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t p = 0; p < hw; ++p) {
        const T* yv = y.ptr() + s * c * hw + p;
        T* xv = x.ptr() + s * c * hw + p;
        for (std::size_t i = 0; i < c; ++i) r[i] = static_cast<double>(yv[f.perm[i] * hw]);
        for (std::size_t i = 0; i < c; ++i) {
          double acc = r[i];
          for (std::size_t j = 0; j < i; ++j) acc -= f.lower[i * c + j] * t[j];
          t[i] = acc;
        }
        for (std::size_t ii = c; ii-- > 0;) {
          double acc = t[ii];
          for (std::size_t j = ii + 1; j < c; ++j) acc -= f.upper[ii * c + j] * r[j];
          r[ii] = acc / (f.sign[ii] * std::exp(f.logdiag[ii]));
          xv[ii * hw] = static_cast<T>(r[ii]);
        }
      }
    }
    return x;
  }

 private:
  const Parameter<T>& param(const char* suffix) const { return store_->at(prefix_ + suffix); }

  detail::PluFactors current_factors() const {
    detail::PluFactors f;
    const std::size_t c = channels_;
    const Tensor<T>& perm = param(".perm").value;
    const Tensor<T>& sign = param(".sign").value;
    const Tensor<T>& lower = param(".lower").value;
    const Tensor<T>& upper = param(".upper").value;
    const Tensor<T>& logdiag = param(".logdiag").value;
    f.perm.resize(c);
    f.sign.resize(c);
    f.logdiag.resize(c);
    f.lower.assign(c * c, 0.0);
    f.upper.assign(c * c, 0.0);
    for (std::size_t i = 0; i < c; ++i) {
      f.perm[i] = static_cast<std::size_t>(perm.ptr()[i]);
      f.sign[i] = static_cast<double>(sign.ptr()[i]);
      f.logdiag[i] = static_cast<double>(logdiag.ptr()[i]);
      for (std::size_t j = 0; j < i; ++j) f.lower[i * c + j] = static_cast<double>(lower.ptr()[i * c + j]);
      for (std::size_t j = i + 1; j < c; ++j) f.upper[i * c + j] = static_cast<double>(upper.ptr()[i * c + j]);
    }
    return f;
  }

  // W = P L U as a dense row-major matrix.
  std::vector<double> materialize() const {
    const std::size_t c = channels_;
    const auto f = current_factors();
    std::vector<double> lu(c * c, 0.0);
    for (std::size_t i = 0; i < c; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        double acc = 0.0;
        const std::size_t lo = i < j ? i : j;
        for (std::size_t k = 0; k <= lo; ++k) {
          const double lv = k == i ? 1.0 : (k < i ? f.lower[i * c + k] : 0.0);
          const double uv = k == j ? f.sign[j] * std::exp(f.logdiag[j])
                                   : (k < j ? f.upper[k * c + j] : 0.0);
          acc += lv * uv;
        }
        lu[i * c + j] = acc;
      }
    }
    std::vector<double> w(c * c);
    for (std::size_t i = 0; i < c; ++i) {
      for (std::size_t j = 0; j < c; ++j) w[f.perm[i] * c + j] = lu[i * c + j];
    }
    return w;
  }

  void apply_matrix(const std::vector<double>& w, const Tensor<T>& x, Tensor<T>& y) const {
    const std::size_t n = x.dim(0), c = channels_, hw = x.dim(2) * x.dim(3);
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t p = 0; p < hw; ++p) {
        const T* xv = x.ptr() + s * c * hw + p;
        T* yv = y.ptr() + s * c * hw + p;
        for (std::size_t i = 0; i < c; ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            acc += w[i * c + j] * static_cast<double>(xv[j * hw]);
          }
          yv[i * hw] = static_cast<T>(acc);
        }
      }
    }
  }

  ParameterStore<T>* store_ = nullptr;
  std::string prefix_;
  std::size_t channels_ = 0;
};

}  // namespace ctflow::flow
