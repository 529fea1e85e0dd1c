#pragma once

#include <cmath>
#include <complex>
#include <cstddef>
#include <vector>

#include "ctflow/core/error.hpp"

namespace ctflow {

inline std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

// In-place iterative radix-2 FFT. Length must be a power of two.
template <typename T>
void fft_radix2(std::vector<std::complex<T>>& a, bool inverse) {
  const std::size_t n = a.size();
  if (n == 0 || (n & (n - 1)) != 0) throw DimensionError("fft: length must be a power of two");
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = (inverse ? 2.0 : -2.0) * 3.14159265358979323846 / static_cast<double>(len);
    const std::complex<T> wl(static_cast<T>(std::cos(ang)), static_cast<T>(std::sin(ang)));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<T> w(1);
      for (std::size_t k = 0; k < len / 2; ++k) {
        const std::complex<T> u = a[i + k];
        const std::complex<T> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wl;
      }
    }
  }
  if (inverse) {
    const T inv_n = static_cast<T>(1) / static_cast<T>(n);
    for (auto& x : a) x *= inv_n;
  }
}

// Circular convolution of a zero-padded real signal with a real frequency
// response: IFFT(FFT(x) .* response), real part.
template <typename T>
std::vector<T> apply_frequency_response(const std::vector<T>& x, const std::vector<T>& response) {
  const std::size_t n = response.size();
  std::vector<std::complex<T>> buf(n);
  for (std::size_t i = 0; i < x.size(); ++i) buf[i] = x[i];
  fft_radix2(buf, false);
  for (std::size_t i = 0; i < n; ++i) buf[i] *= response[i];
  fft_radix2(buf, true);
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = buf[i].real();
  return out;
}

}  // namespace ctflow
