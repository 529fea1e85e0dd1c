#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "ctflow/core/error.hpp"
#include "ctflow/tomo/geometry.hpp"

namespace ctflow::eval {

// Peak signal-to-noise ratio in dB against a known data range. Identical
// images have zero MSE; +infinity is the sentinel for that case.
template <typename T>
double psnr(const tomo::Image<T>& x, const tomo::Image<T>& ref, double data_range) {
  if (x.size != ref.size) throw DimensionError("psnr: image sizes differ");
  if (data_range <= 0) throw ConfigError("psnr: data_range must be > 0");
  double mse = 0.0;
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    const double d = static_cast<double>(x.data[i]) - static_cast<double>(ref.data[i]);
    mse += d * d;
  }
  mse /= static_cast<double>(x.data.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(data_range * data_range / mse);
}

struct SsimConfig {
  std::string window = "uniform";  // "uniform" or "gaussian"
  std::size_t window_size = 7;
  double sigma = 1.5;  // gaussian window width

  void validate() const {
    if (window != "uniform" && window != "gaussian") {
      throw ConfigError("ssim: window must be \"uniform\" or \"gaussian\", got \"" + window +
                        "\"");
    }
    if (window_size < 3 || window_size % 2 == 0) {
      throw ConfigError("ssim: window_size must be odd and >= 3");
    }
    if (sigma <= 0) throw ConfigError("ssim: sigma must be > 0");
  }
};

namespace detail {

// Summed-area table with a zero top row and left column, so any window sum is
// four lookups.
template <typename T, typename F>
std::vector<double> integral_table(const tomo::Image<T>& img, F value) {
  const std::size_t n = img.size;
  std::vector<double> table((n + 1) * (n + 1), 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    double row_sum = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      row_sum += value(img.data[r * n + c]);
      table[(r + 1) * (n + 1) + (c + 1)] = table[r * (n + 1) + (c + 1)] + row_sum;
    }
  }
  return table;
}

inline double window_sum(const std::vector<double>& table, std::size_t stride, std::size_t r0,
                         std::size_t c0, std::size_t k) {
  return table[(r0 + k) * stride + (c0 + k)] - table[r0 * stride + (c0 + k)] -
         table[(r0 + k) * stride + c0] + table[r0 * stride + c0];
}

template <typename T>
double ssim_uniform(const tomo::Image<T>& x, const tomo::Image<T>& y, double data_range,
                    std::size_t k) {
  const std::size_t n = x.size;
  const std::size_t stride = n + 1;
  const auto sx = integral_table(x, [](T v) { return static_cast<double>(v); });
  const auto sy = integral_table(y, [](T v) { return static_cast<double>(v); });
  const auto sxx = integral_table(x, [](T v) {
    const double d = static_cast<double>(v);
    return d * d;
  });
  const auto syy = integral_table(y, [](T v) {
    const double d = static_cast<double>(v);
    return d * d;
  });
  std::vector<double> xy((n + 1) * (n + 1), 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    double row_sum = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      row_sum += static_cast<double>(x.data[r * n + c]) * static_cast<double>(y.data[r * n + c]);
      xy[(r + 1) * stride + (c + 1)] = xy[r * stride + (c + 1)] + row_sum;
    }
  }
  const double c1 = (0.01 * data_range) * (0.01 * data_range);
  const double c2 = (0.03 * data_range) * (0.03 * data_range);
  const double wn = static_cast<double>(k * k);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r0 = 0; r0 + k <= n; ++r0) {
    for (std::size_t c0 = 0; c0 + k <= n; ++c0) {
      const double mx = window_sum(sx, stride, r0, c0, k) / wn;
      const double my = window_sum(sy, stride, r0, c0, k) / wn;
      const double vx = window_sum(sxx, stride, r0, c0, k) / wn - mx * mx;
      const double vy = window_sum(syy, stride, r0, c0, k) / wn - my * my;
      const double cov = window_sum(xy, stride, r0, c0, k) / wn - mx * my;
      total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) /
               ((mx * mx + my * my + c1) * (vx + vy + c2));
      count += 1;
    }
  }
  return total / static_cast<double>(count);
}

template <typename T>
double ssim_gaussian(const tomo::Image<T>& x, const tomo::Image<T>& y, double data_range,
                     std::size_t k, double sigma) {
  const std::size_t n = x.size;
  std::vector<double> w(k * k);
  const double mid = 0.5 * static_cast<double>(k - 1);
  double wsum = 0.0;
  for (std::size_t r = 0; r < k; ++r) {
    for (std::size_t c = 0; c < k; ++c) {
      const double dr = static_cast<double>(r) - mid;
      const double dc = static_cast<double>(c) - mid;
      w[r * k + c] = std::exp(-(dr * dr + dc * dc) / (2.0 * sigma * sigma));
      wsum += w[r * k + c];
    }
  }
  for (double& v : w) v /= wsum;
  const double c1 = (0.01 * data_range) * (0.01 * data_range);
  const double c2 = (0.03 * data_range) * (0.03 * data_range);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r0 = 0; r0 + k <= n; ++r0) {
    for (std::size_t c0 = 0; c0 + k <= n; ++c0) {
      double mx = 0.0, my = 0.0;
      for (std::size_t r = 0; r < k; ++r) {
        for (std::size_t c = 0; c < k; ++c) {
          mx += w[r * k + c] * static_cast<double>(x.data[(r0 + r) * n + c0 + c]);
          my += w[r * k + c] * static_cast<double>(y.data[(r0 + r) * n + c0 + c]);
        }
      }
      double vx = 0.0, vy = 0.0, cov = 0.0;
      for (std::size_t r = 0; r < k; ++r) {
        for (std::size_t c = 0; c < k; ++c) {
          const double dx = static_cast<double>(x.data[(r0 + r) * n + c0 + c]) - mx;
          const double dy = static_cast<double>(y.data[(r0 + r) * n + c0 + c]) - my;
          vx += w[r * k + c] * dx * dx;
          vy += w[r * k + c] * dy * dy;
          cov += w[r * k + c] * dx * dy;
        }
      }
      total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) /
               ((mx * mx + my * my + c1) * (vx + vy + c2));
      count += 1;
    }
  }
  return total / static_cast<double>(count);
}

}  // namespace detail

// Structural similarity, mean over every fully interior window. Window
// statistics are population-weighted (uniform 1/k^2 or normalized Gaussian),
// so identical images score exactly 1.
template <typename T>
double ssim(const tomo::Image<T>& x, const tomo::Image<T>& ref, double data_range,
            const SsimConfig& cfg = SsimConfig{}) {
  cfg.validate();
  if (x.size != ref.size) throw DimensionError("ssim: image sizes differ");
  if (data_range <= 0) throw ConfigError("ssim: data_range must be > 0");
  if (x.size < cfg.window_size) {
    throw DimensionError("ssim: image size " + std::to_string(x.size) +
                         " is smaller than the window " + std::to_string(cfg.window_size));
  }
  if (cfg.window == "uniform") {
    return detail::ssim_uniform(x, ref, data_range, cfg.window_size);
  }
  return detail::ssim_gaussian(x, ref, data_range, cfg.window_size, cfg.sigma);
}

}  // namespace ctflow::eval
