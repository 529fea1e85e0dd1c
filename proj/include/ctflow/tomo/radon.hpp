#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "ctflow/tomo/geometry.hpp"

namespace ctflow::tomo {

namespace detail {

// Shared ray-marching parameters so forward and adjoint sample identically.
struct RayMarch {
  double half_extent;
  double step;
  std::size_t num_steps;

  explicit RayMarch(const Geometry& g) {
    const double diag = std::sqrt(2.0) * static_cast<double>(g.image_size) * g.pixel_spacing;
    half_extent = 0.5 * diag + g.pixel_spacing;
    step = 0.5 * g.pixel_spacing;
    num_steps = static_cast<std::size_t>(std::ceil(2.0 * half_extent / step));
  }

  double sample_t(std::size_t m) const {
    return -half_extent + (static_cast<double>(m) + 0.5) * step;
  }
};

}  // namespace detail

// Ray-driven line integrals: entry (k, j) integrates the bilinearly
// interpolated image along the ray with offset s_j and angle phi_k, with
// step length pixel_spacing / 2. Samples outside the grid contribute zero.
template <typename T>
Sinogram<T> radon_forward(const Image<T>& image, const Geometry& geom) {
  geom.validate();
  check_image_shape(image, geom, "radon_forward");
  Sinogram<T> sino(geom.num_angles, geom.num_detectors);
  const detail::RayMarch march(geom);
  const std::size_t n = geom.image_size;
  const double center = 0.5 * (static_cast<double>(n) - 1.0);
  const double inv_h = 1.0 / geom.pixel_spacing;
  const T* img = image.data.data();
  for (std::size_t k = 0; k < geom.num_angles; ++k) {
    const double phi = geom.angle(k);
    const double c = std::cos(phi), s = std::sin(phi);
    for (std::size_t j = 0; j < geom.num_detectors; ++j) {
      const double off = geom.detector_offset(j);
      double acc = 0.0;
      for (std::size_t m = 0; m < march.num_steps; ++m) {
        const double t = march.sample_t(m);
        const double x = off * c - t * s;
        const double y = off * s + t * c;
        const double col = x * inv_h + center;
        const double row = y * inv_h + center;
        const double fc = std::floor(col), fr = std::floor(row);
        const long c0 = static_cast<long>(fc), r0 = static_cast<long>(fr);
        const double wx = col - fc, wy = row - fr;
        const long nl = static_cast<long>(n);
        if (r0 >= 0 && r0 < nl && c0 >= 0 && c0 < nl)
          acc += (1.0 - wy) * (1.0 - wx) * img[r0 * nl + c0];
        if (r0 >= 0 && r0 < nl && c0 + 1 >= 0 && c0 + 1 < nl)
          acc += (1.0 - wy) * wx * img[r0 * nl + c0 + 1];
        if (r0 + 1 >= 0 && r0 + 1 < nl && c0 >= 0 && c0 < nl)
          acc += wy * (1.0 - wx) * img[(r0 + 1) * nl + c0];
        if (r0 + 1 >= 0 && r0 + 1 < nl && c0 + 1 >= 0 && c0 + 1 < nl)
          acc += wy * wx * img[(r0 + 1) * nl + c0 + 1];
      }
      sino.at(k, j) = static_cast<T>(acc * march.step);
    }
  }
  return sino;
}

// Exact transpose of radon_forward: same rays, same sample points, same
// bilinear weights, scatter instead of gather.
template <typename T>
Image<T> back_project(const Sinogram<T>& sino, const Geometry& geom) {
  geom.validate();
  check_sinogram_shape(sino, geom, "back_project");
  Image<T> image(geom.image_size);
  const detail::RayMarch march(geom);
  const std::size_t n = geom.image_size;
  const double center = 0.5 * (static_cast<double>(n) - 1.0);
  const double inv_h = 1.0 / geom.pixel_spacing;
  T* img = image.data.data();
  for (std::size_t k = 0; k < geom.num_angles; ++k) {
    const double phi = geom.angle(k);
    const double c = std::cos(phi), s = std::sin(phi);
    for (std::size_t j = 0; j < geom.num_detectors; ++j) {
      const double off = geom.detector_offset(j);
      const double value = static_cast<double>(sino.at(k, j)) * march.step;
      if (value == 0.0) continue;
      for (std::size_t m = 0; m < march.num_steps; ++m) {
        const double t = march.sample_t(m);
        const double x = off * c - t * s;
        const double y = off * s + t * c;
        const double col = x * inv_h + center;
        const double row = y * inv_h + center;
        const double fc = std::floor(col), fr = std::floor(row);
        const long c0 = static_cast<long>(fc), r0 = static_cast<long>(fr);
        const double wx = col - fc, wy = row - fr;
        const long nl = static_cast<long>(n);
        if (r0 >= 0 && r0 < nl && c0 >= 0 && c0 < nl)
          img[r0 * nl + c0] += static_cast<T>((1.0 - wy) * (1.0 - wx) * value);
        if (r0 >= 0 && r0 < nl && c0 + 1 >= 0 && c0 + 1 < nl)
          img[r0 * nl + c0 + 1] += static_cast<T>((1.0 - wy) * wx * value);
        if (r0 + 1 >= 0 && r0 + 1 < nl && c0 >= 0 && c0 < nl)
          img[(r0 + 1) * nl + c0] += static_cast<T>(wy * (1.0 - wx) * value);
        if (r0 + 1 >= 0 && r0 + 1 < nl && c0 + 1 >= 0 && c0 + 1 < nl)
          img[(r0 + 1) * nl + c0 + 1] += static_cast<T>(wy * wx * value);
      }
    }
  }
  return image;
}

}  // namespace ctflow::tomo
