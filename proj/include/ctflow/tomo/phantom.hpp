#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ctflow/core/rng.hpp"
#include "ctflow/tomo/geometry.hpp"

namespace ctflow::tomo {

namespace detail {

struct EllipseSpec {
  double value;    // additive intensity
  double a, b;     // semi-axes in normalized [-1, 1] coordinates
  double cx, cy;   // center
  double phi;      // rotation, radians
};

// Modified Shepp-Logan intensities (peak value 1).
inline const std::array<EllipseSpec, 10>& shepp_logan_layout() {
  static const std::array<EllipseSpec, 10> layout = {{
      {1.0, 0.69, 0.92, 0.0, 0.0, 0.0},
      {-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0},
      {-0.2, 0.11, 0.31, 0.22, 0.0, -0.31415926535897931},
      {-0.2, 0.16, 0.41, -0.22, 0.0, 0.31415926535897931},
      {0.1, 0.21, 0.25, 0.0, 0.35, 0.0},
      {0.1, 0.046, 0.046, 0.0, 0.1, 0.0},
      {0.1, 0.046, 0.046, 0.0, -0.1, 0.0},
      {0.1, 0.046, 0.023, -0.08, -0.605, 0.0},
      {0.1, 0.023, 0.023, 0.0, -0.606, 0.0},
      {0.1, 0.023, 0.046, 0.06, -0.605, 0.0},
  }};
  return layout;
}

// Accumulates one ellipse with 3x3 supersampling per pixel. Coordinates are
// normalized so the image square spans [-1, 1] x [-1, 1].
template <typename T>
void add_ellipse(Image<T>& image, const EllipseSpec& e) {
  const std::size_t n = image.size;
  const double half = 0.5 * static_cast<double>(n);
  const double cphi = std::cos(e.phi), sphi = std::sin(e.phi);
  const double inv_a = 1.0 / e.a, inv_b = 1.0 / e.b;
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      int hits = 0;
      for (int sr = 0; sr < 3; ++sr) {
        for (int sc = 0; sc < 3; ++sc) {
          const double u = (static_cast<double>(c) + (sc + 0.5) / 3.0 - half) / half;
          const double v = (static_cast<double>(r) + (sr + 0.5) / 3.0 - half) / half;
          const double du = u - e.cx, dv = v - e.cy;
          const double x = (du * cphi + dv * sphi) * inv_a;
          const double y = (-du * sphi + dv * cphi) * inv_b;
          if (x * x + y * y <= 1.0) ++hits;
        }
      }
      if (hits > 0) {
        image.at(r, c) += static_cast<T>(e.value * static_cast<double>(hits) / 9.0);
      }
    }
  }
}

template <typename T>
void clip_and_mask(Image<T>& image) {
  const std::size_t n = image.size;
  const double half = 0.5 * static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      const double u = (static_cast<double>(c) + 0.5 - half) / half;
      const double v = (static_cast<double>(r) + 0.5 - half) / half;
      if (u * u + v * v > 1.0) {
        image.at(r, c) = T(0);
      } else {
        image.at(r, c) = std::clamp(image.at(r, c), T(0), T(1));
      }
    }
  }
}

}  // namespace detail

// Deterministic synthetic ground truth. Family "ellipses" draws 3-8 random
// ellipses with additive intensities; family "shepp" is the standard
// Shepp-Logan layout scaled to the grid. Values are clipped to [0, 1] and
// pixels outside the inscribed circle are exactly zero.
template <typename T>
Image<T> generate_phantom(std::uint64_t seed, std::size_t size, const std::string& family) {
  if (size < 16) throw ConfigError("generate_phantom: size must be >= 16");
  Image<T> image(size);
  if (family == "ellipses") {
    Rng rng(seed);
    const std::size_t count = 3 + static_cast<std::size_t>(rng.uniform_int(6));
    for (std::size_t i = 0; i < count; ++i) {
      detail::EllipseSpec e;
      e.cx = rng.uniform(-0.45, 0.45);
      e.cy = rng.uniform(-0.45, 0.45);
      e.a = rng.uniform(0.08, 0.45);
      e.b = rng.uniform(0.08, 0.45);
      e.phi = rng.uniform(0.0, 3.14159265358979323846);
      e.value = rng.uniform(0.15, 0.6);
      detail::add_ellipse(image, e);
    }
  } else if (family == "shepp") {
    for (const auto& e : detail::shepp_logan_layout()) detail::add_ellipse(image, e);
  } else {
    throw ConfigError("generate_phantom: unknown family \"" + family + "\"");
  }
  detail::clip_and_mask(image);
  return image;
}

}  // namespace ctflow::tomo
