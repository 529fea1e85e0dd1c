#pragma once

#include <cstddef>
#include <vector>

#include "ctflow/core/fft.hpp"
#include "ctflow/tomo/geometry.hpp"
#include "ctflow/tomo/radon.hpp"

namespace ctflow::tomo {

// Discrete ramp |frequency| response on a zero-padded grid of length
// next_pow2(2 * num_detectors). Bin k carries the physical frequency
// magnitude min(k, L - k) / (L * detector_spacing).
template <typename T>
std::vector<T> ram_lak_filter(std::size_t num_detectors, double detector_spacing) {
  if (num_detectors < 2) throw ConfigError("ram_lak_filter: num_detectors must be >= 2");
  if (detector_spacing <= 0) throw ConfigError("ram_lak_filter: detector_spacing must be > 0");
  const std::size_t len = next_pow2(2 * num_detectors);
  std::vector<T> response(len);
  for (std::size_t k = 0; k < len; ++k) {
    const std::size_t folded = std::min(k, len - k);
    response[k] =
        static_cast<T>(static_cast<double>(folded) / (static_cast<double>(len) * detector_spacing));
  }
  return response;
}

// Filtered back-projection: per-angle ramp filtering via FFT on the padded
// grid, adjoint back-projection, then the angular quadrature weight
// pi / num_angles. The extra detector_spacing / pixel_spacing^2 factor
// converts the ray-driven adjoint into the continuous back-projection
// normalization; it reduces to 1 for the canonical detector_spacing ==
// pixel_spacing == 1 geometry.
template <typename T>
Image<T> fbp_reconstruct(const Sinogram<T>& sino, const Geometry& geom) {
  geom.validate();
  check_sinogram_shape(sino, geom, "fbp_reconstruct");
  const std::vector<T> response = ram_lak_filter<T>(geom.num_detectors, geom.detector_spacing);
  const std::size_t len = response.size();
  Sinogram<T> filtered(geom.num_angles, geom.num_detectors);
  std::vector<T> row(len);
  for (std::size_t k = 0; k < geom.num_angles; ++k) {
    std::fill(row.begin(), row.end(), T(0));
    for (std::size_t j = 0; j < geom.num_detectors; ++j) row[j] = sino.at(k, j);
    const std::vector<T> out = apply_frequency_response(row, response);
    for (std::size_t j = 0; j < geom.num_detectors; ++j) filtered.at(k, j) = out[j];
  }
  Image<T> image = back_project(filtered, geom);
  const double scale = 3.14159265358979323846 / static_cast<double>(geom.num_angles) *
                       geom.detector_spacing / (geom.pixel_spacing * geom.pixel_spacing);
  for (auto& v : image.data) v = static_cast<T>(v * scale);
  return image;
}

}  // namespace ctflow::tomo
