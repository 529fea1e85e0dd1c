#pragma once

#include <cmath>
#include <cstdint>
#include <limits>

#include "ctflow/core/rng.hpp"
#include "ctflow/tomo/geometry.hpp"
#include "ctflow/tomo/radon.hpp"

namespace ctflow::tomo {

// Photon statistics for one acquisition. An infinite photon count flags the
// noiseless limit.
struct NoiseModel {
  double photon_count = 4096.0;
  double clamp_floor = 0.1;
  std::uint64_t seed = 0;

  bool noiseless() const { return std::isinf(photon_count); }

  void validate() const {
    if (!(photon_count > 0.0)) throw ConfigError("noise: photon_count must be > 0");
    if (!(clamp_floor > 0.0) || clamp_floor > 1.0) {
      throw ConfigError("noise: clamp_floor must be in (0, 1]");
    }
  }
};

// Poisson low-dose measurement of the image's line integrals: per bin draw
// N ~ Poisson(N0 * exp(-ybar)) and return -log(max(N, clamp_floor) / N0).
// Deterministic given the noise seed; the infinite-N0 flag returns the clean
// line integrals exactly.
template <typename T>
Sinogram<T> simulate_low_dose(const Image<T>& image, const Geometry& geom,
                              const NoiseModel& noise) {
  noise.validate();
  for (const T v : image.data) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw DiagnosticError("simulate_low_dose: non-finite image value");
    }
  }
  Sinogram<T> sino = radon_forward(image, geom);
  if (noise.noiseless()) return sino;
  Rng rng(noise.seed);
  const double n0 = noise.photon_count;
  for (auto& v : sino.data) {
    const double mean = n0 * std::exp(-static_cast<double>(v));
    const double counts = static_cast<double>(rng.poisson(mean));
    v = static_cast<T>(-std::log(std::max(counts, noise.clamp_floor) / n0));
  }
  return sino;
}

}  // namespace ctflow::tomo
