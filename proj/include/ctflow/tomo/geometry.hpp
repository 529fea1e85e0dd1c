#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "ctflow/core/error.hpp"

namespace ctflow::tomo {

// Parallel-beam scan description. Angles are uniform in [0, pi), detector
// offsets are uniform and centered at zero, the image grid is square.
struct Geometry {
  std::size_t num_angles = 90;
  std::size_t num_detectors = 93;
  double detector_spacing = 0.1;
  std::size_t image_size = 64;
  double pixel_spacing = 0.1;

  void validate() const {
    if (num_angles < 1) throw ConfigError("geometry: num_angles must be >= 1");
    if (num_detectors < 2) throw ConfigError("geometry: num_detectors must be >= 2");
    if (detector_spacing <= 0 || pixel_spacing <= 0) {
      throw ConfigError("geometry: spacings must be positive");
    }
    if (image_size < 4) throw ConfigError("geometry: image_size must be >= 4");
    const double span = static_cast<double>(num_detectors) * detector_spacing;
    const double diagonal = std::sqrt(2.0) * static_cast<double>(image_size) * pixel_spacing;
    if (span < diagonal) {
      throw ConfigError("geometry: detector span " + std::to_string(span) +
                        " shorter than image diagonal " + std::to_string(diagonal) +
                        " (projections would be truncated)");
    }
  }

  double angle(std::size_t k) const {
    return 3.14159265358979323846 * static_cast<double>(k) / static_cast<double>(num_angles);
  }

  // Offset of detector bin j, centered at zero.
  double detector_offset(std::size_t j) const {
    return (static_cast<double>(j) - 0.5 * (static_cast<double>(num_detectors) - 1.0)) *
           detector_spacing;
  }
};

// Square scalar field in attenuation units (per unit length).
template <typename T>
struct Image {
  std::size_t size = 0;
  std::vector<T> data;

  Image() = default;
  explicit Image(std::size_t n) : size(n), data(n * n, T(0)) {}

  T& at(std::size_t row, std::size_t col) { return data[row * size + col]; }
  const T& at(std::size_t row, std::size_t col) const { return data[row * size + col]; }
};

// Line-integral field, one row per angle, one column per detector bin.
template <typename T>
struct Sinogram {
  std::size_t num_angles = 0;
  std::size_t num_detectors = 0;
  std::vector<T> data;

  Sinogram() = default;
  Sinogram(std::size_t angles, std::size_t detectors)
      : num_angles(angles), num_detectors(detectors), data(angles * detectors, T(0)) {}

  T& at(std::size_t k, std::size_t j) { return data[k * num_detectors + j]; }
  const T& at(std::size_t k, std::size_t j) const { return data[k * num_detectors + j]; }
};

template <typename T>
void check_image_shape(const Image<T>& image, const Geometry& geom, const char* where) {
  if (image.size != geom.image_size || image.data.size() != image.size * image.size) {
    throw DimensionError(std::string(where) + ": image shape does not match geometry");
  }
}

template <typename T>
void check_sinogram_shape(const Sinogram<T>& sino, const Geometry& geom, const char* where) {
  if (sino.num_angles != geom.num_angles || sino.num_detectors != geom.num_detectors ||
      sino.data.size() != sino.num_angles * sino.num_detectors) {
    throw DimensionError(std::string(where) + ": sinogram shape does not match geometry");
  }
}

}  // namespace ctflow::tomo
