#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ctflow/core/io.hpp"
#include "ctflow/core/rng.hpp"
#include "ctflow/tomo/fbp.hpp"
#include "ctflow/tomo/geometry.hpp"
#include "ctflow/tomo/noise.hpp"
#include "ctflow/tomo/phantom.hpp"

namespace ctflow::tomo {

// One training example: the high-dose reconstruction acting as reference,
// the low-dose measurement simulated from it, and the FBP of that
// measurement.
template <typename T>
struct DataPair {
  Image<T> reference;           // x from the high-dose stage
  Sinogram<T> low_dose_sinogram;
  Image<T> fbp;                 // FBP of low_dose_sinogram
};

struct DatasetConfig {
  std::size_t count = 0;
  Geometry geometry;
  double n0_highdose = 65536.0;
  double n0_lowdose = 4096.0;
  double clamp_floor = 0.1;
  std::uint64_t seed = 0;
  std::string phantom_family = "ellipses";

  void validate() const {
    geometry.validate();
    NoiseModel{n0_highdose, clamp_floor, 0}.validate();
    NoiseModel{n0_lowdose, clamp_floor, 0}.validate();
    if (n0_highdose < n0_lowdose) {
      throw ConfigError("dataset: n0_highdose must be >= n0_lowdose "
                        "(the low-dose stage carries at least as much noise)");
    }
  }
};

template <typename T>
struct Dataset {
  Geometry geometry;
  std::vector<DataPair<T>> pairs;
};

namespace detail {

constexpr char kDatasetMagic[4] = {'C', 'T', 'F', 'D'};
constexpr std::uint16_t kDatasetVersion = 1;

// Independent per-index streams for the phantom and the two noise stages.
constexpr std::uint64_t kHighdoseStream = 0xa5a5a5a5a5a5a5a5ull;
constexpr std::uint64_t kLowdoseStream = 0x5a5a5a5a5a5a5a5aull;

}  // namespace detail

// Runs the two-stage simulation for one index: phantom -> high-dose
// measurement -> reference reconstruction -> low-dose measurement -> FBP.
template <typename T>
DataPair<T> build_pair(const DatasetConfig& cfg, std::size_t index) {
  const Geometry& g = cfg.geometry;
  const Image<T> phantom =
      generate_phantom<T>(derive_seed(cfg.seed, index), g.image_size, cfg.phantom_family);
  const NoiseModel high{cfg.n0_highdose, cfg.clamp_floor,
                        derive_seed(cfg.seed ^ detail::kHighdoseStream, index)};
  const NoiseModel low{cfg.n0_lowdose, cfg.clamp_floor,
                       derive_seed(cfg.seed ^ detail::kLowdoseStream, index)};
  DataPair<T> pair;
  const Sinogram<T> y_high = simulate_low_dose(phantom, g, high);
  pair.reference = fbp_reconstruct(y_high, g);
  pair.low_dose_sinogram = simulate_low_dose(pair.reference, g, low);
  pair.fbp = fbp_reconstruct(pair.low_dose_sinogram, g);
  return pair;
}

inline void write_manifest(const std::string& path, const DatasetConfig& cfg) {
  auto os = io::open_out(path, /*binary=*/false);
  os << "format=CTFD\n";
  os << "version=" << detail::kDatasetVersion << "\n";
  os << "count=" << cfg.count << "\n";
  os << "image_size=" << cfg.geometry.image_size << "\n";
  os << "num_angles=" << cfg.geometry.num_angles << "\n";
  os << "num_detectors=" << cfg.geometry.num_detectors << "\n";
  os << "detector_spacing=" << cfg.geometry.detector_spacing << "\n";
  os << "pixel_spacing=" << cfg.geometry.pixel_spacing << "\n";
  os << "seed=" << cfg.seed << "\n";
  os << "n0_highdose=" << cfg.n0_highdose << "\n";
  os << "n0_lowdose=" << cfg.n0_lowdose << "\n";
  os << "clamp_floor=" << cfg.clamp_floor << "\n";
  os << "phantom_family=" << cfg.phantom_family << "\n";
  if (!os) throw DataError("write failed: " + path);
}

// Builds the dataset and persists it: "CTFD" header followed by per-pair
// float32 arrays (reference, low_dose_sinogram, fbp), row-major, plus a
// key=value manifest next to the file.
inline void build_dataset(const DatasetConfig& cfg, const std::string& out_path) {
  cfg.validate();
  auto os = io::open_out(out_path);
  os.write(detail::kDatasetMagic, 4);
  io::write_le<std::uint16_t>(os, detail::kDatasetVersion);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(cfg.count));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(cfg.geometry.image_size));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(cfg.geometry.num_angles));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(cfg.geometry.num_detectors));
  io::write_le<double>(os, cfg.geometry.detector_spacing);
  io::write_le<double>(os, cfg.geometry.pixel_spacing);
  for (std::size_t i = 0; i < cfg.count; ++i) {
    const DataPair<float> pair = build_pair<float>(cfg, i);
    io::write_le_array(os, pair.reference.data.data(), pair.reference.data.size());
    io::write_le_array(os, pair.low_dose_sinogram.data.data(),
                       pair.low_dose_sinogram.data.size());
    io::write_le_array(os, pair.fbp.data.data(), pair.fbp.data.size());
  }
  if (!os) throw DataError("write failed: " + out_path);
  os.close();
  write_manifest(out_path + ".manifest", cfg);
}

template <typename T>
Dataset<T> load_dataset(const std::string& path) {
  auto is = io::open_in(path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "CTFD") {
    throw DataError("not a CTFD dataset (bad magic): " + path);
  }
  const auto version = io::read_le<std::uint16_t>(is, path);
  if (version != detail::kDatasetVersion) {
    throw DataError("unsupported CTFD version " + std::to_string(version) + ": " + path);
  }
  Dataset<T> ds;
  const auto count = io::read_le<std::uint32_t>(is, path);
  ds.geometry.image_size = io::read_le<std::uint32_t>(is, path);
  ds.geometry.num_angles = io::read_le<std::uint32_t>(is, path);
  ds.geometry.num_detectors = io::read_le<std::uint32_t>(is, path);
  ds.geometry.detector_spacing = io::read_le<double>(is, path);
  ds.geometry.pixel_spacing = io::read_le<double>(is, path);
  ds.geometry.validate();
  const std::size_t n = ds.geometry.image_size;
  const std::size_t sino_len = ds.geometry.num_angles * ds.geometry.num_detectors;
  ds.pairs.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    DataPair<T> pair;
    pair.reference = Image<T>(n);
    pair.low_dose_sinogram = Sinogram<T>(ds.geometry.num_angles, ds.geometry.num_detectors);
    pair.fbp = Image<T>(n);
    std::vector<float> buf(n * n);
    io::read_le_array(is, buf.data(), buf.size(), path);
    for (std::size_t k = 0; k < buf.size(); ++k) pair.reference.data[k] = static_cast<T>(buf[k]);
    buf.resize(sino_len);
    io::read_le_array(is, buf.data(), sino_len, path);
    for (std::size_t k = 0; k < sino_len; ++k) {
      pair.low_dose_sinogram.data[k] = static_cast<T>(buf[k]);
    }
    buf.resize(n * n);
    io::read_le_array(is, buf.data(), buf.size(), path);
    for (std::size_t k = 0; k < buf.size(); ++k) pair.fbp.data[k] = static_cast<T>(buf[k]);
    ds.pairs.push_back(std::move(pair));
  }
  return ds;
}

namespace detail {
inline constexpr char kSinogramMagic[4] = {'C', 'T', 'S', 'G'};
inline constexpr std::uint16_t kSinogramVersion = 1;
}  // namespace detail

// Standalone sinogram file: "CTSG" header carrying the full scan geometry
// (including the reconstruction grid), then float32 samples, angle-major.
template <typename T>
void save_sinogram(const std::string& path, const Sinogram<T>& sino, const Geometry& geom) {
  geom.validate();
  if (sino.num_angles != geom.num_angles || sino.num_detectors != geom.num_detectors) {
    throw DimensionError("save_sinogram: sinogram shape does not match the geometry");
  }
  auto os = io::open_out(path);
  os.write(detail::kSinogramMagic, 4);
  io::write_le<std::uint16_t>(os, detail::kSinogramVersion);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(geom.num_angles));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(geom.num_detectors));
  io::write_le<double>(os, geom.detector_spacing);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(geom.image_size));
  io::write_le<double>(os, geom.pixel_spacing);
  for (const T v : sino.data) io::write_le<float>(os, static_cast<float>(v));
  if (!os) throw DataError("write failed: " + path);
}

template <typename T>
std::pair<Sinogram<T>, Geometry> load_sinogram(const std::string& path) {
  auto is = io::open_in(path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != std::string(detail::kSinogramMagic, 4)) {
    throw DataError("not a CTSG sinogram (bad magic): " + path);
  }
  const auto version = io::read_le<std::uint16_t>(is, path);
  if (version != detail::kSinogramVersion) {
    throw DataError("unsupported CTSG version " + std::to_string(version) + ": " + path);
  }
  Geometry geom;
  geom.num_angles = io::read_le<std::uint32_t>(is, path);
  geom.num_detectors = io::read_le<std::uint32_t>(is, path);
  geom.detector_spacing = io::read_le<double>(is, path);
  geom.image_size = io::read_le<std::uint32_t>(is, path);
  geom.pixel_spacing = io::read_le<double>(is, path);
  geom.validate();
  Sinogram<T> sino(geom.num_angles, geom.num_detectors);
  std::vector<float> buf(sino.data.size());
  io::read_le_array(is, buf.data(), buf.size(), path);
  for (std::size_t k = 0; k < buf.size(); ++k) sino.data[k] = static_cast<T>(buf[k]);
  return {std::move(sino), geom};
}

}  // namespace ctflow::tomo
