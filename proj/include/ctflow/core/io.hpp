#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "ctflow/core/error.hpp"

namespace ctflow {

// Fixed-width little-endian primitives for the binary file formats.
namespace io {

template <typename T>
void write_le(std::ostream& os, T value) {
  static_assert(std::is_arithmetic_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T read_le(std::istream& is, const std::string& path) {
  unsigned char bytes[sizeof(T)];
  is.read(reinterpret_cast<char*>(bytes), sizeof(T));
  if (!is) throw DataError("unexpected end of file: " + path);
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

template <typename T>
void write_le_array(std::ostream& os, const T* data, std::size_t count) {
  for (std::size_t i = 0; i < count; ++i) write_le(os, data[i]);
}

template <typename T>
void read_le_array(std::istream& is, T* data, std::size_t count, const std::string& path) {
  for (std::size_t i = 0; i < count; ++i) data[i] = read_le<T>(is, path);
}

inline std::ofstream open_out(const std::string& path, bool binary = true) {
  std::ofstream os(path, binary ? std::ios::binary : std::ios::out);
  if (!os) throw DataError("cannot open for writing: " + path);
  return os;
}

inline std::ifstream open_in(const std::string& path, bool binary = true) {
  std::ifstream is(path, binary ? std::ios::binary : std::ios::in);
  if (!is) throw DataError("cannot open for reading: " + path);
  return is;
}

}  // namespace io

// 16-bit binary PGM (P5, maxval 65535, big-endian samples). The window
// [lo, hi] maps linearly onto the full range; values outside it clamp.
template <typename T>
void write_pgm16(const std::string& path, const T* data, std::size_t rows, std::size_t cols,
                 double lo, double hi) {
  if (!(hi > lo)) throw ConfigError("write_pgm16: need hi > lo");
  if (rows == 0 || cols == 0) throw DimensionError("write_pgm16: empty image");
  auto os = io::open_out(path);
  os << "P5\n" << cols << " " << rows << "\n65535\n";
  for (std::size_t i = 0; i < rows * cols; ++i) {
    const double unit = (static_cast<double>(data[i]) - lo) / (hi - lo);
    const auto q = static_cast<std::uint16_t>(std::lround(std::clamp(unit, 0.0, 1.0) * 65535.0));
    os.put(static_cast<char>(q >> 8));
    os.put(static_cast<char>(q & 0xff));
  }
  if (!os) throw DataError("write failed: " + path);
}

}  // namespace ctflow
