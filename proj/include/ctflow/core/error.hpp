#pragma once

#include <stdexcept>
#include <string>

namespace ctflow {

// Shape or size disagreement between an operand and what the operation expects.
class DimensionError : public std::invalid_argument {
 public:
  explicit DimensionError(const std::string& what) : std::invalid_argument(what) {}
};

// Invalid configuration value, unknown key, or inconsistent settings.
class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(const std::string& what) : std::invalid_argument(what) {}
};

// I/O failure or malformed data file; message carries the path.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// Numerical diagnostic (NaN/Inf where finite values are required).
class DiagnosticError : public std::runtime_error {
 public:
  explicit DiagnosticError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace ctflow
