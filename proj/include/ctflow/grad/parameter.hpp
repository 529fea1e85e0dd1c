#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "ctflow/core/io.hpp"
#include "ctflow/grad/tensor.hpp"

namespace ctflow::grad {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  bool trainable = true;
  std::vector<T> grad;
  std::vector<T> moment1;
  std::vector<T> moment2;
};

// Ordered collection of named parameters. Order is the model build order and
// fixes the checkpoint layout, so loads are strict: same names, same shapes,
// same order.
template <typename T>
class ParameterStore {
 public:
  Parameter<T>& add(const std::string& name, Tensor<T> value, bool trainable = true) {
    if (index_.count(name)) throw ConfigError("parameter already registered: " + name);
    index_[name] = params_.size();
    params_.push_back(Parameter<T>{name, std::move(value), trainable, {}, {}, {}});
    return params_.back();
  }

  Parameter<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return params_[it->second];
  }

  const Parameter<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return params_[it->second];
  }

  std::vector<Parameter<T>>& all() { return params_; }
  const std::vector<Parameter<T>>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }

  // Checkpoint container: magic, version, parameter records, then a trailing
  // length-prefixed config text block. Readers that only want tensors can
  // stop after the records.
  void save(const std::string& path, const std::string& config_text = "") const {
    auto os = io::open_out(path);
    os.write(kMagic, 4);
    io::write_le<std::uint16_t>(os, kVersion);
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(params_.size()));
    for (const Parameter<T>& p : params_) {
      io::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(p.name.size()));
      os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
      io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(p.value.shape.size()));
      for (std::size_t d : p.value.shape) {
        io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
      }
      for (const T v : *p.value.data) io::write_le<float>(os, static_cast<float>(v));
    }
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(config_text.size()));
    os.write(config_text.data(), static_cast<std::streamsize>(config_text.size()));
    if (!os) throw DataError("write failed: " + path);
  }

  // Loads values into an already-built store. Returns the config text block.
  std::string load(const std::string& path) {
    auto is = io::open_in(path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != std::string(kMagic, 4)) {
      throw DataError("not a checkpoint (bad magic): " + path);
    }
    const auto version = io::read_le<std::uint16_t>(is, path);
    if (version != kVersion) {
      throw DataError("unsupported checkpoint version " + std::to_string(version) + ": " + path);
    }
    const auto count = io::read_le<std::uint32_t>(is, path);
    if (count != params_.size()) {
      throw DataError("checkpoint holds " + std::to_string(count) + " parameters, model has " +
                      std::to_string(params_.size()) + ": " + path);
    }
    for (Parameter<T>& p : params_) {
      const auto name_len = io::read_le<std::uint16_t>(is, path);
      std::string name(name_len, '\0');
      is.read(name.data(), name_len);
      if (!is || name != p.name) {
        throw DataError("checkpoint parameter order mismatch at " + p.name + ": " + path);
      }
      const auto rank = io::read_le<std::uint8_t>(is, path);
      std::vector<std::size_t> shape(rank);
      for (auto& d : shape) d = io::read_le<std::uint32_t>(is, path);
      if (shape != p.value.shape) {
        throw DataError("checkpoint shape mismatch for " + p.name + ": " + path);
      }
      for (T& v : *p.value.data) v = static_cast<T>(io::read_le<float>(is, path));
    }
    const auto config_len = io::read_le<std::uint32_t>(is, path);
    std::string config(config_len, '\0');
    is.read(config.data(), config_len);
    if (!is) throw DataError("unexpected end of file: " + path);
    return config;
  }

  static constexpr char kMagic[4] = {'C', 'T', 'C', 'K'};
  static constexpr std::uint16_t kVersion = 1;

 private:
  std::vector<Parameter<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Reads only the trailing config block of a checkpoint, skipping tensor data.
inline std::string read_checkpoint_config(const std::string& path) {
  auto is = io::open_in(path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "CTCK") {
    throw DataError("not a checkpoint (bad magic): " + path);
  }
  io::read_le<std::uint16_t>(is, path);
  const auto count = io::read_le<std::uint32_t>(is, path);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = io::read_le<std::uint16_t>(is, path);
    is.seekg(name_len, std::ios::cur);
    const auto rank = io::read_le<std::uint8_t>(is, path);
    std::size_t numel = 1;
    for (std::uint8_t d = 0; d < rank; ++d) numel *= io::read_le<std::uint32_t>(is, path);
    is.seekg(static_cast<std::streamoff>(numel * sizeof(float)), std::ios::cur);
    if (!is) throw DataError("unexpected end of file: " + path);
  }
  const auto config_len = io::read_le<std::uint32_t>(is, path);
  std::string config(config_len, '\0');
  is.read(config.data(), config_len);
  if (!is) throw DataError("unexpected end of file: " + path);
  return config;
}

}  // namespace ctflow::grad
