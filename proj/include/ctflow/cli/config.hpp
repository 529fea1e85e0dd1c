#pragma once

#include <cstdio>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ctflow/core/error.hpp"
#include "ctflow/core/io.hpp"
#include "ctflow/eval/evaluate.hpp"
#include "ctflow/flow/model.hpp"
#include "ctflow/tomo/dataset.hpp"
#include "ctflow/train/trainer.hpp"

namespace ctflow::cli {

// Merged settings for every subcommand, read from one key=value file with
// [section] headers and overridden by flags. The flow input size is not a
// key of its own: it always mirrors [geometry] image_size.
struct RunConfig {
  tomo::DatasetConfig dataset;        // [geometry], [noise], [dataset]
  flow::FlowConfig flow;              // [flow]
  train::TrainConfig train;           // [train]
  std::string precision = "float";    // [train] precision: float or double
  eval::EvalConfig eval;              // [eval]
  std::size_t recon_n = 100;          // [reconstruct] n
  std::uint64_t recon_seed = 0;       // [reconstruct] seed

  void finalize_and_validate() {
    flow.image_size = dataset.geometry.image_size;
    if (precision != "float" && precision != "double") {
      throw ConfigError("config: [train] precision must be \"float\" or \"double\", got \"" +
                        precision + "\"");
    }
    dataset.validate();
    flow.validate();
    train.validate();
    eval.validate();
    if (recon_n < 1) throw ConfigError("config: [reconstruct] n must be >= 1");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

inline std::size_t parse_size(const std::string& value, const std::string& where) {
  if (value.empty() || value.find_first_not_of("0123456789") != std::string::npos) {
    throw ConfigError(where + ": expected a non-negative integer, got \"" + value + "\"");
  }
  try {
    return static_cast<std::size_t>(std::stoull(value));
  } catch (const std::exception&) {
    throw ConfigError(where + ": integer out of range: \"" + value + "\"");
  }
}

inline std::uint64_t parse_u64(const std::string& value, const std::string& where) {
  return static_cast<std::uint64_t>(parse_size(value, where));
}

inline double parse_double(const std::string& value, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(where + ": expected a number, got \"" + value + "\"");
  }
}

inline bool parse_bool(const std::string& value, const std::string& where) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError(where + ": expected true or false, got \"" + value + "\"");
}

inline std::vector<std::string> split_list(const std::string& value, const std::string& where) {
  std::vector<std::string> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) throw ConfigError(where + ": empty list entry in \"" + value + "\"");
    out.push_back(item);
  }
  if (out.empty()) throw ConfigError(where + ": expected a comma-separated list");
  return out;
}

inline std::vector<std::size_t> parse_size_list(const std::string& value,
                                                const std::string& where) {
  std::vector<std::size_t> out;
  for (const std::string& item : split_list(value, where)) {
    out.push_back(parse_size(item, where));
  }
  return out;
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline bool known_section(const std::string& name) {
  static const char* const kSections[] = {"geometry", "noise",       "dataset", "flow",
                                          "train",    "eval",        "reconstruct"};
  for (const char* s : kSections) {
    if (name == s) return true;
  }
  return false;
}

}  // namespace detail

// Routes one key to its typed field. Unknown sections and keys are errors:
// a misspelled setting must not silently fall back to a default.
inline void apply_key(RunConfig& cfg, const std::string& section, const std::string& key,
                      const std::string& value) {
  using detail::parse_bool;
  using detail::parse_double;
  using detail::parse_size;
  using detail::parse_size_list;
  using detail::parse_u64;
  using detail::split_list;
  const std::string where = "config: [" + section + "] " + key;

  if (section == "geometry") {
    auto& g = cfg.dataset.geometry;
    if (key == "image_size") g.image_size = parse_size(value, where);
    else if (key == "num_angles") g.num_angles = parse_size(value, where);
    else if (key == "num_detectors") g.num_detectors = parse_size(value, where);
    else if (key == "detector_spacing") g.detector_spacing = parse_double(value, where);
    else if (key == "pixel_spacing") g.pixel_spacing = parse_double(value, where);
    else throw ConfigError("config: unknown key \"" + key + "\" in section [geometry]");
  } else if (section == "noise") {
    if (key == "n0_highdose") cfg.dataset.n0_highdose = parse_double(value, where);
    else if (key == "n0_lowdose") cfg.dataset.n0_lowdose = parse_double(value, where);
    else if (key == "clamp_floor") cfg.dataset.clamp_floor = parse_double(value, where);
    else throw ConfigError("config: unknown key \"" + key + "\" in section [noise]");
  } else if (section == "dataset") {
    if (key == "count") cfg.dataset.count = parse_size(value, where);
    else if (key == "seed") cfg.dataset.seed = parse_u64(value, where);
    else if (key == "phantom_family") cfg.dataset.phantom_family = value;
    else throw ConfigError("config: unknown key \"" + key + "\" in section [dataset]");
  } else if (section == "flow") {
    auto& f = cfg.flow;
    if (key == "levels") f.levels = parse_size(value, where);
    else if (key == "conv_quads") f.conv_quads = parse_size(value, where);
    else if (key == "dense_pairs") f.dense_pairs = parse_size(value, where);
    else if (key == "cnn_width1") f.cnn_width1 = parse_size(value, where);
    else if (key == "cnn_width2") f.cnn_width2 = parse_size(value, where);
    else if (key == "dense_width") f.dense_width = parse_size(value, where);
    else if (key == "uncond_width") f.uncond_width = parse_size(value, where);
    else if (key == "cond_divisor") f.cond_divisor = parse_size(value, where);
    else if (key == "clamp_alpha") f.clamp_alpha = parse_double(value, where);
    else if (key == "keeps") f.keeps = parse_size_list(value, where);
    else if (key == "down_kinds") f.down_kinds = split_list(value, where);
    else if (key == "seed") f.seed = parse_u64(value, where);
    else throw ConfigError("config: unknown key \"" + key + "\" in section [flow]");
  } else if (section == "train") {
    auto& t = cfg.train;
    if (key == "steps") t.steps = parse_size(value, where);
    else if (key == "batch_size") t.batch_size = parse_size(value, where);
    else if (key == "learning_rate") t.learning_rate = parse_double(value, where);
    else if (key == "beta1") t.beta1 = parse_double(value, where);
    else if (key == "beta2") t.beta2 = parse_double(value, where);
    else if (key == "epsilon") t.epsilon = parse_double(value, where);
    else if (key == "weight_decay") t.weight_decay = parse_double(value, where);
    else if (key == "clip_norm") t.clip_norm = parse_double(value, where);
    else if (key == "seed") t.seed = parse_u64(value, where);
    else if (key == "checkpoint_every") t.checkpoint_every = parse_size(value, where);
    else if (key == "debug_numerics") t.debug_numerics = parse_bool(value, where);
    else if (key == "precision") {
      if (value != "float" && value != "double") {
        throw ConfigError("config: [train] precision must be \"float\" or \"double\", got \"" +
                          value + "\"");
      }
      cfg.precision = value;
    }
    else throw ConfigError("config: unknown key \"" + key + "\" in section [train]");
  } else if (section == "eval") {
    auto& e = cfg.eval;
    if (key == "n_list") e.n_list = parse_size_list(value, where);
    else if (key == "seed") e.seed = parse_u64(value, where);
    else if (key == "data_range") e.data_range = parse_double(value, where);
    else if (key == "ssim_window") e.ssim_cfg.window = value;
    else if (key == "ssim_window_size") e.ssim_cfg.window_size = parse_size(value, where);
    else if (key == "ssim_sigma") e.ssim_cfg.sigma = parse_double(value, where);
    else if (key == "begin") e.begin = parse_size(value, where);
    else if (key == "count") e.count = parse_size(value, where);
    else throw ConfigError("config: unknown key \"" + key + "\" in section [eval]");
  } else if (section == "reconstruct") {
    if (key == "n") cfg.recon_n = parse_size(value, where);
    else if (key == "seed") cfg.recon_seed = parse_u64(value, where);
    else throw ConfigError("config: unknown key \"" + key + "\" in section [reconstruct]");
  } else {
    throw ConfigError("config: unknown section [" + section + "]");
  }
}

// One flag-style assignment "section.key=value", as taken by --set.
inline void apply_assignment(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
    throw ConfigError("config: override must look like section.key=value, got \"" +
                      assignment + "\"");
  }
  apply_key(cfg, detail::trim(assignment.substr(0, dot)),
            detail::trim(assignment.substr(dot + 1, eq - dot - 1)),
            detail::trim(assignment.substr(eq + 1)));
}

inline RunConfig parse_config_text(const std::string& text, const std::string& origin) {
  RunConfig cfg;
  std::istringstream is(text);
  std::string line;
  std::string section;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    line_no += 1;
    line = detail::trim(line);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    const std::string where = origin + ":" + std::to_string(line_no);
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3) {
        throw ConfigError("config: malformed section header at " + where + ": \"" + line +
                          "\"");
      }
      section = detail::trim(line.substr(1, line.size() - 2));
      if (!detail::known_section(section)) {
        throw ConfigError("config: unknown section [" + section + "] at " + where);
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config: expected key=value at " + where + ": \"" + line + "\"");
    }
    if (section.empty()) {
      throw ConfigError("config: key before any [section] at " + where);
    }
    try {
      apply_key(cfg, section, detail::trim(line.substr(0, eq)),
                detail::trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(std::string(e.what()) + " (" + where + ")");
    }
  }
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  auto is = io::open_in(path, /*binary=*/false);
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_config_text(buf.str(), path);
}

// Every key in canonical order; doubles at full precision so a reparse
// reproduces the exact values.
inline std::string serialize(const RunConfig& cfg) {
  using detail::format_double;
  std::ostringstream os;
  const auto& g = cfg.dataset.geometry;
  os << "[geometry]\n";
  os << "image_size=" << g.image_size << "\n";
  os << "num_angles=" << g.num_angles << "\n";
  os << "num_detectors=" << g.num_detectors << "\n";
  os << "detector_spacing=" << format_double(g.detector_spacing) << "\n";
  os << "pixel_spacing=" << format_double(g.pixel_spacing) << "\n";
  os << "\n[noise]\n";
  os << "n0_highdose=" << format_double(cfg.dataset.n0_highdose) << "\n";
  os << "n0_lowdose=" << format_double(cfg.dataset.n0_lowdose) << "\n";
  os << "clamp_floor=" << format_double(cfg.dataset.clamp_floor) << "\n";
  os << "\n[dataset]\n";
  os << "count=" << cfg.dataset.count << "\n";
  os << "seed=" << cfg.dataset.seed << "\n";
  os << "phantom_family=" << cfg.dataset.phantom_family << "\n";
  const auto& f = cfg.flow;
  os << "\n[flow]\n";
  os << "levels=" << f.levels << "\n";
  os << "conv_quads=" << f.conv_quads << "\n";
  os << "dense_pairs=" << f.dense_pairs << "\n";
  os << "cnn_width1=" << f.cnn_width1 << "\n";
  os << "cnn_width2=" << f.cnn_width2 << "\n";
  os << "dense_width=" << f.dense_width << "\n";
  os << "uncond_width=" << f.uncond_width << "\n";
  os << "cond_divisor=" << f.cond_divisor << "\n";
  os << "clamp_alpha=" << format_double(f.clamp_alpha) << "\n";
  os << "keeps=";
  for (std::size_t i = 0; i < f.keeps.size(); ++i) os << (i ? "," : "") << f.keeps[i];
  os << "\ndown_kinds=";
  for (std::size_t i = 0; i < f.down_kinds.size(); ++i) os << (i ? "," : "") << f.down_kinds[i];
  os << "\nseed=" << f.seed << "\n";
  const auto& t = cfg.train;
  os << "\n[train]\n";
  os << "steps=" << t.steps << "\n";
  os << "batch_size=" << t.batch_size << "\n";
  os << "learning_rate=" << format_double(t.learning_rate) << "\n";
  os << "beta1=" << format_double(t.beta1) << "\n";
  os << "beta2=" << format_double(t.beta2) << "\n";
  os << "epsilon=" << format_double(t.epsilon) << "\n";
  os << "weight_decay=" << format_double(t.weight_decay) << "\n";
  os << "clip_norm=" << format_double(t.clip_norm) << "\n";
  os << "seed=" << t.seed << "\n";
  os << "checkpoint_every=" << t.checkpoint_every << "\n";
  os << "debug_numerics=" << (t.debug_numerics ? "true" : "false") << "\n";
  os << "precision=" << cfg.precision << "\n";
  const auto& e = cfg.eval;
  os << "\n[eval]\n";
  os << "n_list=";
  for (std::size_t i = 0; i < e.n_list.size(); ++i) os << (i ? "," : "") << e.n_list[i];
  os << "\nseed=" << e.seed << "\n";
  os << "data_range=" << format_double(e.data_range) << "\n";
  os << "ssim_window=" << e.ssim_cfg.window << "\n";
  os << "ssim_window_size=" << e.ssim_cfg.window_size << "\n";
  os << "ssim_sigma=" << format_double(e.ssim_cfg.sigma) << "\n";
  os << "begin=" << e.begin << "\n";
  os << "count=" << e.count << "\n";
  os << "\n[reconstruct]\n";
  os << "n=" << cfg.recon_n << "\n";
  os << "seed=" << cfg.recon_seed << "\n";
  return os.str();
}

inline void write_config(const std::string& path, const RunConfig& cfg) {
  auto os = io::open_out(path, /*binary=*/false);
  os << serialize(cfg);
  if (!os) throw DataError("write failed: " + path);
}

}  // namespace ctflow::cli
