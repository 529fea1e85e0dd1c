#pragma once

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ctflow/core/error.hpp"
#include "ctflow/core/rng.hpp"
#include "ctflow/flow/conditioner.hpp"
#include "ctflow/flow/coupling.hpp"
#include "ctflow/flow/downsample.hpp"
#include "ctflow/flow/inv1x1.hpp"
#include "ctflow/grad/parameter.hpp"

namespace ctflow::flow {

// Architecture description. The default is the reduced 64x64 layout; the full
// 352x352 layout from the reference architecture is the same schema with
// image_size=352, conv_quads=3, widths 64/92/512/64 and cond_divisor=1.
struct FlowConfig {
  std::size_t image_size = 64;
  std::size_t levels = 6;
  // Conv levels repeat [coupling k=1, 1x1 conv, coupling k=3, 1x1 conv].
  std::size_t conv_quads = 2;
  // The dense level repeats [random permutation, dense coupling].
  std::size_t dense_pairs = 4;
  std::size_t cnn_width1 = 32;
  std::size_t cnn_width2 = 48;
  std::size_t dense_width = 128;
  std::size_t uncond_width = 32;
  std::size_t cond_divisor = 2;
  double clamp_alpha = 1.5;
  // keeps[i] channels continue after the split that follows conv level i+1;
  // the last entry is the split feeding the dense level.
  std::vector<std::size_t> keeps = {8, 16, 32, 32, 4};
  // Downsample kinds for the sections between conv levels.
  std::vector<std::string> down_kinds = {"irevnet", "irevnet", "irevnet", "haar"};
  std::uint64_t seed = 2024;

  void validate() const {
    if (levels < 2) throw ConfigError("flow: levels must be >= 2");
    const std::size_t halvings = levels - 1;
    if (image_size < (std::size_t(1) << halvings) ||
        image_size % (std::size_t(1) << halvings) != 0) {
      throw ConfigError("flow: image size " + std::to_string(image_size) +
                        " is not divisible by 2^" + std::to_string(halvings));
    }
    if (keeps.size() != levels - 1) {
      throw ConfigError("flow: keeps must list one entry per split, got " +
                        std::to_string(keeps.size()) + " for " + std::to_string(levels) +
                        " levels");
    }
    if (down_kinds.size() != levels - 2) {
      throw ConfigError("flow: down_kinds must have levels-2 entries, got " +
                        std::to_string(down_kinds.size()));
    }
    for (const std::string& kind : down_kinds) {
      if (kind != "haar" && kind != "irevnet") {
        throw ConfigError("flow: unknown downsample kind '" + kind + "'");
      }
    }
    if (conv_quads < 1 || dense_pairs < 1) {
      throw ConfigError("flow: conv_quads and dense_pairs must be >= 1");
    }
    if (cnn_width1 < 1 || cnn_width2 < 1 || dense_width < 1 || uncond_width < 1) {
      throw ConfigError("flow: subnet widths must be >= 1");
    }
    if (cond_divisor < 1) throw ConfigError("flow: cond_divisor must be >= 1");
    if (!(clamp_alpha > 0.0)) throw ConfigError("flow: clamp_alpha must be positive");

    // Trace the channel arithmetic so a bad keep fails at configuration time.
    std::size_t channels = 4;
    for (std::size_t level = 1; level + 1 < levels; ++level) {
      const std::size_t wide = channels * 4;
      const std::size_t keep = keeps[level - 1];
      if (keep < 2 || keep > wide) {
        throw ConfigError("flow: keep " + std::to_string(keep) + " invalid for " +
                          std::to_string(wide) + " channels");
      }
      channels = keep;
    }
    const std::size_t last_keep = keeps.back();
    const std::size_t last_res = image_size >> (levels - 1);
    if (last_keep < 1 || last_keep > channels) {
      throw ConfigError("flow: final keep " + std::to_string(last_keep) + " invalid for " +
                        std::to_string(channels) + " channels");
    }
    if (last_keep * last_res * last_res < 2) {
      throw ConfigError("flow: dense level needs at least 2 features");
    }
  }

  std::string serialize() const {
    std::ostringstream os;
    os << "image_size=" << image_size << "\n";
    os << "levels=" << levels << "\n";
    os << "conv_quads=" << conv_quads << "\n";
    os << "dense_pairs=" << dense_pairs << "\n";
    os << "cnn_width1=" << cnn_width1 << "\n";
    os << "cnn_width2=" << cnn_width2 << "\n";
    os << "dense_width=" << dense_width << "\n";
    os << "uncond_width=" << uncond_width << "\n";
    os << "cond_divisor=" << cond_divisor << "\n";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", clamp_alpha);
    os << "clamp_alpha=" << buf << "\n";
    os << "keeps=";
    for (std::size_t i = 0; i < keeps.size(); ++i) os << (i ? "," : "") << keeps[i];
    os << "\n";
    os << "down_kinds=";
    for (std::size_t i = 0; i < down_kinds.size(); ++i) os << (i ? "," : "") << down_kinds[i];
    os << "\n";
    os << "seed=" << seed << "\n";
    return os.str();
  }

  static FlowConfig parse(const std::string& text) {
    FlowConfig cfg;
    cfg.keeps.clear();
    cfg.down_kinds.clear();
    bool saw_keeps = false, saw_kinds = false;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const std::size_t eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("flow config: bad line '" + line + "'");
      const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
      if (key == "image_size") cfg.image_size = parse_size(key, value);
      else if (key == "levels") cfg.levels = parse_size(key, value);
      else if (key == "conv_quads") cfg.conv_quads = parse_size(key, value);
      else if (key == "dense_pairs") cfg.dense_pairs = parse_size(key, value);
      else if (key == "cnn_width1") cfg.cnn_width1 = parse_size(key, value);
      else if (key == "cnn_width2") cfg.cnn_width2 = parse_size(key, value);
      else if (key == "dense_width") cfg.dense_width = parse_size(key, value);
      else if (key == "uncond_width") cfg.uncond_width = parse_size(key, value);
      else if (key == "cond_divisor") cfg.cond_divisor = parse_size(key, value);
      else if (key == "clamp_alpha") cfg.clamp_alpha = parse_double(key, value);
      else if (key == "seed") cfg.seed = parse_size(key, value);
      else if (key == "keeps") {
        saw_keeps = true;
        for (const std::string& item : split_list(value)) {
          cfg.keeps.push_back(parse_size(key, item));
        }
      } else if (key == "down_kinds") {
        saw_kinds = true;
        for (const std::string& item : split_list(value)) cfg.down_kinds.push_back(item);
      } else {
        throw ConfigError("flow config: unknown key '" + key + "'");
      }
    }
    if (!saw_keeps) cfg.keeps = FlowConfig().keeps;
    if (!saw_kinds) cfg.down_kinds = FlowConfig().down_kinds;
    return cfg;
  }

 private:
  static std::size_t parse_size(const std::string& key, const std::string& value) {
    try {
      std::size_t pos = 0;
      const unsigned long long v = std::stoull(value, &pos);
      if (pos != value.size()) throw std::invalid_argument(value);
      return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
      throw ConfigError("flow config: bad value '" + value + "' for " + key);
    }
  }

  static double parse_double(const std::string& key, const std::string& value) {
    try {
      std::size_t pos = 0;
      const double v = std::stod(value, &pos);
      if (pos != value.size()) throw std::invalid_argument(value);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("flow config: bad value '" + value + "' for " + key);
    }
  }

  static std::vector<std::string> split_list(const std::string& value) {
    std::vector<std::string> items;
    std::string item;
    std::istringstream is(value);
    while (std::getline(is, item, ',')) {
      if (!item.empty()) items.push_back(item);
    }
    return items;
  }
};

// One entry per split output, in the order the forward pass emits them. The
// offsets partition [0, image_size^2).
struct LatentSlice {
  std::size_t offset = 0, count = 0;
  std::size_t channels = 0, height = 0, width = 0;  // zero channels: flat slice
};

// Conditional normalizing flow between images and latent vectors. The forward
// direction maps an image batch to latents plus the per-sample log absolute
// Jacobian determinant; the inverse maps latents back exactly. The
// conditioning features come from the jointly trained Conditioner and enter
// every coupling subnet. Not copyable: submodules hold a pointer to the
// parameter store.
template <typename T>
class FlowModel {
 public:
  explicit FlowModel(const FlowConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    conditioner_ = Conditioner<T>(store_, "cond", cfg.image_size, cfg.levels, cfg.cond_divisor,
                                  rng);

    const T alpha = static_cast<T>(cfg.clamp_alpha);
    std::size_t channels = 4, res = cfg.image_size / 2, offset = 0;
    for (std::size_t level = 1; level + 1 <= cfg.levels; ++level) {
      const bool last_conv = level + 1 == cfg.levels;
      ConvLevel lvl;
      lvl.channels = channels;
      const std::size_t cond_ch = Conditioner<T>::level_channels(level);
      const std::string lp = "flow.l" + std::to_string(level);
      for (std::size_t i = 0; i < 2 * cfg.conv_quads; ++i) {
        const std::size_t kernel = i % 2 == 0 ? 1 : 3;
        lvl.couplings.emplace_back(store_, lp + ".c" + std::to_string(i), channels, cond_ch,
                                   kernel, cfg.cnn_width1, cfg.cnn_width2, alpha, rng);
        lvl.mixers.emplace_back(store_, lp + ".m" + std::to_string(i), channels, rng);
      }
      conv_levels_.push_back(std::move(lvl));
      if (last_conv) {
        // Pre-dense split.
        const std::size_t keep = cfg.keeps[level - 1];
        if (keep > channels) {
          throw ConfigError("flow: final keep " + std::to_string(keep) + " exceeds " +
                            std::to_string(channels) + " channels");
        }
        if (keep < channels) {
          slices_.push_back({offset, (channels - keep) * res * res, channels - keep, res, res});
          offset += slices_.back().count;
        }
        dense_dim_ = keep * res * res;
        pre_dense_keep_ = keep;
        if (dense_dim_ < 2) throw ConfigError("flow: dense level needs at least 2 features");
        break;
      }
      DownSection sec;
      sec.haar = cfg.down_kinds[level - 1] == "haar";
      const std::size_t wide = channels * 4;
      const std::string dp = "flow.d" + std::to_string(level);
      sec.mixer1 = Inv1x1<T>(store_, dp + ".m0", wide, rng);
      sec.coupling1 = ConvCoupling<T>(store_, dp + ".c0", wide, 0, 1, cfg.uncond_width,
                                      cfg.uncond_width, alpha, rng);
      sec.mixer2 = Inv1x1<T>(store_, dp + ".m1", wide, rng);
      sec.coupling2 = ConvCoupling<T>(store_, dp + ".c1", wide, 0, 1, cfg.uncond_width,
                                      cfg.uncond_width, alpha, rng);
      down_sections_.push_back(std::move(sec));

      const std::size_t keep = cfg.keeps[level - 1];
      res /= 2;
      if (keep < 2 || keep > wide) {
        throw ConfigError("flow: keep " + std::to_string(keep) + " invalid for " +
                          std::to_string(wide) + " channels");
      }
      if (keep < wide) {
        slices_.push_back({offset, (wide - keep) * res * res, wide - keep, res, res});
        offset += slices_.back().count;
      }
      channels = keep;
    }

    const std::size_t cond_dim = conditioner_.vector_dim();
    for (std::size_t p = 0; p < cfg.dense_pairs; ++p) {
      std::vector<std::size_t> perm(dense_dim_);
      std::iota(perm.begin(), perm.end(), std::size_t(0));
      rng.shuffle(perm);
      Tensor<T> stored = Tensor<T>::zeros({dense_dim_});
      for (std::size_t i = 0; i < dense_dim_; ++i) stored.ptr()[i] = static_cast<T>(perm[i]);
      store_.add("flow.dense.perm" + std::to_string(p), stored, false);
      dense_couplings_.emplace_back(store_, "flow.dense.c" + std::to_string(p), dense_dim_,
                                    cond_dim, cfg.dense_width, alpha, rng);
    }
    slices_.push_back({offset, dense_dim_, 0, 0, 0});
    offset += dense_dim_;
    if (offset != cfg.image_size * cfg.image_size) {
      throw ConfigError("flow: latent dimension " + std::to_string(offset) +
                        " does not match pixel count");
    }
    total_dim_ = offset;
  }

  FlowModel(const FlowModel&) = delete;
  FlowModel& operator=(const FlowModel&) = delete;

  const FlowConfig& config() const { return cfg_; }
  ParameterStore<T>& parameters() { return store_; }
  const std::vector<LatentSlice>& latent_layout() const { return slices_; }
  std::size_t total_dim() const { return total_dim_; }

  // Registers every trainable parameter on the tape. Must run before a
  // recorded forward pass so gradients reach the parameters.
  void watch_parameters(Tape<T>& tape) {
    for (Parameter<T>& p : store_.all()) {
      if (p.trainable) tape.watch(p.value);
    }
  }

  std::vector<Tensor<T>> condition(Tape<T>* tape, const Tensor<T>& fbp, bool train) {
    return conditioner_.forward(tape, fbp, train);
  }

  // (z, logdet) for an image batch [N,1,S,S] under the given per-level
  // conditioning features.
  std::pair<Tensor<T>, Tensor<T>> forward(Tape<T>* tape, const Tensor<T>& x,
                                          const std::vector<Tensor<T>>& features) const {
    grad::require_rank(x, 4, "flow input");
    if (x.dim(1) != 1 || x.dim(2) != cfg_.image_size || x.dim(3) != cfg_.image_size) {
      throw DimensionError("flow: expected [N,1," + std::to_string(cfg_.image_size) + "," +
                           std::to_string(cfg_.image_size) + "], got " + grad::shape_string(x.shape));
    }
    if (features.size() != cfg_.levels) {
      throw DimensionError("flow: expected " + std::to_string(cfg_.levels) +
                           " feature tensors, got " + std::to_string(features.size()));
    }
    const std::size_t n = x.dim(0);
    Tensor<T> h = irevnet_downsample(tape, x);
    Tensor<T> logdet;
    std::vector<Tensor<T>> parts;
    std::size_t slice_idx = 0;

    for (std::size_t level = 1; level + 1 <= cfg_.levels; ++level) {
      const ConvLevel& lvl = conv_levels_[level - 1];
      for (std::size_t i = 0; i < lvl.couplings.size(); ++i) {
        auto [v, ld] = lvl.couplings[i].forward(tape, h, features[level - 1]);
        h = v;
        add_logdet(tape, logdet, ld);
        auto [m, mld] = lvl.mixers[i].forward(tape, h);
        h = m;
        add_logdet(tape, logdet, mld);
      }
      if (level + 1 == cfg_.levels) {
        if (pre_dense_keep_ < lvl.channels) {
          emit(tape, parts, h, slice_idx, pre_dense_keep_, lvl.channels);
          h = grad::slice_axis1(tape, h, 0, pre_dense_keep_);
        }
        h = grad::reshape(tape, h, {n, dense_dim_});
        break;
      }
      const DownSection& sec = down_sections_[level - 1];
      h = sec.haar ? haar_downsample(tape, h) : irevnet_downsample(tape, h);
      {
        auto [m, mld] = sec.mixer1.forward(tape, h);
        h = m;
        add_logdet(tape, logdet, mld);
        auto [v, ld] = sec.coupling1.forward(tape, h, Tensor<T>());
        h = v;
        add_logdet(tape, logdet, ld);
        auto [m2, mld2] = sec.mixer2.forward(tape, h);
        h = m2;
        add_logdet(tape, logdet, mld2);
        auto [v2, ld2] = sec.coupling2.forward(tape, h, Tensor<T>());
        h = v2;
        add_logdet(tape, logdet, ld2);
      }
      const std::size_t wide = h.dim(1), keep = cfg_.keeps[level - 1];
      if (keep < wide) {
        emit(tape, parts, h, slice_idx, keep, wide);
        h = grad::slice_axis1(tape, h, 0, keep);
      }
    }

    const Tensor<T>& vec = features[cfg_.levels - 1];
    for (std::size_t p = 0; p < dense_couplings_.size(); ++p) {
      h = permute_axis1(tape, h, permutation(p));
      auto [v, ld] = dense_couplings_[p].forward(tape, h, vec);
      h = v;
      add_logdet(tape, logdet, ld);
    }
    parts.push_back(h);

    Tensor<T> z = parts[0];
    for (std::size_t i = 1; i < parts.size(); ++i) z = grad::concat_axis1(tape, z, parts[i]);
    if (z.dim(1) != total_dim_) throw DimensionError("flow: latent bookkeeping mismatch");
    if (!logdet.data) logdet = Tensor<T>::zeros({n});
    return {z, logdet};
  }

  Tensor<T> inverse(const Tensor<T>& z, const std::vector<Tensor<T>>& features) const {
    grad::require_rank(z, 2, "flow latent");
    if (z.dim(1) != total_dim_) {
      throw DimensionError("flow: latent dimension mismatch, got " + grad::shape_string(z.shape));
    }
    if (features.size() != cfg_.levels) {
      throw DimensionError("flow: expected " + std::to_string(cfg_.levels) +
                           " feature tensors, got " + std::to_string(features.size()));
    }
    const std::size_t n = z.dim(0);
    std::vector<Tensor<T>> parts;
    for (const LatentSlice& s : slices_) {
      Tensor<T> part = grad::slice_axis1<T>(nullptr, z, s.offset, s.offset + s.count);
      if (s.channels > 0) {
        part = grad::reshape<T>(nullptr, part, {n, s.channels, s.height, s.width});
      }
      parts.push_back(part);
    }

    Tensor<T> h = parts.back();
    std::size_t slice_idx = slices_.size() - 1;
    const Tensor<T>& vec = features[cfg_.levels - 1];
    for (std::size_t p = dense_couplings_.size(); p-- > 0;) {
      h = dense_couplings_[p].inverse(h, vec);
      h = unpermute_axis1<T>(nullptr, h, permutation(p));
    }

    const std::size_t last_res = cfg_.image_size >> (cfg_.levels - 1);
    h = grad::reshape<T>(nullptr, h, {n, pre_dense_keep_, last_res, last_res});

    for (std::size_t level = cfg_.levels - 1; level >= 1; --level) {
      const ConvLevel& lvl = conv_levels_[level - 1];
      if (level + 1 == cfg_.levels) {
        if (pre_dense_keep_ < lvl.channels) {
          h = grad::concat_axis1<T>(nullptr, h, parts[--slice_idx]);
        }
      }
      for (std::size_t i = lvl.couplings.size(); i-- > 0;) {
        h = lvl.mixers[i].inverse(h);
        h = lvl.couplings[i].inverse(h, features[level - 1]);
      }
      if (level == 1) break;
      const DownSection& sec = down_sections_[level - 2];
      const std::size_t keep = cfg_.keeps[level - 2];
      const std::size_t wide = conv_levels_[level - 2].channels * 4;
      if (keep < wide) h = grad::concat_axis1<T>(nullptr, h, parts[--slice_idx]);
      h = sec.coupling2.inverse(h, Tensor<T>());
      h = sec.mixer2.inverse(h);
      h = sec.coupling1.inverse(h, Tensor<T>());
      h = sec.mixer1.inverse(h);
      h = sec.haar ? haar_upsample<T>(nullptr, h) : irevnet_upsample<T>(nullptr, h);
    }
    return irevnet_upsample<T>(nullptr, h);
  }

  void save(const std::string& path) {
    conditioner_.push_running_stats();
    store_.save(path, cfg_.serialize());
  }

  static std::unique_ptr<FlowModel<T>> load(const std::string& path) {
    const FlowConfig cfg = FlowConfig::parse(grad::read_checkpoint_config(path));
    auto model = std::make_unique<FlowModel<T>>(cfg);
    model->store_.load(path);
    model->conditioner_.pull_running_stats();
    return model;
  }

 private:
  struct ConvLevel {
    std::size_t channels = 0;
    std::vector<ConvCoupling<T>> couplings;
    std::vector<Inv1x1<T>> mixers;
  };
  struct DownSection {
    bool haar = false;
    Inv1x1<T> mixer1, mixer2;
    ConvCoupling<T> coupling1, coupling2;
  };

  static void add_logdet(Tape<T>* tape, Tensor<T>& total, const Tensor<T>& part) {
    total = total.data ? grad::add(tape, total, part) : part;
  }

  void emit(Tape<T>* tape, std::vector<Tensor<T>>& parts, const Tensor<T>& h,
            std::size_t& slice_idx, std::size_t keep, std::size_t wide) const {
    const LatentSlice& s = slices_[slice_idx++];
    Tensor<T> out = grad::slice_axis1(tape, h, keep, wide);
    parts.push_back(grad::reshape(tape, out, {h.dim(0), s.count}));
  }

  std::vector<std::size_t> permutation(std::size_t index) const {
    const Tensor<T>& stored = store_.at("flow.dense.perm" + std::to_string(index)).value;
    std::vector<std::size_t> perm(stored.numel());
    for (std::size_t i = 0; i < perm.size(); ++i) {
      perm[i] = static_cast<std::size_t>(stored.ptr()[i]);
    }
    return perm;
  }

  FlowConfig cfg_;
  ParameterStore<T> store_;
  Conditioner<T> conditioner_;
  std::vector<ConvLevel> conv_levels_;
  std::vector<DownSection> down_sections_;
  std::vector<DenseCoupling<T>> dense_couplings_;
  std::vector<LatentSlice> slices_;
  std::size_t dense_dim_ = 0, pre_dense_keep_ = 0, total_dim_ = 0;
};

}  // namespace ctflow::flow
