#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "ctflow/core/error.hpp"
#include "ctflow/core/rng.hpp"
#include "ctflow/grad/ops.hpp"
#include "ctflow/grad/parameter.hpp"
#include "ctflow/grad/tape.hpp"
#include "ctflow/grad/tensor.hpp"
#include "ctflow/flow/subnet.hpp"

namespace ctflow::flow {

// Feature extractor for the conditional input. One stage per flow level; the
// output of stage L is the conditioning input of level L. Stages halve the
// resolution once each, so stage outputs line up with the flow's per-level
// resolutions; the final stage pools to a per-sample feature vector. Batch
// norm running statistics are mirrored into untrainable parameters so they
// travel with the checkpoint.
template <typename T>
class Conditioner {
 public:
  Conditioner() = default;

  Conditioner(ParameterStore<T>& store, const std::string& prefix, std::size_t image_size,
              std::size_t levels, std::size_t divisor, Rng& rng)
      : store_(&store), prefix_(prefix), levels_(levels) {
    if (levels < 2) throw ConfigError("conditioner: needs at least 2 levels");
    if (divisor == 0) throw ConfigError("conditioner: divisor must be positive");
    const std::size_t halvings = levels - 1;
    if (image_size % (std::size_t(1) << halvings) != 0) {
      throw ConfigError("conditioner: image size " + std::to_string(image_size) +
                        " is not divisible by 2^" + std::to_string(halvings));
    }
    auto w = [divisor](std::size_t width) { return std::max<std::size_t>(1, width / divisor); };
    vector_dim_ = w(256);

    if (levels == 6) {
      begin_stage();
      conv(1, w(32), 3, 2, rng);
      lrelu();
      conv(w(32), w(64), 3, 1, rng);
      lrelu();
      conv(w(64), w(128), 3, 1, rng);
      bn(w(128));
      lrelu();
      conv(w(128), w(64), 3, 1, rng);
      bn(w(64));
      lrelu();
      conv(w(64), w(32), 3, 1, rng);
      bn(w(32));
      lrelu();
      conv(w(32), 4, 3, 1, rng);
      bn(4);

      begin_stage();
      lrelu();
      conv(4, w(32), 3, 2, rng);
      bn(w(32));
      lrelu();
      conv(w(32), w(32), 1, 1, rng);
      lrelu();
      conv(w(32), w(32), 3, 1, rng);
      bn(w(32));
      lrelu();
      conv(w(32), 8, 3, 1, rng);
      bn(8);

      begin_stage();
      lrelu();
      conv(8, w(32), 1, 1, rng);
      lrelu();
      conv(w(32), w(64), 3, 2, rng);
      lrelu();
      conv(w(64), 16, 3, 1, rng);
      bn(16);

      begin_stage();
      lrelu();
      conv(16, w(64), 1, 1, rng);
      lrelu();
      conv(w(64), w(64), 3, 2, rng);
      lrelu();
      conv(w(64), 32, 3, 1, rng);
      bn(32);

      begin_stage();
      lrelu();
      conv(32, w(96), 1, 1, rng);
      lrelu();
      conv(w(96), w(128), 3, 2, rng);
      lrelu();
      conv(w(128), 32, 1, 1, rng);
      bn(32);

      begin_stage();
      lrelu();
      conv(32, w(64), 3, 2, rng);
      lrelu();
      conv(w(64), vector_dim_, 3, 2, rng);
      lrelu();
      pool_flatten();
      bn(vector_dim_);
    } else {
      // Reduced stage templates for small test models: the same conv/BN
      // pattern, one resolution halving per stage.
      std::size_t prev = level_channels(1);
      begin_stage();
      conv(1, w(32), 3, 2, rng);
      lrelu();
      conv(w(32), prev, 3, 1, rng);
      bn(prev);
      for (std::size_t level = 2; level <= levels - 1; ++level) {
        const std::size_t c_out = level_channels(level);
        begin_stage();
        lrelu();
        conv(prev, w(32), 1, 1, rng);
        lrelu();
        conv(w(32), w(64), 3, 2, rng);
        lrelu();
        conv(w(64), c_out, 3, 1, rng);
        bn(c_out);
        prev = c_out;
      }
      begin_stage();
      lrelu();
      conv(prev, w(64), 3, 2, rng);
      lrelu();
      conv(w(64), vector_dim_, 3, 2, rng);
      lrelu();
      pool_flatten();
      bn(vector_dim_);
    }
  }

  // Channel count of the level-L conditioning feature map (conv levels only).
  static std::size_t level_channels(std::size_t level) {
    static constexpr std::size_t table[5] = {4, 8, 16, 32, 32};
    return table[std::min<std::size_t>(level, 5) - 1];
  }

  std::size_t levels() const { return levels_; }
  std::size_t vector_dim() const { return vector_dim_; }

  // Returns one feature tensor per level; the last entry is the [N, vec]
  // vector for the dense level, all others are [N, C, res, res] maps.
  std::vector<Tensor<T>> forward(Tape<T>* tape, const Tensor<T>& x, bool train) {
    grad::require_rank(x, 4, "conditioner input");
    if (x.dim(1) != 1) throw DimensionError("conditioner: expects a single input channel");
    std::vector<Tensor<T>> features;
    features.reserve(stages_.size());
    Tensor<T> h = x;
    for (const Stage& stage : stages_) {
      for (const Layer& layer : stage) {
        switch (layer.kind) {
          case Layer::kConv:
            h = grad::conv2d(tape, h, store_->at(layer.name + ".w").value,
                             store_->at(layer.name + ".b").value, layer.stride,
                             (layer.kernel - 1) / 2);
            break;
          case Layer::kBn:
            h = grad::batch_norm(tape, h, store_->at(layer.name + ".gamma").value,
                                 store_->at(layer.name + ".beta").value,
                                 bn_states_[layer.state], train);
            break;
          case Layer::kLrelu:
            h = grad::leaky_relu(tape, h, T(kLeakySlope));
            break;
          case Layer::kPoolFlatten: {
            Tensor<T> pooled = grad::avg_pool_global(tape, h);
            h = grad::reshape(tape, pooled, {pooled.dim(0), pooled.dim(1), 1, 1});
            break;
          }
        }
      }
      features.push_back(h);
    }
    // The vector feature leaves as rank 2.
    Tensor<T>& last = features.back();
    last = grad::reshape(tape, last, {last.dim(0), last.dim(1)});
    return features;
  }

  // Copy batch norm running statistics into their checkpoint parameters.
  void push_running_stats() {
    for (std::size_t i = 0; i < bn_states_.size(); ++i) {
      Tensor<T>& mean = store_->at(bn_names_[i] + ".running_mean").value;
      Tensor<T>& var = store_->at(bn_names_[i] + ".running_var").value;
      std::copy(bn_states_[i].running_mean.begin(), bn_states_[i].running_mean.end(),
                mean.ptr());
      std::copy(bn_states_[i].running_var.begin(), bn_states_[i].running_var.end(), var.ptr());
    }
  }

  // Restore batch norm running statistics from checkpoint parameters.
  void pull_running_stats() {
    for (std::size_t i = 0; i < bn_states_.size(); ++i) {
      const Tensor<T>& mean = store_->at(bn_names_[i] + ".running_mean").value;
      const Tensor<T>& var = store_->at(bn_names_[i] + ".running_var").value;
      std::copy(mean.ptr(), mean.ptr() + mean.numel(), bn_states_[i].running_mean.begin());
      std::copy(var.ptr(), var.ptr() + var.numel(), bn_states_[i].running_var.begin());
    }
  }

 private:
  struct Layer {
    enum Kind { kConv, kBn, kLrelu, kPoolFlatten } kind;
    std::string name;
    std::size_t kernel = 0, stride = 0, state = 0;
  };
  using Stage = std::vector<Layer>;

  void begin_stage() { stages_.emplace_back(); }

  std::string layer_name(const char* tag) {
    return prefix_ + ".s" + std::to_string(stages_.size()) + "." + tag +
           std::to_string(stages_.back().size());
  }

  void conv(std::size_t c_in, std::size_t c_out, std::size_t k, std::size_t stride, Rng& rng) {
    Layer layer{Layer::kConv, layer_name("conv"), k, stride, 0};
    store_->add(layer.name + ".w", detail::he_normal<T>(rng, {c_out, c_in, k, k}, c_in * k * k));
    store_->add(layer.name + ".b", Tensor<T>::zeros({c_out}));
    stages_.back().push_back(std::move(layer));
  }

  void bn(std::size_t channels) {
    Layer layer{Layer::kBn, layer_name("bn"), 0, 0, bn_states_.size()};
    store_->add(layer.name + ".gamma", Tensor<T>::full({channels}, T(1)));
    store_->add(layer.name + ".beta", Tensor<T>::zeros({channels}));
    store_->add(layer.name + ".running_mean", Tensor<T>::zeros({channels}), false);
    store_->add(layer.name + ".running_var", Tensor<T>::full({channels}, T(1)), false);
    bn_states_.emplace_back(channels);
    bn_names_.push_back(layer.name);
    stages_.back().push_back(std::move(layer));
  }

  void lrelu() { stages_.back().push_back(Layer{Layer::kLrelu, "", 0, 0, 0}); }

  void pool_flatten() { stages_.back().push_back(Layer{Layer::kPoolFlatten, "", 0, 0, 0}); }

  ParameterStore<T>* store_ = nullptr;
  std::string prefix_;
  std::size_t levels_ = 0, vector_dim_ = 0;
  std::vector<Stage> stages_;
  std::vector<grad::BatchNormState<T>> bn_states_;
  std::vector<std::string> bn_names_;
};

}  // namespace ctflow::flow
