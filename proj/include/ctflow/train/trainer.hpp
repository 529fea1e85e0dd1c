#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "ctflow/core/error.hpp"
#include "ctflow/core/io.hpp"
#include "ctflow/core/rng.hpp"
#include "ctflow/flow/model.hpp"
#include "ctflow/tomo/dataset.hpp"
#include "ctflow/train/adam.hpp"
#include "ctflow/train/loss.hpp"

namespace ctflow::train {

struct TrainConfig {
  std::size_t steps = 6000;
  std::size_t batch_size = 10;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 1e-5;
  double clip_norm = 10.0;       // 0 disables clipping
  std::uint64_t seed = 1;
  std::size_t checkpoint_every = 1000;  // 0 keeps only the final checkpoint
  bool debug_numerics = false;   // per-op finiteness checks while training

  void validate() const {
    if (steps < 1) throw ConfigError("train: steps must be >= 1");
    if (batch_size < 2) {
      throw ConfigError("train: batch_size must be >= 2 (batch norm needs batch statistics)");
    }
    if (clip_norm < 0) throw ConfigError("train: clip_norm must be >= 0 (0 disables it)");
    adam().validate();
  }

  AdamConfig adam() const {
    return AdamConfig{learning_rate, beta1, beta2, epsilon, weight_decay};
  }
};

struct LossRecord {
  std::size_t step = 0;
  double nll = 0.0;        // nats per sample
  double grad_norm = 0.0;  // pre-clip
  double seconds = 0.0;    // wall time of the step
};

struct TrainResult {
  std::vector<LossRecord> log;
  std::string checkpoint_path;
  double initial_nll = 0.0;
  double final_nll = 0.0;
};

// Stacks the selected pairs into an [N,1,S,S] batch, reference or FBP plane.
template <typename T>
Tensor<T> batch_tensor(const tomo::Dataset<T>& ds, const std::vector<std::size_t>& idx,
                       bool use_fbp) {
  const std::size_t s = ds.geometry.image_size;
  Tensor<T> out = Tensor<T>::zeros({idx.size(), 1, s, s});
  T* dst = out.ptr();
  for (std::size_t b = 0; b < idx.size(); ++b) {
    if (idx[b] >= ds.pairs.size()) throw DataError("batch_tensor: index out of range");
    const tomo::Image<T>& img =
        use_fbp ? ds.pairs[idx[b]].fbp : ds.pairs[idx[b]].reference;
    std::copy(img.data.begin(), img.data.end(), dst + b * s * s);
  }
  return out;
}

// Wall time stays out of the file so equal seeds write equal bytes.
inline void write_loss_log(const std::string& path, const std::vector<LossRecord>& log) {
  auto os = io::open_out(path, /*binary=*/false);
  os << "step,nll,grad_norm\n" << std::setprecision(17);
  for (const LossRecord& r : log) {
    os << r.step << ',' << r.nll << ',' << r.grad_norm << '\n';
  }
  if (!os) throw DataError("write failed: " + path);
}

// Average NLL over pairs [begin, begin+count), eval-mode batch norm, no tape.
template <typename T>
double evaluate_nll(flow::FlowModel<T>& model, const tomo::Dataset<T>& ds,
                    std::size_t begin, std::size_t count, std::size_t batch_size = 16) {
  if (count == 0 || batch_size == 0) throw ConfigError("evaluate_nll: empty range");
  if (begin + count > ds.pairs.size()) {
    throw DataError("evaluate_nll: range exceeds dataset size " +
                    std::to_string(ds.pairs.size()));
  }
  double total = 0.0;
  std::size_t done = 0;
  while (done < count) {
    const std::size_t b = std::min(batch_size, count - done);
    std::vector<std::size_t> idx(b);
    std::iota(idx.begin(), idx.end(), begin + done);
    Tensor<T> x = batch_tensor(ds, idx, /*use_fbp=*/false);
    Tensor<T> fbp = batch_tensor(ds, idx, /*use_fbp=*/true);
    const std::vector<Tensor<T>> features = model.condition(nullptr, fbp, /*train=*/false);
    const auto [z, logdet] = model.forward(nullptr, x, features);
    const std::size_t d = z.dim(1);
    for (std::size_t i = 0; i < b; ++i) {
      double energy = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double v = static_cast<double>(z.ptr()[i * d + j]);
        energy += v * v;
      }
      total += 0.5 * energy - static_cast<double>(logdet.ptr()[i]);
    }
    done += b;
  }
  return total / static_cast<double>(count);
}

// Optimization loop: shuffled batches, recorded forward, NLL, backward,
// clipped Adam. Checkpoints land in out_dir ("step_<k>.ctck" at the cadence,
// "final.ctck" at the end) next to a loss.csv log. A non-finite loss or
// gradient aborts the run; the log so far is flushed and the last written
// checkpoint stays in place.
template <typename T>
TrainResult train_flow(flow::FlowModel<T>& model, const tomo::Dataset<T>& ds,
                       const TrainConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  if (ds.pairs.empty()) throw DataError("train: dataset is empty");
  if (ds.geometry.image_size != model.config().image_size) {
    throw DimensionError("train: dataset image size " +
                         std::to_string(ds.geometry.image_size) +
                         " does not match flow input " +
                         std::to_string(model.config().image_size));
  }
  std::filesystem::create_directories(out_dir);
  const bool saved_checks = grad::debug_checks();
  grad::debug_checks() = cfg.debug_numerics;
  const AdamConfig adam = cfg.adam();
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(ds.pairs.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();  // forces a shuffle before the first batch

  TrainResult result;
  std::string last_checkpoint;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const auto start = std::chrono::steady_clock::now();
    std::vector<std::size_t> idx(cfg.batch_size);
    for (std::size_t& k : idx) {
      if (cursor == order.size()) {
        rng.shuffle(order);
        cursor = 0;
      }
      k = order[cursor++];
    }
    Tensor<T> x = batch_tensor(ds, idx, /*use_fbp=*/false);
    Tensor<T> fbp = batch_tensor(ds, idx, /*use_fbp=*/true);

    double nll_value = 0.0;
    double grad_norm = 0.0;
    try {
      Tape<T> tape;
      model.watch_parameters(tape);
      const std::vector<Tensor<T>> features = model.condition(&tape, fbp, /*train=*/true);
      const auto [z, logdet] = model.forward(&tape, x, features);
      const Tensor<T> loss = nll_loss(&tape, z, logdet);
      nll_value = static_cast<double>(loss.ptr()[0]);
      if (!std::isfinite(nll_value)) throw DiagnosticError("train: non-finite loss");
      tape.backward(loss);
      collect_gradients(tape, model.parameters());
      grad_norm = clip_gradients(model.parameters(), cfg.clip_norm);
      if (!std::isfinite(grad_norm)) {
        throw DiagnosticError("train: non-finite gradient norm");
      }
    } catch (const DiagnosticError& err) {
      grad::debug_checks() = saved_checks;
      write_loss_log(out_dir + "/loss.csv", result.log);
      throw DiagnosticError(
          "train: aborted at step " + std::to_string(step) + " (" + err.what() + "); " +
          (last_checkpoint.empty() ? "no checkpoint was written"
                                   : "last good checkpoint: " + last_checkpoint));
    }
    adam_step(model.parameters(), adam, step);

    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.log.push_back(LossRecord{step, nll_value, grad_norm, seconds});
    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.steps) {
      last_checkpoint = out_dir + "/step_" + std::to_string(step) + ".ctck";
      model.save(last_checkpoint);
    }
  }
  grad::debug_checks() = saved_checks;
  result.checkpoint_path = out_dir + "/final.ctck";
  model.save(result.checkpoint_path);
  write_loss_log(out_dir + "/loss.csv", result.log);
  result.initial_nll = result.log.front().nll;
  result.final_nll = result.log.back().nll;
  return result;
}

// Command-line entry: load the dataset, build a freshly initialized model,
// train it, leave checkpoints and the loss log in out_dir.
template <typename T>
TrainResult train_run(const std::string& dataset_path, const flow::FlowConfig& model_cfg,
                      const TrainConfig& cfg, const std::string& out_dir) {
  const tomo::Dataset<T> ds = tomo::load_dataset<T>(dataset_path);
  flow::FlowModel<T> model(model_cfg);
  return train_flow(model, ds, cfg, out_dir);
}

}  // namespace ctflow::train
