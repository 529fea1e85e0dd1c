#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "ctflow/core/error.hpp"
#include "ctflow/core/rng.hpp"
#include "ctflow/flow/model.hpp"
#include "ctflow/tomo/geometry.hpp"

namespace ctflow::eval {

using grad::Tensor;

template <typename T>
struct PosteriorSummary {
  tomo::Image<T> mean;
  tomo::Image<T> std;  // population standard deviation, zero at n = 1
  std::size_t n = 0;
};

namespace detail {

// Reconstructions run in fixed-size slabs so the latent draw order, and with
// it every prefix statistic, is independent of how many samples were asked
// for in total.
inline constexpr std::size_t kSampleChunk = 32;

template <typename T>
std::vector<Tensor<T>> tile_features(const std::vector<Tensor<T>>& features, std::size_t b) {
  std::vector<Tensor<T>> out;
  out.reserve(features.size());
  for (const Tensor<T>& f : features) {
    std::vector<std::size_t> shape = f.shape;
    shape[0] = b;
    Tensor<T> t = Tensor<T>::zeros(std::move(shape));
    const std::size_t inner = f.numel();
    for (std::size_t i = 0; i < b; ++i) {
      std::copy(f.ptr(), f.ptr() + inner, t.ptr() + i * inner);
    }
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace detail

// Runs the conditioning network once on a single reconstruction, eval-mode
// statistics.
template <typename T>
std::vector<Tensor<T>> condition_on_image(flow::FlowModel<T>& model,
                                          const tomo::Image<T>& fbp) {
  if (fbp.size != model.config().image_size) {
    throw DimensionError("condition_on_image: image size " + std::to_string(fbp.size) +
                         " does not match flow input " +
                         std::to_string(model.config().image_size));
  }
  Tensor<T> t = Tensor<T>::zeros({1, 1, fbp.size, fbp.size});
  std::copy(fbp.data.begin(), fbp.data.end(), t.ptr());
  return model.condition(nullptr, t, /*train=*/false);
}

// Draws n posterior samples x_j = F^{-1}(z_j, H(fbp)) with z_j standard
// normal from the seed. Deterministic: the j-th sample depends only on the
// seed and j.
template <typename T>
std::vector<tomo::Image<T>> sample_posterior(flow::FlowModel<T>& model,
                                             const tomo::Image<T>& fbp, std::size_t n,
                                             std::uint64_t seed) {
  if (n < 1) throw ConfigError("sample_posterior: n must be >= 1");
  const auto features = condition_on_image(model, fbp);
  const std::size_t d = model.total_dim();
  const std::size_t s = model.config().image_size;
  Rng rng(seed);
  std::vector<tomo::Image<T>> out;
  out.reserve(n);
  std::size_t done = 0;
  while (done < n) {
    const std::size_t b = std::min(detail::kSampleChunk, n - done);
    Tensor<T> z = Tensor<T>::zeros({b, d});
    for (std::size_t i = 0; i < b * d; ++i) z.ptr()[i] = static_cast<T>(rng.normal());
    const Tensor<T> x = model.inverse(z, detail::tile_features(features, b));
    for (std::size_t i = 0; i < b; ++i) {
      tomo::Image<T> img(s);
      std::copy(x.ptr() + i * s * s, x.ptr() + (i + 1) * s * s, img.data.begin());
      out.push_back(std::move(img));
    }
    done += b;
  }
  return out;
}

// Pixel-wise mean and standard deviation of the first n posterior samples,
// snapshotted at every count in n_list. One pass over max(n_list) samples;
// the snapshot at n equals a standalone run with that n because the latent
// stream is prefix-stable.
template <typename T>
std::vector<PosteriorSummary<T>> conditional_mean_curve(flow::FlowModel<T>& model,
                                                        const tomo::Image<T>& fbp,
                                                        std::vector<std::size_t> n_list,
                                                        std::uint64_t seed) {
  if (n_list.empty()) throw ConfigError("conditional_mean: empty sample-count list");
  for (const std::size_t n : n_list) {
    if (n < 1) throw ConfigError("conditional_mean: sample counts must be >= 1");
  }
  std::sort(n_list.begin(), n_list.end());
  n_list.erase(std::unique(n_list.begin(), n_list.end()), n_list.end());

  const auto features = condition_on_image(model, fbp);
  const std::size_t d = model.total_dim();
  const std::size_t s = model.config().image_size;
  const std::size_t n_max = n_list.back();
  Rng rng(seed);

  std::vector<double> mean(s * s, 0.0);
  std::vector<double> m2(s * s, 0.0);
  std::vector<PosteriorSummary<T>> out;
  out.reserve(n_list.size());
  std::size_t next = 0;
  std::size_t k = 0;
  std::size_t done = 0;
  while (done < n_max) {
    const std::size_t b = std::min(detail::kSampleChunk, n_max - done);
    Tensor<T> z = Tensor<T>::zeros({b, d});
    for (std::size_t i = 0; i < b * d; ++i) z.ptr()[i] = static_cast<T>(rng.normal());
    const Tensor<T> x = model.inverse(z, detail::tile_features(features, b));
    for (std::size_t i = 0; i < b; ++i) {
      k += 1;
      const T* pix = x.ptr() + i * s * s;
      for (std::size_t p = 0; p < s * s; ++p) {
        const double v = static_cast<double>(pix[p]);
        const double delta = v - mean[p];
        mean[p] += delta / static_cast<double>(k);
        m2[p] += delta * (v - mean[p]);
      }
      if (k == n_list[next]) {
        PosteriorSummary<T> snap;
        snap.mean = tomo::Image<T>(s);
        snap.std = tomo::Image<T>(s);
        snap.n = k;
        for (std::size_t p = 0; p < s * s; ++p) {
          snap.mean.data[p] = static_cast<T>(mean[p]);
          snap.std.data[p] = static_cast<T>(std::sqrt(m2[p] / static_cast<double>(k)));
        }
        out.push_back(std::move(snap));
        next += 1;
      }
    }
    done += b;
  }
  return out;
}

template <typename T>
PosteriorSummary<T> conditional_mean(flow::FlowModel<T>& model, const tomo::Image<T>& fbp,
                                     std::size_t n, std::uint64_t seed) {
  return conditional_mean_curve(model, fbp, {n}, seed).front();
}

}  // namespace ctflow::eval
