// Release gate: exercises the desk-scale pipeline end to end and checks each
// shipping criterion, printing exactly one PASS/FAIL line per criterion.
// Expensive artifacts (datasets, the trained checkpoint, the score report)
// are cached in acceptance_work/ and rebuilt only when the pipeline settings
// change, so the first run carries the full training cost and reruns are
// cheap. Exit status 0 only if every criterion passes.

#include <sys/wait.h>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ctflow/cli/config.hpp"
#include "ctflow/core/rng.hpp"
#include "ctflow/eval/evaluate.hpp"
#include "ctflow/flow/coupling.hpp"
#include "ctflow/flow/downsample.hpp"
#include "ctflow/flow/inv1x1.hpp"
#include "ctflow/flow/model.hpp"
#include "ctflow/tomo/dataset.hpp"
#include "ctflow/tomo/fbp.hpp"
#include "ctflow/tomo/radon.hpp"
#include "ctflow/train/loss.hpp"
#include "ctflow/train/trainer.hpp"
#include "support/oracles.hpp"

namespace fs = std::filesystem;
using ctflow::Rng;
using ctflow::flow::FlowConfig;
using ctflow::flow::FlowModel;
using ctflow::grad::ParameterStore;
using ctflow::grad::Tape;
using ctflow::grad::Tensor;

namespace {

const std::string kWork = "acceptance_work";

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) return {};
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  os << text;
}

int run_cli(const std::string& args, const std::string& log_name) {
  fs::create_directories(kWork + "/logs");
  const std::string log = kWork + "/logs/" + log_name + ".log";
  const std::string cmd = std::string(CTFLOW_BIN) + " " + args + " > " + log + " 2>&1";
  const int raw = std::system(cmd.c_str());
  if (raw == -1 || !WIFEXITED(raw)) return -1;
  return WEXITSTATUS(raw);
}

bool all_passed = true;

void report(int no, const std::string& label, bool ok, const std::string& detail) {
  all_passed = all_passed && ok;
  std::printf("%s  %d  %s: %s\n", ok ? "PASS" : "FAIL", no, label.c_str(), detail.c_str());
  std::fflush(stdout);
}

template <typename T>
Tensor<T> random_tensor(Rng& rng, std::vector<std::size_t> shape, double spread = 1.0) {
  Tensor<T> t = Tensor<T>::zeros(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) {
    t.ptr()[i] = static_cast<T>(rng.normal() * spread);
  }
  return t;
}

// Random draw from the value range reconstructions live in.
template <typename T>
Tensor<T> random_image(Rng& rng, std::vector<std::size_t> shape) {
  Tensor<T> t = Tensor<T>::zeros(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) {
    t.ptr()[i] = static_cast<T>(rng.uniform(0.0, 1.0));
  }
  return t;
}

template <typename T>
Tensor<T> clone(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::zeros(a.shape);
  std::copy(a.ptr(), a.ptr() + a.numel(), out.ptr());
  return out;
}

template <typename T>
void randomize_trainable(ParameterStore<T>& store, Rng& rng, double spread) {
  for (auto& p : store.all()) {
    if (!p.trainable) continue;
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      p.value.ptr()[i] = static_cast<T>(rng.normal() * spread);
    }
  }
}

template <typename T>
void perturb_trainable(ParameterStore<T>& store, Rng& rng, double spread) {
  for (auto& p : store.all()) {
    if (!p.trainable) continue;
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      p.value.ptr()[i] += static_cast<T>(rng.normal() * spread);
    }
  }
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    worst = std::max(worst, std::fabs(static_cast<double>(a.ptr()[i]) -
                                      static_cast<double>(b.ptr()[i])));
  }
  return worst;
}

// Jacobian of fn at x0, one column per input coordinate by central
// differences. fn must map dim values to dim values and use no tape.
template <typename F>
std::vector<double> fd_jacobian(F fn, const Tensor<double>& x0, std::size_t dim) {
  std::vector<double> jac(dim * dim, 0.0);
  Tensor<double> x = clone(x0);
  for (std::size_t j = 0; j < dim; ++j) {
    const double base = x.ptr()[j];
    const double h = 1e-6 * std::max(1.0, std::fabs(base));
    x.ptr()[j] = base + h;
    const Tensor<double> above = fn(x);
    x.ptr()[j] = base - h;
    const Tensor<double> below = fn(x);
    x.ptr()[j] = base;
    for (std::size_t i = 0; i < dim; ++i) {
      jac[i * dim + j] =
          (static_cast<double>(above.ptr()[i]) - static_cast<double>(below.ptr()[i])) /
          (2.0 * h);
    }
  }
  return jac;
}

// 8x8 single-downsampler model, 64 latent dimensions.
FlowConfig miniature_config(const std::string& kind) {
  FlowConfig cfg;
  cfg.image_size = 8;
  cfg.levels = 3;
  cfg.conv_quads = 1;
  cfg.dense_pairs = 2;
  cfg.cnn_width1 = 4;
  cfg.cnn_width2 = 4;
  cfg.dense_width = 8;
  cfg.uncond_width = 4;
  cfg.cond_divisor = 8;
  cfg.keeps = {8, 4};
  cfg.down_kinds = {kind};
  cfg.seed = kind == "haar" ? 77 : 79;
  return cfg;
}

// 16x16 model holding every layer type at once: conv and dense couplings,
// channel mixing, and both downsampler kinds.
FlowConfig every_layer_config() {
  FlowConfig cfg = miniature_config("haar");
  cfg.image_size = 16;
  cfg.levels = 4;
  cfg.keeps = {8, 8, 4};
  cfg.down_kinds = {"haar", "irevnet"};
  cfg.seed = 80;
  return cfg;
}

std::string small_pipeline_settings() {
  return "[geometry]\n"
         "image_size = 16\n"
         "num_angles = 24\n"
         "num_detectors = 24\n"
         "detector_spacing = 0.1\n"
         "pixel_spacing = 0.1\n"
         "\n"
         "[dataset]\n"
         "count = 3\n"
         "seed = 5\n"
         "\n"
         "[flow]\n"
         "levels = 3\n"
         "conv_quads = 1\n"
         "dense_pairs = 2\n"
         "cnn_width1 = 4\n"
         "cnn_width2 = 4\n"
         "dense_width = 8\n"
         "uncond_width = 4\n"
         "cond_divisor = 8\n"
         "keeps = 8,4\n"
         "down_kinds = irevnet\n"
         "seed = 78\n"
         "\n"
         "[train]\n"
         "steps = 5\n"
         "batch_size = 2\n"
         "checkpoint_every = 0\n"
         "seed = 1\n"
         "\n"
         "[eval]\n"
         "n_list = 1,4\n"
         "\n"
         "[reconstruct]\n"
         "n = 4\n"
         "seed = 9\n";
}

// ---------------------------------------------------------------------------
// Desk-scale pipeline with caching.

struct Pipeline {
  bool ok = false;
  std::string failure;
  double train_seconds = -1.0;
  std::string report_csv;  // path, empty until the evaluation exists
};

Pipeline run_desk_pipeline() {
  Pipeline out;
  fs::create_directories(kWork + "/logs");

  ctflow::cli::RunConfig train_cfg;
  train_cfg.dataset.count = 2000;
  train_cfg.dataset.seed = 11;
  train_cfg.eval.n_list = {1, 10, 100, 1000};
  train_cfg.eval.seed = 303;
  train_cfg.recon_n = 100;
  train_cfg.recon_seed = 7;
  ctflow::cli::RunConfig test_cfg = train_cfg;
  test_cfg.dataset.count = 100;
  test_cfg.dataset.seed = 12;
  train_cfg.finalize_and_validate();
  test_cfg.finalize_and_validate();

  const std::string train_cfg_path = kWork + "/desk_train.cfg";
  const std::string test_cfg_path = kWork + "/desk_test.cfg";
  const std::string want_train = ctflow::cli::serialize(train_cfg);
  const std::string want_test = ctflow::cli::serialize(test_cfg);
  if (read_file(train_cfg_path) != want_train || read_file(test_cfg_path) != want_test) {
    std::printf("[pipeline] settings changed, clearing cached artifacts\n");
    for (const char* name : {"train.ctfd", "train.ctfd.config", "train.ctfd.manifest",
                             "test.ctfd", "test.ctfd.config", "test.ctfd.manifest"}) {
      fs::remove(kWork + "/" + name);
    }
    fs::remove_all(kWork + "/run");
    fs::remove_all(kWork + "/eval");
    fs::remove(kWork + "/train_seconds.txt");
    write_file(train_cfg_path, want_train);
    write_file(test_cfg_path, want_test);
  }

  const auto step = [&](const std::string& what, const std::string& artifact,
                        const std::string& args, const std::string& log) {
    if (fs::exists(artifact)) {
      std::printf("[pipeline] %s: cached\n", what.c_str());
      return true;
    }
    std::printf("[pipeline] %s...\n", what.c_str());
    std::fflush(stdout);
    const auto t0 = std::chrono::steady_clock::now();
    const int code = run_cli(args, log);
    const double secs = seconds_since(t0);
    if (code != 0 || !fs::exists(artifact)) {
      out.failure = what + " failed (exit " + std::to_string(code) + ", see " + kWork +
                    "/logs/" + log + ".log)";
      std::printf("[pipeline] %s FAILED after %.1f s\n", what.c_str(), secs);
      return false;
    }
    std::printf("[pipeline] %s done in %.1f s\n", what.c_str(), secs);
    if (what == "training") {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.1f\n", secs);
      write_file(kWork + "/train_seconds.txt", buf);
    }
    return true;
  };

  if (!step("training dataset (2000 pairs)", kWork + "/train.ctfd",
            "gen-data --config " + train_cfg_path + " --out " + kWork + "/train.ctfd",
            "gen_train") ||
      !step("test dataset (100 pairs)", kWork + "/test.ctfd",
            "gen-data --config " + test_cfg_path + " --out " + kWork + "/test.ctfd",
            "gen_test") ||
      !step("training", kWork + "/run/final.ctck",
            "train --config " + train_cfg_path + " --data " + kWork + "/train.ctfd" +
                " --out " + kWork + "/run",
            "train") ||
      !step("evaluation", kWork + "/eval/report.csv",
            "evaluate --config " + test_cfg_path + " --ckpt " + kWork + "/run/final.ctck" +
                " --data " + kWork + "/test.ctfd --out " + kWork + "/eval",
            "evaluate")) {
    return out;
  }

  const std::string recorded = read_file(kWork + "/train_seconds.txt");
  if (!recorded.empty()) out.train_seconds = std::atof(recorded.c_str());
  out.report_csv = kWork + "/eval/report.csv";
  out.ok = true;
  return out;
}

// Mean psnr and ssim per sample count from the score report. n = 0 holds the
// filtered back-projection baseline.
std::map<std::size_t, std::pair<double, double>> mean_scores(const std::string& csv_path) {
  std::ifstream is(csv_path);
  std::string line;
  std::getline(is, line);  // header
  std::map<std::size_t, std::array<double, 3>> acc;
  while (std::getline(is, line)) {
    std::istringstream row(line);
    std::string field;
    std::getline(row, field, ',');
    std::getline(row, field, ',');
    const std::size_t n = std::stoul(field);
    std::getline(row, field, ',');
    const double psnr = std::strtod(field.c_str(), nullptr);
    std::getline(row, field, ',');
    const double ssim = std::strtod(field.c_str(), nullptr);
    auto& slot = acc[n];
    slot[0] += psnr;
    slot[1] += ssim;
    slot[2] += 1.0;
  }
  std::map<std::size_t, std::pair<double, double>> out;
  for (const auto& [n, slot] : acc) out[n] = {slot[0] / slot[2], slot[1] / slot[2]};
  return out;
}

// ---------------------------------------------------------------------------
// Criteria

void criterion_1() {
  const FlowConfig desk;
  const bool desk_scale = desk.image_size == 64;
  report(1, "scope",
         desk_scale,
         "published corpus figures (35.68 dB / 0.88 ssim at 352x352) are out of desk "
         "reach; gates below are property checks and a relative desk benchmark");
}

void criterion_2(const std::string& checkpoint) {
  const auto t0 = std::chrono::steady_clock::now();
  double worst_f32 = 0.0, worst_f64 = 0.0;
  std::string note;
  try {
    {
      ParameterStore<float> store;
      Rng rng(501);
      ctflow::flow::ConvCoupling<float> cc(store, "cc", 6, 3, 3, 8, 8, 1.5f, rng);
      ctflow::flow::DenseCoupling<float> dc(store, "dc", 12, 4, 16, 1.5f, rng);
      ctflow::flow::Inv1x1<float> mix(store, "mx", 6, rng);
      randomize_trainable(store, rng, 0.2);
      for (int t = 0; t < 50; ++t) {
        Tensor<float> u = random_tensor<float>(rng, {2, 6, 8, 8});
        Tensor<float> cond = random_tensor<float>(rng, {2, 3, 8, 8});
        worst_f32 = std::max(worst_f32,
                             max_abs_diff(u, cc.inverse(cc.forward(nullptr, u, cond).first, cond)));
        Tensor<float> ud = random_tensor<float>(rng, {2, 12});
        Tensor<float> cd = random_tensor<float>(rng, {2, 4});
        worst_f32 = std::max(worst_f32,
                             max_abs_diff(ud, dc.inverse(dc.forward(nullptr, ud, cd).first, cd)));
        worst_f32 =
            std::max(worst_f32, max_abs_diff(u, mix.inverse(mix.forward(nullptr, u).first)));
        worst_f32 = std::max(
            worst_f32,
            max_abs_diff(u, ctflow::flow::haar_upsample<float>(
                                nullptr, ctflow::flow::haar_downsample<float>(nullptr, u))));
        worst_f32 = std::max(
            worst_f32,
            max_abs_diff(u, ctflow::flow::irevnet_upsample<float>(
                                nullptr, ctflow::flow::irevnet_downsample<float>(nullptr, u))));
      }
    }
    {
      ParameterStore<double> store;
      Rng rng(502);
      ctflow::flow::ConvCoupling<double> cc(store, "cc", 6, 3, 3, 8, 8, 1.5, rng);
      ctflow::flow::DenseCoupling<double> dc(store, "dc", 12, 4, 16, 1.5, rng);
      ctflow::flow::Inv1x1<double> mix(store, "mx", 6, rng);
      randomize_trainable(store, rng, 0.3);
      for (int t = 0; t < 50; ++t) {
        Tensor<double> u = random_tensor<double>(rng, {2, 6, 8, 8});
        Tensor<double> cond = random_tensor<double>(rng, {2, 3, 8, 8});
        worst_f64 = std::max(worst_f64,
                             max_abs_diff(u, cc.inverse(cc.forward(nullptr, u, cond).first, cond)));
        Tensor<double> ud = random_tensor<double>(rng, {2, 12});
        Tensor<double> cd = random_tensor<double>(rng, {2, 4});
        worst_f64 = std::max(worst_f64,
                             max_abs_diff(ud, dc.inverse(dc.forward(nullptr, ud, cd).first, cd)));
        worst_f64 =
            std::max(worst_f64, max_abs_diff(u, mix.inverse(mix.forward(nullptr, u).first)));
        worst_f64 = std::max(
            worst_f64,
            max_abs_diff(u, ctflow::flow::haar_upsample<double>(
                                nullptr, ctflow::flow::haar_downsample<double>(nullptr, u))));
        worst_f64 = std::max(
            worst_f64,
            max_abs_diff(u, ctflow::flow::irevnet_upsample<double>(
                                nullptr, ctflow::flow::irevnet_downsample<double>(nullptr, u))));
      }
    }

    // Assembled desk model, trained weights when the pipeline produced them,
    // on the inputs it serves: reconstruction pairs from the held-out set.
    std::unique_ptr<FlowModel<float>> mf;
    std::unique_ptr<FlowModel<double>> md;
    if (fs::exists(checkpoint)) {
      mf = FlowModel<float>::load(checkpoint);
      md = FlowModel<double>::load(checkpoint);
      note = "trained desk weights";
    } else {
      mf = std::make_unique<FlowModel<float>>(FlowConfig{});
      md = std::make_unique<FlowModel<double>>(FlowConfig{});
      // Deep affine stacks compound their unclamped shift paths, so random
      // weights beyond a whisker of identity overflow; trained weights are
      // pinned to unit-scale latents by the loss and do not.
      Rng jf(503), jd(504);
      perturb_trainable(mf->parameters(), jf, 0.01);
      perturb_trainable(md->parameters(), jd, 0.01);
      note = "perturbed desk weights (no checkpoint yet)";
    }
    const std::string test_set = kWork + "/test.ctfd";
    ctflow::tomo::Dataset<float> pairs;
    if (fs::exists(test_set)) pairs = ctflow::tomo::load_dataset<float>(test_set);
    Rng rng(505);
    const std::size_t s = mf->config().image_size;
    for (int round = 0; round < 5; ++round) {
      Tensor<float> x = random_image<float>(rng, {10, 1, s, s});
      Tensor<float> fbp = random_image<float>(rng, {10, 1, s, s});
      if (pairs.pairs.size() >= static_cast<std::size_t>(round + 1) * 10) {
        for (std::size_t b = 0; b < 10; ++b) {
          const auto& pair = pairs.pairs[round * 10 + b];
          std::copy(pair.reference.data.begin(), pair.reference.data.end(),
                    x.ptr() + b * s * s);
          std::copy(pair.fbp.data.begin(), pair.fbp.data.end(), fbp.ptr() + b * s * s);
        }
      }
      auto feats = mf->condition(nullptr, fbp, false);
      auto [z, ld] = mf->forward(nullptr, x, feats);
      worst_f32 = std::max(worst_f32, max_abs_diff(x, mf->inverse(z, feats)));

      Tensor<double> xd = Tensor<double>::zeros({10, 1, s, s});
      Tensor<double> fbpd = Tensor<double>::zeros({10, 1, s, s});
      for (std::size_t i = 0; i < xd.numel(); ++i) {
        xd.ptr()[i] = static_cast<double>(x.ptr()[i]);
        fbpd.ptr()[i] = static_cast<double>(fbp.ptr()[i]);
      }
      auto featsd = md->condition(nullptr, fbpd, false);
      auto [zd, ldd] = md->forward(nullptr, xd, featsd);
      worst_f64 = std::max(worst_f64, max_abs_diff(xd, md->inverse(zd, featsd)));
    }
  } catch (const std::exception& e) {
    report(2, "invertibility", false, std::string("exception: ") + e.what());
    return;
  }
  const double secs = seconds_since(t0);
  const bool ok = worst_f32 < 1e-4 && worst_f64 < 1e-9 && secs < 60.0;
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "max round-trip error %.2e f32 (< 1e-4) and %.2e f64 (< 1e-9) over blocks "
                "and 50 desk inputs, %s, %.1f s (< 60)",
                worst_f32, worst_f64, note.c_str(), secs);
  report(2, "invertibility", ok, buf);
}

void criterion_3() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  const auto check = [&](double analytic, const std::vector<double>& jac, std::size_t dim) {
    const double want = oracles::logdet_lu(jac, dim);
    worst = std::max(worst,
                     std::fabs(analytic - want) / std::max(1.0, std::fabs(want)));
  };
  try {
    Rng rng(601);
    {
      ParameterStore<double> store;
      ctflow::flow::ConvCoupling<double> cc(store, "cc", 2, 3, 3, 4, 4, 1.5, rng);
      randomize_trainable(store, rng, 0.3);
      Tensor<double> x0 = random_tensor<double>(rng, {1, 2, 4, 4});
      Tensor<double> cond = random_tensor<double>(rng, {1, 3, 4, 4});
      const double ld = cc.forward(nullptr, x0, cond).second.ptr()[0];
      check(ld, fd_jacobian([&](const Tensor<double>& x) {
              return cc.forward(nullptr, x, cond).first;
            }, x0, 32), 32);
    }
    {
      ParameterStore<double> store;
      ctflow::flow::DenseCoupling<double> dc(store, "dc", 12, 4, 16, 1.5, rng);
      randomize_trainable(store, rng, 0.3);
      Tensor<double> x0 = random_tensor<double>(rng, {1, 12});
      Tensor<double> cond = random_tensor<double>(rng, {1, 4});
      const double ld = dc.forward(nullptr, x0, cond).second.ptr()[0];
      check(ld, fd_jacobian([&](const Tensor<double>& x) {
              return dc.forward(nullptr, x, cond).first;
            }, x0, 12), 12);
    }
    {
      ParameterStore<double> store;
      ctflow::flow::Inv1x1<double> mix(store, "mx", 3, rng);
      randomize_trainable(store, rng, 0.3);
      Tensor<double> x0 = random_tensor<double>(rng, {1, 3, 2, 2});
      const double ld = mix.forward(nullptr, x0).second.ptr()[0];
      check(ld, fd_jacobian([&](const Tensor<double>& x) {
              return mix.forward(nullptr, x).first;
            }, x0, 12), 12);
    }
    {
      Tensor<double> x0 = random_tensor<double>(rng, {1, 1, 4, 4});
      check(0.0, fd_jacobian([&](const Tensor<double>& x) {
              return ctflow::flow::haar_downsample<double>(nullptr, x);
            }, x0, 16), 16);
      check(0.0, fd_jacobian([&](const Tensor<double>& x) {
              return ctflow::flow::irevnet_downsample<double>(nullptr, x);
            }, x0, 16), 16);
    }
    for (const std::string kind : {"haar", "irevnet"}) {
      FlowModel<double> model(miniature_config(kind));
      Rng prng(kind == "haar" ? 602u : 603u);
      randomize_trainable(model.parameters(), prng, 0.2);
      Tensor<double> x0 = random_tensor<double>(prng, {1, 1, 8, 8});
      Tensor<double> fbp = random_tensor<double>(prng, {1, 1, 8, 8});
      auto feats = model.condition(nullptr, fbp, false);
      const double ld = model.forward(nullptr, x0, feats).second.ptr()[0];
      check(ld, fd_jacobian([&](const Tensor<double>& x) {
              return model.forward(nullptr, x, feats).first;
            }, x0, 64), 64);
    }
  } catch (const std::exception& e) {
    report(3, "log-det oracle", false, std::string("exception: ") + e.what());
    return;
  }
  const double secs = seconds_since(t0);
  const bool ok = worst <= 1e-5 && secs < 300.0;
  char buf[192];
  std::snprintf(buf, sizeof buf,
                "analytic vs column-assembled Jacobian log-det, worst relative error %.2e "
                "(<= 1e-5) across layers and 64-dim models, %.1f s (< 300)",
                worst, secs);
  report(3, "log-det oracle", ok, buf);
}

void criterion_4() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::size_t coords_checked = 0;
  try {
    FlowModel<double> model(every_layer_config());
    Rng rng(701);
    perturb_trainable(model.parameters(), rng, 0.05);
    const Tensor<double> x = random_tensor<double>(rng, {2, 1, 16, 16});
    const Tensor<double> fbp = random_tensor<double>(rng, {2, 1, 16, 16}, 0.5);

    auto loss_value = [&]() {
      const auto features = model.condition(nullptr, fbp, true);
      const auto [z, logdet] = model.forward(nullptr, x, features);
      return static_cast<double>(
          ctflow::train::nll_loss<double>(nullptr, z, logdet).ptr()[0]);
    };

    Tape<double> tape;
    model.watch_parameters(tape);
    const auto features = model.condition(&tape, fbp, true);
    const auto [z, logdet] = model.forward(&tape, x, features);
    const Tensor<double> loss = ctflow::train::nll_loss(&tape, z, logdet);
    tape.backward(loss);
    ctflow::train::collect_gradients(tape, model.parameters());

    std::vector<std::pair<std::size_t, std::size_t>> coords;
    auto& params = model.parameters().all();
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
      if (!params[pi].trainable) continue;
      for (std::size_t off = 0; off < params[pi].value.numel(); ++off) {
        coords.emplace_back(pi, off);
      }
    }
    Rng pick(702);
    pick.shuffle(coords);
    coords.resize(std::min<std::size_t>(coords.size(), 220));
    coords_checked = coords.size();

    for (const auto& [pi, off] : coords) {
      auto& p = params[pi];
      double* slot = p.value.ptr() + off;
      const double base = *slot;
      const double h = 1e-5 * std::max(1.0, std::fabs(base));
      *slot = base + h;
      const double above = loss_value();
      *slot = base - h;
      const double below = loss_value();
      *slot = base;
      const double fd = (above - below) / (2.0 * h);
      const double an = p.grad[off];
      worst = std::max(worst,
                       std::fabs(fd - an) / std::max({1e-2, std::fabs(fd), std::fabs(an)}));
    }
  } catch (const std::exception& e) {
    report(4, "gradient oracle", false, std::string("exception: ") + e.what());
    return;
  }
  const double secs = seconds_since(t0);
  const bool ok = coords_checked >= 200 && worst <= 1e-4 && secs < 600.0;
  char buf[192];
  std::snprintf(buf, sizeof buf,
                "analytic vs central differences on %zu coordinates of an all-layer model, "
                "worst relative error %.2e (<= 1e-4), %.1f s (< 600)",
                coords_checked, worst, secs);
  report(4, "gradient oracle", ok, buf);
}

ctflow::tomo::Image<double> supersampled_disc(std::size_t size, double spacing,
                                              double radius) {
  ctflow::tomo::Image<double> img(size);
  const double center = 0.5 * (static_cast<double>(size) - 1.0);
  const int ss = 8;
  const double sub = 1.0 / ss;
  for (std::size_t r = 0; r < size; ++r) {
    for (std::size_t c = 0; c < size; ++c) {
      int inside = 0;
      for (int sr = 0; sr < ss; ++sr) {
        for (int sc = 0; sc < ss; ++sc) {
          const double y = (static_cast<double>(r) - center + (sr + 0.5) * sub - 0.5) * spacing;
          const double x = (static_cast<double>(c) - center + (sc + 0.5) * sub - 0.5) * spacing;
          if (x * x + y * y <= radius * radius) inside += 1;
        }
      }
      img.at(r, c) = static_cast<double>(inside) / (ss * ss);
    }
  }
  return img;
}

void criterion_5() {
  const auto t0 = std::chrono::steady_clock::now();
  try {
    // Projector and its transpose agree as linear-algebra adjoints.
    double worst_adjoint = 0.0;
    std::vector<ctflow::tomo::Geometry> geoms(3);
    geoms[0] = ctflow::tomo::Geometry{};
    geoms[1].num_angles = 30;
    geoms[1].num_detectors = 47;
    geoms[1].detector_spacing = 0.13;
    geoms[1].image_size = 32;
    geoms[1].pixel_spacing = 0.11;
    geoms[2].num_angles = 7;
    geoms[2].num_detectors = 31;
    geoms[2].detector_spacing = 0.2;
    geoms[2].image_size = 16;
    geoms[2].pixel_spacing = 0.15;
    Rng rng(801);
    for (int trial = 0; trial < 100; ++trial) {
      const ctflow::tomo::Geometry& g = geoms[trial % 3];
      ctflow::tomo::Image<double> x(g.image_size);
      for (auto& v : x.data) v = rng.uniform(-1, 1);
      ctflow::tomo::Sinogram<double> y(g.num_angles, g.num_detectors);
      for (auto& v : y.data) v = rng.uniform(-1, 1);
      const auto ax = ctflow::tomo::radon_forward(x, g);
      const auto aty = ctflow::tomo::back_project(y, g);
      double lhs = 0.0, rhs = 0.0;
      for (std::size_t i = 0; i < ax.data.size(); ++i) lhs += ax.data[i] * y.data[i];
      for (std::size_t i = 0; i < x.data.size(); ++i) rhs += x.data[i] * aty.data[i];
      worst_adjoint = std::max(worst_adjoint, std::fabs(lhs - rhs) /
                                                  std::max({std::fabs(lhs), std::fabs(rhs),
                                                            1e-12}));
    }

    // Disc projections against the analytic chord length.
    ctflow::tomo::Geometry disc_g;
    disc_g.image_size = 128;
    disc_g.pixel_spacing = 0.1;
    disc_g.num_detectors = 185;
    disc_g.detector_spacing = 0.1;
    disc_g.num_angles = 40;
    const double radius = 4.0;
    const auto disc = supersampled_disc(disc_g.image_size, disc_g.pixel_spacing, radius);
    const auto sino = ctflow::tomo::radon_forward(disc, disc_g);
    double worst_chord = 0.0;
    for (std::size_t k = 0; k < disc_g.num_angles; ++k) {
      for (std::size_t j = 0; j < disc_g.num_detectors; ++j) {
        const double s = disc_g.detector_offset(j);
        if (std::fabs(s) > 0.85 * radius) continue;
        const double want = oracles::disc_chord(radius, s);
        worst_chord = std::max(worst_chord, std::fabs(sino.at(k, j) - want) / want);
      }
    }

    // Noiseless filtered back-projection restores the disc.
    disc_g.num_angles = 180;
    const auto recon =
        ctflow::tomo::fbp_reconstruct(ctflow::tomo::radon_forward(disc, disc_g), disc_g);
    const double psnr = oracles::psnr(recon.data, disc.data, 1.0);

    const double secs = seconds_since(t0);
    const bool ok = worst_adjoint <= 1e-5 && worst_chord <= 0.01 && psnr >= 28.0;
    char buf[224];
    std::snprintf(buf, sizeof buf,
                  "adjoint identity %.2e rel on 100 pairs (<= 1e-5); disc chord error "
                  "%.2f%% (<= 1%%); noiseless fbp %.2f dB (>= 28) at 180 angles, %.1f s",
                  worst_adjoint, 100.0 * worst_chord, psnr, secs);
    report(5, "ct physics", ok, buf);
  } catch (const std::exception& e) {
    report(5, "ct physics", false, std::string("exception: ") + e.what());
  }
}

void criterion_6() {
  try {
    double worst_block_ld = 0.0;
    {
      ParameterStore<double> store;
      Rng rng(901);
      ctflow::flow::ConvCoupling<double> cc(store, "cc", 4, 2, 3, 8, 8, 1.5, rng);
      ctflow::flow::DenseCoupling<double> dc(store, "dc", 12, 4, 16, 1.5, rng);
      ctflow::flow::Inv1x1<double> mix(store, "mx", 4, rng);
      Tensor<double> u = random_tensor<double>(rng, {3, 4, 8, 8});
      Tensor<double> cond = random_tensor<double>(rng, {3, 2, 8, 8});
      Tensor<double> ud = random_tensor<double>(rng, {3, 12});
      Tensor<double> cd = random_tensor<double>(rng, {3, 4});
      for (const Tensor<double>& ld : {cc.forward(nullptr, u, cond).second,
                                       dc.forward(nullptr, ud, cd).second,
                                       mix.forward(nullptr, u).second}) {
        for (std::size_t i = 0; i < ld.numel(); ++i) {
          worst_block_ld = std::max(worst_block_ld, std::fabs(ld.ptr()[i]));
        }
      }
    }

    FlowModel<double> model{FlowConfig{}};
    Rng rng(902);
    const std::size_t s = model.config().image_size;
    Tensor<double> x = random_tensor<double>(rng, {4, 1, s, s});
    Tensor<double> fbp = random_tensor<double>(rng, {4, 1, s, s}, 0.5);
    auto feats = model.condition(nullptr, fbp, false);
    auto [z, ld] = model.forward(nullptr, x, feats);
    double worst_model_ld = 0.0;
    for (std::size_t i = 0; i < ld.numel(); ++i) {
      worst_model_ld = std::max(worst_model_ld, std::fabs(ld.ptr()[i]));
    }
    const double nll =
        static_cast<double>(ctflow::train::nll_loss<double>(nullptr, z, ld).ptr()[0]);
    double energy = 0.0;
    for (std::size_t i = 0; i < z.numel(); ++i) energy += z.ptr()[i] * z.ptr()[i];
    energy *= 0.5 / static_cast<double>(z.dim(0));
    const double gap = std::fabs(nll - energy);

    const bool ok = worst_block_ld <= 1e-4 && worst_model_ld <= 1e-4 && gap <= 1e-4;
    char buf[192];
    std::snprintf(buf, sizeof buf,
                  "fresh blocks log-det %.1e and desk model log-det %.1e (<= 1e-4); nll "
                  "minus mean half-norm %.1e (<= 1e-4)",
                  worst_block_ld, worst_model_ld, gap);
    report(6, "identity at initialization", ok, buf);
  } catch (const std::exception& e) {
    report(6, "identity at initialization", false, std::string("exception: ") + e.what());
  }
}

void criterion_7(const Pipeline& pipe) {
  if (!pipe.ok) {
    report(7, "desk benchmark", false, pipe.failure);
    return;
  }
  const auto scores = mean_scores(pipe.report_csv);
  if (!scores.count(0) || !scores.count(100)) {
    report(7, "desk benchmark", false, "score report lacks baseline or n=100 rows");
    return;
  }
  const auto [fbp_psnr, fbp_ssim] = scores.at(0);
  const auto [flow_psnr, flow_ssim] = scores.at(100);
  const bool time_ok = pipe.train_seconds > 0.0 && pipe.train_seconds <= 7200.0;
  const bool ok =
      time_ok && flow_psnr >= fbp_psnr + 2.0 && flow_ssim >= fbp_ssim + 0.05;
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "100 test images: psnr %.2f dB fbp vs %.2f dB flow mean of 100 samples "
                "(gain %.2f, need >= 2.00); ssim %.4f vs %.4f (gain %.4f, need >= 0.05); "
                "training %.0f s (<= 7200)",
                fbp_psnr, flow_psnr, flow_psnr - fbp_psnr, fbp_ssim, flow_ssim,
                flow_ssim - fbp_ssim, pipe.train_seconds);
  report(7, "desk benchmark", ok, buf);
}

void criterion_8(const Pipeline& pipe) {
  if (!pipe.ok) {
    report(8, "sample-count trend", false, pipe.failure);
    return;
  }
  const auto scores = mean_scores(pipe.report_csv);
  const std::vector<std::size_t> ns = {1, 10, 100, 1000};
  for (const std::size_t n : ns) {
    if (!scores.count(n)) {
      report(8, "sample-count trend", false,
             "score report lacks n=" + std::to_string(n) + " rows");
      return;
    }
  }
  const auto trend = [&](auto pick, double slack, std::string& text) {
    int inversions = 0;
    double worst_drop = 0.0;
    for (std::size_t i = 1; i < ns.size(); ++i) {
      const double prev = pick(scores.at(ns[i - 1]));
      const double next = pick(scores.at(ns[i]));
      if (next < prev) {
        inversions += 1;
        worst_drop = std::max(worst_drop, prev - next);
      }
    }
    std::ostringstream os;
    os << std::fixed;
    os.precision(4);
    for (std::size_t i = 0; i < ns.size(); ++i) {
      os << (i ? " -> " : "") << pick(scores.at(ns[i]));
    }
    text = os.str();
    return inversions == 0 || (inversions == 1 && worst_drop <= slack);
  };
  std::string psnr_text, ssim_text;
  const bool psnr_ok =
      trend([](const std::pair<double, double>& v) { return v.first; }, 0.05, psnr_text);
  const bool ssim_ok =
      trend([](const std::pair<double, double>& v) { return v.second; }, 0.002, ssim_text);
  report(8, "sample-count trend", psnr_ok && ssim_ok,
         "mean psnr " + psnr_text + " dB and ssim " + ssim_text +
             " over 1/10/100/1000 samples, at most one dip within noise allowance");
}

void criterion_9() {
  const std::string dir = kWork + "/determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string cfg = dir + "/small.cfg";
  write_file(cfg, small_pipeline_settings());

  const auto same = [](const std::string& a, const std::string& b) {
    const std::string ba = read_file(a), bb = read_file(b);
    return !ba.empty() && ba == bb;
  };
  try {
    std::vector<std::string> diffs;
    for (int r = 0; r < 2; ++r) {
      const std::string tag = r == 0 ? "a" : "b";
      if (run_cli("gen-data --config " + cfg + " --out " + dir + "/ds_" + tag + ".ctfd",
                  "det_gen_" + tag) != 0 ||
          run_cli("train --config " + cfg + " --data " + dir + "/ds_" + tag + ".ctfd" +
                      " --out " + dir + "/run_" + tag,
                  "det_train_" + tag) != 0 ||
          run_cli("reconstruct --config " + cfg + " --ckpt " + dir + "/run_" + tag +
                      "/final.ctck --data " + dir + "/ds_" + tag + ".ctfd --out " + dir +
                      "/rec_" + tag,
                  "det_rec_" + tag) != 0 ||
          run_cli("evaluate --config " + cfg + " --ckpt " + dir + "/run_" + tag +
                      "/final.ctck --data " + dir + "/ds_" + tag + ".ctfd --out " + dir +
                      "/ev_" + tag,
                  "det_ev_" + tag) != 0) {
        report(9, "determinism", false, "a pipeline command failed, see " + kWork + "/logs");
        return;
      }
    }
    if (!same(dir + "/ds_a.ctfd", dir + "/ds_b.ctfd")) diffs.push_back("dataset");
    if (!same(dir + "/run_a/loss.csv", dir + "/run_b/loss.csv")) diffs.push_back("loss log");
    if (!same(dir + "/run_a/final.ctck", dir + "/run_b/final.ctck")) {
      diffs.push_back("checkpoint");
    }
    if (!same(dir + "/rec_a/mean.pgm", dir + "/rec_b/mean.pgm")) diffs.push_back("mean");
    if (!same(dir + "/rec_a/std.pgm", dir + "/rec_b/std.pgm")) diffs.push_back("std");
    if (!same(dir + "/ev_a/report.csv", dir + "/ev_b/report.csv")) diffs.push_back("report");
    if (diffs.empty()) {
      report(9, "determinism", true,
             "seeded gen-data, train, reconstruct, and evaluate reruns are byte-identical "
             "(dataset, loss log, checkpoint, images, score report)");
    } else {
      std::string joined;
      for (const auto& d : diffs) joined += (joined.empty() ? "" : ", ") + d;
      report(9, "determinism", false, "rerun outputs differ: " + joined);
    }
  } catch (const std::exception& e) {
    report(9, "determinism", false, std::string("exception: ") + e.what());
  }
}

}  // namespace

int main() {
  std::printf("acceptance: artifacts cached under %s\n", kWork.c_str());
  const Pipeline pipe = run_desk_pipeline();

  criterion_1();
  criterion_2(kWork + "/run/final.ctck");
  criterion_3();
  criterion_4();
  criterion_5();
  criterion_6();
  criterion_7(pipe);
  criterion_8(pipe);
  criterion_9();

  std::printf(all_passed ? "acceptance: all 9 criteria passed\n"
                         : "acceptance: FAILURES above\n");
  return all_passed ? 0 : 1;
}
