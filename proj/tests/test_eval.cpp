#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "ctflow/core/io.hpp"
#include "ctflow/core/rng.hpp"
#include "ctflow/eval/evaluate.hpp"
#include "ctflow/eval/metrics.hpp"
#include "ctflow/eval/posterior.hpp"
#include "ctflow/tomo/dataset.hpp"
#include "support/oracles.hpp"

using ctflow::ConfigError;
using ctflow::DataError;
using ctflow::DimensionError;
using ctflow::Rng;
using ctflow::derive_seed;
using ctflow::eval::EvalConfig;
using ctflow::eval::EvalReport;
using ctflow::eval::PosteriorSummary;
using ctflow::eval::SsimConfig;
using ctflow::flow::FlowConfig;
using ctflow::flow::FlowModel;
using ctflow::tomo::Image;

namespace {

FlowConfig miniature_config() {
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
  cfg.down_kinds = {"haar"};
  cfg.seed = 77;
  return cfg;
}

FlowConfig small_config() {
  FlowConfig cfg = miniature_config();
  cfg.image_size = 16;
  cfg.down_kinds = {"irevnet"};
  cfg.seed = 78;
  return cfg;
}

template <typename T>
ctflow::tomo::Dataset<T> make_dataset(std::size_t count, std::uint64_t seed) {
  ctflow::tomo::DatasetConfig cfg;
  cfg.count = count;
  cfg.geometry.image_size = 16;
  cfg.geometry.pixel_spacing = 0.1;
  cfg.geometry.num_angles = 24;
  cfg.geometry.num_detectors = 24;
  cfg.geometry.detector_spacing = 0.1;
  cfg.seed = seed;
  const std::string path = "tmp_eval_ds.ctfd";
  ctflow::tomo::build_dataset(cfg, path);
  auto ds = ctflow::tomo::load_dataset<T>(path);
  std::remove(path.c_str());
  std::remove((path + ".manifest").c_str());
  return ds;
}

template <typename T>
Image<T> random_image(Rng& rng, std::size_t n, double lo = 0.0, double hi = 1.0) {
  Image<T> img(n);
  for (auto& v : img.data) v = static_cast<T>(rng.uniform(lo, hi));
  return img;
}

std::string read_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  std::ostringstream buf;
  buf << is.rdbuf();
  return buf.str();
}

}  // namespace

TEST_CASE("psnr matches the direct definition") {
  SECTION("identical images give the infinity sentinel") {
    Rng rng(1);
    const auto x = random_image<double>(rng, 12);
    CHECK(std::isinf(ctflow::eval::psnr(x, x, 1.0)));
  }
  SECTION("a constant offset has a closed form") {
    Image<double> x(10), y(10);
    for (std::size_t i = 0; i < x.data.size(); ++i) {
      x.data[i] = 0.3;
      y.data[i] = 0.4;
    }
    // mse = 0.01 against range 1, so 10 log10(1 / 0.01) = 20 dB.
    CHECK_THAT(ctflow::eval::psnr(x, y, 1.0), Catch::Matchers::WithinAbs(20.0, 1e-12));
  }
  SECTION("random pairs agree with the reference formula") {
    Rng rng(2);
    for (int trial = 0; trial < 100; ++trial) {
      const auto x = random_image<double>(rng, 12);
      const auto y = random_image<double>(rng, 12);
      const double got = ctflow::eval::psnr(x, y, 1.0);
      const double want = oracles::psnr(x.data, y.data, 1.0);
      CHECK_THAT(got, Catch::Matchers::WithinAbs(want, 1e-10));
    }
  }
  SECTION("bad inputs are rejected") {
    Image<double> a(8), b(9);
    CHECK_THROWS_AS(ctflow::eval::psnr(a, b, 1.0), DimensionError);
    CHECK_THROWS_AS(ctflow::eval::psnr(a, a, 0.0), ConfigError);
  }
}

TEST_CASE("ssim fixed points") {
  Rng rng(3);
  const auto x = random_image<double>(rng, 16);
  SsimConfig uniform7;
  SsimConfig gaussian11;
  gaussian11.window = "gaussian";
  gaussian11.window_size = 11;

  SECTION("identical images score exactly one") {
    CHECK(ctflow::eval::ssim(x, x, 1.0, uniform7) == 1.0);
    CHECK(ctflow::eval::ssim(x, x, 1.0, gaussian11) == 1.0);
  }
  SECTION("constant images have a closed form") {
    Image<double> a(16), b(16);
    for (std::size_t i = 0; i < a.data.size(); ++i) {
      a.data[i] = 0.4;
      b.data[i] = 0.7;
    }
    // Zero variance in every window: only the luminance term survives,
    // (2 * 0.4 * 0.7 + c1) / (0.4^2 + 0.7^2 + c1) with c1 = 1e-4.
    const double want = (0.56 + 1e-4) / (0.65 + 1e-4);
    CHECK_THAT(ctflow::eval::ssim(a, b, 1.0, uniform7),
               Catch::Matchers::WithinAbs(want, 1e-12));
    CHECK_THAT(ctflow::eval::ssim(a, b, 1.0, gaussian11),
               Catch::Matchers::WithinAbs(want, 1e-12));
  }
}

TEST_CASE("ssim agrees with brute-force references") {
  Rng rng(4);
  SECTION("uniform window against direct window sums") {
    SsimConfig cfg;  // uniform, window 7
    for (int trial = 0; trial < 100; ++trial) {
      const auto x = random_image<double>(rng, 16);
      const auto y = random_image<double>(rng, 16);
      const double got = ctflow::eval::ssim(x, y, 1.0, cfg);
      const double want = oracles::ssim(x.data, y.data, 16, 16, 1.0, 7);
      CHECK_THAT(got, Catch::Matchers::WithinAbs(want, 1e-8));
      CHECK(got >= -1.0 - 1e-12);
      CHECK(got <= 1.0 + 1e-12);
    }
  }
  SECTION("gaussian window against direct weighted sums") {
    SsimConfig cfg;
    cfg.window = "gaussian";
    cfg.window_size = 11;
    cfg.sigma = 1.5;
    for (int trial = 0; trial < 30; ++trial) {
      const auto x = random_image<double>(rng, 16);
      const auto y = random_image<double>(rng, 16);
      const double got = ctflow::eval::ssim(x, y, 1.0, cfg);
      const double want = oracles::ssim_gaussian(x.data, y.data, 16, 16, 1.0, 11, 1.5);
      CHECK_THAT(got, Catch::Matchers::WithinAbs(want, 1e-8));
    }
  }
  SECTION("the score is symmetric in its arguments") {
    for (int trial = 0; trial < 20; ++trial) {
      const auto x = random_image<double>(rng, 16);
      const auto y = random_image<double>(rng, 16);
      CHECK_THAT(ctflow::eval::ssim(x, y, 1.0),
                 Catch::Matchers::WithinAbs(ctflow::eval::ssim(y, x, 1.0), 1e-12));
    }
  }
  SECTION("bad configurations are rejected") {
    const auto x = random_image<double>(rng, 16);
    SsimConfig cfg;
    cfg.window = "boxcar";
    CHECK_THROWS_AS(ctflow::eval::ssim(x, x, 1.0, cfg), ConfigError);
    cfg.window = "uniform";
    cfg.window_size = 6;
    CHECK_THROWS_AS(ctflow::eval::ssim(x, x, 1.0, cfg), ConfigError);
    cfg.window_size = 7;
    cfg.sigma = 0.0;
    cfg.window = "gaussian";
    CHECK_THROWS_AS(ctflow::eval::ssim(x, x, 1.0, cfg), ConfigError);
    const auto tiny = random_image<double>(rng, 6);
    CHECK_THROWS_WITH(ctflow::eval::ssim(tiny, tiny, 1.0),
                      Catch::Matchers::ContainsSubstring("smaller than the window"));
    Image<double> other(8);
    CHECK_THROWS_AS(ctflow::eval::ssim(x, other, 1.0), DimensionError);
  }
}

TEST_CASE("posterior sampling is seeded and chunk-stable") {
  auto model = FlowModel<float>(miniature_config());
  Rng rng(5);
  const auto fbp = random_image<float>(rng, 8);

  SECTION("input validation") {
    CHECK_THROWS_AS(ctflow::eval::sample_posterior(model, fbp, 0, 1), ConfigError);
    const auto wrong = random_image<float>(rng, 16);
    CHECK_THROWS_AS(ctflow::eval::sample_posterior(model, wrong, 1, 1), DimensionError);
  }
  SECTION("same seed reproduces, different seed does not") {
    const auto a = ctflow::eval::sample_posterior(model, fbp, 3, 42);
    const auto b = ctflow::eval::sample_posterior(model, fbp, 3, 42);
    const auto c = ctflow::eval::sample_posterior(model, fbp, 3, 43);
    REQUIRE(a.size() == 3);
    REQUIRE(a[0].size == 8);
    for (std::size_t j = 0; j < 3; ++j) {
      for (std::size_t p = 0; p < 64; ++p) CHECK(a[j].data[p] == b[j].data[p]);
    }
    bool any_differ = false;
    for (std::size_t p = 0; p < 64; ++p) any_differ |= (a[0].data[p] != c[0].data[p]);
    CHECK(any_differ);
  }
  SECTION("the j-th sample does not depend on how many were requested") {
    const auto few = ctflow::eval::sample_posterior(model, fbp, 5, 42);
    const auto many = ctflow::eval::sample_posterior(model, fbp, 40, 42);
    for (std::size_t j = 0; j < 5; ++j) {
      for (std::size_t p = 0; p < 64; ++p) CHECK(few[j].data[p] == many[j].data[p]);
    }
  }
}

TEST_CASE("identity-initialized flow draws a standard normal posterior") {
  // At initialization the inverse is an orthogonal map, so pixels of the
  // samples are jointly standard normal whatever the conditioning image is.
  auto model = FlowModel<float>(miniature_config());
  Rng rng(6);
  const auto fbp = random_image<float>(rng, 8);
  const std::size_t n = 2000;
  const auto samples = ctflow::eval::sample_posterior(model, fbp, n, 7);
  REQUIRE(samples.size() == n);

  std::vector<double> mean(64, 0.0), var(64, 0.0);
  for (const auto& s : samples) {
    for (std::size_t p = 0; p < 64; ++p) mean[p] += static_cast<double>(s.data[p]);
  }
  for (auto& m : mean) m /= static_cast<double>(n);
  for (const auto& s : samples) {
    for (std::size_t p = 0; p < 64; ++p) {
      const double d = static_cast<double>(s.data[p]) - mean[p];
      var[p] += d * d;
    }
  }
  for (auto& v : var) v /= static_cast<double>(n - 1);

  double pooled_mean = 0.0, pooled_var = 0.0, worst_var = 0.0;
  for (std::size_t p = 0; p < 64; ++p) {
    pooled_mean += mean[p];
    pooled_var += var[p];
    worst_var = std::max(worst_var, std::abs(var[p] - 1.0));
  }
  pooled_mean /= 64.0;
  pooled_var /= 64.0;

  // Three-sigma bounds: sd of a pixel variance estimate is sqrt(2/(n-1)),
  // the pooled versions shrink by sqrt(64).
  CHECK(std::abs(pooled_mean) < 3.0 * std::sqrt(1.0 / (static_cast<double>(n) * 64.0)));
  CHECK(std::abs(pooled_var - 1.0) <
        3.0 * std::sqrt(2.0 / static_cast<double>(n - 1) / 64.0));
  CHECK(worst_var < 5.0 * std::sqrt(2.0 / static_cast<double>(n - 1)));
}

TEST_CASE("conditional mean matches direct sample statistics") {
  auto model = FlowModel<float>(miniature_config());
  Rng rng(8);
  const auto fbp = random_image<float>(rng, 8);

  SECTION("mean and std over a fixed draw") {
    const std::size_t n = 64;
    const auto samples = ctflow::eval::sample_posterior(model, fbp, n, 9);
    const auto summary = ctflow::eval::conditional_mean(model, fbp, n, 9);
    REQUIRE(summary.n == n);
    for (std::size_t p = 0; p < 64; ++p) {
      double m = 0.0;
      for (const auto& s : samples) m += static_cast<double>(s.data[p]);
      m /= static_cast<double>(n);
      double v = 0.0;
      for (const auto& s : samples) {
        const double d = static_cast<double>(s.data[p]) - m;
        v += d * d;
      }
      const double sd = std::sqrt(v / static_cast<double>(n));
      CHECK_THAT(static_cast<double>(summary.mean.data[p]),
                 Catch::Matchers::WithinAbs(m, 1e-6));
      CHECK_THAT(static_cast<double>(summary.std.data[p]),
                 Catch::Matchers::WithinAbs(sd, 1e-6));
    }
  }
  SECTION("a single sample is its own mean with zero spread") {
    const auto samples = ctflow::eval::sample_posterior(model, fbp, 1, 10);
    const auto summary = ctflow::eval::conditional_mean(model, fbp, 1, 10);
    for (std::size_t p = 0; p < 64; ++p) {
      CHECK(summary.mean.data[p] == samples[0].data[p]);
      CHECK(summary.std.data[p] == 0.0f);
    }
  }
  SECTION("count lists are validated") {
    CHECK_THROWS_AS(ctflow::eval::conditional_mean_curve(model, fbp, {}, 1), ConfigError);
    CHECK_THROWS_AS(ctflow::eval::conditional_mean_curve(model, fbp, {4, 0}, 1),
                    ConfigError);
  }
}

TEST_CASE("posterior mean noise shrinks like one over root n") {
  auto model = FlowModel<float>(miniature_config());
  Rng rng(11);
  const auto fbp = random_image<float>(rng, 8);
  const std::size_t repeats = 40;

  auto pooled_variance = [&](std::size_t n, std::uint64_t base_seed) {
    std::vector<std::vector<float>> means;
    means.reserve(repeats);
    for (std::size_t k = 0; k < repeats; ++k) {
      means.push_back(
          ctflow::eval::conditional_mean(model, fbp, n, derive_seed(base_seed, k)).mean.data);
    }
    double pooled = 0.0;
    for (std::size_t p = 0; p < 64; ++p) {
      double m = 0.0;
      for (const auto& img : means) m += static_cast<double>(img[p]);
      m /= static_cast<double>(repeats);
      double v = 0.0;
      for (const auto& img : means) {
        const double d = static_cast<double>(img[p]) - m;
        v += d * d;
      }
      pooled += v / static_cast<double>(repeats - 1);
    }
    return pooled / 64.0;
  };

  const double var10 = pooled_variance(10, 2000);
  const double var100 = pooled_variance(100, 3000);
  const double ratio = std::sqrt(var10 / var100);
  CHECK_THAT(ratio, Catch::Matchers::WithinAbs(std::sqrt(10.0), 0.2 * std::sqrt(10.0)));
}

TEST_CASE("prefix statistics are independent of the requested sample count") {
  auto model = FlowModel<float>(miniature_config());
  Rng rng(12);
  const auto fbp = random_image<float>(rng, 8);

  const auto curve = ctflow::eval::conditional_mean_curve(model, fbp, {50, 1, 10}, 13);
  REQUIRE(curve.size() == 3);
  const std::size_t counts[3] = {1, 10, 50};
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(curve[i].n == counts[i]);
    const auto standalone = ctflow::eval::conditional_mean(model, fbp, counts[i], 13);
    for (std::size_t p = 0; p < 64; ++p) {
      CHECK(curve[i].mean.data[p] == standalone.mean.data[p]);
      CHECK(curve[i].std.data[p] == standalone.std.data[p]);
    }
  }
}

TEST_CASE("evaluate scores every pair at the baseline and every sample count") {
  auto model = FlowModel<float>(small_config());
  const auto ds = make_dataset<float>(3, 5);
  EvalConfig cfg;
  cfg.n_list = {4, 1};
  cfg.seed = 11;

  const EvalReport report = ctflow::eval::evaluate(model, ds, cfg);

  SECTION("row layout and scores") {
    REQUIRE(report.rows.size() == 9);
    const std::size_t expect_n[3] = {0, 1, 4};
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 3; ++j) {
        const auto& row = report.rows[i * 3 + j];
        CHECK(row.image_id == i);
        CHECK(row.n == expect_n[j]);
      }
      const auto& baseline = report.rows[i * 3];
      CHECK(baseline.psnr_db ==
            ctflow::eval::psnr(ds.pairs[i].fbp, ds.pairs[i].reference, cfg.data_range));
      CHECK(baseline.ssim_value == ctflow::eval::ssim(ds.pairs[i].fbp, ds.pairs[i].reference,
                                                      cfg.data_range, cfg.ssim_cfg));
    }
    CHECK(report.seconds >= 0.0);
  }
  SECTION("aggregates are the column means") {
    REQUIRE(report.aggregates.size() == 3);
    const std::size_t expect_n[3] = {0, 1, 4};
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(report.aggregates[i].n == expect_n[i]);
      double psnr_sum = 0.0, ssim_sum = 0.0;
      for (const auto& row : report.rows) {
        if (row.n != expect_n[i]) continue;
        psnr_sum += row.psnr_db;
        ssim_sum += row.ssim_value;
      }
      CHECK_THAT(report.aggregates[i].mean_psnr,
                 Catch::Matchers::WithinAbs(psnr_sum / 3.0, 1e-12));
      CHECK_THAT(report.aggregates[i].mean_ssim,
                 Catch::Matchers::WithinAbs(ssim_sum / 3.0, 1e-12));
    }
    const std::string table = ctflow::eval::aggregate_table(report);
    CHECK_THAT(table, Catch::Matchers::ContainsSubstring("fbp baseline:"));
    CHECK_THAT(table, Catch::Matchers::ContainsSubstring("n=4:"));
  }
  SECTION("reruns and subsets reproduce the same numbers") {
    const EvalReport again = ctflow::eval::evaluate(model, ds, cfg);
    REQUIRE(again.rows.size() == report.rows.size());
    for (std::size_t r = 0; r < report.rows.size(); ++r) {
      CHECK(again.rows[r].psnr_db == report.rows[r].psnr_db);
      CHECK(again.rows[r].ssim_value == report.rows[r].ssim_value);
    }
    EvalConfig tail = cfg;
    tail.begin = 1;
    const EvalReport sub = ctflow::eval::evaluate(model, ds, tail);
    REQUIRE(sub.rows.size() == 6);
    for (std::size_t r = 0; r < 6; ++r) {
      CHECK(sub.rows[r].image_id == report.rows[3 + r].image_id);
      CHECK(sub.rows[r].psnr_db == report.rows[3 + r].psnr_db);
      CHECK(sub.rows[r].ssim_value == report.rows[3 + r].ssim_value);
    }
  }
  SECTION("csv round trips byte for byte") {
    ctflow::eval::write_report_csv("tmp_eval_a.csv", report);
    ctflow::eval::write_report_csv("tmp_eval_b.csv", report);
    const std::string a = read_bytes("tmp_eval_a.csv");
    CHECK(a == read_bytes("tmp_eval_b.csv"));
    CHECK(a.rfind("image_id,n,psnr,ssim\n", 0) == 0);
    CHECK(std::count(a.begin(), a.end(), '\n') == 10);
    std::remove("tmp_eval_a.csv");
    std::remove("tmp_eval_b.csv");
  }
  SECTION("empty tail produces a header-only report") {
    EvalConfig none = cfg;
    none.begin = 3;
    const EvalReport empty = ctflow::eval::evaluate(model, ds, none);
    CHECK(empty.rows.empty());
    CHECK(empty.aggregates.empty());
    ctflow::eval::write_report_csv("tmp_eval_empty.csv", empty);
    CHECK(read_bytes("tmp_eval_empty.csv") == "image_id,n,psnr,ssim\n");
    std::remove("tmp_eval_empty.csv");
  }
  SECTION("bad ranges are rejected") {
    EvalConfig bad = cfg;
    bad.begin = 4;
    CHECK_THROWS_AS(ctflow::eval::evaluate(model, ds, bad), DataError);
    bad.begin = 1;
    bad.count = 3;
    CHECK_THROWS_AS(ctflow::eval::evaluate(model, ds, bad), DataError);
    EvalConfig nolist = cfg;
    nolist.n_list = {};
    CHECK_THROWS_AS(ctflow::eval::evaluate(model, ds, nolist), ConfigError);
  }
}

TEST_CASE("sixteen-bit pgm export is exact") {
  SECTION("known values map to known bytes") {
    const double data[4] = {0.0, 0.5, 1.0, 2.0};
    ctflow::write_pgm16("tmp_eval.pgm", data, 2, 2, 0.0, 1.0);
    const std::string want = std::string("P5\n2 2\n65535\n") +
                             std::string("\x00\x00\x80\x00\xff\xff\xff\xff", 8);
    CHECK(read_bytes("tmp_eval.pgm") == want);
    std::remove("tmp_eval.pgm");
  }
  SECTION("the window relocates zero") {
    const float data[2] = {0.0f, -2.0f};
    ctflow::write_pgm16("tmp_eval.pgm", data, 1, 2, -1.0, 1.0);
    const std::string want = std::string("P5\n2 1\n65535\n") +
                             std::string("\x80\x00\x00\x00", 4);
    CHECK(read_bytes("tmp_eval.pgm") == want);
    std::remove("tmp_eval.pgm");
  }
  SECTION("degenerate windows are rejected") {
    const double data[1] = {0.0};
    CHECK_THROWS_AS(ctflow::write_pgm16("tmp_eval.pgm", data, 1, 1, 1.0, 1.0), ConfigError);
    CHECK_THROWS_AS(ctflow::write_pgm16("tmp_eval.pgm", data, 1, 1, 2.0, 1.0), ConfigError);
  }
}
