#pragma once

#include <algorithm>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ctflow/core/io.hpp"
#include "ctflow/core/rng.hpp"
#include "ctflow/eval/metrics.hpp"
#include "ctflow/eval/posterior.hpp"
#include "ctflow/tomo/dataset.hpp"

namespace ctflow::eval {

struct EvalConfig {
  std::vector<std::size_t> n_list{1, 10, 100, 1000};
  std::uint64_t seed = 0;
  double data_range = 1.0;
  SsimConfig ssim_cfg{};
  std::size_t begin = 0;  // first pair to evaluate
  std::size_t count = 0;  // 0 takes everything from begin on

  void validate() const {
    if (n_list.empty()) throw ConfigError("evaluate: n_list must not be empty");
    for (const std::size_t n : n_list) {
      if (n < 1) throw ConfigError("evaluate: sample counts must be >= 1");
    }
    if (data_range <= 0) throw ConfigError("evaluate: data_range must be > 0");
    ssim_cfg.validate();
  }
};

// n = 0 marks the FBP baseline (the conditioner input scored as-is).
struct EvalRow {
  std::size_t image_id = 0;
  std::size_t n = 0;
  double psnr_db = 0.0;
  double ssim_value = 0.0;
};

struct EvalAggregate {
  std::size_t n = 0;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::vector<EvalAggregate> aggregates;  // baseline first, then ascending n
  double seconds = 0.0;
};

// Scores the conditional-mean reconstruction at every requested sample count
// against the stored reference, next to the FBP baseline. Per-image seeds are
// derived from the run seed and the absolute pair index, so any subset or
// ordering of images reproduces the full run's numbers.
template <typename T>
EvalReport evaluate(flow::FlowModel<T>& model, const tomo::Dataset<T>& ds,
                    const EvalConfig& cfg) {
  cfg.validate();
  if (cfg.begin > ds.pairs.size()) {
    throw DataError("evaluate: begin " + std::to_string(cfg.begin) +
                    " exceeds dataset size " + std::to_string(ds.pairs.size()));
  }
  const std::size_t count =
      cfg.count == 0 ? ds.pairs.size() - cfg.begin : cfg.count;
  if (cfg.begin + count > ds.pairs.size()) {
    throw DataError("evaluate: range [" + std::to_string(cfg.begin) + ", " +
                    std::to_string(cfg.begin + count) + ") exceeds dataset size " +
                    std::to_string(ds.pairs.size()));
  }
  const auto start = std::chrono::steady_clock::now();

  EvalReport report;
  for (std::size_t i = cfg.begin; i < cfg.begin + count; ++i) {
    const tomo::DataPair<T>& pair = ds.pairs[i];
    report.rows.push_back(EvalRow{i, 0, psnr(pair.fbp, pair.reference, cfg.data_range),
                                  ssim(pair.fbp, pair.reference, cfg.data_range,
                                       cfg.ssim_cfg)});
    const auto curve =
        conditional_mean_curve(model, pair.fbp, cfg.n_list, derive_seed(cfg.seed, i));
    for (const PosteriorSummary<T>& snap : curve) {
      report.rows.push_back(EvalRow{i, snap.n,
                                    psnr(snap.mean, pair.reference, cfg.data_range),
                                    ssim(snap.mean, pair.reference, cfg.data_range,
                                         cfg.ssim_cfg)});
    }
  }

  std::map<std::size_t, EvalAggregate> by_n;
  std::map<std::size_t, std::size_t> tallies;
  for (const EvalRow& row : report.rows) {
    EvalAggregate& agg = by_n[row.n];
    agg.n = row.n;
    agg.mean_psnr += row.psnr_db;
    agg.mean_ssim += row.ssim_value;
    tallies[row.n] += 1;
  }
  for (auto& [n, agg] : by_n) {
    agg.mean_psnr /= static_cast<double>(tallies[n]);
    agg.mean_ssim /= static_cast<double>(tallies[n]);
    report.aggregates.push_back(agg);
  }
  report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

inline void write_report_csv(const std::string& path, const EvalReport& report) {
  auto os = io::open_out(path, /*binary=*/false);
  os << "image_id,n,psnr,ssim\n" << std::setprecision(10);
  for (const EvalRow& row : report.rows) {
    os << row.image_id << ',' << row.n << ',' << row.psnr_db << ',' << row.ssim_value << '\n';
  }
  if (!os) throw DataError("write failed: " + path);
}

// Human-readable aggregate block; the n = 0 line is the FBP baseline.
inline std::string aggregate_table(const EvalReport& report) {
  std::ostringstream out;
  out << std::setprecision(6);
  for (const EvalAggregate& agg : report.aggregates) {
    if (agg.n == 0) {
      out << "fbp baseline: ";
    } else {
      out << "n=" << agg.n << ": ";
    }
    out << "psnr=" << agg.mean_psnr << " dB  ssim=" << agg.mean_ssim << "\n";
  }
  return out.str();
}

}  // namespace ctflow::eval
