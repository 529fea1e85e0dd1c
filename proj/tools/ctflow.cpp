#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ctflow/cli/config.hpp"
#include "ctflow/eval/evaluate.hpp"
#include "ctflow/eval/metrics.hpp"
#include "ctflow/eval/posterior.hpp"
#include "ctflow/tomo/dataset.hpp"
#include "ctflow/tomo/fbp.hpp"
#include "ctflow/train/trainer.hpp"

namespace fs = std::filesystem;
using ctflow::cli::RunConfig;

namespace {

RunConfig make_config(const std::string& path, const std::vector<std::string>& sets) {
  RunConfig cfg = path.empty() ? RunConfig{} : ctflow::cli::load_config(path);
  for (const std::string& s : sets) ctflow::cli::apply_assignment(cfg, s);
  return cfg;
}

template <typename T>
void write_image_pgm(const std::string& path, const ctflow::tomo::Image<T>& img, double lo,
                     double hi) {
  ctflow::write_pgm16(path, img.data.data(), img.size, img.size, lo, hi);
}

// Display window for a standard-deviation map: zero up to the peak value.
template <typename T>
double std_window_top(const ctflow::tomo::Image<T>& img) {
  double top = 0.0;
  for (const T v : img.data) top = std::max(top, static_cast<double>(v));
  return top > 0.0 ? top : 1.0;
}

void run_gen_data(const RunConfig& cfg, const std::string& out) {
  ctflow::tomo::build_dataset(cfg.dataset, out);
  ctflow::cli::write_config(out + ".config", cfg);
  const auto& g = cfg.dataset.geometry;
  std::printf("wrote %zu pairs (%zux%zu image, %zu angles, %zu detectors) to %s\n",
              cfg.dataset.count, g.image_size, g.image_size, g.num_angles, g.num_detectors,
              out.c_str());
  std::printf("phantom family %s, seed %llu, n0 high %g / low %g\n",
              cfg.dataset.phantom_family.c_str(),
              static_cast<unsigned long long>(cfg.dataset.seed), cfg.dataset.n0_highdose,
              cfg.dataset.n0_lowdose);
  std::printf("manifest: %s.manifest\neffective config: %s.config\n", out.c_str(),
              out.c_str());
}

template <typename T>
void run_train(const RunConfig& cfg, const std::string& data, const std::string& out) {
  fs::create_directories(out);
  ctflow::cli::write_config(out + "/config", cfg);
  const auto result = ctflow::train::train_run<T>(data, cfg.flow, cfg.train, out);
  const std::size_t dim = cfg.flow.image_size * cfg.flow.image_size;
  std::printf("trained %zu steps: nll %.6f -> %.6f (%.4f bits/dim)\n", cfg.train.steps,
              result.initial_nll, result.final_nll,
              ctflow::train::bits_per_dim(result.final_nll, dim));
  std::printf("checkpoint: %s\nloss log: %s/loss.csv\n", result.checkpoint_path.c_str(),
              out.c_str());
}

template <typename T>
void run_reconstruct(const RunConfig& cfg, const std::string& ckpt, const std::string& data,
                     std::size_t pair_index, const std::string& sinogram,
                     const std::string& out) {
  auto model = ctflow::flow::FlowModel<T>::load(ckpt);
  ctflow::tomo::Sinogram<T> sino;
  ctflow::tomo::Geometry geom;
  ctflow::tomo::Image<T> reference;
  bool have_reference = false;
  if (!data.empty()) {
    const auto ds = ctflow::tomo::load_dataset<T>(data);
    if (pair_index >= ds.pairs.size()) {
      throw ctflow::DataError("reconstruct: pair index " + std::to_string(pair_index) +
                              " out of range (dataset has " +
                              std::to_string(ds.pairs.size()) + " pairs)");
    }
    sino = ds.pairs[pair_index].low_dose_sinogram;
    reference = ds.pairs[pair_index].reference;
    have_reference = true;
    geom = ds.geometry;
  } else {
    auto loaded = ctflow::tomo::load_sinogram<T>(sinogram);
    sino = std::move(loaded.first);
    geom = loaded.second;
  }
  if (geom.image_size != model->config().image_size) {
    throw ctflow::DimensionError(
        "reconstruct: data grid " + std::to_string(geom.image_size) +
        " does not match the model input " + std::to_string(model->config().image_size));
  }
  const auto fbp = ctflow::tomo::fbp_reconstruct(sino, geom);
  const auto summary =
      ctflow::eval::conditional_mean(*model, fbp, cfg.recon_n, cfg.recon_seed);

  fs::create_directories(out);
  ctflow::cli::write_config(out + "/config", cfg);
  write_image_pgm(out + "/mean.pgm", summary.mean, 0.0, 1.0);
  write_image_pgm(out + "/std.pgm", summary.std, 0.0, std_window_top(summary.std));
  std::printf("conditional mean of %zu samples (seed %llu)\n", cfg.recon_n,
              static_cast<unsigned long long>(cfg.recon_seed));
  std::printf("mean: %s/mean.pgm\nstd:  %s/std.pgm\n", out.c_str(), out.c_str());
  if (have_reference) {
    std::printf("psnr vs reference: %.2f dB\n",
                ctflow::eval::psnr(summary.mean, reference, cfg.eval.data_range));
  }
}

template <typename T>
void run_evaluate(const RunConfig& cfg, const std::string& ckpt, const std::string& data,
                  const std::string& out) {
  auto model = ctflow::flow::FlowModel<T>::load(ckpt);
  const auto ds = ctflow::tomo::load_dataset<T>(data);
  const auto report = ctflow::eval::evaluate(*model, ds, cfg.eval);
  fs::create_directories(out);
  ctflow::cli::write_config(out + "/config", cfg);
  ctflow::eval::write_report_csv(out + "/report.csv", report);
  std::printf("%s", ctflow::eval::aggregate_table(report).c_str());
  std::printf("wrote %zu rows to %s/report.csv (%.1f s)\n", report.rows.size(), out.c_str(),
              report.seconds);
}

template <typename T>
void run_fbp(const RunConfig& cfg, const std::string& data, const std::string& sinogram,
             const std::string& out) {
  fs::create_directories(out);
  ctflow::cli::write_config(out + "/config", cfg);
  if (data.empty()) {
    const auto loaded = ctflow::tomo::load_sinogram<T>(sinogram);
    const auto recon = ctflow::tomo::fbp_reconstruct(loaded.first, loaded.second);
    write_image_pgm(out + "/fbp_0.pgm", recon, 0.0, 1.0);
    std::printf("wrote 1 reconstruction to %s (no references, metrics skipped)\n",
                out.c_str());
    return;
  }
  const auto ds = ctflow::tomo::load_dataset<T>(data);
  auto os = ctflow::io::open_out(out + "/fbp.csv", /*binary=*/false);
  os << "image_id,psnr,ssim\n" << std::setprecision(10);
  double psnr_sum = 0.0, ssim_sum = 0.0;
  for (std::size_t i = 0; i < ds.pairs.size(); ++i) {
    const auto recon = ctflow::tomo::fbp_reconstruct(ds.pairs[i].low_dose_sinogram,
                                                     ds.geometry);
    write_image_pgm(out + "/fbp_" + std::to_string(i) + ".pgm", recon, 0.0, 1.0);
    const double p =
        ctflow::eval::psnr(recon, ds.pairs[i].reference, cfg.eval.data_range);
    const double s = ctflow::eval::ssim(recon, ds.pairs[i].reference, cfg.eval.data_range,
                                        cfg.eval.ssim_cfg);
    os << i << ',' << p << ',' << s << '\n';
    psnr_sum += p;
    ssim_sum += s;
  }
  if (!os) throw ctflow::DataError("write failed: " + out + "/fbp.csv");
  std::printf("wrote %zu reconstructions to %s\n", ds.pairs.size(), out.c_str());
  if (!ds.pairs.empty()) {
    const double n = static_cast<double>(ds.pairs.size());
    std::printf("fbp baseline: psnr=%g dB  ssim=%g\n", psnr_sum / n, ssim_sum / n);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"conditional-flow CT reconstruction pipeline"};
  app.require_subcommand(1);

  std::string config_path, data_path, out_path, ckpt_path, sinogram_path, n_list;
  std::vector<std::string> sets;
  std::uint64_t seed = 0;
  std::size_t count = 0, steps = 0, pair_index = 0, n_samples = 0, begin = 0, take = 0;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "settings file (key=value with [sections])")
        ->check(CLI::ExistingFile);
    cmd->add_option("--set", sets, "override one setting, section.key=value");
  };

  auto* gen = app.add_subcommand("gen-data", "simulate a dataset of phantom scan pairs");
  add_common(gen);
  gen->add_option("--out", out_path, "dataset file to write")->required();
  auto* gen_count = gen->add_option("--count", count, "number of pairs");
  auto* gen_seed = gen->add_option("--seed", seed, "dataset seed");

  auto* train = app.add_subcommand("train", "fit the flow to a dataset");
  add_common(train);
  train->add_option("--data", data_path, "training dataset")->required();
  train->add_option("--out", out_path, "output directory")->required();
  auto* train_steps = train->add_option("--steps", steps, "gradient steps");
  auto* train_seed = train->add_option("--seed", seed, "training seed");

  auto* rec = app.add_subcommand("reconstruct",
                                 "posterior mean and spread for one measurement");
  add_common(rec);
  rec->add_option("--ckpt,--checkpoint", ckpt_path, "model checkpoint")->required();
  auto* rec_data = rec->add_option("--data", data_path, "dataset holding the measurement");
  rec->add_option("--pair-index", pair_index, "pair to reconstruct (with --data)");
  auto* rec_sino = rec->add_option("--sinogram", sinogram_path, "standalone sinogram file");
  rec_sino->excludes(rec_data);
  rec->add_option("--out", out_path, "output directory")->required();
  auto* rec_n = rec->add_option("--n", n_samples, "posterior samples to average");
  auto* rec_seed = rec->add_option("--seed", seed, "sampling seed");

  auto* ev = app.add_subcommand("evaluate", "score reconstructions over a test set");
  add_common(ev);
  ev->add_option("--ckpt,--checkpoint", ckpt_path, "model checkpoint")->required();
  ev->add_option("--data", data_path, "test dataset")->required();
  ev->add_option("--out", out_path, "output directory")->required();
  auto* ev_nlist = ev->add_option("--n-list", n_list, "sample counts, e.g. 1,10,100");
  auto* ev_seed = ev->add_option("--seed", seed, "evaluation seed");
  auto* ev_begin = ev->add_option("--begin", begin, "first pair to score");
  auto* ev_count = ev->add_option("--count", take, "pairs to score (0 = rest)");

  auto* fbp = app.add_subcommand("fbp", "filtered back-projection baseline");
  add_common(fbp);
  auto* fbp_data = fbp->add_option("--data", data_path, "dataset to reconstruct");
  auto* fbp_sino = fbp->add_option("--sinogram", sinogram_path, "standalone sinogram file");
  fbp_sino->excludes(fbp_data);
  fbp->add_option("--out", out_path, "output directory")->required();
  fbp->add_option("--seed", seed, "accepted for uniformity; fbp is deterministic");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    RunConfig cfg = make_config(config_path, sets);
    if (gen->parsed()) {
      if (gen_count->count() > 0) cfg.dataset.count = count;
      if (gen_seed->count() > 0) cfg.dataset.seed = seed;
      cfg.finalize_and_validate();
      run_gen_data(cfg, out_path);
    } else if (train->parsed()) {
      if (train_steps->count() > 0) cfg.train.steps = steps;
      if (train_seed->count() > 0) cfg.train.seed = seed;
      cfg.finalize_and_validate();
      if (cfg.precision == "double") {
        run_train<double>(cfg, data_path, out_path);
      } else {
        run_train<float>(cfg, data_path, out_path);
      }
    } else if (rec->parsed()) {
      if (rec_data->count() == 0 && rec_sino->count() == 0) {
        throw ctflow::ConfigError("reconstruct: need --data or --sinogram");
      }
      if (rec_n->count() > 0) cfg.recon_n = n_samples;
      if (rec_seed->count() > 0) cfg.recon_seed = seed;
      cfg.finalize_and_validate();
      if (cfg.precision == "double") {
        run_reconstruct<double>(cfg, ckpt_path, data_path, pair_index, sinogram_path,
                                out_path);
      } else {
        run_reconstruct<float>(cfg, ckpt_path, data_path, pair_index, sinogram_path,
                               out_path);
      }
    } else if (ev->parsed()) {
      if (ev_nlist->count() > 0) ctflow::cli::apply_key(cfg, "eval", "n_list", n_list);
      if (ev_seed->count() > 0) cfg.eval.seed = seed;
      if (ev_begin->count() > 0) cfg.eval.begin = begin;
      if (ev_count->count() > 0) cfg.eval.count = take;
      cfg.finalize_and_validate();
      if (cfg.precision == "double") {
        run_evaluate<double>(cfg, ckpt_path, data_path, out_path);
      } else {
        run_evaluate<float>(cfg, ckpt_path, data_path, out_path);
      }
    } else if (fbp->parsed()) {
      if (fbp_data->count() == 0 && fbp_sino->count() == 0) {
        throw ctflow::ConfigError("fbp: need --data or --sinogram");
      }
      cfg.finalize_and_validate();
      if (cfg.precision == "double") {
        run_fbp<double>(cfg, data_path, sinogram_path, out_path);
      } else {
        run_fbp<float>(cfg, data_path, sinogram_path, out_path);
      }
    }
    return 0;
  } catch (const ctflow::ConfigError& e) {
    std::fprintf(stderr, "ctflow: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "ctflow: %s\n", e.what());
    return 3;
  }
}
