// Command-line front end: train cascades, align single images, run the
// convergence / rate / swap / tracking experiments and the selftest.
//
// Exit codes: 0 on success, 1 on runtime failures (I/O, numerics), 2 on bad
// arguments or configs.

#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "clk/cascade.hpp"
#include "clk/errors.hpp"
#include "clk/harness.hpp"
#include "clk/image.hpp"
#include "clk/parallel.hpp"
#include "clk/regressor.hpp"
#include "clk/warp.hpp"

namespace {

using namespace clk;

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = text.find(sep, start);
    if (pos == std::string::npos) {
      out.push_back(text.substr(start));
      return out;
    }
    out.push_back(text.substr(start, pos - start));
    start = pos + 1;
  }
}

/// "x0,y0,x1,y1,x2,y2,x3,y3" in TL,TR,BR,BL order.
Corners parse_corners(const std::string& text) {
  const std::vector<std::string> fields = split(text, ',');
  if (fields.size() != 8)
    throw ConfigError("corners need 8 comma-separated numbers, got '" + text +
                      "'");
  Corners c;
  for (int i = 0; i < 4; ++i) {
    try {
      c[i] = {std::stod(fields[2 * i]), std::stod(fields[2 * i + 1])};
    } catch (const std::exception&) {
      throw ConfigError("bad corner coordinate in '" + text + "'");
    }
  }
  return c;
}

nlohmann::json corners_json(const Corners& c) {
  nlohmann::json j = nlohmann::json::array();
  for (const Point2& pt : c) j.push_back({pt.x, pt.y});
  return j;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << text;
  if (!out) throw IoError("writing " + path + " failed");
}

/// report stem: "r.csv" and "r" both produce r.csv + r.json.
std::string strip_csv_suffix(const std::string& path) {
  const std::string suffix = ".csv";
  if (path.size() > suffix.size() &&
      path.compare(path.size() - suffix.size(), suffix.size(), suffix) == 0)
    return path.substr(0, path.size() - suffix.size());
  return path;
}

/// Everything the eval/track subcommands accept on top of a config file.
/// Flags that were explicitly passed override the file.
struct EvalFlags {
  std::string config;
  std::string methods;
  std::string family;
  std::string swap_to;
  std::string descriptor;
  double train_sigma = 1.2;
  std::string test_sigma;
  int n_train = 100;
  int layers = 5;
  int n_trials = 100;
  std::uint64_t seed = 0;
  std::vector<std::string> images;
  std::string out;
  int frames = 50;
  std::string skips;
  bool lighting = false;
  double sdm_lambda = -1.0;
  bool no_propagate = false;
};

void add_eval_options(CLI::App* cmd, EvalFlags& f, bool tracking) {
  cmd->add_option("--config", f.config, "JSON config file; flags override it");
  cmd->add_option("--methods", f.methods,
                  "comma list from iclk,sdm,glk,clk (default all)");
  cmd->add_option("--family", f.family,
                  "warp family: similarity, affine or homography");
  cmd->add_option("--descriptor", f.descriptor, "descriptor: raw or lbp8");
  cmd->add_option("--train-sigma", f.train_sigma,
                  "training corner-noise std in pixels");
  cmd->add_option("--n-train", f.n_train, "training draws per cascade layer");
  cmd->add_option("--layers", f.layers, "cascade depth");
  cmd->add_option("--seed", f.seed, "master RNG seed");
  cmd->add_option("--image", f.images, "input image (repeatable)");
  cmd->add_option("--out", f.out, "report stem; writes <stem>.csv and .json");
  cmd->add_option("--sdm-lambda", f.sdm_lambda,
                  "SDM ridge weight; negative = grid search");
  cmd->add_flag("--no-propagate", f.no_propagate,
                "train every layer on fresh raw draws");
  if (tracking) {
    cmd->add_option("--frames", f.frames, "sequence length");
    cmd->add_option("--skips", f.skips, "comma list of frame skips");
    cmd->add_flag("--lighting", f.lighting, "per-frame gain/bias jitter");
    cmd->add_option("--n-trials", f.n_trials, "unused by track")->group("");
  } else {
    cmd->add_option("--test-sigma", f.test_sigma,
                    "comma list or start:step:stop range of test noise");
    cmd->add_option("--trials", f.n_trials, "alignment trials per point");
  }
}

/// True when the user passed `name` to this subcommand. Safe on options the
/// subcommand does not define (--swap-to, the tracking trio, --test-sigma),
/// where App::count would throw instead of returning zero.
bool passed(const CLI::App* cmd, const std::string& name) {
  const CLI::Option* opt = cmd->get_option_no_throw(name);
  return opt != nullptr && opt->count() > 0;
}

ExperimentConfig build_config(const CLI::App* cmd, const EvalFlags& f) {
  ExperimentConfig cfg;
  if (passed(cmd, "--config")) {
    std::ifstream in(f.config);
    if (!in) throw IoError("cannot read config " + f.config);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("bad config JSON: " + std::string(e.what()));
    }
    from_json(j, cfg);
  }
  if (passed(cmd, "--methods")) {
    cfg.methods.clear();
    for (const std::string& name : split(f.methods, ','))
      cfg.methods.push_back(method_from_name(name));
  }
  if (passed(cmd, "--family")) cfg.family = family_from_name(f.family);
  if (passed(cmd, "--swap-to")) cfg.swap_to = family_from_name(f.swap_to);
  if (passed(cmd, "--descriptor"))
    cfg.descriptor = descriptor_from_name(f.descriptor);
  if (passed(cmd, "--train-sigma")) cfg.train_sigma = f.train_sigma;
  if (passed(cmd, "--test-sigma"))
    cfg.test_sigma = parse_sigma_list(f.test_sigma);
  if (passed(cmd, "--n-train")) cfg.n_train = f.n_train;
  if (passed(cmd, "--layers")) cfg.layers = f.layers;
  if (passed(cmd, "--trials")) cfg.n_trials = f.n_trials;
  if (passed(cmd, "--seed")) cfg.seed = f.seed;
  if (passed(cmd, "--image")) cfg.images = f.images;
  if (passed(cmd, "--out")) cfg.out = f.out;
  if (passed(cmd, "--frames")) cfg.frames = f.frames;
  if (passed(cmd, "--skips")) {
    cfg.skips.clear();
    for (const std::string& field : split(f.skips, ',')) {
      try {
        cfg.skips.push_back(std::stoi(field));
      } catch (const std::exception&) {
        throw ConfigError("bad skip value '" + field + "'");
      }
    }
  }
  if (passed(cmd, "--lighting")) cfg.lighting = f.lighting;
  if (passed(cmd, "--sdm-lambda")) cfg.sdm_lambda = f.sdm_lambda;
  if (passed(cmd, "--no-propagate")) cfg.propagate = !f.no_propagate;
  if (cfg.images.empty()) throw ConfigError("no input image given");
  return cfg;
}

void emit_report(const ConvergenceReport& report, const ExperimentConfig& cfg,
                 const std::string& csv) {
  std::cout << csv;
  for (const std::string& warning : report.warnings)
    std::cerr << "warning: " << warning << "\n";
  for (const auto& [method, error] : report.training_errors)
    std::cerr << "training failed for " << method << ": " << error << "\n";
  if (!cfg.out.empty()) {
    const std::string stem = strip_csv_suffix(cfg.out);
    write_text(stem + ".csv", csv);
    write_text(stem + ".json", report_to_json(report, cfg).dump(2) + "\n");
  }
}

int run_train(const CLI::App* cmd, const EvalFlags& f,
              const std::string& method, const std::string& corners_text,
              const std::string& model_out) {
  ExperimentConfig cfg = build_config(cmd, f);
  if (cfg.images.size() != 1) throw ConfigError("train takes exactly one image");
  const Method m = method_from_name(method);
  const MultiChannelImage img =
      apply_descriptor(load_image(cfg.images.front()), cfg.descriptor);
  const SamplingGrid grid = SamplingGrid::box();

  WarpParams p_gt = centered_placement(img, grid, cfg.family);
  if (cmd->count("--corners"))
    p_gt = fit_params_from_points(cfg.family, grid.corners(),
                                  parse_corners(corners_text));

  CascadeTrainConfig tc;
  tc.layers = cfg.layers;
  tc.n_per_layer = cfg.n_train;
  tc.sigma = cfg.train_sigma;
  tc.seed = cfg.seed;
  tc.descriptor = cfg.descriptor;
  tc.propagate = cfg.propagate;
  tc.sdm_lambda = cfg.sdm_lambda;

  RegressorCascade cascade;
  switch (m) {
    case Method::ICLK: cascade = iclk_train_cascade(img, p_gt, grid, tc); break;
    case Method::SDM: cascade = sdm_train_cascade(img, p_gt, grid, tc); break;
    case Method::GLK: cascade = glk_train_cascade(img, p_gt, grid, tc); break;
    case Method::CLK: cascade = clk_train_cascade(img, p_gt, grid, tc); break;
  }
  save_cascade(cascade, model_out);
  std::cout << "trained " << method_name(m) << " cascade ("
            << cascade.layers.size() << " layer"
            << (cascade.layers.size() == 1 ? "" : "s") << ", "
            << family_name(cascade.family) << ", "
            << descriptor_name(cascade.descriptor) << ") -> " << model_out
            << "\n";
  return 0;
}

int run_align(const std::string& model_path, const std::string& image_path,
              const std::string& init_text, const std::string& gt_text,
              int max_iters, const std::string& out_path) {
  const RegressorCascade cascade = load_cascade(model_path);
  const MultiChannelImage img =
      apply_descriptor(load_image(image_path), cascade.descriptor);
  const Corners ref = cascade.grid.corners();
  const WarpParams p_init =
      fit_params_from_points(cascade.family, ref, parse_corners(init_text));

  std::optional<WarpParams> gt;
  if (!gt_text.empty())
    gt = fit_params_from_points(cascade.family, ref, parse_corners(gt_text));

  const AlignResult res = run_cascade(img, p_init, cascade, max_iters,
                                      gt ? &*gt : nullptr);

  nlohmann::json j;
  j["p_final"] = res.p_final;
  j["final_corners"] = corners_json(warp_corners(res.p_final, ref));
  j["iterations"] = res.iterations_run;
  j["rmse_per_iteration"] = res.rmse_per_iteration;
  if (gt) j["converged"] = res.converged;
  const std::string text = j.dump(2) + "\n";
  std::cout << text;
  if (!out_path.empty()) write_text(out_path, text);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"planar template alignment: inverse-compositional, supervised "
               "descent, generative and conditional regressors"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "worker thread cap (0 = default)");

  // train
  auto* train_cmd = app.add_subcommand("train", "train a cascade on one image");
  EvalFlags train_flags;
  std::string train_method_name = "clk";
  std::string train_corners;
  std::string train_model_out = "model.json";
  add_eval_options(train_cmd, train_flags, /*tracking=*/false);
  train_cmd->add_option("--method", train_method_name,
                        "iclk, sdm, glk or clk");
  train_cmd->add_option("--corners", train_corners,
                        "template corners x0,y0,...,x3,y3 (TL,TR,BR,BL); "
                        "default centers the grid");
  train_cmd->add_option("--model-out", train_model_out, "model JSON path");

  // align
  auto* align_cmd =
      app.add_subcommand("align", "align a trained model on one image");
  std::string align_model, align_image, align_init, align_gt, align_out;
  int align_iters = 30;
  align_cmd->add_option("--model", align_model, "model JSON path")->required();
  align_cmd->add_option("--image", align_image, "input image")->required();
  align_cmd
      ->add_option("--init-corners", align_init,
                   "starting corners x0,y0,...,x3,y3 (TL,TR,BR,BL)")
      ->required();
  align_cmd->add_option("--gt-corners", align_gt,
                        "ground-truth corners; enables the RMSE trace");
  align_cmd->add_option("--max-iters", align_iters,
                        "iteration cap for iterative models");
  align_cmd->add_option("--out", align_out, "write the result JSON here too");

  // eval-freq / eval-rate / eval-swap
  auto* freq_cmd = app.add_subcommand(
      "eval-freq", "convergence frequency over a test-noise sweep");
  EvalFlags freq_flags;
  add_eval_options(freq_cmd, freq_flags, /*tracking=*/false);

  auto* rate_cmd = app.add_subcommand(
      "eval-rate", "per-iteration error over mutually-converged trials");
  EvalFlags rate_flags;
  add_eval_options(rate_cmd, rate_flags, /*tracking=*/false);

  auto* swap_cmd = app.add_subcommand(
      "eval-swap", "compare a swapped-family conditional cascade");
  EvalFlags swap_flags;
  add_eval_options(swap_cmd, swap_flags, /*tracking=*/false);
  swap_cmd->add_option("--swap-to", swap_flags.swap_to,
                       "family the conditional cascade is rebuilt for");

  // track
  auto* track_cmd = app.add_subcommand(
      "track", "synthetic low-frame-rate tracking experiment");
  EvalFlags track_flags;
  track_flags.n_train = 20;  // first-frame trackers use small training sets
  add_eval_options(track_cmd, track_flags, /*tracking=*/true);

  // selftest
  auto* selftest_cmd =
      app.add_subcommand("selftest", "run the built-in invariant suites");

  // Let --threads appear after the subcommand name too.
  for (CLI::App* sub : app.get_subcommands([](CLI::App*) { return true; }))
    sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (threads > 0) clk::set_threads(threads);

  try {
    if (*train_cmd)
      return run_train(train_cmd, train_flags, train_method_name,
                       train_corners, train_model_out);
    if (*align_cmd)
      return run_align(align_model, align_image, align_init, align_gt,
                       align_iters, align_out);
    if (*freq_cmd) {
      const ExperimentConfig cfg = build_config(freq_cmd, freq_flags);
      const ConvergenceReport report = eval_frequency(cfg);
      emit_report(report, cfg, frequency_csv(report));
      return 0;
    }
    if (*rate_cmd) {
      const ExperimentConfig cfg = build_config(rate_cmd, rate_flags);
      const ConvergenceReport report = eval_rate(cfg);
      emit_report(report, cfg, rate_csv(report));
      return 0;
    }
    if (*swap_cmd) {
      const ExperimentConfig cfg = build_config(swap_cmd, swap_flags);
      const ConvergenceReport report = eval_swap(cfg);
      emit_report(report, cfg, frequency_csv(report));
      return 0;
    }
    if (*track_cmd) {
      const ExperimentConfig cfg = build_config(track_cmd, track_flags);
      const TrackReport report = run_track_experiment(cfg);
      const std::string csv = track_csv(report);
      std::cout << csv;
      for (const auto& [method, error] : report.training_errors)
        std::cerr << "training failed for " << method << ": " << error << "\n";
      if (!cfg.out.empty()) {
        const std::string stem = strip_csv_suffix(cfg.out);
        write_text(stem + ".csv", csv);
        write_text(stem + ".json",
                   track_report_to_json(report, cfg).dump(2) + "\n");
      }
      return 0;
    }
    if (*selftest_cmd) return run_selftest(std::cout) ? 0 : 1;
  } catch (const clk::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
