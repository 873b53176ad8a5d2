#include "clk/harness.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <limits>
#include <ostream>
#include <random>
#include <sstream>
#include <utility>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "clk/conditional.hpp"
#include "clk/errors.hpp"
#include "clk/glk.hpp"
#include "clk/image.hpp"
#include "clk/parallel.hpp"
#include "clk/rng.hpp"
#include "clk/sdm.hpp"
#include "clk/synth.hpp"
#include "clk/warp.hpp"

namespace clk {

namespace {

// Stream tags for the independent RNG streams an experiment consumes.
constexpr std::uint64_t kTrialStream = 0x747269616cULL;     // "trial"
constexpr std::uint64_t kTrajectoryStream = 0x7472616aULL;  // "traj"
constexpr std::uint64_t kLightingStream = 0x6c696768ULL;    // "ligh"

/// Locale-independent shortest-of-17-significant-digits rendering, the
/// numeric format every CSV field uses.
std::string g17(double v) {
  char buf[64];
  const auto res =
      std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& text) {
  double v = 0.0;
  const char* begin = text.data();
  const char* end = begin + text.size();
  const auto res = std::from_chars(begin, end, v);
  if (res.ec != std::errc{} || res.ptr != end)
    throw IoError("not a number: '" + text + "'");
  return v;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(sep, start);
    if (pos == std::string::npos) {
      fields.push_back(line.substr(start));
      return fields;
    }
    fields.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

CascadeTrainConfig train_config(const ExperimentConfig& cfg) {
  CascadeTrainConfig tc;
  tc.layers = cfg.layers;
  tc.n_per_layer = cfg.n_train;
  tc.sigma = cfg.train_sigma;
  tc.seed = cfg.seed;
  tc.descriptor = cfg.descriptor;
  tc.propagate = cfg.propagate;
  tc.sdm_lambda = cfg.sdm_lambda;
  return tc;
}

RegressorCascade train_method(Method m, const MultiChannelImage& img,
                              const WarpParams& p_gt, const SamplingGrid& grid,
                              const CascadeTrainConfig& tc) {
  switch (m) {
    case Method::ICLK: return iclk_train_cascade(img, p_gt, grid, tc);
    case Method::SDM: return sdm_train_cascade(img, p_gt, grid, tc);
    case Method::GLK: return glk_train_cascade(img, p_gt, grid, tc);
    case Method::CLK: return clk_train_cascade(img, p_gt, grid, tc);
  }
  throw ConfigError("unknown method");
}

/// One compared cascade stack: a label plus one trained cascade per image.
struct Arm {
  std::string label;
  std::vector<RegressorCascade> cascades;
};

void check_eval_config(const ExperimentConfig& cfg, std::size_t n_images) {
  if (n_images == 0) throw ConfigError("no input images");
  if (cfg.test_sigma.empty()) throw ConfigError("empty test sigma list");
  for (const double s : cfg.test_sigma)
    if (!(s > 0.0)) throw ConfigError("test sigma values must be positive");
  if (cfg.n_trials < 1) throw ConfigError("n_trials must be at least 1");
}

std::vector<MultiChannelImage> descriptor_images(
    const ExperimentConfig& cfg, const std::vector<MultiChannelImage>& images) {
  std::vector<MultiChannelImage> out;
  out.reserve(images.size());
  for (const MultiChannelImage& img : images)
    out.push_back(apply_descriptor(img, cfg.descriptor));
  return out;
}

std::vector<MultiChannelImage> load_images(const ExperimentConfig& cfg) {
  std::vector<MultiChannelImage> out;
  out.reserve(cfg.images.size());
  for (const std::string& path : cfg.images) out.push_back(load_image(path));
  return out;
}

/// Runs every (test sigma, trial) alignment for every arm. Within a trial
/// all arms share the perturbed start, so convergence is directly
/// comparable across methods. Trials are parallel; each writes only its own
/// record slots, and the record stream is derived from (seed, trial index),
/// so the outcome is independent of the thread count.
struct TrialGrid {
  std::vector<std::vector<TrialRecord>> records;  // [arm][sigma * n + trial]

  TrialGrid(const ExperimentConfig& cfg, WarpFamily test_family,
            const std::vector<MultiChannelImage>& desc_images,
            const std::vector<WarpParams>& placements,
            const std::vector<Arm>& arms) {
    const SamplingGrid grid = SamplingGrid::box();
    const Corners ref = grid.corners();
    const std::int64_t n_trials = cfg.n_trials;
    const std::int64_t total =
        static_cast<std::int64_t>(cfg.test_sigma.size()) * n_trials;
    records.resize(arms.size());
    for (auto& r : records) r.resize(total);

    parallel_for(total, [&](std::int64_t flat) {
      const std::size_t s = static_cast<std::size_t>(flat / n_trials);
      const int t = static_cast<int>(flat % n_trials);
      const double sigma = cfg.test_sigma[s];
      const std::size_t img = t % desc_images.size();

      std::mt19937_64 rng = derive_stream(cfg.seed, kTrialStream,
                                          static_cast<std::uint64_t>(flat));
      WarpParams p_init = WarpParams::identity(test_family);
      std::string draw_error;
      try {
        const WarpParams dp =
            perturb_warp(test_family, ref, {sigma, 1, 0}, rng);
        p_init = compose(placements[img], dp);
      } catch (const Error& e) {
        draw_error = e.what();
      }

      for (std::size_t a = 0; a < arms.size(); ++a) {
        TrialRecord& rec = records[a][flat];
        rec.method = arms[a].label;
        rec.test_sigma = sigma;
        rec.trial = t;
        if (!draw_error.empty()) {
          rec.error = draw_error;
          continue;
        }
        try {
          const AlignResult res = run_cascade(
              desc_images[img], p_init, arms[a].cascades[img], 30,
              &placements[img]);
          rec.converged = res.converged;
          rec.rmse = res.rmse_per_iteration;
        } catch (const Error& e) {
          rec.error = e.what();
        }
      }
    });
  }
};

/// Shared assembly for the frequency-style reports: trains the arms, runs
/// the trial grid and aggregates exact convergence counts.
ConvergenceReport frequency_report(const ExperimentConfig& cfg,
                                   WarpFamily test_family,
                                   const std::vector<MultiChannelImage>& desc,
                                   const std::vector<WarpParams>& placements,
                                   const std::vector<Arm>& arms) {
  ConvergenceReport report;
  const TrialGrid runs(cfg, test_family, desc, placements, arms);

  for (std::size_t a = 0; a < arms.size(); ++a) {
    for (std::size_t s = 0; s < cfg.test_sigma.size(); ++s) {
      FrequencyRow row;
      row.method = arms[a].label;
      row.test_sigma = cfg.test_sigma[s];
      row.n_trials = cfg.n_trials;
      for (int t = 0; t < cfg.n_trials; ++t)
        row.n_converged +=
            runs.records[a][s * cfg.n_trials + t].converged ? 1 : 0;
      report.frequencies.push_back(row);
    }
    report.trials.insert(report.trials.end(), runs.records[a].begin(),
                         runs.records[a].end());
  }
  return report;
}

/// Appends per-iteration mean RMSE curves over the mutually-converged
/// trials of each sigma; throws EmptyIntersection when a sigma has none.
void append_rate_curves(const ExperimentConfig& cfg,
                        const std::vector<Arm>& arms,
                        ConvergenceReport& report) {
  // Rebuild the [arm][flat] view from the flat trial list.
  const std::size_t per_arm = cfg.test_sigma.size() * cfg.n_trials;
  auto record = [&](std::size_t a, std::size_t s, int t) -> const TrialRecord& {
    return report.trials[a * per_arm + s * cfg.n_trials + t];
  };

  for (std::size_t s = 0; s < cfg.test_sigma.size(); ++s) {
    std::vector<int> mutual;
    for (int t = 0; t < cfg.n_trials; ++t) {
      bool all = true;
      for (std::size_t a = 0; a < arms.size() && all; ++a)
        all = record(a, s, t).converged;
      if (all) mutual.push_back(t);
    }
    if (mutual.empty())
      throw EmptyIntersection("no trial converged for every method at sigma=" +
                              g17(cfg.test_sigma[s]));

    for (std::size_t a = 0; a < arms.size(); ++a) {
      RateCurve curve;
      curve.method = arms[a].label;
      curve.test_sigma = cfg.test_sigma[s];
      curve.n_used = static_cast<int>(mutual.size());
      std::size_t len = 0;
      for (const int t : mutual)
        len = std::max(len, record(a, s, t).rmse.size());
      curve.mean_rmse.assign(len, 0.0);
      for (const int t : mutual) {
        const std::vector<double>& rmse = record(a, s, t).rmse;
        // A trace that stopped early keeps its final error afterwards.
        for (std::size_t i = 0; i < len; ++i)
          curve.mean_rmse[i] += rmse[std::min(i, rmse.size() - 1)];
      }
      for (double& v : curve.mean_rmse) v /= static_cast<double>(mutual.size());

      if (curve.method == method_name(Method::CLK)) {
        for (std::size_t i = 0; i + 1 < curve.mean_rmse.size(); ++i) {
          if (curve.mean_rmse[i + 1] > curve.mean_rmse[i] + 1e-12) {
            report.warnings.push_back(
                "clk mean rmse increases between applications " +
                std::to_string(i) + " and " + std::to_string(i + 1) +
                " at sigma=" + g17(curve.test_sigma));
            break;
          }
        }
      }
      report.rates.push_back(std::move(curve));
    }
  }
}

/// Trains one arm per method over every image; a training failure removes
/// the arm and records the error under its label.
std::vector<Arm> train_arms(const ExperimentConfig& cfg,
                            const std::vector<MultiChannelImage>& desc,
                            const SamplingGrid& grid,
                            ConvergenceReport& report) {
  if (cfg.methods.empty()) throw ConfigError("no methods selected");
  const CascadeTrainConfig tc = train_config(cfg);

  std::vector<Arm> arms;
  for (const Method m : cfg.methods) {
    Arm arm;
    arm.label = method_name(m);
    try {
      for (const MultiChannelImage& img : desc) {
        const WarpParams p_gt = centered_placement(img, grid, cfg.family);
        arm.cascades.push_back(train_method(m, img, p_gt, grid, tc));
      }
      arms.push_back(std::move(arm));
    } catch (const Error& e) {
      report.training_errors[arm.label] = e.what();
    }
  }
  return arms;
}

}  // namespace

std::string method_name(Method m) {
  switch (m) {
    case Method::ICLK: return "iclk";
    case Method::SDM: return "sdm";
    case Method::GLK: return "glk";
    case Method::CLK: return "clk";
  }
  return "?";
}

Method method_from_name(const std::string& name) {
  if (name == "iclk") return Method::ICLK;
  if (name == "sdm") return Method::SDM;
  if (name == "glk") return Method::GLK;
  if (name == "clk") return Method::CLK;
  throw ConfigError("unknown method: " + name);
}

void to_json(nlohmann::json& j, const ExperimentConfig& cfg) {
  j = nlohmann::json::object();
  nlohmann::json methods = nlohmann::json::array();
  for (const Method m : cfg.methods) methods.push_back(method_name(m));
  j["methods"] = std::move(methods);
  j["family"] = family_name(cfg.family);
  if (cfg.swap_to) j["swap_to"] = family_name(*cfg.swap_to);
  j["descriptor"] = descriptor_name(cfg.descriptor);
  j["train_sigma"] = cfg.train_sigma;
  j["test_sigma"] = cfg.test_sigma;
  j["n_train"] = cfg.n_train;
  j["layers"] = cfg.layers;
  j["n_trials"] = cfg.n_trials;
  j["seed"] = cfg.seed;
  j["images"] = cfg.images;
  j["out"] = cfg.out;
  j["frames"] = cfg.frames;
  j["skips"] = cfg.skips;
  j["lighting"] = cfg.lighting;
  j["sdm_lambda"] = cfg.sdm_lambda;
  j["propagate"] = cfg.propagate;
}

void from_json(const nlohmann::json& j, ExperimentConfig& cfg) {
  if (j.contains("methods")) {
    cfg.methods.clear();
    for (const auto& name : j.at("methods"))
      cfg.methods.push_back(method_from_name(name.get<std::string>()));
  }
  if (j.contains("family"))
    cfg.family = family_from_name(j.at("family").get<std::string>());
  if (j.contains("swap_to")) {
    if (j.at("swap_to").is_null())
      cfg.swap_to.reset();
    else
      cfg.swap_to = family_from_name(j.at("swap_to").get<std::string>());
  }
  if (j.contains("descriptor"))
    cfg.descriptor =
        descriptor_from_name(j.at("descriptor").get<std::string>());
  if (j.contains("train_sigma")) cfg.train_sigma = j.at("train_sigma");
  if (j.contains("test_sigma"))
    cfg.test_sigma = j.at("test_sigma").get<std::vector<double>>();
  if (j.contains("n_train")) cfg.n_train = j.at("n_train");
  if (j.contains("layers")) cfg.layers = j.at("layers");
  if (j.contains("n_trials")) cfg.n_trials = j.at("n_trials");
  if (j.contains("seed")) cfg.seed = j.at("seed");
  if (j.contains("images"))
    cfg.images = j.at("images").get<std::vector<std::string>>();
  if (j.contains("out")) cfg.out = j.at("out");
  if (j.contains("frames")) cfg.frames = j.at("frames");
  if (j.contains("skips")) cfg.skips = j.at("skips").get<std::vector<int>>();
  if (j.contains("lighting")) cfg.lighting = j.at("lighting");
  if (j.contains("sdm_lambda")) cfg.sdm_lambda = j.at("sdm_lambda");
  if (j.contains("propagate")) cfg.propagate = j.at("propagate");
}

std::vector<double> parse_sigma_list(const std::string& text) {
  // Same grammar as parse_double but as a configuration failure: sigma
  // lists come from flags and config files, not data files.
  const auto number = [](const std::string& field) {
    try {
      return parse_double(field);
    } catch (const IoError& e) {
      throw ConfigError(e.what());
    }
  };
  if (text.empty()) throw ConfigError("empty sigma list");
  std::vector<double> out;
  if (text.find(':') != std::string::npos) {
    const std::vector<std::string> parts = split(text, ':');
    if (parts.size() != 3)
      throw ConfigError("range syntax is start:step:stop, got '" + text + "'");
    const double start = number(parts[0]);
    const double step = number(parts[1]);
    const double stop = number(parts[2]);
    if (!(step > 0.0)) throw ConfigError("range step must be positive");
    if (stop < start) throw ConfigError("range stop is before start");
    // Count the steps instead of accumulating, so 0.4:0.4:4.0 lands on
    // exactly ten values despite the representation error in 0.4.
    const int n = static_cast<int>(std::floor((stop - start) / step + 0.5));
    for (int i = 0; i <= n; ++i) out.push_back(start + i * step);
    return out;
  }
  for (const std::string& field : split(text, ','))
    out.push_back(number(field));
  return out;
}

ConvergenceReport eval_frequency(const ExperimentConfig& cfg,
                                 const std::vector<MultiChannelImage>& images) {
  check_eval_config(cfg, images.size());
  const std::vector<MultiChannelImage> desc = descriptor_images(cfg, images);
  const SamplingGrid grid = SamplingGrid::box();

  ConvergenceReport report;
  const std::vector<Arm> arms = train_arms(cfg, desc, grid, report);

  std::vector<WarpParams> placements;
  for (const MultiChannelImage& img : desc)
    placements.push_back(centered_placement(img, grid, cfg.family));

  ConvergenceReport runs =
      frequency_report(cfg, cfg.family, desc, placements, arms);
  report.frequencies = std::move(runs.frequencies);
  report.trials = std::move(runs.trials);
  return report;
}

ConvergenceReport eval_frequency(const ExperimentConfig& cfg) {
  return eval_frequency(cfg, load_images(cfg));
}

ConvergenceReport eval_rate(const ExperimentConfig& cfg,
                            const std::vector<MultiChannelImage>& images) {
  check_eval_config(cfg, images.size());
  const std::vector<MultiChannelImage> desc = descriptor_images(cfg, images);
  const SamplingGrid grid = SamplingGrid::box();

  ConvergenceReport report;
  const std::vector<Arm> arms = train_arms(cfg, desc, grid, report);

  std::vector<WarpParams> placements;
  for (const MultiChannelImage& img : desc)
    placements.push_back(centered_placement(img, grid, cfg.family));

  ConvergenceReport runs =
      frequency_report(cfg, cfg.family, desc, placements, arms);
  report.frequencies = std::move(runs.frequencies);
  report.trials = std::move(runs.trials);
  append_rate_curves(cfg, arms, report);
  return report;
}

ConvergenceReport eval_rate(const ExperimentConfig& cfg) {
  return eval_rate(cfg, load_images(cfg));
}

ConvergenceReport eval_swap(const ExperimentConfig& cfg,
                            const std::vector<MultiChannelImage>& images) {
  check_eval_config(cfg, images.size());
  if (!cfg.swap_to) throw ConfigError("eval_swap needs a swap_to family");
  const WarpFamily tested = *cfg.swap_to;
  const std::vector<MultiChannelImage> desc = descriptor_images(cfg, images);
  const SamplingGrid grid = SamplingGrid::box();
  const CascadeTrainConfig tc = train_config(cfg);

  ConvergenceReport report;
  std::vector<Arm> arms;
  auto add_arm = [&](const std::string& label, auto&& train) {
    Arm arm;
    arm.label = label;
    try {
      for (const MultiChannelImage& img : desc) arm.cascades.push_back(train(img));
      arms.push_back(std::move(arm));
    } catch (const Error& e) {
      report.training_errors[label] = e.what();
    }
  };

  add_arm(method_name(Method::ICLK), [&](const MultiChannelImage& img) {
    return iclk_train_cascade(img, centered_placement(img, grid, tested), grid,
                              tc);
  });
  add_arm(method_name(Method::CLK), [&](const MultiChannelImage& img) {
    return clk_train_cascade(img, centered_placement(img, grid, tested), grid,
                             tc);
  });
  add_arm(method_name(Method::CLK) + "(" + family_name(cfg.family) + ")",
          [&](const MultiChannelImage& img) {
            const RegressorCascade native = clk_train_cascade(
                img, centered_placement(img, grid, cfg.family), grid, tc);
            return swap_family(native, tested);
          });

  std::vector<WarpParams> placements;
  for (const MultiChannelImage& img : desc)
    placements.push_back(centered_placement(img, grid, tested));

  ConvergenceReport runs =
      frequency_report(cfg, tested, desc, placements, arms);
  report.frequencies = std::move(runs.frequencies);
  report.trials = std::move(runs.trials);
  return report;
}

ConvergenceReport eval_swap(const ExperimentConfig& cfg) {
  return eval_swap(cfg, load_images(cfg));
}

std::vector<WarpParams> smooth_trajectory(int n_frames,
                                          double step_translation,
                                          double step_linear,
                                          std::uint64_t seed) {
  if (n_frames < 1) throw ConfigError("trajectory needs at least one frame");
  std::mt19937_64 rng = derive_stream(seed, kTrajectoryStream);
  std::normal_distribution<double> unit(0.0, 1.0);
  const double rho = 0.8;  // velocity persistence: motion with momentum
  const double innovation = std::sqrt(1.0 - rho * rho);
  const std::array<double, 4> scale = {step_linear, step_linear,
                                       step_translation, step_translation};

  std::array<double, 4> velocity{};
  for (std::size_t i = 0; i < 4; ++i) velocity[i] = scale[i] * unit(rng);

  std::vector<WarpParams> out;
  out.reserve(n_frames);
  WarpParams wp = WarpParams::identity(WarpFamily::Similarity);
  out.push_back(wp);
  for (int t = 1; t < n_frames; ++t) {
    for (std::size_t i = 0; i < 4; ++i) {
      velocity[i] = rho * velocity[i] + innovation * scale[i] * unit(rng);
      wp.p[static_cast<Eigen::Index>(i)] += velocity[i];
    }
    out.push_back(wp);
  }
  return out;
}

std::vector<LightingJitter> lighting_jitter(int n_frames, bool enabled,
                                            std::uint64_t seed) {
  if (n_frames < 1) throw ConfigError("lighting needs at least one frame");
  std::vector<LightingJitter> out(n_frames);
  if (!enabled) return out;
  std::mt19937_64 rng = derive_stream(seed, kLightingStream);
  std::uniform_real_distribution<double> gain(0.7, 1.3);
  std::uniform_real_distribution<double> bias(-0.1, 0.1);
  for (LightingJitter& j : out) {
    j.gain = gain(rng);
    j.bias = bias(rng);
  }
  return out;
}

MultiChannelImage synthesize_frame(const MultiChannelImage& base,
                                   const WarpParams& wp,
                                   const LightingJitter& light) {
  const int h = base.height();
  const int w = base.width();
  const int k = base.channels();
  std::vector<double> data(static_cast<std::size_t>(h) * w * k);
  parallel_for(h, [&](std::int64_t y) {
    double* row = data.data() + static_cast<std::size_t>(y) * w * k;
    for (int x = 0; x < w; ++x) {
      const Point2 src = warp_point(wp, {static_cast<double>(x),
                                         static_cast<double>(y)});
      sample_bilinear_into(base, src, row + static_cast<std::size_t>(x) * k);
    }
    for (int i = 0; i < w * k; ++i) row[i] = light.gain * row[i] + light.bias;
  });
  return MultiChannelImage(h, w, k, std::move(data));
}

TrackResult track_synthetic(const MultiChannelImage& base,
                            const WarpParams& placement,
                            const std::vector<WarpParams>& trajectory,
                            const std::vector<LightingJitter>& lighting,
                            int skip, const RegressorCascade& tracker,
                            const CascadeTrainConfig* retrain) {
  if (trajectory.empty()) throw ConfigError("empty trajectory");
  if (!lighting.empty() && lighting.size() != trajectory.size())
    throw ConfigError("lighting must be empty or match the trajectory");
  if (skip < 0) throw ConfigError("frame skip must be non-negative");

  const WarpFamily family = tracker.family;
  const WarpParams anchor = convert_family(placement, family);
  auto gt_at = [&](std::size_t t) {
    return compose(convert_family(invert(trajectory[t]), family), anchor);
  };
  auto light_at = [&](std::size_t t) {
    return lighting.empty() ? LightingJitter{} : lighting[t];
  };

  RegressorCascade retrained;
  const RegressorCascade* active = &tracker;

  TrackResult out;
  WarpParams p_prev = gt_at(0);
  for (std::size_t t = 0; t < trajectory.size();
       t += static_cast<std::size_t>(skip) + 1) {
    const MultiChannelImage frame = apply_descriptor(
        synthesize_frame(base, trajectory[t], light_at(t)),
        tracker.descriptor);
    if (t == 0 && retrain) {
      retrained = clk_train_cascade(frame, p_prev, tracker.grid, *retrain);
      active = &retrained;
    }
    const WarpParams gt = gt_at(t);
    bool tracked = false;
    double rmse = std::numeric_limits<double>::infinity();
    try {
      const AlignResult res = run_cascade(frame, p_prev, *active, 30, &gt);
      tracked = res.converged;
      rmse = res.rmse_per_iteration.back();
      p_prev = res.p_final;
    } catch (const Error&) {
      // Lost track this frame; keep going from the last estimate.
    }
    ++out.frames_visited;
    out.frames_tracked += tracked ? 1 : 0;
    out.rmse.push_back(rmse);
  }
  return out;
}

TrackReport run_track_experiment(const ExperimentConfig& cfg,
                                 const std::vector<MultiChannelImage>& images) {
  if (images.empty()) throw ConfigError("no input images");
  if (cfg.methods.empty()) throw ConfigError("no methods selected");
  if (cfg.frames < 1) throw ConfigError("need at least one frame");
  if (cfg.skips.empty()) throw ConfigError("empty skip list");
  for (const int k : cfg.skips)
    if (k < 0) throw ConfigError("frame skip must be non-negative");

  const MultiChannelImage& base = images.front();
  const SamplingGrid grid = SamplingGrid::box();
  const std::vector<WarpParams> trajectory =
      smooth_trajectory(cfg.frames, 0.35, 0.002, cfg.seed);
  const std::vector<LightingJitter> lighting =
      lighting_jitter(cfg.frames, cfg.lighting, cfg.seed);

  const WarpParams placement = centered_placement(base, grid, cfg.family);
  const MultiChannelImage frame0 = apply_descriptor(
      synthesize_frame(base, trajectory[0], lighting[0]), cfg.descriptor);
  const CascadeTrainConfig tc = train_config(cfg);

  TrackReport report;
  for (const Method m : cfg.methods) {
    RegressorCascade tracker;
    try {
      tracker = train_method(m, frame0, placement, grid, tc);
    } catch (const Error& e) {
      report.training_errors[method_name(m)] = e.what();
      continue;
    }
    for (const int skip : cfg.skips) {
      const TrackResult res =
          track_synthetic(base, placement, trajectory, lighting, skip, tracker);
      TrackRow row;
      row.method = method_name(m);
      row.skip = skip;
      row.frames_visited = res.frames_visited;
      row.frames_tracked = res.frames_tracked;
      report.rows.push_back(row);
    }
  }
  return report;
}

TrackReport run_track_experiment(const ExperimentConfig& cfg) {
  return run_track_experiment(cfg, load_images(cfg));
}

MultiChannelImage synthetic_texture(int size, std::uint64_t seed) {
  if (size < 2) throw ConfigError("texture size must be at least 2");
  // Lattice node value in [0,1) for one octave.
  auto node = [seed](int octave, int ix, int iy) {
    const std::uint64_t h =
        mix64(mix64(seed, static_cast<std::uint64_t>(octave)),
              static_cast<std::uint64_t>(ix),
              static_cast<std::uint64_t>(iy));
    return static_cast<double>(h >> 11) * 0x1.0p-53;
  };
  const std::array<int, 4> cell = {32, 16, 8, 4};
  const std::array<double, 4> amp = {1.0, 0.5, 0.25, 0.125};
  const double total = amp[0] + amp[1] + amp[2] + amp[3];

  return MultiChannelImage::from_fn(size, size, 1, [&](int x, int y, int) {
    double v = 0.0;
    for (std::size_t o = 0; o < cell.size(); ++o) {
      const double gx = static_cast<double>(x) / cell[o];
      const double gy = static_cast<double>(y) / cell[o];
      const int ix = static_cast<int>(std::floor(gx));
      const int iy = static_cast<int>(std::floor(gy));
      double fx = gx - ix;
      double fy = gy - iy;
      // Smoothstep fade keeps the gradient continuous across cells.
      fx = fx * fx * (3.0 - 2.0 * fx);
      fy = fy * fy * (3.0 - 2.0 * fy);
      const double top = node(static_cast<int>(o), ix, iy) * (1.0 - fx) +
                         node(static_cast<int>(o), ix + 1, iy) * fx;
      const double bottom = node(static_cast<int>(o), ix, iy + 1) * (1.0 - fx) +
                            node(static_cast<int>(o), ix + 1, iy + 1) * fx;
      v += amp[o] * (top * (1.0 - fy) + bottom * fy);
    }
    return v / total;
  });
}

MultiChannelImage speckled_texture(int size, std::uint64_t seed,
                                   double speckle) {
  if (size < 2) throw ConfigError("texture size must be at least 2");
  if (!(speckle >= 0.0 && speckle <= 1.0))
    throw ConfigError("speckle share must lie in [0, 1]");
  auto uniform = [seed](std::uint64_t tag, std::uint64_t n) {
    return static_cast<double>(mix64(mix64(seed, tag), n, 0) >> 11) * 0x1.0p-53;
  };
  // One octave of smoothstep-blended value noise on a cell-pitch lattice.
  auto octave = [&](std::uint64_t tag, int cell, int x, int y) {
    const double gx = static_cast<double>(x) / cell;
    const double gy = static_cast<double>(y) / cell;
    const int ix = static_cast<int>(std::floor(gx));
    const int iy = static_cast<int>(std::floor(gy));
    double fx = gx - ix;
    double fy = gy - iy;
    fx = fx * fx * (3.0 - 2.0 * fx);
    fy = fy * fy * (3.0 - 2.0 * fy);
    auto node = [&](int dx, int dy) {
      return uniform(tag, static_cast<std::uint64_t>(ix + dx) +
                              (static_cast<std::uint64_t>(iy + dy) << 20));
    };
    const double top = node(0, 0) * (1.0 - fx) + node(1, 0) * fx;
    const double bottom = node(0, 1) * (1.0 - fx) + node(1, 1) * fx;
    return top * (1.0 - fy) + bottom * fy;
  };
  return MultiChannelImage::from_fn(size, size, 1, [&](int x, int y, int) {
    const double coarse = (octave(0, 32, x, y) + 0.6 * octave(1, 16, x, y) +
                           0.35 * octave(2, 8, x, y)) /
                          1.95;
    const double grain =
        uniform(9, static_cast<std::uint64_t>(x) +
                       (static_cast<std::uint64_t>(y) << 20));
    return std::round(((1.0 - speckle) * coarse + speckle * grain) * 255.0) /
           255.0;
  });
}

WarpParams convert_family(const WarpParams& wp, WarpFamily family) {
  if (wp.family == family) return wp;
  if (param_count(family) < param_count(wp.family))
    throw ConfigError("cannot narrow " + family_name(wp.family) + " to " +
                      family_name(family));
  return from_matrix(family, to_matrix(wp));
}

WarpParams centered_placement(const MultiChannelImage& img,
                              const SamplingGrid& grid, WarpFamily family) {
  const Corners c = grid.corners();
  const double tx = 0.5 * ((img.width() - 1) - (c[1].x - c[0].x)) - c[0].x;
  const double ty = 0.5 * ((img.height() - 1) - (c[3].y - c[0].y)) - c[0].y;
  WarpParams wp = WarpParams::identity(family);
  const int offset = param_count(family) == 4 ? 2 : 4;
  wp.p[offset] = tx;
  wp.p[offset + 1] = ty;
  return wp;
}

std::string frequency_csv(const ConvergenceReport& report) {
  std::string out = "method,test_sigma,freq,n_trials\n";
  for (const FrequencyRow& row : report.frequencies) {
    out += row.method + "," + g17(row.test_sigma) + "," +
           g17(row.frequency()) + "," + std::to_string(row.n_trials) + "\n";
  }
  return out;
}

std::string rate_csv(const ConvergenceReport& report) {
  std::string out = "method,test_sigma,iteration,mean_rmse,n_used\n";
  for (const RateCurve& curve : report.rates) {
    for (std::size_t i = 0; i < curve.mean_rmse.size(); ++i) {
      out += curve.method + "," + g17(curve.test_sigma) + "," +
             std::to_string(i) + "," + g17(curve.mean_rmse[i]) + "," +
             std::to_string(curve.n_used) + "\n";
    }
  }
  return out;
}

std::string track_csv(const TrackReport& report) {
  std::string out = "method,skip,fraction,n_frames\n";
  for (const TrackRow& row : report.rows) {
    out += row.method + "," + std::to_string(row.skip) + "," +
           g17(row.fraction()) + "," + std::to_string(row.frames_visited) +
           "\n";
  }
  return out;
}

std::vector<FrequencyRow> parse_frequency_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "method,test_sigma,freq,n_trials")
    throw IoError("bad frequency CSV header");
  std::vector<FrequencyRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::vector<std::string> fields = split(line, ',');
    if (fields.size() != 4) throw IoError("bad frequency CSV row: " + line);
    FrequencyRow row;
    row.method = fields[0];
    row.test_sigma = parse_double(fields[1]);
    row.n_trials = static_cast<int>(parse_double(fields[3]));
    row.n_converged =
        static_cast<int>(std::llround(parse_double(fields[2]) * row.n_trials));
    rows.push_back(std::move(row));
  }
  return rows;
}

nlohmann::json report_to_json(const ConvergenceReport& report,
                              const ExperimentConfig& cfg) {
  nlohmann::json j;
  j["config"] = cfg;
  j["frequencies"] = nlohmann::json::array();
  for (const FrequencyRow& row : report.frequencies) {
    j["frequencies"].push_back({{"method", row.method},
                                {"test_sigma", row.test_sigma},
                                {"n_converged", row.n_converged},
                                {"n_trials", row.n_trials},
                                {"freq", row.frequency()}});
  }
  j["rates"] = nlohmann::json::array();
  for (const RateCurve& curve : report.rates) {
    j["rates"].push_back({{"method", curve.method},
                          {"test_sigma", curve.test_sigma},
                          {"n_used", curve.n_used},
                          {"mean_rmse", curve.mean_rmse}});
  }
  j["trials"] = nlohmann::json::array();
  for (const TrialRecord& rec : report.trials) {
    nlohmann::json t = {{"method", rec.method},
                        {"test_sigma", rec.test_sigma},
                        {"trial", rec.trial},
                        {"converged", rec.converged},
                        {"rmse", rec.rmse}};
    if (!rec.error.empty()) t["error"] = rec.error;
    j["trials"].push_back(std::move(t));
  }
  j["training_errors"] = report.training_errors;
  j["warnings"] = report.warnings;
  return j;
}

nlohmann::json track_report_to_json(const TrackReport& report,
                                    const ExperimentConfig& cfg) {
  nlohmann::json j;
  j["config"] = cfg;
  j["rows"] = nlohmann::json::array();
  for (const TrackRow& row : report.rows) {
    j["rows"].push_back({{"method", row.method},
                         {"skip", row.skip},
                         {"frames_visited", row.frames_visited},
                         {"frames_tracked", row.frames_tracked},
                         {"fraction", row.fraction()}});
  }
  j["training_errors"] = report.training_errors;
  return j;
}

namespace {

struct Suite {
  std::string name;
  int passed = 0;
  int total = 0;
  void check(bool ok) {
    ++total;
    if (ok) ++passed;
  }
};

double max_abs_diff(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return (a - b).cwiseAbs().maxCoeff();
}

WarpParams random_params(WarpFamily family, std::mt19937_64& rng) {
  std::normal_distribution<double> linear(0.0, 0.05);
  std::normal_distribution<double> shift(0.0, 2.0);
  // Projective components stay tiny so the denominator is safely positive
  // over the template box.
  std::normal_distribution<double> projective(0.0, 0.002);
  WarpParams wp = WarpParams::identity(family);
  const int offset = param_count(family) == 4 ? 2 : 4;
  for (int i = 0; i < wp.p.size(); ++i) {
    if (i == offset || i == offset + 1)
      wp.p[i] = shift(rng);
    else
      wp.p[i] = i >= 6 ? projective(rng) : linear(rng);
  }
  return wp;
}

Eigen::MatrixXd random_dense(int rows, int cols, std::mt19937_64& rng) {
  std::normal_distribution<double> unit(0.0, 1.0);
  Eigen::MatrixXd m(rows, cols);
  for (int c = 0; c < cols; ++c)
    for (int r = 0; r < rows; ++r) m(r, c) = unit(rng);
  return m;
}

GradientParams random_gradient_params(const SamplingGrid& grid, int channels,
                                      std::mt19937_64& rng) {
  std::normal_distribution<double> unit(0.0, 1.0);
  GradientParams g;
  g.grid = grid;
  g.channels = channels;
  g.g.resize(2 * channels * static_cast<Eigen::Index>(grid.size()));
  for (Eigen::Index i = 0; i < g.g.size(); ++i) g.g[i] = unit(rng);
  return g;
}

TrainingSet random_training_set(WarpFamily family, const SamplingGrid& grid,
                                int channels, int n, std::mt19937_64& rng) {
  std::normal_distribution<double> unit(0.0, 0.5);
  TrainingSet set;
  set.family = family;
  set.grid = grid;
  set.channels = channels;
  const Eigen::Index dim = channels * static_cast<Eigen::Index>(grid.size());
  set.template_vec = Eigen::VectorXd::Zero(dim);
  for (int i = 0; i < n; ++i) {
    TrainingPair pair;
    pair.dp = WarpParams::identity(family);
    for (Eigen::Index c = 0; c < pair.dp.p.size(); ++c) pair.dp.p[c] = unit(rng);
    pair.feature.resize(dim);
    for (Eigen::Index c = 0; c < dim; ++c) pair.feature[c] = unit(rng);
    set.pairs.push_back(std::move(pair));
  }
  return set;
}

void selftest_warp_algebra(Suite& suite) {
  std::mt19937_64 rng = derive_stream(11, 0);
  for (const WarpFamily family : {WarpFamily::Similarity, WarpFamily::Affine,
                                  WarpFamily::Homography}) {
    for (int rep = 0; rep < 5; ++rep) {
      const WarpParams wp = random_params(family, rng);
      const WarpParams round = compose(wp, invert(wp));
      suite.check(round.p.cwiseAbs().maxCoeff() < 1e-8);
      const WarpParams back = from_matrix(family, to_matrix(wp));
      suite.check((back.p - wp.p).cwiseAbs().maxCoeff() < 1e-10);
      const Corners box = SamplingGrid::box(9, 7).corners();
      const WarpParams fit =
          fit_params_from_points(family, box, warp_corners(wp, box));
      suite.check((fit.p - wp.p).cwiseAbs().maxCoeff() < 1e-8);
    }
  }
}

void selftest_warp_jacobian(Suite& suite) {
  std::mt19937_64 rng = derive_stream(12, 0);
  std::uniform_real_distribution<double> coord(-4.0, 4.0);
  const double h = 1e-6;
  for (const WarpFamily family : {WarpFamily::Similarity, WarpFamily::Affine,
                                  WarpFamily::Homography}) {
    for (int rep = 0; rep < 4; ++rep) {
      const Point2 x{coord(rng), coord(rng)};
      const Eigen::MatrixXd jac = jacobian_at_identity(family, x);
      Eigen::MatrixXd fd(2, param_count(family));
      for (int c = 0; c < param_count(family); ++c) {
        WarpParams plus = WarpParams::identity(family);
        WarpParams minus = plus;
        plus.p[c] = h;
        minus.p[c] = -h;
        const Point2 a = warp_point(plus, x);
        const Point2 b = warp_point(minus, x);
        fd(0, c) = (a.x - b.x) / (2 * h);
        fd(1, c) = (a.y - b.y) / (2 * h);
      }
      suite.check(max_abs_diff(jac, fd) < 1e-6);
    }
  }
}

void selftest_build_w(Suite& suite) {
  std::mt19937_64 rng = derive_stream(13, 0);
  const SamplingGrid grid = SamplingGrid::box(3, 3);
  for (const WarpFamily family : {WarpFamily::Similarity, WarpFamily::Affine,
                                  WarpFamily::Homography}) {
    for (const int channels : {1, 2}) {
      const Eigen::MatrixXd grads =
          random_dense(channels * static_cast<int>(grid.size()), 2, rng);
      const Eigen::MatrixXd w = build_W(grads, family, grid);
      Eigen::MatrixXd oracle(grads.rows(), param_count(family));
      for (Eigen::Index row = 0; row < grads.rows(); ++row) {
        const Point2 site = grid.coords[static_cast<std::size_t>(row / channels)];
        oracle.row(row) = grads.row(row) * jacobian_at_identity(family, site);
      }
      suite.check(max_abs_diff(w, oracle) < 1e-12);
    }
  }
}

void selftest_pinv(Suite& suite) {
  std::mt19937_64 rng = derive_stream(14, 0);
  for (int rep = 0; rep < 6; ++rep) {
    const Eigen::MatrixXd w = random_dense(14, 6, rng);
    const Eigen::MatrixXd r = pinv_svd(w);
    suite.check(max_abs_diff(r * w, Eigen::MatrixXd::Identity(6, 6)) < 1e-8);
  }
}

void selftest_conditional_objective(Suite& suite) {
  std::mt19937_64 rng = derive_stream(15, 0);
  const SamplingGrid grid = SamplingGrid::box(3, 3);
  const WarpFamily family = WarpFamily::Affine;
  const GradientParams g = random_gradient_params(grid, 1, rng);
  const TrainingSet set = random_training_set(family, grid, 1, 12, rng);
  const Eigen::MatrixXd r = build_R_from_g(g, family, grid);
  double manual = 0.0;
  for (const TrainingPair& pair : set.pairs)
    manual +=
        (pair.dp.p - r * (pair.feature - set.template_vec)).squaredNorm();
  suite.check(std::abs(clk_objective(g, set, family) - manual) <
              1e-12 * (1.0 + manual));
}

void selftest_conditional_jacobian(Suite& suite) {
  std::mt19937_64 rng = derive_stream(16, 0);
  const SamplingGrid grid = SamplingGrid::box(3, 3);
  const WarpFamily family = WarpFamily::Affine;
  const GradientParams g = random_gradient_params(grid, 1, rng);
  const TrainingSet set = random_training_set(family, grid, 1, 3, rng);
  const CLKWorkspace ws = CLKWorkspace::build(g, family, grid);
  const Eigen::MatrixXd jac = assemble_residual_jacobian(ws, set);

  const double h = 1e-6;
  const Eigen::Index p = param_count(family);
  for (const Eigen::Index j : {Eigen::Index{0}, g.g.size() / 2, g.g.size() - 1}) {
    GradientParams plus = g;
    GradientParams minus = g;
    plus.g[j] += h;
    minus.g[j] -= h;
    const Eigen::MatrixXd r_plus = build_R_from_g(plus, family, grid);
    const Eigen::MatrixXd r_minus = build_R_from_g(minus, family, grid);
    Eigen::VectorXd fd(jac.rows());
    for (std::size_t n = 0; n < set.pairs.size(); ++n) {
      const Eigen::VectorXd dx = set.pairs[n].feature - set.template_vec;
      fd.segment(static_cast<Eigen::Index>(n) * p, p) =
          -(r_plus - r_minus) * dx / (2 * h);
    }
    suite.check((jac.col(j) - fd).cwiseAbs().maxCoeff() <
                1e-5 * (1.0 + jac.col(j).cwiseAbs().maxCoeff()));
  }
}

void selftest_glk_separability(Suite& suite) {
  std::mt19937_64 rng = derive_stream(17, 0);
  const SamplingGrid grid = SamplingGrid::box(3, 3);
  const WarpFamily family = WarpFamily::Similarity;
  TrainingSet set = random_training_set(family, grid, 1, 30, rng);
  const GradientParams g = glk_train(set, family, grid);

  // Joint least squares over all gradients at once must match the
  // independent per-site solves.
  const Eigen::Index dim = static_cast<Eigen::Index>(grid.size());
  Eigen::MatrixXd design(set.pairs.size() * dim, 2 * dim);
  design.setZero();
  Eigen::VectorXd target(set.pairs.size() * dim);
  for (std::size_t n = 0; n < set.pairs.size(); ++n) {
    for (Eigen::Index d = 0; d < dim; ++d) {
      const Eigen::MatrixXd jac = jacobian_at_identity(family, grid.coords[d]);
      const Eigen::Vector2d flow = jac * set.pairs[n].dp.p;
      design.block(static_cast<Eigen::Index>(n) * dim + d, 2 * d, 1, 2) =
          flow.transpose();
      target[static_cast<Eigen::Index>(n) * dim + d] =
          set.pairs[n].feature[d] - set.template_vec[d];
    }
  }
  const Eigen::VectorXd joint = design.colPivHouseholderQr().solve(target);
  suite.check((joint - g.g).cwiseAbs().maxCoeff() < 1e-10);
}

void selftest_sdm_planted(Suite& suite) {
  std::mt19937_64 rng = derive_stream(18, 0);
  const SamplingGrid grid = SamplingGrid::box(3, 3);
  const WarpFamily family = WarpFamily::Affine;
  const Eigen::MatrixXd r_star =
      random_dense(param_count(family), static_cast<int>(grid.size()), rng);
  TrainingSet set = random_training_set(family, grid, 1, 40, rng);
  for (TrainingPair& pair : set.pairs)
    pair.dp.p = r_star * (pair.feature - set.template_vec);
  const RegressorLayer layer = sdm_train_layer(set, 0.0);
  suite.check(max_abs_diff(layer.R, r_star) < 1e-8);
}

void selftest_propagation_identity(Suite& suite) {
  const MultiChannelImage img = synthetic_texture(64, 5);
  const SamplingGrid grid = SamplingGrid::box(8, 8);
  const WarpParams p_gt =
      centered_placement(img, grid, WarpFamily::Affine);
  const TrainingSet base =
      generate_set(img, p_gt, grid, {1.0, 12, 99});

  RegressorCascade zero;
  zero.family = WarpFamily::Affine;
  zero.grid = grid;
  zero.channels = 1;
  RegressorLayer layer;
  layer.R = Eigen::MatrixXd::Zero(6, static_cast<Eigen::Index>(grid.size()));
  layer.template_vec = base.template_vec;
  zero.layers.push_back(layer);

  const TrainingSet moved = propagate_perturbations(img, p_gt, base, zero);
  bool same = moved.pairs.size() == base.pairs.size();
  for (std::size_t i = 0; same && i < base.pairs.size(); ++i)
    same = moved.pairs[i].dp.p == base.pairs[i].dp.p &&
           moved.pairs[i].feature == base.pairs[i].feature;
  suite.check(same);
}

void selftest_determinism(Suite& suite) {
  const MultiChannelImage img = synthetic_texture(64, 7);
  const SamplingGrid grid = SamplingGrid::box(6, 6);
  const WarpParams p_gt = centered_placement(img, grid, WarpFamily::Affine);

  const TrainingSet a = generate_set(img, p_gt, grid, {1.2, 10, 3});
  const TrainingSet b = generate_set_serial(img, p_gt, grid, {1.2, 10, 3});
  bool same = a.pairs.size() == b.pairs.size();
  for (std::size_t i = 0; same && i < a.pairs.size(); ++i)
    same = a.pairs[i].dp.p == b.pairs[i].dp.p &&
           a.pairs[i].feature == b.pairs[i].feature;
  suite.check(same);

  const MultiChannelImage lbp_a = lbp_transform(img);
  const MultiChannelImage lbp_b = lbp_transform_serial(img);
  suite.check(lbp_a.data() == lbp_b.data());
}

}  // namespace

bool run_selftest(std::ostream& out) {
  std::vector<Suite> suites;
  auto run = [&suites](const std::string& name, auto&& body) {
    Suite suite;
    suite.name = name;
    body(suite);
    suites.push_back(std::move(suite));
  };

  run("warp-algebra", selftest_warp_algebra);
  run("warp-jacobian", selftest_warp_jacobian);
  run("regressor-build-w", selftest_build_w);
  run("regressor-pinv", selftest_pinv);
  run("conditional-objective", selftest_conditional_objective);
  run("conditional-jacobian", selftest_conditional_jacobian);
  run("glk-separability", selftest_glk_separability);
  run("sdm-planted", selftest_sdm_planted);
  run("synth-propagation-identity", selftest_propagation_identity);
  run("determinism", selftest_determinism);

  bool ok = true;
  for (const Suite& suite : suites) {
    out << suite.name << ": " << suite.passed << "/" << suite.total << "\n";
    ok = ok && suite.passed == suite.total;
  }
  out << (ok ? "selftest ok" : "selftest FAILED") << "\n";
  return ok;
}

}  // namespace clk
