#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "clk/cascade.hpp"
#include "clk/regressor.hpp"

namespace clk {

/// The four aligners the experiment drivers know how to train and compare.
enum class Method { ICLK, SDM, GLK, CLK };

std::string method_name(Method m);
Method method_from_name(const std::string& name);

/// One experiment = train once, evaluate over a sweep of test noise levels.
/// The JSON mirror uses the same snake_case field names; absent keys keep
/// their defaults so a config file and CLI flags can layer.
struct ExperimentConfig {
  std::vector<Method> methods = {Method::ICLK, Method::SDM, Method::GLK,
                                 Method::CLK};
  WarpFamily family = WarpFamily::Affine;
  /// eval_swap only: family the trained CLK cascade is rebuilt for (and the
  /// family every arm is tested in).
  std::optional<WarpFamily> swap_to;
  Descriptor descriptor = Descriptor::Raw;
  double train_sigma = 1.2;
  std::vector<double> test_sigma = {1.2};
  int n_train = 100;  // fresh draws per cascade layer
  int layers = 5;
  int n_trials = 100;  // per (method, test sigma) point
  std::uint64_t seed = 0;
  std::vector<std::string> images;  // trials round-robin over these
  std::string out;                  // report stem; empty = stdout only
  /// Tracking extras (run_track_experiment).
  int frames = 50;
  std::vector<int> skips = {0, 2, 4, 8};
  bool lighting = false;
  /// Pass-through training knobs.
  double sdm_lambda = -1.0;
  bool propagate = true;
};

void to_json(nlohmann::json& j, const ExperimentConfig& cfg);
void from_json(const nlohmann::json& j, ExperimentConfig& cfg);

/// Parses "a,b,c" comma lists and "start:step:stop" inclusive ranges
/// (e.g. "0.4:0.4:4.0" gives the ten values 0.4, 0.8, ..., 4.0).
std::vector<double> parse_sigma_list(const std::string& text);

/// One alignment attempt of one method. The rmse trace is the template-frame
/// corner RMSE before every regressor application and after the last one, so
/// rmse.front() is the initial perturbation error. error is set (and
/// converged stays false) when the trial threw instead of running.
struct TrialRecord {
  std::string method;
  double test_sigma = 0.0;
  int trial = 0;
  bool converged = false;
  std::vector<double> rmse;
  std::string error;
};

/// Convergence frequency at one (method, test sigma) point. The count is
/// kept exact; the quotient is only formed when formatting.
struct FrequencyRow {
  std::string method;
  double test_sigma = 0.0;
  int n_converged = 0;
  int n_trials = 0;
  double frequency() const {
    return static_cast<double>(n_converged) / n_trials;
  }
};

/// Mean corner RMSE per regressor application, averaged over the trials in
/// which every compared method converged. Traces shorter than the longest
/// one (iterative cascades stop early) are extended with their final value.
struct RateCurve {
  std::string method;
  double test_sigma = 0.0;
  int n_used = 0;
  std::vector<double> mean_rmse;
};

struct ConvergenceReport {
  std::vector<FrequencyRow> frequencies;
  std::vector<RateCurve> rates;  // filled by eval_rate only
  std::vector<TrialRecord> trials;
  /// Methods whose training failed, with the error message; they get no
  /// frequency rows but still appear here.
  std::map<std::string, std::string> training_errors;
  std::vector<std::string> warnings;
};

/// Trains every method in cfg once per image, then for each test sigma runs
/// n_trials alignments from perturbed starts shared across methods (trial t
/// uses images[t % images.size()]). Frequencies count trials with final
/// corner RMSE < 1 px out of exactly n_trials; trials that throw are
/// recorded as non-converged, never dropped. The overload without images
/// loads cfg.images from disk.
ConvergenceReport eval_frequency(const ExperimentConfig& cfg,
                                 const std::vector<MultiChannelImage>& images);
ConvergenceReport eval_frequency(const ExperimentConfig& cfg);

/// eval_frequency plus per-iteration mean RMSE curves over the trials where
/// all trained methods converged. Throws EmptyIntersection when some test
/// sigma has no such trial. A non-monotone CLK curve is recorded as a
/// report warning.
ConvergenceReport eval_rate(const ExperimentConfig& cfg,
                            const std::vector<MultiChannelImage>& images);
ConvergenceReport eval_rate(const ExperimentConfig& cfg);

/// Compares, in the cfg.swap_to family: IC-LK, a natively trained CLK
/// cascade, and a CLK cascade trained in cfg.family then rebuilt for
/// swap_to via swap_family. The swapped arm is labeled
/// "clk(<trained family>)". Swapping a family onto itself reproduces the
/// native rows bit for bit.
ConvergenceReport eval_swap(const ExperimentConfig& cfg,
                            const std::vector<MultiChannelImage>& images);
ConvergenceReport eval_swap(const ExperimentConfig& cfg);

/// Per-frame photometric jitter, applied to pixel values (clamped back into
/// [0,1]) before any descriptor transform.
struct LightingJitter {
  double gain = 1.0;
  double bias = 0.0;
};

/// Smooth seeded random walk in similarity parameters: per-frame velocity is
/// an AR(1) process, so motion has momentum instead of jittering. Frame 0 is
/// the identity. step_translation / step_linear are the stationary per-frame
/// standard deviations of the translation and (a, b) components.
std::vector<WarpParams> smooth_trajectory(int n_frames, double step_translation,
                                          double step_linear,
                                          std::uint64_t seed);

/// Per-frame gain in [0.7, 1.3] and bias in [-0.1, 0.1], uniform; all
/// identity when disabled.
std::vector<LightingJitter> lighting_jitter(int n_frames, bool enabled,
                                            std::uint64_t seed);

/// Frame t of a synthetic sequence: the base image warped by wp (pixel (x,y)
/// reads base at W((x,y); wp)), then gain/bias applied.
MultiChannelImage synthesize_frame(const MultiChannelImage& base,
                                   const WarpParams& wp,
                                   const LightingJitter& light);

struct TrackResult {
  int frames_visited = 0;
  int frames_tracked = 0;
  std::vector<double> rmse;  // final corner RMSE per visited frame
  double fraction() const {
    return static_cast<double>(frames_tracked) / frames_visited;
  }
};

/// Runs tracker over frames 0, k+1, 2(k+1), ... of the synthetic sequence
/// defined by trajectory (and lighting, sized like it or empty for none),
/// aligning each visited frame from the previous solution. The template
/// sits at `placement` in the base image, so its ground truth in frame t is
/// trajectory[t]^-1 o placement. A frame counts as tracked when the final
/// corner RMSE is below 1 px; errors mid-frame mark it lost and tracking
/// continues from the last estimate. When retrain is non-null the tracker
/// is replaced by a CLK cascade trained on frame 0 with that config.
TrackResult track_synthetic(const MultiChannelImage& base,
                            const WarpParams& placement,
                            const std::vector<WarpParams>& trajectory,
                            const std::vector<LightingJitter>& lighting,
                            int skip, const RegressorCascade& tracker,
                            const CascadeTrainConfig* retrain = nullptr);

struct TrackRow {
  std::string method;
  int skip = 0;
  int frames_visited = 0;
  int frames_tracked = 0;
  double fraction() const {
    return static_cast<double>(frames_tracked) / frames_visited;
  }
};

struct TrackReport {
  std::vector<TrackRow> rows;
  std::map<std::string, std::string> training_errors;
};

/// Trains each method on frame 0 of a seeded synthetic sequence over
/// images[0] and reports the tracked fraction per (method, frame skip).
TrackReport run_track_experiment(const ExperimentConfig& cfg,
                                 const std::vector<MultiChannelImage>& images);
TrackReport run_track_experiment(const ExperimentConfig& cfg);

/// Multi-octave value noise in [0,1]; the procedural stand-in for a natural
/// textured test image.
MultiChannelImage synthetic_texture(int size, std::uint64_t seed);

/// Smooth value noise blended with per-pixel uniform speckle, quantized to
/// the 256 grey levels a PGM stores so a save/load round trip reproduces the
/// image bit for bit. The speckle share moves signal to the pixel scale,
/// where a fixed-gradient model mispredicts resampled intensities, so this
/// texture separates relearned-gradient regressors from Gauss-Newton far
/// more sharply than synthetic_texture does.
MultiChannelImage speckled_texture(int size, std::uint64_t seed,
                                   double speckle);

/// Re-expresses wp in a family with at least as many parameters
/// (e.g. similarity -> affine); ConfigError on a narrowing conversion.
WarpParams convert_family(const WarpParams& wp, WarpFamily family);

/// Identity-shaped placement translating the grid's box to the image
/// center.
WarpParams centered_placement(const MultiChannelImage& img,
                              const SamplingGrid& grid, WarpFamily family);

/// CSV renderings. Numeric fields use 17 significant digits, '.' decimal
/// separator and '\n' line endings; rows keep config order so identical
/// configs give byte-identical files.
std::string frequency_csv(const ConvergenceReport& report);
std::string rate_csv(const ConvergenceReport& report);
std::string track_csv(const TrackReport& report);

/// Inverse of frequency_csv (header "method,test_sigma,freq,n_trials").
std::vector<FrequencyRow> parse_frequency_csv(const std::string& text);

nlohmann::json report_to_json(const ConvergenceReport& report,
                              const ExperimentConfig& cfg);
nlohmann::json track_report_to_json(const TrackReport& report,
                                    const ExperimentConfig& cfg);

/// Runs the built-in invariant suites (warp algebra, regressor identities,
/// derivative oracles, determinism), printing one "name: passed/total" line
/// per suite. Returns false when anything failed.
bool run_selftest(std::ostream& out);

}  // namespace clk
