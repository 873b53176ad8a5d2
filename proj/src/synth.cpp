#include "clk/synth.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "clk/errors.hpp"
#include "clk/parallel.hpp"
#include "clk/regressor.hpp"
#include "clk/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "training-set cache assumes a little-endian host");

namespace clk {

WarpParams perturb_warp(WarpFamily family, const Corners& grid_corners,
                        const PerturbationConfig& cfg, std::mt19937_64& rng) {
  if (cfg.sigma < 0) throw ConfigError("sigma must be non-negative");
  if (cfg.sigma == 0.0) return WarpParams::identity(family);
  std::normal_distribution<double> noise(0.0, cfg.sigma);
  for (int attempt = 0;; ++attempt) {
    Corners noisy = grid_corners;
    for (Point2& c : noisy) {
      c.x += noise(rng);
      c.y += noise(rng);
    }
    const double tx = noise(rng);
    const double ty = noise(rng);
    for (Point2& c : noisy) {
      c.x += tx;
      c.y += ty;
    }
    try {
      return fit_params_from_points(family, grid_corners, noisy);
    } catch (const DegenerateConfiguration&) {
      if (attempt == 9) throw;
    }
  }
}

namespace {

template <typename Loop>
TrainingSet generate_impl(const MultiChannelImage& img, const WarpParams& p_gt,
                          const SamplingGrid& grid,
                          const PerturbationConfig& cfg, Loop&& loop) {
  if (cfg.n_samples < 1) throw ConfigError("n_samples must be at least 1");
  TrainingSet set;
  set.family = p_gt.family;
  set.grid = grid;
  set.channels = img.channels();
  set.template_vec = sample_warped_vector(img, p_gt, grid);
  set.pairs.resize(cfg.n_samples);
  const Corners corners = grid.corners();
  loop(cfg.n_samples, [&](std::int64_t n) {
    auto rng = derive_stream(cfg.seed, static_cast<std::uint64_t>(n));
    TrainingPair& pair = set.pairs[n];
    pair.dp = perturb_warp(p_gt.family, corners, cfg, rng);
    pair.feature = sample_warped_vector(img, compose(p_gt, pair.dp), grid);
  });
  return set;
}

template <typename Loop>
TrainingSet propagate_impl(const MultiChannelImage& img, const WarpParams& p_gt,
                           const TrainingSet& set, const RegressorCascade& prefix,
                           Loop&& loop) {
  if (prefix.layers.empty()) return set;
  if (prefix.family != set.family)
    throw FamilyMismatch("prefix cascade family differs from the set's");
  if (!(prefix.grid == set.grid))
    throw ShapeMismatch("prefix cascade grid differs from the set's");
  // Updates that throw a sample further than the grid diagonal are plain
  // divergence (a homography step can push corners arbitrarily far once the
  // projective denominator changes sign inside the box). Such a dp would
  // dominate every later layer's least squares, so the step is rejected and
  // the sample keeps its previous perturbation.
  const Corners box = set.grid.corners();
  const double cap = std::sqrt(squared_distance(box[0], box[2]));
  const WarpParams ident = WarpParams::identity(set.family);
  TrainingSet out = set;
  loop(static_cast<std::int64_t>(out.pairs.size()), [&](std::int64_t n) {
    TrainingPair& pair = out.pairs[n];
    for (const RegressorLayer& layer : prefix.layers) {
      WarpParams delta{set.family,
                       layer.R * (pair.feature - layer.template_vec)};
      if (delta.is_identity()) continue;  // keeps dp bit-exact under R = 0
      try {
        const WarpParams moved = compose(pair.dp, invert(delta));
        if (template_frame_rmse(moved, ident, set.grid) > cap) continue;
        pair.dp = moved;
      } catch (const Error&) {
        continue;  // non-invertible increment: reject like an oversized step
      }
      pair.feature = sample_warped_vector(img, compose(p_gt, pair.dp), set.grid);
    }
  });
  return out;
}

}  // namespace

TrainingSet generate_set(const MultiChannelImage& img, const WarpParams& p_gt,
                         const SamplingGrid& grid,
                         const PerturbationConfig& cfg) {
  return generate_impl(img, p_gt, grid, cfg,
                       [](std::int64_t n, auto&& f) { parallel_for(n, f); });
}

TrainingSet generate_set_serial(const MultiChannelImage& img,
                                const WarpParams& p_gt,
                                const SamplingGrid& grid,
                                const PerturbationConfig& cfg) {
  return generate_impl(img, p_gt, grid, cfg,
                       [](std::int64_t n, auto&& f) { serial_for(n, f); });
}

TrainingSet propagate_perturbations(const MultiChannelImage& img,
                                    const WarpParams& p_gt,
                                    const TrainingSet& set,
                                    const RegressorCascade& prefix) {
  return propagate_impl(img, p_gt, set, prefix,
                        [](std::int64_t n, auto&& f) { parallel_for(n, f); });
}

TrainingSet propagate_perturbations_serial(const MultiChannelImage& img,
                                           const WarpParams& p_gt,
                                           const TrainingSet& set,
                                           const RegressorCascade& prefix) {
  return propagate_impl(img, p_gt, set, prefix,
                        [](std::int64_t n, auto&& f) { serial_for(n, f); });
}

namespace {

constexpr char kMagic[4] = {'C', 'L', 'K', 'S'};
constexpr std::uint32_t kCacheVersion = 1;

void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void write_f64(std::ostream& out, const double* data, std::size_t n) {
  out.write(reinterpret_cast<const char*>(data),
            static_cast<std::streamsize>(n * sizeof(double)));
}

std::uint32_t read_u32(std::istream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw IoError("truncated training-set cache");
  return v;
}

void read_f64(std::istream& in, double* data, std::size_t n) {
  in.read(reinterpret_cast<char*>(data),
          static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw IoError("truncated training-set cache payload");
}

void save_stream(const TrainingSet& set, std::ostream& out) {
  const std::size_t d = set.grid.size();
  const std::size_t kd = set.template_vec.size();
  const int p = param_count(set.family);
  nlohmann::json header;
  header["family"] = family_name(set.family);
  header["channels"] = set.channels;
  header["n_sites"] = d;
  header["n_pairs"] = set.pairs.size();
  header["param_count"] = p;
  // payload layout, all little-endian f64:
  //   grid coords (n_sites x [x, y]), template (channels * n_sites),
  //   then per pair: dp params (param_count), feature (channels * n_sites)
  const std::string header_bytes = header.dump();

  out.write(kMagic, 4);
  write_u32(out, kCacheVersion);
  write_u32(out, static_cast<std::uint32_t>(header_bytes.size()));
  out.write(header_bytes.data(),
            static_cast<std::streamsize>(header_bytes.size()));
  for (const Point2& c : set.grid.coords) {
    write_f64(out, &c.x, 1);
    write_f64(out, &c.y, 1);
  }
  write_f64(out, set.template_vec.data(), kd);
  for (const TrainingPair& pair : set.pairs) {
    write_f64(out, pair.dp.p.data(), static_cast<std::size_t>(p));
    write_f64(out, pair.feature.data(), static_cast<std::size_t>(kd));
  }
}

TrainingSet load_stream(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw IoError("not a training-set cache (bad magic)");
  const std::uint32_t version = read_u32(in);
  if (version != kCacheVersion)
    throw IoError("unsupported training-set cache version");
  const std::uint32_t header_len = read_u32(in);
  std::string header_bytes(header_len, '\0');
  in.read(header_bytes.data(), header_len);
  if (!in) throw IoError("truncated training-set cache header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_bytes);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("bad training-set cache header: ") + e.what());
  }

  TrainingSet set;
  set.family = family_from_name(header.at("family").get<std::string>());
  set.channels = header.at("channels").get<int>();
  const auto n_sites = header.at("n_sites").get<std::size_t>();
  const auto n_pairs = header.at("n_pairs").get<std::size_t>();
  const int p = header.at("param_count").get<int>();
  if (p != param_count(set.family))
    throw IoError("cache param_count disagrees with the warp family");
  if (set.channels < 1 || n_sites < 1)
    throw IoError("cache header has invalid shapes");

  set.grid.coords.resize(n_sites);
  for (Point2& c : set.grid.coords) {
    read_f64(in, &c.x, 1);
    read_f64(in, &c.y, 1);
  }
  const std::size_t kd = static_cast<std::size_t>(set.channels) * n_sites;
  set.template_vec.resize(static_cast<Eigen::Index>(kd));
  read_f64(in, set.template_vec.data(), kd);
  set.pairs.resize(n_pairs);
  for (TrainingPair& pair : set.pairs) {
    pair.dp.family = set.family;
    pair.dp.p.resize(p);
    read_f64(in, pair.dp.p.data(), static_cast<std::size_t>(p));
    pair.feature.resize(static_cast<Eigen::Index>(kd));
    read_f64(in, pair.feature.data(), kd);
  }
  return set;
}

}  // namespace

void save_training_set(const TrainingSet& set, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  save_stream(set, out);
  if (!out) throw IoError("failed writing " + path);
}

TrainingSet load_training_set(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return load_stream(in);
}

std::string training_set_bytes(const TrainingSet& set) {
  std::ostringstream out(std::ios::binary);
  save_stream(set, out);
  return out.str();
}

}  // namespace clk
