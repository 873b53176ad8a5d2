#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "clk/image.hpp"
#include "clk/warp.hpp"

namespace clk {

struct RegressorCascade;

struct PerturbationConfig {
  double sigma = 1.2;   // corner noise std, pixels (template frame)
  int n_samples = 100;  // N
  std::uint64_t seed = 0;
};

struct TrainingPair {
  WarpParams dp;
  Eigen::VectorXd feature;  // K*D, channels contiguous per site
};

/// Perturbation/appearance pairs drawn around one ground-truth placement.
/// The template is the feature vector at dp = 0.
struct TrainingSet {
  WarpFamily family = WarpFamily::Affine;
  SamplingGrid grid;
  int channels = 1;
  Eigen::VectorXd template_vec;
  std::vector<TrainingPair> pairs;
};

/// Draws one synthetic perturbation: i.i.d. N(0, sigma^2) noise on the x and
/// y of each corner plus one shared N(0, sigma^2) translation added to all
/// corners, then fits the family's warp from corners to the noisy corners.
/// Draw order is part of the contract: (x, y) per corner in corner order,
/// then the shared translation (x, y). Degenerate (collinear) draws are
/// retried up to 10 times before DegenerateConfiguration propagates.
/// sigma = 0 returns the identity.
WarpParams perturb_warp(WarpFamily family, const Corners& grid_corners,
                        const PerturbationConfig& cfg, std::mt19937_64& rng);

/// N pairs with dp_n ~ perturb_warp and feature_n sampled at p_gt o dp_n;
/// template sampled at p_gt. Sample n uses the RNG stream derived from
/// (cfg.seed, n), so results are identical for any thread count.
TrainingSet generate_set(const MultiChannelImage& img, const WarpParams& p_gt,
                         const SamplingGrid& grid,
                         const PerturbationConfig& cfg);
TrainingSet generate_set_serial(const MultiChannelImage& img,
                                const WarpParams& p_gt,
                                const SamplingGrid& grid,
                                const PerturbationConfig& cfg);

/// Pushes each perturbation through the prefix cascade's update rule,
/// dp <- dp o (R*(feature(dp) - template))^-1 layer by layer, re-sampling
/// the feature from (img, p_gt) after every step. An empty prefix returns
/// the set unchanged.
TrainingSet propagate_perturbations(const MultiChannelImage& img,
                                    const WarpParams& p_gt,
                                    const TrainingSet& set,
                                    const RegressorCascade& prefix);
TrainingSet propagate_perturbations_serial(const MultiChannelImage& img,
                                           const WarpParams& p_gt,
                                           const TrainingSet& set,
                                           const RegressorCascade& prefix);

/// Binary cache: magic "CLKS", u32 version, u32 JSON header length, JSON
/// header describing shapes, then little-endian f64 arrays.
void save_training_set(const TrainingSet& set, const std::string& path);
TrainingSet load_training_set(const std::string& path);

/// Serialized bytes of the cache format, for determinism checks.
std::string training_set_bytes(const TrainingSet& set);

}  // namespace clk
