#pragma once

#include <cstdint>

#include "clk/conditional.hpp"
#include "clk/regressor.hpp"
#include "clk/synth.hpp"

namespace clk {

struct CascadeTrainConfig {
  int layers = 5;            // L
  int n_per_layer = 100;     // N
  double sigma = 1.2;        // training corner-noise std, pixels
  std::uint64_t seed = 0;
  /// Channel layout the training image is in; recorded on the cascade and
  /// validated against the image.
  Descriptor descriptor = Descriptor::Raw;
  /// Fresh draws for layer l are pushed through layers 1..l-1 before
  /// training (the propagation reading of the iteration-specific sets);
  /// false trains every layer on raw fresh draws for comparison.
  bool propagate = true;
  /// Ridge weight for SDM; negative selects it by grid search over
  /// {1e-4..1e2} x trace(XX^T)/(K*D), scored by convergence frequency on a
  /// held-out validation set of n_per_layer perturbations.
  double sdm_lambda = -1.0;
  LMConfig lm;
};

/// The four cascade constructors share a contract: img must already be in
/// the descriptor's channel layout; p_gt places the template grid in the
/// image; trainer errors carry the failing layer in their message. The
/// IC-LK "cascade" is a single layer flagged iterative, needing no
/// synthetic data.
RegressorCascade iclk_train_cascade(const MultiChannelImage& img,
                                    const WarpParams& p_gt,
                                    const SamplingGrid& grid,
                                    const CascadeTrainConfig& cfg);
RegressorCascade sdm_train_cascade(const MultiChannelImage& img,
                                   const WarpParams& p_gt,
                                   const SamplingGrid& grid,
                                   const CascadeTrainConfig& cfg);
RegressorCascade glk_train_cascade(const MultiChannelImage& img,
                                   const WarpParams& p_gt,
                                   const SamplingGrid& grid,
                                   const CascadeTrainConfig& cfg);
RegressorCascade clk_train_cascade(const MultiChannelImage& img,
                                   const WarpParams& p_gt,
                                   const SamplingGrid& grid,
                                   const CascadeTrainConfig& cfg);

/// Rebuilds every layer's regressor for a different warp family from the
/// stored gradients (templates unchanged). Requires every layer to retain g.
RegressorCascade swap_family(const RegressorCascade& cascade,
                             WarpFamily new_family);

/// Seed of the fresh perturbation draws for one layer (layers and the
/// validation set consume disjoint streams derived from the config seed).
std::uint64_t cascade_layer_seed(std::uint64_t seed, int layer);

}  // namespace clk
