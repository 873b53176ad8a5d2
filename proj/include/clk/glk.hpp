#pragma once

#include "clk/regressor.hpp"
#include "clk/synth.hpp"

namespace clk {

/// Generative gradient learning: for each site d and channel k, the 2-vector
/// grad minimizing sum_n (residual_n(d,k) - grad . J_d dp_n)^2, where
/// residual_n = feature_n - template. The D sites decouple into independent
/// 2x2 normal systems. Throws UnderdeterminedSite (with the site index) when
/// a site's normal matrix is singular, e.g. all dp_n = 0 or fewer than two
/// samples.
GradientParams glk_train(const TrainingSet& set, WarpFamily family,
                         const SamplingGrid& grid);
GradientParams glk_train_serial(const TrainingSet& set, WarpFamily family,
                                const SamplingGrid& grid);

}  // namespace clk
