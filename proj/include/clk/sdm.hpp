#pragma once

#include <vector>

#include "clk/regressor.hpp"
#include "clk/synth.hpp"

namespace clk {

/// Ridge regression of warp updates on appearance residuals for one layer:
/// R = Y X^T (X X^T + lambda I)^-1 with Y stacking dp_n as columns and X
/// stacking (feature_n - template). Throws SingularSystem when lambda = 0
/// and X X^T is numerically singular.
RegressorLayer sdm_train_layer(const TrainingSet& set, double lambda);

/// One layer per provided set; the sets must share family and grid.
RegressorCascade sdm_train(const std::vector<TrainingSet>& sets,
                           double lambda);

}  // namespace clk
