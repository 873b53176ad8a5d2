#include "clk/sdm.hpp"

#include <Eigen/Dense>

#include "clk/errors.hpp"

namespace clk {

namespace {

// Residual matrix X (KD x N) and update matrix Y (P x N), columns per sample.
void stack_columns(const TrainingSet& set, Eigen::MatrixXd& x,
                   Eigen::MatrixXd& y) {
  const auto n = static_cast<Eigen::Index>(set.pairs.size());
  const Eigen::Index kd = set.template_vec.size();
  const Eigen::Index p = param_count(set.family);
  x.resize(kd, n);
  y.resize(p, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const TrainingPair& pair = set.pairs[static_cast<std::size_t>(i)];
    if (pair.feature.size() != kd)
      throw ShapeMismatch("feature length differs from the template's");
    x.col(i) = pair.feature - set.template_vec;
    y.col(i) = pair.dp.p;
  }
}

}  // namespace

RegressorLayer sdm_train_layer(const TrainingSet& set, double lambda) {
  if (set.pairs.empty()) throw ConfigError("training set is empty");
  if (lambda < 0) throw ConfigError("lambda must be non-negative");
  Eigen::MatrixXd x, y;
  stack_columns(set, x, y);
  const Eigen::Index kd = x.rows(), n = x.cols();

  RegressorLayer layer;
  layer.template_vec = set.template_vec;
  if (n < kd) {
    // Dual form: X^T (X X^T + c I)^-1 = (X^T X + c I)^-1 X^T, so the solve
    // happens in the N-dimensional sample space. With lambda = 0 the primal
    // X X^T (rank <= N < KD) is singular by counting.
    if (lambda == 0.0)
      throw SingularSystem(
          "X X^T is singular: fewer samples than feature dimensions needs "
          "lambda > 0");
    Eigen::MatrixXd gram = x.transpose() * x;
    gram.diagonal().array() += lambda;
    layer.R = y * gram.llt().solve(x.transpose());
  } else {
    Eigen::MatrixXd cov = x * x.transpose();
    cov.diagonal().array() += lambda;
    const Eigen::LDLT<Eigen::MatrixXd> ldlt(cov);
    if (lambda == 0.0) {
      const Eigen::VectorXd d = ldlt.vectorD();
      const double dmax = d.cwiseAbs().maxCoeff();
      if (!(dmax > 0) || d.minCoeff() <= 1e-12 * dmax)
        throw SingularSystem("X X^T is numerically singular and lambda = 0");
    }
    layer.R = ldlt.solve(x * y.transpose()).transpose();
  }
  if (!layer.R.allFinite())
    throw SingularSystem("ridge solve produced non-finite entries");
  return layer;
}

RegressorCascade sdm_train(const std::vector<TrainingSet>& sets,
                           double lambda) {
  if (sets.empty()) throw ConfigError("no training sets given");
  RegressorCascade cascade;
  cascade.family = sets.front().family;
  cascade.grid = sets.front().grid;
  cascade.channels = sets.front().channels;
  for (const TrainingSet& set : sets) {
    if (set.family != cascade.family)
      throw FamilyMismatch("training sets disagree on the warp family");
    if (!(set.grid == cascade.grid))
      throw ShapeMismatch("training sets disagree on the sampling grid");
    cascade.layers.push_back(sdm_train_layer(set, lambda));
  }
  return cascade;
}

}  // namespace clk
