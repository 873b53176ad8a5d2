#pragma once

#include <utility>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include "clk/regressor.hpp"
#include "clk/synth.hpp"

namespace clk {

struct LMConfig {
  int max_iterations = 100;
  double initial_damping = 1e-3;  // times the mean Gauss-Newton diagonal
  double damping_increase = 10.0;
  double damping_decrease = 0.1;
  double relative_tolerance = 1e-8;  // on the accepted objective decrease
  double max_damping = 1e12;         // exceeding it terminates with best g
};

/// Everything derivable from (g, family, grid) that the conditional
/// objective and its derivatives reuse. Index j of g maps to the single
/// nonzero of the indicator matrix at (row rho = j/2 in G, column
/// gamma = 2*(site) + j%2), exposed via lambda_index.
struct CLKWorkspace {
  WarpFamily family = WarpFamily::Affine;
  int channels = 1;
  Eigen::MatrixXd J_warp;          // A: (2D) x P stacked warp Jacobians
  Eigen::SparseMatrix<double> G;   // (K*D) x (2D), block-diagonal gradients
  Eigen::MatrixXd W;               // G * J_warp, (K*D) x P
  Eigen::MatrixXd H;               // W^T W, P x P pseudo-Hessian
  Eigen::MatrixXd H_inv;
  Eigen::MatrixXd R;               // H_inv W^T, P x (K*D)
  Eigen::MatrixXd B;               // H_inv J_warp^T, P x (2D)
  std::vector<std::pair<Eigen::Index, Eigen::Index>> lambda_index;

  /// Builds the workspace; throws SingularHessian when the smallest
  /// eigenvalue of H falls below 1e-12 times the largest.
  static CLKWorkspace build(const GradientParams& g, WarpFamily family,
                            const SamplingGrid& grid);
};

/// Conditional regressor from learned gradients via the pseudo-inverse
/// expansion R = H^-1 J_warp^T G^T. Throws RankDeficient when the induced W
/// loses column rank.
Eigen::MatrixXd build_R_from_g(const GradientParams& g, WarpFamily family,
                               const SamplingGrid& grid);

/// sum_n || dp_n - R(g) (feature_n - template) ||^2.
double clk_objective(const GradientParams& g, const TrainingSet& set,
                     WarpFamily family);

/// Dense Jacobian d vec(R) / d g^T, shape (P*K*D) x (2*K*D) with vec taken
/// column-major. Intended for small instances (tests and oracles); training
/// uses assemble_residual_jacobian instead, which never materializes it.
Eigen::MatrixXd dR_dg(const CLKWorkspace& ws);
Eigen::MatrixXd dR_dg_serial(const CLKWorkspace& ws);

/// Jacobian of the stacked residual r(g) = [dp_n - R(g) x_n]_n with respect
/// to g; shape (N*P) x (2*K*D), sample blocks in set order.
Eigen::MatrixXd assemble_residual_jacobian(const CLKWorkspace& ws,
                                           const TrainingSet& set);
Eigen::MatrixXd assemble_residual_jacobian_serial(const CLKWorkspace& ws,
                                                  const TrainingSet& set);

/// Levenberg-Marquardt refinement of the conditional objective starting
/// from the Generative LK solution. Accepted objective values decrease
/// monotonically; the returned g never scores worse than the start. Trial
/// steps that make H singular are rejected like any uphill step. When
/// objective_trace is non-null it receives the accepted objective sequence
/// (including the initial value).
GradientParams clk_train(const TrainingSet& set, WarpFamily family,
                         const SamplingGrid& grid, const LMConfig& cfg = {},
                         std::vector<double>* objective_trace = nullptr);

}  // namespace clk
