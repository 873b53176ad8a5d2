#include "clk/conditional.hpp"

#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/Dense>

#include "clk/errors.hpp"
#include "clk/glk.hpp"
#include "clk/parallel.hpp"

namespace clk {

CLKWorkspace CLKWorkspace::build(const GradientParams& g, WarpFamily family,
                                 const SamplingGrid& grid) {
  const auto d = static_cast<Eigen::Index>(grid.size());
  if (d == 0) throw ShapeMismatch("empty sampling grid");
  const Eigen::Index k = g.channels;
  if (k < 1 || g.g.size() != 2 * k * d)
    throw ShapeMismatch("gradient vector length does not match 2*K*D");
  const Eigen::Index p = param_count(family);

  CLKWorkspace ws;
  ws.family = family;
  ws.channels = static_cast<int>(k);
  ws.J_warp.resize(2 * d, p);
  for (Eigen::Index site = 0; site < d; ++site)
    ws.J_warp.middleRows(2 * site, 2) =
        jacobian_at_identity(family, grid.coords[static_cast<std::size_t>(site)]);

  std::vector<Eigen::Triplet<double>> entries;
  entries.reserve(static_cast<std::size_t>(2 * k * d));
  ws.lambda_index.reserve(static_cast<std::size_t>(2 * k * d));
  for (Eigen::Index site = 0; site < d; ++site) {
    for (Eigen::Index ch = 0; ch < k; ++ch) {
      const Eigen::Index row = site * k + ch;
      entries.emplace_back(row, 2 * site + 0, g.g[2 * row + 0]);
      entries.emplace_back(row, 2 * site + 1, g.g[2 * row + 1]);
      ws.lambda_index.emplace_back(row, 2 * site + 0);
      ws.lambda_index.emplace_back(row, 2 * site + 1);
    }
  }
  ws.G.resize(k * d, 2 * d);
  ws.G.setFromTriplets(entries.begin(), entries.end());

  ws.W = ws.G * ws.J_warp;
  ws.H = ws.W.transpose() * ws.W;
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(ws.H);
  const Eigen::VectorXd& eigs = es.eigenvalues();  // ascending
  const double eig_max = eigs[p - 1];
  if (!(eig_max > 0) || eigs[0] <= 1e-12 * eig_max)
    throw SingularHessian("pseudo-Hessian eigenvalue ratio below 1e-12");
  ws.H_inv = es.eigenvectors() * eigs.cwiseInverse().asDiagonal() *
             es.eigenvectors().transpose();
  ws.R = ws.H_inv * ws.W.transpose();
  ws.B = ws.H_inv * ws.J_warp.transpose();
  return ws;
}

Eigen::MatrixXd build_R_from_g(const GradientParams& g, WarpFamily family,
                               const SamplingGrid& grid) {
  try {
    return CLKWorkspace::build(g, family, grid).R;
  } catch (const SingularHessian& e) {
    throw RankDeficient(e.what());
  }
}

double clk_objective(const GradientParams& g, const TrainingSet& set,
                     WarpFamily family) {
  const Eigen::MatrixXd r = build_R_from_g(g, family, set.grid);
  double obj = 0;
  for (const TrainingPair& pair : set.pairs)
    obj += (pair.dp.p - r * (pair.feature - set.template_vec)).squaredNorm();
  return obj;
}

namespace {

// Writes vec(dR/dg_j) into out.col(j). The indicator structure reduces the
// column to three rank-1 pieces: with rho/gamma the active (row, col) of
// Lambda_j, v = A.row(gamma), w = W.row(rho),
//   dR/dg_j = -R.col(rho) (v R) - B.col(gamma) (w R) + B.col(gamma) e_rho^T.
void dr_dg_column(const CLKWorkspace& ws, Eigen::Index j,
                  Eigen::MatrixXd& out) {
  const Eigen::Index p = ws.R.rows();
  const Eigen::Index kd = ws.R.cols();
  const auto [rho, gamma] = ws.lambda_index[static_cast<std::size_t>(j)];
  const Eigen::VectorXd r_rho = ws.R.col(rho);
  const Eigen::VectorXd b_gamma = ws.B.col(gamma);
  const Eigen::RowVectorXd v_r = ws.J_warp.row(gamma) * ws.R;
  const Eigen::RowVectorXd w_r = ws.W.row(rho) * ws.R;
  for (Eigen::Index c = 0; c < kd; ++c)
    out.col(j).segment(c * p, p) = -r_rho * v_r[c] - b_gamma * w_r[c];
  out.col(j).segment(rho * p, p) += b_gamma;
}

template <typename Loop>
Eigen::MatrixXd dr_dg_impl(const CLKWorkspace& ws, Loop&& loop) {
  const Eigen::Index p = ws.R.rows();
  const Eigen::Index kd = ws.R.cols();
  Eigen::MatrixXd out(p * kd, 2 * kd);
  loop(2 * kd, [&](std::int64_t j) { dr_dg_column(ws, j, out); });
  return out;
}

template <typename Loop>
Eigen::MatrixXd residual_jacobian_impl(const CLKWorkspace& ws,
                                       const TrainingSet& set, Loop&& loop) {
  const auto n = static_cast<Eigen::Index>(set.pairs.size());
  const Eigen::Index p = ws.R.rows();
  const Eigen::Index kd = ws.R.cols();
  if (set.template_vec.size() != kd)
    throw ShapeMismatch("training set feature length does not match K*D");

  Eigen::MatrixXd x(kd, n);
  for (Eigen::Index i = 0; i < n; ++i)
    x.col(i) = set.pairs[static_cast<std::size_t>(i)].feature - set.template_vec;
  const Eigen::MatrixXd q = ws.R * x;       // P x N predicted updates
  const Eigen::MatrixXd u = ws.J_warp * q;  // 2D x N
  const Eigen::MatrixXd y = ws.W * q;       // KD x N

  // d residual_n / d g_j = u_n[gamma] R.col(rho) + (y_n - x_n)[rho] B.col(gamma)
  Eigen::MatrixXd jac(n * p, 2 * kd);
  loop(2 * kd, [&](std::int64_t j) {
    const auto [rho, gamma] = ws.lambda_index[static_cast<std::size_t>(j)];
    const Eigen::VectorXd r_rho = ws.R.col(rho);
    const Eigen::VectorXd b_gamma = ws.B.col(gamma);
    for (Eigen::Index i = 0; i < n; ++i)
      jac.col(j).segment(i * p, p) =
          u(gamma, i) * r_rho + (y(rho, i) - x(rho, i)) * b_gamma;
  });
  return jac;
}

}  // namespace

Eigen::MatrixXd dR_dg(const CLKWorkspace& ws) {
  return dr_dg_impl(ws, [](std::int64_t n, auto&& f) { parallel_for(n, f); });
}

Eigen::MatrixXd dR_dg_serial(const CLKWorkspace& ws) {
  return dr_dg_impl(ws, [](std::int64_t n, auto&& f) { serial_for(n, f); });
}

Eigen::MatrixXd assemble_residual_jacobian(const CLKWorkspace& ws,
                                           const TrainingSet& set) {
  return residual_jacobian_impl(
      ws, set, [](std::int64_t n, auto&& f) { parallel_for(n, f); });
}

Eigen::MatrixXd assemble_residual_jacobian_serial(const CLKWorkspace& ws,
                                                  const TrainingSet& set) {
  return residual_jacobian_impl(
      ws, set, [](std::int64_t n, auto&& f) { serial_for(n, f); });
}

GradientParams clk_train(const TrainingSet& set, WarpFamily family,
                         const SamplingGrid& grid, const LMConfig& cfg,
                         std::vector<double>* objective_trace) {
  GradientParams g = glk_train(set, family, grid);

  const auto n = static_cast<Eigen::Index>(set.pairs.size());
  const Eigen::Index p = param_count(family);
  const Eigen::Index kd = set.template_vec.size();
  Eigen::MatrixXd x(kd, n);
  Eigen::MatrixXd dps(p, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const TrainingPair& pair = set.pairs[static_cast<std::size_t>(i)];
    x.col(i) = pair.feature - set.template_vec;
    dps.col(i) = pair.dp.p;
  }
  auto objective_of = [&](const CLKWorkspace& ws) {
    return (dps - ws.R * x).squaredNorm();
  };

  CLKWorkspace ws = CLKWorkspace::build(g, family, grid);
  double obj = objective_of(ws);
  if (objective_trace) objective_trace->push_back(obj);

  double mu = -1.0;
  const Eigen::Index dim = 2 * kd;
  for (int iter = 0; iter < cfg.max_iterations; ++iter) {
    const Eigen::MatrixXd jac = assemble_residual_jacobian(ws, set);
    Eigen::VectorXd r(n * p);
    {
      const Eigen::MatrixXd r_mat = dps - ws.R * x;
      for (Eigen::Index i = 0; i < n; ++i) r.segment(i * p, p) = r_mat.col(i);
    }
    const double gn_trace = jac.squaredNorm();  // = trace(J^T J)
    if (mu < 0) mu = cfg.initial_damping * gn_trace / static_cast<double>(dim);
    const double ridge = 1e-10 * gn_trace;

    // Solve in whichever space is smaller; the damped normal equations give
    // identical steps either way: (J^T J + cI)^-1 J^T = J^T (J J^T + cI)^-1.
    const bool dual = n * p < dim;
    Eigen::MatrixXd gram;
    Eigen::VectorXd jtr;
    if (dual) {
      gram.noalias() = jac * jac.transpose();
    } else {
      gram.noalias() = jac.transpose() * jac;
      jtr.noalias() = jac.transpose() * r;
    }

    bool accepted = false;
    double prev = obj;
    while (true) {
      const double c = mu + ridge;
      Eigen::MatrixXd damped = gram;
      damped.diagonal().array() += c;
      Eigen::VectorXd step(dim);
      if (dual)
        step.noalias() = -jac.transpose() * damped.llt().solve(r);
      else
        step = -damped.llt().solve(jtr);

      GradientParams g_try = g;
      g_try.g += step;
      double obj_try = std::numeric_limits<double>::infinity();
      CLKWorkspace ws_try;
      try {
        ws_try = CLKWorkspace::build(g_try, family, grid);
        obj_try = objective_of(ws_try);
      } catch (const SingularHessian&) {
        // trial made H singular; treated as an uphill step
      }
      if (obj_try < obj) {
        g = std::move(g_try);
        ws = std::move(ws_try);
        obj = obj_try;
        mu *= cfg.damping_decrease;
        accepted = true;
        if (objective_trace) objective_trace->push_back(obj);
        break;
      }
      mu *= cfg.damping_increase;
      if (mu > cfg.max_damping) return g;  // stalled; best accepted g wins
    }
    if (accepted &&
        prev - obj < cfg.relative_tolerance * std::max(prev, 1e-300))
      break;
  }
  return g;
}

}  // namespace clk
