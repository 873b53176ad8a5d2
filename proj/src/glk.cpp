#include "clk/glk.hpp"

#include <Eigen/Dense>

#include "clk/errors.hpp"
#include "clk/parallel.hpp"

namespace clk {

namespace {

template <typename Loop>
GradientParams glk_impl(const TrainingSet& set, WarpFamily family,
                        const SamplingGrid& grid, Loop&& loop) {
  const auto d = static_cast<Eigen::Index>(grid.size());
  const auto n = static_cast<Eigen::Index>(set.pairs.size());
  if (d == 0 || set.template_vec.size() % d != 0)
    throw ShapeMismatch("template length is not a multiple of the grid size");
  const Eigen::Index k = set.template_vec.size() / d;
  if (n < 2)
    throw UnderdeterminedSite("need at least two samples to fit gradients", 0);

  // dp_n as columns (P x N) and residuals (KD x N), shared by all sites
  const Eigen::Index p = param_count(family);
  Eigen::MatrixXd dps(p, n);
  Eigen::MatrixXd residuals(set.template_vec.size(), n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const TrainingPair& pair = set.pairs[static_cast<std::size_t>(i)];
    if (pair.dp.p.size() != p)
      throw FamilyMismatch("sample warp parameters do not match the family");
    dps.col(i) = pair.dp.p;
    residuals.col(i) = pair.feature - set.template_vec;
  }

  GradientParams out;
  out.grid = grid;
  out.channels = static_cast<int>(k);
  out.g.resize(2 * k * d);
  loop(d, [&](std::int64_t site) {
    const Eigen::MatrixXd jac =
        jacobian_at_identity(family, grid.coords[static_cast<std::size_t>(site)]);
    const Eigen::MatrixXd u = jac * dps;  // 2 x N displacements at this site
    const Eigen::Matrix2d normal = u * u.transpose();
    // closed-form eigenvalues of the 2x2 PSD normal matrix
    const double half_trace = 0.5 * normal.trace();
    const double det = normal.determinant();
    const double spread =
        std::sqrt(std::max(half_trace * half_trace - det, 0.0));
    const double eig_min = half_trace - spread;
    const double eig_max = half_trace + spread;
    if (!(eig_max > 0) || eig_min <= 1e-12 * eig_max)
      throw UnderdeterminedSite(
          "site " + std::to_string(site) +
              ": displacement normal matrix is singular",
          static_cast<std::size_t>(site));
    const Eigen::Matrix2d inv = normal.inverse();
    for (Eigen::Index ch = 0; ch < k; ++ch) {
      const Eigen::Vector2d rhs = u * residuals.row(site * k + ch).transpose();
      out.g.segment<2>(2 * (site * k + ch)) = inv * rhs;
    }
  });
  return out;
}

}  // namespace

GradientParams glk_train(const TrainingSet& set, WarpFamily family,
                         const SamplingGrid& grid) {
  return glk_impl(set, family, grid,
                  [](std::int64_t n, auto&& f) { parallel_for(n, f); });
}

GradientParams glk_train_serial(const TrainingSet& set, WarpFamily family,
                                const SamplingGrid& grid) {
  return glk_impl(set, family, grid,
                  [](std::int64_t n, auto&& f) { serial_for(n, f); });
}

}  // namespace clk
