#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "clk/cascade.hpp"
#include "clk/conditional.hpp"
#include "clk/errors.hpp"
#include "clk/glk.hpp"
#include "clk/regressor.hpp"
#include "clk/rng.hpp"
#include "clk/sdm.hpp"
#include "clk/synth.hpp"
#include "test_util.hpp"

using namespace clk;
using testutil::exactly_equal;
using testutil::smooth_noise_image;
using testutil::translation;
using testutil::two_ramp_image;

namespace {

Eigen::MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols,
                              std::uint64_t seed) {
  auto rng = derive_stream(seed, 0x6d6174);
  std::normal_distribution<double> normal;
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = normal(rng);
  return m;
}

Eigen::VectorXd random_vector(Eigen::Index size, std::uint64_t seed) {
  return random_matrix(size, 1, seed);
}

GradientParams random_gradients(const SamplingGrid& grid, int channels,
                                std::uint64_t seed) {
  GradientParams g;
  g.grid = grid;
  g.channels = channels;
  g.g = random_vector(2 * channels * static_cast<Eigen::Index>(grid.size()),
                      seed);
  return g;
}

/// Set whose features follow the exact generative model: residuals are
/// W(g*) dp_n, so g* is both the generative and the conditional optimum.
TrainingSet planted_set(const GradientParams& g_star, WarpFamily family,
                        const SamplingGrid& grid, int n, std::uint64_t seed) {
  const CLKWorkspace ws = CLKWorkspace::build(g_star, family, grid);
  TrainingSet set;
  set.family = family;
  set.grid = grid;
  set.channels = g_star.channels;
  set.template_vec = Eigen::VectorXd::Zero(ws.W.rows());
  auto rng = derive_stream(seed, 0x706c74);
  std::normal_distribution<double> normal(0.0, 0.5);
  for (int i = 0; i < n; ++i) {
    TrainingPair pair;
    pair.dp.family = family;
    pair.dp.p.resize(param_count(family));
    for (Eigen::Index j = 0; j < pair.dp.p.size(); ++j)
      pair.dp.p[j] = normal(rng);
    pair.feature = set.template_vec + ws.W * pair.dp.p;
    set.pairs.push_back(std::move(pair));
  }
  return set;
}

/// Set with unstructured residuals; no g reproduces it exactly, which keeps
/// the conditional objective genuinely nonzero and LM busy.
TrainingSet random_set(WarpFamily family, const SamplingGrid& grid,
                       int channels, int n, std::uint64_t seed) {
  const auto kd = static_cast<Eigen::Index>(grid.size()) * channels;
  TrainingSet set;
  set.family = family;
  set.grid = grid;
  set.channels = channels;
  set.template_vec = Eigen::VectorXd::Zero(kd);
  auto rng = derive_stream(seed, 0x726e64);
  std::normal_distribution<double> normal(0.0, 0.5);
  for (int i = 0; i < n; ++i) {
    TrainingPair pair;
    pair.dp.family = family;
    pair.dp.p.resize(param_count(family));
    for (Eigen::Index j = 0; j < pair.dp.p.size(); ++j)
      pair.dp.p[j] = normal(rng);
    pair.feature.resize(kd);
    for (Eigen::Index j = 0; j < kd; ++j) pair.feature[j] = normal(rng);
    set.pairs.push_back(std::move(pair));
  }
  return set;
}

double max_abs(const Eigen::MatrixXd& m) {
  return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff();
}

}  // namespace

// ---------------------------------------------------------------------------
// build_W and gradient packing

TEST_CASE("build_W of zero gradients is the zero matrix") {
  const SamplingGrid grid = SamplingGrid::box(3, 3);
  const Eigen::MatrixXd w =
      build_W(Eigen::MatrixXd::Zero(9, 2), WarpFamily::Affine, grid);
  CHECK(w.rows() == 9);
  CHECK(w.cols() == 6);
  CHECK(w.isZero(0.0));
}

TEST_CASE("build_W single-site affine row follows the parametrization") {
  SamplingGrid grid;
  grid.coords = {Point2{2, 3}};
  Eigen::MatrixXd grads(1, 2);
  grads << 1, 0;
  const Eigen::MatrixXd w = build_W(grads, WarpFamily::Affine, grid);
  Eigen::RowVectorXd expected(6);
  expected << 2, 0, 3, 0, 1, 0;
  CHECK(max_abs(w - expected) == 0.0);
}

TEST_CASE("build_W equals the dense blockdiag-times-Jacobian oracle") {
  const SamplingGrid grid = SamplingGrid::box(4, 3);
  const auto d = static_cast<Eigen::Index>(grid.size());
  const int k = 2;
  const Eigen::MatrixXd grads = random_matrix(k * d, 2, 101);
  for (WarpFamily family : {WarpFamily::Similarity, WarpFamily::Affine,
                            WarpFamily::Homography}) {
    const Eigen::Index p = param_count(family);
    Eigen::MatrixXd blockdiag = Eigen::MatrixXd::Zero(k * d, 2 * d);
    Eigen::MatrixXd stacked(2 * d, p);
    for (Eigen::Index site = 0; site < d; ++site) {
      blockdiag.block(site * k, 2 * site, k, 2) = grads.middleRows(site * k, k);
      stacked.middleRows(2 * site, 2) =
          jacobian_at_identity(family, grid.coords[site]);
    }
    const Eigen::MatrixXd w = build_W(grads, family, grid);
    CHECK(max_abs(w - blockdiag * stacked) < 1e-12);
  }
}

TEST_CASE("gradient packing round-trips") {
  const Eigen::MatrixXd grads = random_matrix(12, 2, 7);
  CHECK(exactly_equal(unpack_gradients(pack_gradients(grads)), grads));
  CHECK_THROWS_AS(pack_gradients(random_matrix(4, 3, 8)), ShapeMismatch);
  CHECK_THROWS_AS(unpack_gradients(random_vector(5, 9)), ShapeMismatch);
}

// ---------------------------------------------------------------------------
// pinv_svd and iclk_build

TEST_CASE("pseudo-inverse of an orthonormal-column matrix is its transpose") {
  const Eigen::MatrixXd m = random_matrix(12, 5, 11);
  const Eigen::MatrixXd q =
      Eigen::HouseholderQR<Eigen::MatrixXd>(m).householderQ() *
      Eigen::MatrixXd::Identity(12, 5);
  CHECK(max_abs(pinv_svd(q) - q.transpose()) < 1e-13);
}

TEST_CASE("pseudo-inverse multiplies back to the identity") {
  const Eigen::MatrixXd m = random_matrix(20, 6, 13);
  const Eigen::MatrixXd pinv = pinv_svd(m);
  CHECK(max_abs(pinv * m - Eigen::MatrixXd::Identity(6, 6)) < 1e-12);
}

TEST_CASE("pseudo-inverse rejects rank-deficient input") {
  Eigen::MatrixXd m = random_matrix(10, 4, 17);
  m.col(3) = 2.0 * m.col(1);  // exact linear dependence
  CHECK_THROWS_AS(pinv_svd(m), RankDeficient);
}

TEST_CASE("iclk regressor left-inverts its gradient matrix") {
  const MultiChannelImage img = smooth_noise_image(64, 301);
  const SamplingGrid grid = SamplingGrid::box();
  for (WarpFamily family : {WarpFamily::Similarity, WarpFamily::Affine,
                            WarpFamily::Homography}) {
    const RegressorLayer layer = iclk_build(img, translation(family, 22, 22),
                                            family, grid);
    REQUIRE(layer.g.has_value());
    const Eigen::MatrixXd w =
        build_W(unpack_gradients(layer.g->g), family, grid);
    const Eigen::Index p = param_count(family);
    const Eigen::MatrixXd err =
        layer.R * w - Eigen::MatrixXd::Identity(p, p);
    CHECK(max_abs(err) < 1e-8);
    CHECK(err.norm() < 1e-6);  // Frobenius form of the same invariant
  }
}

TEST_CASE("iclk on a constant image reports the aperture problem") {
  const MultiChannelImage img(32, 32, 1, std::vector<double>(32 * 32, 0.5));
  CHECK_THROWS_AS(iclk_build(img, WarpFamily::Affine, SamplingGrid::box(8, 8)),
                  RankDeficient);
}

TEST_CASE("identity-placement iclk_build matches the explicit overload") {
  const MultiChannelImage img = smooth_noise_image(48, 303);
  const SamplingGrid grid = SamplingGrid::box(10, 10);
  const RegressorLayer a = iclk_build(img, WarpFamily::Affine, grid);
  const RegressorLayer b = iclk_build(
      img, WarpParams::identity(WarpFamily::Affine), WarpFamily::Affine, grid);
  CHECK(exactly_equal(a.R, b.R));
  CHECK(exactly_equal(a.template_vec, b.template_vec));
}

// ---------------------------------------------------------------------------
// run_cascade

TEST_CASE("starting at the ground truth leaves the warp unchanged") {
  const MultiChannelImage img = smooth_noise_image(96, 311);
  const SamplingGrid grid = SamplingGrid::box();
  const WarpParams p_gt = translation(WarpFamily::Affine, 35, 35);
  const RegressorCascade cascade = iclk_train_cascade(img, p_gt, grid, {});
  const AlignResult res = run_cascade(img, p_gt, cascade, 30, &p_gt);
  CHECK((res.p_final.p - p_gt.p).lpNorm<Eigen::Infinity>() < 1e-8);
  CHECK(res.converged);
  REQUIRE(!res.rmse_per_iteration.empty());
  CHECK(res.rmse_per_iteration.front() == 0.0);
  CHECK(res.rmse_per_iteration.size() ==
        static_cast<std::size_t>(res.iterations_run) + 1);
}

TEST_CASE("one iteration recovers in-family perturbations of a linear image") {
  // Bilinear sampling reproduces a coordinate-linear image exactly, so the
  // least-squares update is exact for any perturbation the warp family can
  // linearly express: full similarity/affine motions, and pure translations
  // under a homography (whose Jacobian is only identity-linear).
  const MultiChannelImage img = two_ramp_image(96);
  const SamplingGrid grid = SamplingGrid::box();

  struct Case {
    WarpFamily family;
    std::vector<double> dp;
  };
  const std::vector<Case> cases = {
      {WarpFamily::Similarity, {0.01, -0.02, 0.5, -0.3}},
      {WarpFamily::Affine, {0.02, -0.01, 0.015, -0.02, 0.5, 0.3}},
      {WarpFamily::Homography, {0, 0, 0, 0, 0.6, -0.4, 0, 0}},
  };
  for (const Case& c : cases) {
    CAPTURE(family_name(c.family));
    const WarpParams p_gt = translation(c.family, 38, 38);
    WarpParams dp{c.family, Eigen::Map<const Eigen::VectorXd>(
                                c.dp.data(),
                                static_cast<Eigen::Index>(c.dp.size()))};
    const RegressorCascade cascade = iclk_train_cascade(img, p_gt, grid, {});
    const AlignResult res =
        run_cascade(img, compose(p_gt, dp), cascade, 30, &p_gt);
    REQUIRE(res.rmse_per_iteration.size() >= 2);
    CHECK(res.rmse_per_iteration[1] < 1e-6);
    CHECK(res.converged);
  }
}

TEST_CASE("convergence flag thresholds the final corner error at one pixel") {
  const MultiChannelImage img = smooth_noise_image(96, 313);
  const SamplingGrid grid = SamplingGrid::box();
  const WarpParams p_gt = translation(WarpFamily::Affine, 35, 35);
  const RegressorCascade cascade = iclk_train_cascade(img, p_gt, grid, {});
  const Corners corners = grid.corners();
  auto rng = derive_stream(99, 0);
  int checked = 0;
  for (int i = 0; i < 40; ++i) {
    const WarpParams dp =
        perturb_warp(WarpFamily::Affine, corners, {3.0, 1, 99}, rng);
    const AlignResult res =
        run_cascade(img, compose(p_gt, dp), cascade, 30, &p_gt);
    REQUIRE(!res.rmse_per_iteration.empty());
    CHECK(res.converged == (res.rmse_per_iteration.back() < 1.0));
    ++checked;
  }
  CHECK(checked == 40);
}

TEST_CASE("without ground truth no trace or flag is produced") {
  const MultiChannelImage img = smooth_noise_image(96, 317);
  const SamplingGrid grid = SamplingGrid::box();
  const WarpParams p_gt = translation(WarpFamily::Affine, 35, 35);
  const RegressorCascade cascade = iclk_train_cascade(img, p_gt, grid, {});
  const AlignResult res = run_cascade(img, p_gt, cascade, 30);
  CHECK(res.rmse_per_iteration.empty());
  CHECK_FALSE(res.converged);
}

TEST_CASE("a singular predicted update stops the run unconverged") {
  // Regressor rigged to predict p0 = p3 = -1, which maps the plane to a
  // point; inverting that update must abort the run, not crash it.
  const SamplingGrid grid = SamplingGrid::box(2, 2);
  const MultiChannelImage img(8, 8, 1, std::vector<double>(64, 0.5));
  Eigen::VectorXd target(6);
  target << -1, 0, 0, -1, 0, 0;
  RegressorLayer layer;
  layer.template_vec = Eigen::VectorXd::Zero(4);
  layer.R = target * Eigen::RowVectorXd::Constant(4, 0.5);  // R x = target
  RegressorCascade cascade;
  cascade.family = WarpFamily::Affine;
  cascade.grid = grid;
  cascade.layers.push_back(layer);

  const WarpParams gt = WarpParams::identity(WarpFamily::Affine);
  const AlignResult res = run_cascade(img, gt, cascade, 30, &gt);
  CHECK_FALSE(res.converged);
  CHECK(res.iterations_run == 0);
  CHECK(res.rmse_per_iteration.size() == 1);
  CHECK(exactly_equal(res.p_final.p, gt.p));
}

TEST_CASE("run_cascade validates its inputs") {
  const MultiChannelImage img = smooth_noise_image(32, 319);
  const SamplingGrid grid = SamplingGrid::box(4, 4);
  const RegressorCascade cascade =
      iclk_train_cascade(img, translation(WarpFamily::Affine, 10, 10), grid, {});
  const MultiChannelImage wrong_k = two_ramp_image(32);
  CHECK_THROWS_AS(run_cascade(wrong_k, WarpParams::identity(WarpFamily::Affine),
                              cascade),
                  WrongChannelCount);
  CHECK_THROWS_AS(run_cascade(img, WarpParams::identity(WarpFamily::Similarity),
                              cascade),
                  FamilyMismatch);
  RegressorCascade empty = cascade;
  empty.layers.clear();
  CHECK_THROWS_AS(run_cascade(img, WarpParams::identity(WarpFamily::Affine),
                              empty),
                  ConfigError);
}

// ---------------------------------------------------------------------------
// SDM

TEST_CASE("extreme ridge weight shrinks the regressor to zero") {
  const TrainingSet set = random_set(WarpFamily::Affine,
                                     SamplingGrid::box(3, 3), 1, 30, 401);
  const RegressorLayer layer = sdm_train_layer(set, 1e12);
  CHECK(layer.R.norm() < 1e-6);
}

TEST_CASE("unregularized regression recovers a planted regressor") {
  const SamplingGrid grid = SamplingGrid::box(3, 3);
  const Eigen::MatrixXd r_star = random_matrix(6, 9, 403);
  TrainingSet set;
  set.family = WarpFamily::Affine;
  set.grid = grid;
  set.template_vec = Eigen::VectorXd::Zero(9);
  const Eigen::MatrixXd x = random_matrix(9, 50, 405);
  for (Eigen::Index i = 0; i < x.cols(); ++i) {
    TrainingPair pair;
    pair.feature = x.col(i);
    pair.dp = {WarpFamily::Affine, r_star * x.col(i)};
    set.pairs.push_back(std::move(pair));
  }
  const RegressorLayer layer = sdm_train_layer(set, 0.0);
  CHECK(max_abs(layer.R - r_star) < 1e-8);
}

TEST_CASE("ridge solutions satisfy the normal equations in both regimes") {
  // n > KD exercises the feature-space solve, n < KD the sample-space
  // (push-through) one; both must satisfy R (X X^T + lambda I) = Y X^T.
  for (int n : {40, 5}) {
    CAPTURE(n);
    const TrainingSet set = random_set(WarpFamily::Affine,
                                       SamplingGrid::box(3, 3), 1, n, 407);
    const double lambda = 0.37;
    const RegressorLayer layer = sdm_train_layer(set, lambda);
    Eigen::MatrixXd x(9, n), y(6, n);
    for (int i = 0; i < n; ++i) {
      x.col(i) = set.pairs[i].feature - set.template_vec;
      y.col(i) = set.pairs[i].dp.p;
    }
    Eigen::MatrixXd lhs = x * x.transpose();
    lhs.diagonal().array() += lambda;
    const Eigen::MatrixXd rhs = y * x.transpose();
    CHECK((layer.R * lhs - rhs).norm() < 1e-8 * rhs.norm());
  }
}

TEST_CASE("rank counting rejects unregularized underdetermined systems") {
  const TrainingSet set = random_set(WarpFamily::Affine,
                                     SamplingGrid::box(3, 3), 1, 5, 409);
  CHECK_THROWS_AS(sdm_train_layer(set, 0.0), SingularSystem);
  const TrainingSet degenerate = random_set(WarpFamily::Affine,
                                            SamplingGrid::box(2, 2), 1, 2, 411);
  CHECK_THROWS_AS(sdm_train_layer(degenerate, 0.0), SingularSystem);
}

TEST_CASE("sdm_train stacks one layer per set and checks agreement") {
  const TrainingSet a = random_set(WarpFamily::Affine, SamplingGrid::box(3, 3),
                                   1, 30, 413);
  const TrainingSet b = random_set(WarpFamily::Affine, SamplingGrid::box(3, 3),
                                   1, 30, 415);
  const RegressorCascade cascade = sdm_train({a, b}, 0.1);
  REQUIRE(cascade.layers.size() == 2);
  CHECK(exactly_equal(cascade.layers[0].R, sdm_train_layer(a, 0.1).R));
  CHECK(exactly_equal(cascade.layers[1].R, sdm_train_layer(b, 0.1).R));
  TrainingSet c = random_set(WarpFamily::Similarity, SamplingGrid::box(3, 3),
                             1, 30, 417);
  CHECK_THROWS_AS(sdm_train({a, c}, 0.1), FamilyMismatch);
}

// ---------------------------------------------------------------------------
// GLK

TEST_CASE("glk recovers gradients planted through the generative model") {
  const SamplingGrid grid = SamplingGrid::box(4, 4);
  for (WarpFamily family : {WarpFamily::Similarity, WarpFamily::Affine,
                            WarpFamily::Homography}) {
    CAPTURE(family_name(family));
    const GradientParams g_star = random_gradients(grid, 1, 501);
    const TrainingSet set = planted_set(g_star, family, grid, 25, 503);
    const GradientParams g = glk_train(set, family, grid);
    CHECK((g.g - g_star.g).lpNorm<Eigen::Infinity>() < 1e-8);
  }
}

TEST_CASE("glk reports the first underdetermined site") {
  const SamplingGrid grid = SamplingGrid::box(3, 3);
  TrainingSet set = random_set(WarpFamily::Affine, grid, 1, 10, 505);
  for (TrainingPair& pair : set.pairs) pair.dp.p.setZero();
  CHECK_THROWS_AS(glk_train(set, WarpFamily::Affine, grid),
                  UnderdeterminedSite);
  try {
    glk_train_serial(set, WarpFamily::Affine, grid);
    FAIL("expected UnderdeterminedSite");
  } catch (const UnderdeterminedSite& e) {
    CHECK(e.site_index == 0);
  }
}

TEST_CASE("glk needs at least two samples") {
  TrainingSet set = random_set(WarpFamily::Affine, SamplingGrid::box(3, 3),
                               1, 1, 507);
  CHECK_THROWS_AS(glk_train(set, WarpFamily::Affine, set.grid),
                  UnderdeterminedSite);
}

TEST_CASE("per-site solves equal the joint least-squares solution") {
  // The generative objective block-diagonalizes over sites; solving all
  // 2KD unknowns jointly must give the same gradients.
  const SamplingGrid grid = SamplingGrid::box(2, 2);
  const WarpFamily family = WarpFamily::Similarity;
  const int k = 2, n = 15;
  const TrainingSet set = random_set(family, grid, k, n, 509);
  const GradientParams g = glk_train(set, family, grid);

  const auto d = static_cast<Eigen::Index>(grid.size());
  const Eigen::Index kd = k * d;
  Eigen::MatrixXd design = Eigen::MatrixXd::Zero(n * kd, 2 * kd);
  Eigen::VectorXd target(n * kd);
  for (int i = 0; i < n; ++i) {
    for (Eigen::Index site = 0; site < d; ++site) {
      const Eigen::Vector2d u =
          jacobian_at_identity(family, grid.coords[site]) * set.pairs[i].dp.p;
      for (Eigen::Index ch = 0; ch < k; ++ch) {
        const Eigen::Index row = i * kd + site * k + ch;
        design.block<1, 2>(row, 2 * (site * k + ch)) = u.transpose();
        target[row] =
            set.pairs[i].feature[site * k + ch] -
            set.template_vec[site * k + ch];
      }
    }
  }
  const Eigen::VectorXd joint =
      design.colPivHouseholderQr().solve(target);
  CHECK((g.g - joint).lpNorm<Eigen::Infinity>() < 1e-10);
}

// ---------------------------------------------------------------------------
// build_R_from_g and the conditional objective

TEST_CASE("conditional regressor from sampled gradients matches iclk") {
  const MultiChannelImage img = smooth_noise_image(64, 601);
  const SamplingGrid grid = SamplingGrid::box();
  for (WarpFamily family : {WarpFamily::Similarity, WarpFamily::Affine,
                            WarpFamily::Homography}) {
    CAPTURE(family_name(family));
    const RegressorLayer layer = iclk_build(img, family, grid);
    const GradientParams g{pack_gradients(finite_diff_gradients(img, grid)),
                           grid, 1};
    const Eigen::MatrixXd r = build_R_from_g(g, family, grid);
    CHECK(max_abs(r - layer.R) < 1e-10 * max_abs(layer.R));
  }
}

TEST_CASE("pseudo-inverse expansion equals the direct pseudo-inverse") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const SamplingGrid grid = SamplingGrid::box(3 + seed % 3, 3);
    const int k = 1 + static_cast<int>(seed % 2);
    const WarpFamily family =
        std::array{WarpFamily::Similarity, WarpFamily::Affine,
                   WarpFamily::Homography}[seed % 3];
    CAPTURE(seed);
    const GradientParams g = random_gradients(grid, k, 603 + seed);
    const Eigen::MatrixXd r = build_R_from_g(g, family, grid);
    const Eigen::MatrixXd w =
        build_W(unpack_gradients(g.g), family, grid);
    CHECK(max_abs(r - pinv_svd(w)) < 1e-8 * max_abs(r));
  }
}

TEST_CASE("one gradient vector yields regressors for every family") {
  const SamplingGrid grid = SamplingGrid::box(4, 4);
  const GradientParams g = random_gradients(grid, 1, 605);
  CHECK(build_R_from_g(g, WarpFamily::Affine, grid).rows() == 6);
  CHECK(build_R_from_g(g, WarpFamily::Homography, grid).rows() == 8);
  CHECK_THROWS_AS(build_R_from_g(GradientParams{Eigen::VectorXd::Zero(32),
                                                grid, 1},
                                 WarpFamily::Affine, grid),
                  RankDeficient);
}

TEST_CASE("objective vanishes on perfectly explained data") {
  const SamplingGrid grid = SamplingGrid::box(3, 3);
  const GradientParams g = random_gradients(grid, 1, 607);
  TrainingSet set;
  set.family = WarpFamily::Affine;
  set.grid = grid;
  set.template_vec = random_vector(9, 609);
  for (int i = 0; i < 5; ++i) {
    TrainingPair pair;
    pair.dp = WarpParams::identity(WarpFamily::Affine);
    pair.feature = set.template_vec;
    set.pairs.push_back(std::move(pair));
  }
  CHECK(clk_objective(g, set, WarpFamily::Affine) == 0.0);
}

TEST_CASE("objective agrees with its vectorized and looped forms") {
  const SamplingGrid grid = SamplingGrid::box(3, 3);
  const WarpFamily family = WarpFamily::Affine;
  const GradientParams g = random_gradients(grid, 1, 611);
  const TrainingSet set = random_set(family, grid, 1, 12, 613);
  const double obj = clk_objective(g, set, family);

  const Eigen::MatrixXd r = build_R_from_g(g, family, grid);
  const Eigen::Index p = r.rows();
  // column-major vec(R), applied through [x^T kron I_P] vec(R) = R x
  Eigen::VectorXd vec_r(r.size());
  for (Eigen::Index c = 0; c < r.cols(); ++c)
    vec_r.segment(c * p, p) = r.col(c);
  double vectorized = 0, looped = 0;
  for (const TrainingPair& pair : set.pairs) {
    const Eigen::VectorXd x = pair.feature - set.template_vec;
    Eigen::VectorXd pred = Eigen::VectorXd::Zero(p);
    for (Eigen::Index c = 0; c < x.size(); ++c)
      pred += x[c] * vec_r.segment(c * p, p);
    vectorized += (pair.dp.p - pred).squaredNorm();
    double sample = 0;
    for (Eigen::Index row = 0; row < p; ++row) {
      double dot = 0;
      for (Eigen::Index c = 0; c < x.size(); ++c) dot += r(row, c) * x[c];
      sample += (pair.dp.p[row] - dot) * (pair.dp.p[row] - dot);
    }
    looped += sample;
  }
  CHECK(std::abs(obj - vectorized) < 1e-12 * (1 + obj));
  CHECK(std::abs(obj - looped) < 1e-12 * (1 + obj));
}

// ---------------------------------------------------------------------------
// workspace derivatives

TEST_CASE("workspace pseudo-Hessian is symmetric positive definite") {
  const SamplingGrid grid = SamplingGrid::box(4, 4);
  const GradientParams g = random_gradients(grid, 1, 701);
  const CLKWorkspace ws = CLKWorkspace::build(g, WarpFamily::Affine, grid);
  CHECK(max_abs(ws.H - ws.H.transpose()) < 1e-12 * max_abs(ws.H));
  CHECK(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(ws.H)
            .eigenvalues()
            .minCoeff() > 0);
  CHECK(max_abs(ws.H * ws.H_inv - Eigen::MatrixXd::Identity(6, 6)) < 1e-10);
  CHECK_THROWS_AS(CLKWorkspace::build(GradientParams{
                      Eigen::VectorXd::Zero(32), grid, 1},
                      WarpFamily::Affine, grid),
                  SingularHessian);
}

TEST_CASE("pseudo-Hessian derivative is the symmetric rank-two update") {
  // dH/dg_j = v w^T + w v^T with v the warp-Jacobian row and w the W row
  // selected by the indicator; H is quadratic in g, so central differences
  // are exact up to rounding.
  const SamplingGrid grid = SamplingGrid::box(3, 3);
  const WarpFamily family = WarpFamily::Homography;
  const GradientParams g = random_gradients(grid, 2, 703);
  const CLKWorkspace ws = CLKWorkspace::build(g, family, grid);
  const double h = 1e-6;
  for (Eigen::Index j : {0, 5, 17, 35}) {
    const auto [rho, gamma] = ws.lambda_index[static_cast<std::size_t>(j)];
    const Eigen::VectorXd v = ws.J_warp.row(gamma).transpose();
    const Eigen::VectorXd w = ws.W.row(rho).transpose();
    const Eigen::MatrixXd analytic = v * w.transpose() + w * v.transpose();
    CHECK(max_abs(analytic - analytic.transpose()) == 0.0);

    GradientParams plus = g, minus = g;
    plus.g[j] += h;
    minus.g[j] -= h;
    const Eigen::MatrixXd fd =
        (CLKWorkspace::build(plus, family, grid).H -
         CLKWorkspace::build(minus, family, grid).H) /
        (2 * h);
    CHECK(max_abs(analytic - fd) < 1e-7 * (1 + max_abs(ws.H)));
  }
}

TEST_CASE("analytic regressor Jacobian matches finite differences") {
  // The load-bearing identity of conditional training: every column of
  // d vec(R)/dg must track a central difference of build_R_from_g.
  const double h = 1e-6;
  std::uint64_t seed = 801;
  for (WarpFamily family : {WarpFamily::Similarity, WarpFamily::Affine,
                            WarpFamily::Homography}) {
    for (int k : {1, 8}) {
      for (int side : {2, 3, 5}) {
        const SamplingGrid grid = SamplingGrid::box(side, side);
        const auto d = static_cast<Eigen::Index>(grid.size());
        if (k * d < param_count(family)) continue;  // W cannot reach rank P
        CAPTURE(family_name(family));
        CAPTURE(k);
        CAPTURE(side);
        const GradientParams g = random_gradients(grid, k, seed++);
        const CLKWorkspace ws = CLKWorkspace::build(g, family, grid);
        const Eigen::MatrixXd analytic = dR_dg(ws);

        const Eigen::Index p = param_count(family);
        Eigen::MatrixXd fd(analytic.rows(), analytic.cols());
        for (Eigen::Index j = 0; j < analytic.cols(); ++j) {
          GradientParams plus = g, minus = g;
          plus.g[j] += h;
          minus.g[j] -= h;
          const Eigen::MatrixXd diff =
              (build_R_from_g(plus, family, grid) -
               build_R_from_g(minus, family, grid)) /
              (2 * h);
          for (Eigen::Index c = 0; c < diff.cols(); ++c)
            fd.col(j).segment(c * p, p) = diff.col(c);
        }
        CHECK(max_abs(analytic - fd) < 1e-5 * max_abs(analytic));
      }
    }
  }
}

TEST_CASE("residual Jacobian equals its dense Kronecker construction") {
  const SamplingGrid grid = SamplingGrid::box(3, 3);
  const WarpFamily family = WarpFamily::Affine;
  const GradientParams g = random_gradients(grid, 1, 811);
  const TrainingSet set = random_set(family, grid, 1, 7, 813);
  const CLKWorkspace ws = CLKWorkspace::build(g, family, grid);
  const Eigen::MatrixXd jac = assemble_residual_jacobian(ws, set);

  const Eigen::MatrixXd dvec = dR_dg(ws);
  const Eigen::Index p = param_count(family);
  Eigen::MatrixXd oracle(jac.rows(), jac.cols());
  for (std::size_t i = 0; i < set.pairs.size(); ++i) {
    const Eigen::VectorXd x = set.pairs[i].feature - set.template_vec;
    // d r_n / dg = -[x^T kron I_P] dvec(R)/dg
    Eigen::MatrixXd block = Eigen::MatrixXd::Zero(p, jac.cols());
    for (Eigen::Index c = 0; c < x.size(); ++c)
      block -= x[c] * dvec.middleRows(c * p, p);
    oracle.middleRows(static_cast<Eigen::Index>(i) * p, p) = block;
  }
  CHECK(max_abs(jac - oracle) < 1e-12 * (1 + max_abs(jac)));
}

// ---------------------------------------------------------------------------
// clk_train

TEST_CASE("conditional training is exact on planted data") {
  const SamplingGrid grid = SamplingGrid::box(4, 4);
  const GradientParams g_star = random_gradients(grid, 1, 821);
  const TrainingSet set = planted_set(g_star, WarpFamily::Affine, grid, 20,
                                      823);
  const GradientParams g = clk_train(set, WarpFamily::Affine, grid);
  CHECK(clk_objective(g, set, WarpFamily::Affine) < 1e-10);
}

TEST_CASE("accepted objective values decrease monotonically") {
  const SamplingGrid grid = SamplingGrid::box(3, 3);
  const TrainingSet set = random_set(WarpFamily::Similarity, grid, 1, 40, 825);
  std::vector<double> trace;
  const GradientParams g =
      clk_train(set, WarpFamily::Similarity, grid, {}, &trace);
  REQUIRE(trace.size() >= 2);  // at least one accepted step on such data
  for (std::size_t i = 1; i < trace.size(); ++i)
    CHECK(trace[i] < trace[i - 1]);
  const GradientParams g_init =
      glk_train(set, WarpFamily::Similarity, grid);
  CHECK(clk_objective(g, set, WarpFamily::Similarity) <=
        clk_objective(g_init, set, WarpFamily::Similarity));
  CHECK(std::abs(trace.front() -
                 clk_objective(g_init, set, WarpFamily::Similarity)) <
        1e-12 * (1 + trace.front()));
  CHECK(std::abs(trace.back() -
                 clk_objective(g, set, WarpFamily::Similarity)) <
        1e-12 * (1 + trace.back()));
}

TEST_CASE("training lands on a first-order stationary point") {
  // dp_n = R(g*) x_n for unstructured x_n: a zero-residual conditional
  // optimum exists but sits away from the generative initializer, so LM has
  // to travel there rather than inherit it.
  const SamplingGrid grid = SamplingGrid::box(8, 8);
  const WarpFamily family = WarpFamily::Affine;
  const GradientParams g_star = random_gradients(grid, 1, 831);
  const CLKWorkspace ws_star = CLKWorkspace::build(g_star, family, grid);
  TrainingSet set = random_set(family, grid, 1, 50, 833);
  for (TrainingPair& pair : set.pairs)
    pair.dp.p = ws_star.R * (pair.feature - set.template_vec);

  const GradientParams g_init = glk_train(set, family, grid);
  REQUIRE(clk_objective(g_init, set, family) > 1e-3);

  const GradientParams g = clk_train(set, family, grid);
  const CLKWorkspace ws = CLKWorkspace::build(g, family, grid);
  const Eigen::MatrixXd jac = assemble_residual_jacobian(ws, set);
  const auto n = static_cast<Eigen::Index>(set.pairs.size());
  Eigen::VectorXd r(n * 6);
  for (Eigen::Index i = 0; i < n; ++i)
    r.segment(i * 6, 6) =
        set.pairs[static_cast<std::size_t>(i)].dp.p -
        ws.R * (set.pairs[static_cast<std::size_t>(i)].feature -
                set.template_vec);
  const double obj = r.squaredNorm();
  CHECK((2.0 * jac.transpose() * r).norm() < 1e-6 * (1 + obj));
}

// ---------------------------------------------------------------------------
// cascade training

TEST_CASE("single-layer cascades equal one direct trainer call") {
  const MultiChannelImage img = smooth_noise_image(64, 901);
  const SamplingGrid grid = SamplingGrid::box(6, 6);
  const WarpParams p_gt = translation(WarpFamily::Affine, 22, 22);
  CascadeTrainConfig cfg;
  cfg.layers = 1;
  cfg.n_per_layer = 20;
  cfg.seed = 42;
  const PerturbationConfig pcfg{cfg.sigma, cfg.n_per_layer,
                                cascade_layer_seed(cfg.seed, 0)};
  const TrainingSet base = generate_set(img, p_gt, grid, pcfg);

  cfg.sdm_lambda = 0.05;
  const RegressorCascade sdm = sdm_train_cascade(img, p_gt, grid, cfg);
  REQUIRE(sdm.layers.size() == 1);
  CHECK(exactly_equal(sdm.layers[0].R, sdm_train_layer(base, 0.05).R));

  const RegressorCascade glk = glk_train_cascade(img, p_gt, grid, cfg);
  REQUIRE(glk.layers.size() == 1);
  CHECK(exactly_equal(
      glk.layers[0].R,
      build_R_from_g(glk_train(base, WarpFamily::Affine, grid),
                     WarpFamily::Affine, grid)));

  const RegressorCascade clk = clk_train_cascade(img, p_gt, grid, cfg);
  REQUIRE(clk.layers.size() == 1);
  CHECK(exactly_equal(
      clk.layers[0].R,
      build_R_from_g(clk_train(base, WarpFamily::Affine, grid, cfg.lm),
                     WarpFamily::Affine, grid)));
}

TEST_CASE("iclk cascade is a single iterative layer") {
  const MultiChannelImage img = smooth_noise_image(64, 903);
  const SamplingGrid grid = SamplingGrid::box(8, 8);
  const WarpParams p_gt = translation(WarpFamily::Affine, 22, 22);
  const RegressorCascade cascade = iclk_train_cascade(img, p_gt, grid, {});
  CHECK(cascade.iterative);
  REQUIRE(cascade.layers.size() == 1);
  CHECK(exactly_equal(cascade.layers[0].R,
                      iclk_build(img, p_gt, WarpFamily::Affine, grid).R));
}

TEST_CASE("later layers train on raw draws when propagation is off") {
  const MultiChannelImage img = smooth_noise_image(96, 905);
  const SamplingGrid grid = SamplingGrid::box(6, 6);
  const WarpParams p_gt = translation(WarpFamily::Affine, 35, 35);
  CascadeTrainConfig cfg;
  cfg.layers = 2;
  cfg.n_per_layer = 25;
  cfg.seed = 7;
  cfg.sdm_lambda = 0.05;
  cfg.propagate = false;
  const RegressorCascade off = sdm_train_cascade(img, p_gt, grid, cfg);
  const TrainingSet fresh = generate_set(
      img, p_gt, grid, {cfg.sigma, cfg.n_per_layer,
                        cascade_layer_seed(cfg.seed, 1)});
  REQUIRE(off.layers.size() == 2);
  CHECK(exactly_equal(off.layers[1].R, sdm_train_layer(fresh, 0.05).R));

  cfg.propagate = true;
  const RegressorCascade on = sdm_train_cascade(img, p_gt, grid, cfg);
  CHECK(exactly_equal(on.layers[0].R, off.layers[0].R));
  CHECK_FALSE(exactly_equal(on.layers[1].R, off.layers[1].R));
}

TEST_CASE("trainer failures carry the layer index") {
  const MultiChannelImage img(48, 48, 1, std::vector<double>(48 * 48, 0.5));
  const SamplingGrid grid = SamplingGrid::box(6, 6);
  const WarpParams p_gt = translation(WarpFamily::Affine, 15, 15);
  CascadeTrainConfig cfg;
  cfg.layers = 2;
  cfg.n_per_layer = 50;
  cfg.sdm_lambda = 0.0;  // constant image -> X = 0 -> singular
  try {
    sdm_train_cascade(img, p_gt, grid, cfg);
    FAIL("expected SingularSystem");
  } catch (const SingularSystem& e) {
    CHECK(std::string(e.what()).find("layer 1") != std::string::npos);
  }
}

TEST_CASE("automatic ridge selection picks one of the grid candidates") {
  const MultiChannelImage img = smooth_noise_image(96, 907);
  const SamplingGrid grid = SamplingGrid::box(8, 8);
  const WarpParams p_gt = translation(WarpFamily::Affine, 35, 35);
  CascadeTrainConfig cfg;
  cfg.layers = 2;
  cfg.n_per_layer = 20;
  cfg.seed = 3;
  const RegressorCascade picked = sdm_train_cascade(img, p_gt, grid, cfg);

  const TrainingSet base = generate_set(
      img, p_gt, grid, {cfg.sigma, cfg.n_per_layer,
                        cascade_layer_seed(cfg.seed, 0)});
  double energy = 0;
  for (const TrainingPair& pair : base.pairs)
    energy += (pair.feature - base.template_vec).squaredNorm();
  const double scale = energy / static_cast<double>(base.template_vec.size());

  bool found = false;
  for (double mult : {1e-4, 1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2}) {
    CascadeTrainConfig fixed = cfg;
    fixed.sdm_lambda = mult * scale;
    const RegressorCascade candidate = sdm_train_cascade(img, p_gt, grid, fixed);
    found = found || exactly_equal(candidate.layers[0].R, picked.layers[0].R);
  }
  CHECK(found);
}

TEST_CASE("same-family swap reproduces the regressors bit for bit") {
  const MultiChannelImage img = smooth_noise_image(96, 909);
  const SamplingGrid grid = SamplingGrid::box(6, 6);
  const WarpParams p_gt = translation(WarpFamily::Affine, 35, 35);
  CascadeTrainConfig cfg;
  cfg.layers = 2;
  cfg.n_per_layer = 25;
  const RegressorCascade cascade = glk_train_cascade(img, p_gt, grid, cfg);
  const RegressorCascade same = swap_family(cascade, WarpFamily::Affine);
  REQUIRE(same.layers.size() == cascade.layers.size());
  for (std::size_t l = 0; l < cascade.layers.size(); ++l) {
    CHECK(exactly_equal(same.layers[l].R, cascade.layers[l].R));
    CHECK(exactly_equal(same.layers[l].template_vec,
                        cascade.layers[l].template_vec));
  }

  const RegressorCascade homog = swap_family(cascade, WarpFamily::Homography);
  CHECK(homog.family == WarpFamily::Homography);
  for (const RegressorLayer& layer : homog.layers) CHECK(layer.R.rows() == 8);

  RegressorCascade stripped = cascade;
  stripped.layers[1].g.reset();
  CHECK_THROWS_AS(swap_family(stripped, WarpFamily::Similarity), ConfigError);
}

TEST_CASE("model files round-trip every matrix bit for bit") {
  const MultiChannelImage img = smooth_noise_image(64, 911);
  const SamplingGrid grid = SamplingGrid::box(5, 5);
  const WarpParams p_gt = translation(WarpFamily::Similarity, 22, 22);
  CascadeTrainConfig cfg;
  cfg.layers = 2;
  cfg.n_per_layer = 20;
  const RegressorCascade cascade = glk_train_cascade(img, p_gt, grid, cfg);
  const RegressorCascade back = cascade_from_json(cascade_to_json(cascade));
  CHECK(back.family == cascade.family);
  CHECK(back.descriptor == cascade.descriptor);
  CHECK(back.channels == cascade.channels);
  CHECK(back.iterative == cascade.iterative);
  CHECK(back.grid == cascade.grid);
  REQUIRE(back.layers.size() == cascade.layers.size());
  for (std::size_t l = 0; l < cascade.layers.size(); ++l) {
    CHECK(exactly_equal(back.layers[l].R, cascade.layers[l].R));
    CHECK(exactly_equal(back.layers[l].template_vec,
                        cascade.layers[l].template_vec));
    REQUIRE(back.layers[l].g.has_value());
    CHECK(exactly_equal(back.layers[l].g->g, cascade.layers[l].g->g));
  }

  nlohmann::json bad = cascade_to_json(cascade);
  bad["version"] = "clk-model-v0";
  CHECK_THROWS_AS(cascade_from_json(bad), ConfigError);
}

TEST_CASE("template-frame error is the residual corner displacement") {
  const SamplingGrid grid = SamplingGrid::box();
  const WarpParams gt = translation(WarpFamily::Affine, 40, 30);
  CHECK(template_frame_rmse(gt, gt, grid) == 0.0);
  WarpParams off = gt;
  off.p[4] += 3.0;  // one extra source-frame pixel of x-translation
  CHECK(template_frame_rmse(off, gt, grid) == doctest::Approx(3.0));
}
