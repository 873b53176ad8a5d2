#pragma once

#include <Eigen/Core>
#include <span>
#include <string>

#include "clk/geometry.hpp"

#include <nlohmann/json_fwd.hpp>

namespace clk {

/// Planar warp family. Parameter vectors are laid out so that p = 0 is the
/// identity warp in every family:
///   Similarity (P=4): p = (a, b, tx, ty),
///       [[1+a, -b, tx], [b, 1+a, ty]]
///   Affine (P=6):
///       [[1+p0, p2, p4], [p1, 1+p3, p5]]
///   Homography (P=8): 3x3 matrix I + [[p0,p2,p4],[p1,p3,p5],[p6,p7,0]]
///       followed by the projective division.
enum class WarpFamily { Similarity, Affine, Homography };

int param_count(WarpFamily family);
std::string family_name(WarpFamily family);
WarpFamily family_from_name(const std::string& name);

struct WarpParams {
  WarpFamily family = WarpFamily::Affine;
  Eigen::VectorXd p;

  static WarpParams identity(WarpFamily family);
  bool is_identity(double tol = 0.0) const;
};

/// 3x3 homogeneous matrix of the warp (bottom row [0,0,1] for the linear
/// families).
Eigen::Matrix3d to_matrix(const WarpParams& wp);

/// Inverse of to_matrix. Homography matrices are renormalized so the (3,3)
/// entry is 1; throws SingularWarp when that entry vanishes. Similarity
/// matrices are assumed structurally consistent (scaled rotation).
WarpParams from_matrix(WarpFamily family, const Eigen::Matrix3d& m);

/// Applies W{x; p}. Throws HomographyDivideByZero when the projective
/// denominator magnitude falls below 1e-12.
Point2 warp_point(const WarpParams& wp, Point2 x);

/// Parameters of a ∘ b (apply b first, then a). Throws FamilyMismatch.
WarpParams compose(const WarpParams& a, const WarpParams& b);

/// Parameters of the inverse warp. Throws SingularWarp when the induced
/// matrix has |det| <= 1e-12.
WarpParams invert(const WarpParams& wp);

/// Analytic Jacobian dW{x;p}/dp^T evaluated at p = 0; shape 2 x P.
Eigen::MatrixXd jacobian_at_identity(WarpFamily family, Point2 x);

/// Least-squares warp mapping src toward dst (exact 4-point DLT for
/// homographies). Throws DegenerateConfiguration on rank-deficient systems.
WarpParams fit_params_from_points(WarpFamily family, const Corners& src,
                                  const Corners& dst);

/// sqrt of the mean squared corner-to-corner Euclidean distance, in pixels.
double corner_rmse(const Corners& a, const Corners& b);

/// Corners mapped through the warp.
Corners warp_corners(const WarpParams& wp, const Corners& c);

void to_json(nlohmann::json& j, const WarpParams& wp);
void from_json(const nlohmann::json& j, WarpParams& wp);

}  // namespace clk
