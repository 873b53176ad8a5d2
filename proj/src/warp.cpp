#include "clk/warp.hpp"

#include <Eigen/Dense>
#include <cmath>

#include <nlohmann/json.hpp>

#include "clk/errors.hpp"

namespace clk {

namespace {

constexpr double kProjectiveEps = 1e-12;
constexpr double kDegenerateRatio = 1e-10;

}  // namespace

int param_count(WarpFamily family) {
  switch (family) {
    case WarpFamily::Similarity: return 4;
    case WarpFamily::Affine: return 6;
    case WarpFamily::Homography: return 8;
  }
  return 0;
}

std::string family_name(WarpFamily family) {
  switch (family) {
    case WarpFamily::Similarity: return "similarity";
    case WarpFamily::Affine: return "affine";
    case WarpFamily::Homography: return "homography";
  }
  return "?";
}

WarpFamily family_from_name(const std::string& name) {
  if (name == "similarity") return WarpFamily::Similarity;
  if (name == "affine") return WarpFamily::Affine;
  if (name == "homography") return WarpFamily::Homography;
  throw ConfigError("unknown warp family: " + name);
}

WarpParams WarpParams::identity(WarpFamily family) {
  return {family, Eigen::VectorXd::Zero(param_count(family))};
}

bool WarpParams::is_identity(double tol) const {
  return p.size() == 0 || p.lpNorm<Eigen::Infinity>() <= tol;
}

Eigen::Matrix3d to_matrix(const WarpParams& wp) {
  Eigen::Matrix3d m = Eigen::Matrix3d::Identity();
  const Eigen::VectorXd& p = wp.p;
  switch (wp.family) {
    case WarpFamily::Similarity:
      m(0, 0) = 1.0 + p[0];
      m(0, 1) = -p[1];
      m(0, 2) = p[2];
      m(1, 0) = p[1];
      m(1, 1) = 1.0 + p[0];
      m(1, 2) = p[3];
      break;
    case WarpFamily::Affine:
      m(0, 0) = 1.0 + p[0];
      m(0, 1) = p[2];
      m(0, 2) = p[4];
      m(1, 0) = p[1];
      m(1, 1) = 1.0 + p[3];
      m(1, 2) = p[5];
      break;
    case WarpFamily::Homography:
      m(0, 0) = 1.0 + p[0];
      m(0, 1) = p[2];
      m(0, 2) = p[4];
      m(1, 0) = p[1];
      m(1, 1) = 1.0 + p[3];
      m(1, 2) = p[5];
      m(2, 0) = p[6];
      m(2, 1) = p[7];
      m(2, 2) = 1.0;
      break;
  }
  return m;
}

WarpParams from_matrix(WarpFamily family, const Eigen::Matrix3d& m_in) {
  Eigen::Matrix3d m = m_in;
  WarpParams wp = WarpParams::identity(family);
  switch (family) {
    case WarpFamily::Similarity:
      // Structure [[1+a,-b,tx],[b,1+a,ty]]; average the two redundant
      // entries to absorb round-off from matrix products.
      wp.p[0] = 0.5 * (m(0, 0) + m(1, 1)) - 1.0;
      wp.p[1] = 0.5 * (m(1, 0) - m(0, 1));
      wp.p[2] = m(0, 2);
      wp.p[3] = m(1, 2);
      break;
    case WarpFamily::Affine:
      wp.p[0] = m(0, 0) - 1.0;
      wp.p[1] = m(1, 0);
      wp.p[2] = m(0, 1);
      wp.p[3] = m(1, 1) - 1.0;
      wp.p[4] = m(0, 2);
      wp.p[5] = m(1, 2);
      break;
    case WarpFamily::Homography: {
      if (std::abs(m(2, 2)) < kProjectiveEps)
        throw SingularWarp("homography matrix has vanishing (3,3) entry");
      m /= m(2, 2);
      wp.p[0] = m(0, 0) - 1.0;
      wp.p[1] = m(1, 0);
      wp.p[2] = m(0, 1);
      wp.p[3] = m(1, 1) - 1.0;
      wp.p[4] = m(0, 2);
      wp.p[5] = m(1, 2);
      wp.p[6] = m(2, 0);
      wp.p[7] = m(2, 1);
      break;
    }
  }
  return wp;
}

Point2 warp_point(const WarpParams& wp, Point2 x) {
  const Eigen::VectorXd& p = wp.p;
  switch (wp.family) {
    case WarpFamily::Similarity:
      return {(1.0 + p[0]) * x.x - p[1] * x.y + p[2],
              p[1] * x.x + (1.0 + p[0]) * x.y + p[3]};
    case WarpFamily::Affine:
      return {(1.0 + p[0]) * x.x + p[2] * x.y + p[4],
              p[1] * x.x + (1.0 + p[3]) * x.y + p[5]};
    case WarpFamily::Homography: {
      const double u = (1.0 + p[0]) * x.x + p[2] * x.y + p[4];
      const double v = p[1] * x.x + (1.0 + p[3]) * x.y + p[5];
      const double w = p[6] * x.x + p[7] * x.y + 1.0;
      if (std::abs(w) < kProjectiveEps)
        throw HomographyDivideByZero("projective denominator ~ 0 at point");
      return {u / w, v / w};
    }
  }
  return x;
}

WarpParams compose(const WarpParams& a, const WarpParams& b) {
  if (a.family != b.family)
    throw FamilyMismatch("compose requires warps of the same family");
  return from_matrix(a.family, Eigen::Matrix3d(to_matrix(a) * to_matrix(b)));
}

WarpParams invert(const WarpParams& wp) {
  const Eigen::Matrix3d m = to_matrix(wp);
  const double det = m.determinant();
  if (std::abs(det) <= 1e-12)
    throw SingularWarp("warp matrix is singular (|det| <= 1e-12)");
  return from_matrix(wp.family, Eigen::Matrix3d(m.inverse()));
}

Eigen::MatrixXd jacobian_at_identity(WarpFamily family, Point2 pt) {
  const double x = pt.x, y = pt.y;
  Eigen::MatrixXd j(2, param_count(family));
  switch (family) {
    case WarpFamily::Similarity:
      j << x, -y, 1, 0,
           y,  x, 0, 1;
      break;
    case WarpFamily::Affine:
      j << x, 0, y, 0, 1, 0,
           0, x, 0, y, 0, 1;
      break;
    case WarpFamily::Homography:
      j << x, 0, y, 0, 1, 0, -x * x, -x * y,
           0, x, 0, y, 0, 1, -x * y, -y * y;
      break;
  }
  return j;
}

namespace {

// Linear families: W{x;p} - x = J(x) p exactly, so the fit is a linear
// least-squares problem on the stacked identity-warp Jacobians.
WarpParams fit_linear_family(WarpFamily family, const Corners& src,
                             const Corners& dst) {
  const int pdim = param_count(family);
  Eigen::MatrixXd a(8, pdim);
  Eigen::VectorXd b(8);
  for (int i = 0; i < 4; ++i) {
    a.middleRows<2>(2 * i) = jacobian_at_identity(family, src[i]);
    b[2 * i] = dst[i].x - src[i].x;
    b[2 * i + 1] = dst[i].y - src[i].y;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  if (sv[pdim - 1] < kDegenerateRatio * sv[0])
    throw DegenerateConfiguration("collinear or near-collinear source points");
  WarpParams wp{family, svd.solve(b)};
  return wp;
}

struct Normalization {
  Eigen::Matrix3d t;
};

// Hartley normalization: centroid to origin, mean distance sqrt(2).
Normalization normalize_points(const Corners& pts, std::array<Point2, 4>& out) {
  double cx = 0, cy = 0;
  for (const auto& p : pts) {
    cx += p.x;
    cy += p.y;
  }
  cx /= 4.0;
  cy /= 4.0;
  double mean_dist = 0;
  for (const auto& p : pts)
    mean_dist += std::sqrt(squared_distance(p, {cx, cy}));
  mean_dist /= 4.0;
  const double s = mean_dist > 1e-300 ? std::sqrt(2.0) / mean_dist : 1.0;
  for (int i = 0; i < 4; ++i) out[i] = {s * (pts[i].x - cx), s * (pts[i].y - cy)};
  Normalization n;
  n.t << s, 0, -s * cx,
         0, s, -s * cy,
         0, 0, 1;
  return n;
}

WarpParams fit_homography_dlt(const Corners& src, const Corners& dst) {
  std::array<Point2, 4> sn, dn;
  const Normalization ns = normalize_points(src, sn);
  const Normalization nd = normalize_points(dst, dn);

  Eigen::Matrix<double, 8, 9> a;
  for (int i = 0; i < 4; ++i) {
    const double x = sn[i].x, y = sn[i].y;
    const double u = dn[i].x, v = dn[i].y;
    a.row(2 * i)     << x, y, 1, 0, 0, 0, -u * x, -u * y, -u;
    a.row(2 * i + 1) << 0, 0, 0, x, y, 1, -v * x, -v * y, -v;
  }
  Eigen::JacobiSVD<Eigen::Matrix<double, 8, 9>> svd(a, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  // Rank must be exactly 8 for a unique homography through 4 point pairs.
  if (sv[7] < kDegenerateRatio * sv[0])
    throw DegenerateConfiguration("degenerate correspondences for DLT");
  const Eigen::Matrix<double, 9, 1> h = svd.matrixV().col(8);
  Eigen::Matrix3d hn;
  hn << h[0], h[1], h[2],
        h[3], h[4], h[5],
        h[6], h[7], h[8];
  const Eigen::Matrix3d hm = nd.t.inverse() * hn * ns.t;
  if (std::abs(hm(2, 2)) < kProjectiveEps)
    throw DegenerateConfiguration("DLT produced a homography with zero (3,3)");
  return from_matrix(WarpFamily::Homography, hm);
}

}  // namespace

WarpParams fit_params_from_points(WarpFamily family, const Corners& src,
                                  const Corners& dst) {
  if (family == WarpFamily::Homography) return fit_homography_dlt(src, dst);
  return fit_linear_family(family, src, dst);
}

double corner_rmse(const Corners& a, const Corners& b) {
  double acc = 0;
  for (int i = 0; i < 4; ++i) acc += squared_distance(a[i], b[i]);
  return std::sqrt(acc / 4.0);
}

Corners warp_corners(const WarpParams& wp, const Corners& c) {
  return {warp_point(wp, c[0]), warp_point(wp, c[1]), warp_point(wp, c[2]),
          warp_point(wp, c[3])};
}

void to_json(nlohmann::json& j, const WarpParams& wp) {
  j = nlohmann::json{{"family", family_name(wp.family)},
                     {"p", std::vector<double>(wp.p.begin(), wp.p.end())}};
}

void from_json(const nlohmann::json& j, WarpParams& wp) {
  wp.family = family_from_name(j.at("family").get<std::string>());
  const auto v = j.at("p").get<std::vector<double>>();
  if (static_cast<int>(v.size()) != param_count(wp.family))
    throw ConfigError("warp parameter count does not match family");
  wp.p = Eigen::Map<const Eigen::VectorXd>(v.data(), v.size());
}

}  // namespace clk
