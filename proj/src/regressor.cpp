#include "clk/regressor.hpp"

#include <Eigen/Dense>
#include <fstream>

#include <nlohmann/json.hpp>

#include "clk/errors.hpp"

namespace clk {

std::string descriptor_name(Descriptor d) {
  return d == Descriptor::Raw ? "raw" : "lbp8";
}

Descriptor descriptor_from_name(const std::string& name) {
  if (name == "raw") return Descriptor::Raw;
  if (name == "lbp8") return Descriptor::LBP8;
  throw ConfigError("unknown descriptor: " + name);
}

int descriptor_channels(Descriptor d) { return d == Descriptor::Raw ? 1 : 8; }

MultiChannelImage apply_descriptor(const MultiChannelImage& img, Descriptor d) {
  return d == Descriptor::Raw ? img : lbp_transform(img);
}

double template_frame_rmse(const WarpParams& p, const WarpParams& gt,
                           const SamplingGrid& grid) {
  const WarpParams residual = compose(invert(gt), p);
  const Corners c = grid.corners();
  return corner_rmse(warp_corners(residual, c), c);
}

Eigen::MatrixXd build_W(const Eigen::MatrixXd& grads, WarpFamily family,
                        const SamplingGrid& grid) {
  const auto d = static_cast<Eigen::Index>(grid.size());
  if (grads.cols() != 2) throw ShapeMismatch("gradients must have 2 columns");
  if (d == 0 || grads.rows() % d != 0)
    throw ShapeMismatch("gradient row count is not a multiple of the grid size");
  const Eigen::Index k = grads.rows() / d;
  Eigen::MatrixXd w(grads.rows(), param_count(family));
  for (Eigen::Index site = 0; site < d; ++site) {
    const Eigen::MatrixXd jac =
        jacobian_at_identity(family, grid.coords[static_cast<std::size_t>(site)]);
    w.middleRows(site * k, k).noalias() = grads.middleRows(site * k, k) * jac;
  }
  return w;
}

Eigen::VectorXd pack_gradients(const Eigen::MatrixXd& grads) {
  if (grads.cols() != 2) throw ShapeMismatch("gradients must have 2 columns");
  Eigen::VectorXd g(2 * grads.rows());
  for (Eigen::Index r = 0; r < grads.rows(); ++r) {
    g[2 * r + 0] = grads(r, 0);
    g[2 * r + 1] = grads(r, 1);
  }
  return g;
}

Eigen::MatrixXd unpack_gradients(const Eigen::VectorXd& g) {
  if (g.size() % 2 != 0)
    throw ShapeMismatch("gradient vector length must be even");
  Eigen::MatrixXd grads(g.size() / 2, 2);
  for (Eigen::Index r = 0; r < grads.rows(); ++r) {
    grads(r, 0) = g[2 * r + 0];
    grads(r, 1) = g[2 * r + 1];
  }
  return grads;
}

Eigen::MatrixXd pinv_svd(const Eigen::MatrixXd& m, double rtol) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeThinU |
                                               Eigen::ComputeThinV);
  const Eigen::VectorXd& sv = svd.singularValues();
  if (sv.size() == 0 || !(sv[0] > 0) || sv[sv.size() - 1] < rtol * sv[0])
    throw RankDeficient("matrix is rank deficient (singular value ratio below " +
                        std::to_string(rtol) + ")");
  return svd.matrixV() * sv.cwiseInverse().asDiagonal() *
         svd.matrixU().transpose();
}

RegressorLayer iclk_build(const MultiChannelImage& img, const WarpParams& p_gt,
                          WarpFamily family, const SamplingGrid& grid) {
  const Eigen::MatrixXd grads = warped_gradients(img, p_gt, grid);
  RegressorLayer layer;
  layer.R = pinv_svd(build_W(grads, family, grid));
  layer.template_vec = sample_warped_vector(img, p_gt, grid);
  layer.g = GradientParams{pack_gradients(grads), grid, img.channels()};
  return layer;
}

RegressorLayer iclk_build(const MultiChannelImage& img, WarpFamily family,
                          const SamplingGrid& grid) {
  return iclk_build(img, WarpParams::identity(family), family, grid);
}

AlignResult run_cascade(const MultiChannelImage& img, const WarpParams& p_init,
                        const RegressorCascade& cascade,
                        int max_iters_per_layer, const WarpParams* gt) {
  if (img.channels() != cascade.channels)
    throw WrongChannelCount("image channel count does not match the cascade");
  if (p_init.family != cascade.family)
    throw FamilyMismatch("initial warp family does not match the cascade");
  if (cascade.layers.empty()) throw ConfigError("cascade has no layers");

  AlignResult res;
  res.p_final = p_init;
  const WarpParams gt_inv =
      gt ? invert(*gt) : WarpParams::identity(cascade.family);
  const Corners corners = cascade.grid.corners();
  auto record_rmse = [&] {
    if (!gt) return;
    res.rmse_per_iteration.push_back(
        corner_rmse(warp_corners(compose(gt_inv, res.p_final), corners),
                    corners));
  };
  record_rmse();

  // returns false when the run must stop (degenerate warp)
  auto apply_layer = [&](const RegressorLayer& layer, double* update_norm) {
    try {
      const Eigen::VectorXd x =
          sample_warped_vector(img, res.p_final, cascade.grid);
      WarpParams dp{cascade.family, layer.R * (x - layer.template_vec)};
      if (update_norm) *update_norm = dp.p.norm();
      res.p_final = compose(res.p_final, invert(dp));
      ++res.iterations_run;
      record_rmse();
      return true;
    } catch (const SingularWarp&) {
      return false;
    } catch (const HomographyDivideByZero&) {
      return false;
    }
  };

  bool aborted = false;
  if (cascade.iterative) {
    for (int it = 0; it < max_iters_per_layer; ++it) {
      double update_norm = 0;
      if (!apply_layer(cascade.layers.front(), &update_norm)) {
        aborted = true;
        break;
      }
      if (update_norm < 1e-10) break;
    }
  } else {
    for (const RegressorLayer& layer : cascade.layers) {
      if (!apply_layer(layer, nullptr)) {
        aborted = true;
        break;
      }
    }
  }

  res.converged =
      gt && !aborted && res.rmse_per_iteration.back() < 1.0;
  return res;
}

namespace {

nlohmann::json vector_to_json(const Eigen::VectorXd& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

Eigen::VectorXd vector_from_json(const nlohmann::json& j) {
  const auto values = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(values.data(),
                                           static_cast<Eigen::Index>(values.size()));
}

constexpr const char* kModelVersion = "clk-model-v1";

}  // namespace

nlohmann::json cascade_to_json(const RegressorCascade& cascade) {
  nlohmann::json j;
  j["version"] = kModelVersion;
  j["family"] = family_name(cascade.family);
  j["descriptor"] = descriptor_name(cascade.descriptor);
  j["channels"] = cascade.channels;
  j["iterative"] = cascade.iterative;
  nlohmann::json coords = nlohmann::json::array();
  for (const Point2& c : cascade.grid.coords)
    coords.push_back({c.x, c.y});
  j["grid"]["coords"] = std::move(coords);
  j["layers"] = nlohmann::json::array();
  for (const RegressorLayer& layer : cascade.layers) {
    nlohmann::json jl;
    // R stored row-major
    std::vector<double> r;
    r.reserve(static_cast<std::size_t>(layer.R.size()));
    for (Eigen::Index row = 0; row < layer.R.rows(); ++row)
      for (Eigen::Index col = 0; col < layer.R.cols(); ++col)
        r.push_back(layer.R(row, col));
    jl["R"] = std::move(r);
    jl["template"] = vector_to_json(layer.template_vec);
    if (layer.g) jl["g"] = vector_to_json(layer.g->g);
    j["layers"].push_back(std::move(jl));
  }
  return j;
}

RegressorCascade cascade_from_json(const nlohmann::json& j) {
  if (j.value("version", "") != kModelVersion)
    throw ConfigError("unsupported model version (expected clk-model-v1)");
  RegressorCascade cascade;
  cascade.family = family_from_name(j.at("family").get<std::string>());
  cascade.descriptor =
      descriptor_from_name(j.at("descriptor").get<std::string>());
  cascade.channels = j.at("channels").get<int>();
  cascade.iterative = j.at("iterative").get<bool>();
  for (const auto& c : j.at("grid").at("coords"))
    cascade.grid.coords.push_back({c.at(0).get<double>(), c.at(1).get<double>()});
  const Eigen::Index p = param_count(cascade.family);
  const Eigen::Index kd =
      static_cast<Eigen::Index>(cascade.grid.size()) * cascade.channels;
  for (const auto& jl : j.at("layers")) {
    RegressorLayer layer;
    const auto r = jl.at("R").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(r.size()) != p * kd)
      throw ConfigError("layer R has the wrong number of entries");
    layer.R.resize(p, kd);
    for (Eigen::Index row = 0; row < p; ++row)
      for (Eigen::Index col = 0; col < kd; ++col)
        layer.R(row, col) = r[static_cast<std::size_t>(row * kd + col)];
    if (!layer.R.allFinite())
      throw ConfigError("layer R contains non-finite entries");
    layer.template_vec = vector_from_json(jl.at("template"));
    if (layer.template_vec.size() != kd)
      throw ConfigError("layer template has the wrong length");
    if (jl.contains("g")) {
      GradientParams g;
      g.g = vector_from_json(jl.at("g"));
      g.grid = cascade.grid;
      g.channels = cascade.channels;
      if (g.g.size() != 2 * kd)
        throw ConfigError("layer g has the wrong length");
      layer.g = std::move(g);
    }
    cascade.layers.push_back(std::move(layer));
  }
  if (cascade.layers.empty()) throw ConfigError("model has no layers");
  return cascade;
}

void save_cascade(const RegressorCascade& cascade, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << cascade_to_json(cascade).dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path);
}

RegressorCascade load_cascade(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("bad model file: ") + e.what());
  }
  return cascade_from_json(j);
}

}  // namespace clk
