#pragma once

#include <Eigen/Core>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "clk/image.hpp"
#include "clk/warp.hpp"

namespace clk {

/// Feature extraction applied to images before sampling. Raw uses the pixel
/// intensities as the single channel; LBP8 expands a grayscale image into
/// eight binary comparison planes.
enum class Descriptor { Raw, LBP8 };

std::string descriptor_name(Descriptor d);
Descriptor descriptor_from_name(const std::string& name);
int descriptor_channels(Descriptor d);

/// Returns the image in the channel layout the descriptor expects;
/// Raw passes through, LBP8 transforms a grayscale input.
MultiChannelImage apply_descriptor(const MultiChannelImage& img, Descriptor d);

/// Learned template gradients: g[2*(d*K + k) + a] is the derivative of
/// channel k at site d along axis a (0 = x, 1 = y).
struct GradientParams {
  Eigen::VectorXd g;
  SamplingGrid grid;
  int channels = 1;
};

/// One warp-update regressor: dp = R * (sampled feature - template).
/// Layers trained via learned gradients keep them for warp swapping.
struct RegressorLayer {
  Eigen::MatrixXd R;             // P x (K*D)
  Eigen::VectorXd template_vec;  // K*D
  std::optional<GradientParams> g;
};

/// An ordered stack of regressor/template pairs sharing one warp family and
/// sampling grid. `iterative` marks single-layer cascades whose layer is
/// applied repeatedly (the IC-LK mode) rather than once per layer.
struct RegressorCascade {
  WarpFamily family = WarpFamily::Affine;
  SamplingGrid grid;
  int channels = 1;
  Descriptor descriptor = Descriptor::Raw;
  bool iterative = false;
  std::vector<RegressorLayer> layers;
};

struct AlignResult {
  WarpParams p_final;
  int iterations_run = 0;
  /// Template-frame corner RMSE before each update and after the last one
  /// (length iterations_run + 1); empty when no ground truth was given.
  std::vector<double> rmse_per_iteration;
  bool converged = false;
};

/// Corner RMSE of the residual warp gt^-1 o p over the grid corners, i.e.
/// the alignment error measured in the template frame where the 1 px
/// convergence threshold is defined.
double template_frame_rmse(const WarpParams& p, const WarpParams& gt,
                           const SamplingGrid& grid);

/// W = blockdiag(grad rows) * stacked warp Jacobians: row d*K+k equals
/// grads.row(d*K+k) * J(x_d). grads must be (K*D) x 2.
Eigen::MatrixXd build_W(const Eigen::MatrixXd& grads, WarpFamily family,
                        const SamplingGrid& grid);

/// Converts between the (K*D) x 2 gradient-matrix layout (row d*K+k) and
/// the flat 2*K*D vector where each row's (x, y) pair stays contiguous.
Eigen::VectorXd pack_gradients(const Eigen::MatrixXd& grads);
Eigen::MatrixXd unpack_gradients(const Eigen::VectorXd& g);

/// Moore-Penrose pseudo-inverse via SVD. Throws RankDeficient when the
/// smallest singular value falls below rtol times the largest.
Eigen::MatrixXd pinv_svd(const Eigen::MatrixXd& m, double rtol = 1e-10);

/// Classical inverse-compositional regressor: R = pinv(W) built from the
/// template's finite-difference gradients, paired with the sampled template.
/// The overload without a placement treats img as the rectified template
/// (placement = identity).
RegressorLayer iclk_build(const MultiChannelImage& img, const WarpParams& p_gt,
                          WarpFamily family, const SamplingGrid& grid);
RegressorLayer iclk_build(const MultiChannelImage& img, WarpFamily family,
                          const SamplingGrid& grid);

/// Applies the cascade from p_init on an image already in the cascade's
/// channel layout. Iterative cascades re-apply their single layer until the
/// update norm drops below 1e-10 or max_iters_per_layer is reached; others
/// apply each layer once. When gt is non-null the result records the
/// template-frame corner RMSE trace and the 1 px convergence flag. A
/// singular or degenerate warp mid-run stops the loop with converged=false.
AlignResult run_cascade(const MultiChannelImage& img, const WarpParams& p_init,
                        const RegressorCascade& cascade,
                        int max_iters_per_layer = 30,
                        const WarpParams* gt = nullptr);

/// Cascade (de)serialization, JSON envelope versioned "clk-model-v1".
nlohmann::json cascade_to_json(const RegressorCascade& cascade);
RegressorCascade cascade_from_json(const nlohmann::json& j);
void save_cascade(const RegressorCascade& cascade, const std::string& path);
RegressorCascade load_cascade(const std::string& path);

}  // namespace clk
