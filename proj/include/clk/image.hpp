#pragma once

#include <Eigen/Core>
#include <functional>
#include <string>
#include <vector>

#include "clk/geometry.hpp"
#include "clk/warp.hpp"

namespace clk {

/// Immutable H x W x K raster with values in [0,1], stored row-major in
/// (y, x, channel) order. Construction clamps values into [0,1] and rejects
/// non-finite input.
class MultiChannelImage {
public:
  MultiChannelImage(int height, int width, int channels,
                    std::vector<double> data);

  /// Builds an image by evaluating fn(x, y, k) at every pixel.
  static MultiChannelImage from_fn(
      int height, int width, int channels,
      const std::function<double(int x, int y, int k)>& fn);

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }

  double at(int y, int x, int k) const {
    return data_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + k];
  }

  const std::vector<double>& data() const { return data_; }

private:
  int height_;
  int width_;
  int channels_;
  std::vector<double> data_;
};

/// Fixed set of D template-frame sample sites. Coordinates never change for
/// the lifetime of a cascade built on them.
struct SamplingGrid {
  std::vector<Point2> coords;

  /// Pixel centers of a w x h box anchored at the origin, row-major
  /// (y outer, x inner). Default is the 20 x 20 operating point, D = 400.
  static SamplingGrid box(int width = 20, int height = 20);

  std::size_t size() const { return coords.size(); }

  /// Axis-aligned bounding corners of the sites (TL, TR, BR, BL).
  Corners corners() const;

  bool operator==(const SamplingGrid& other) const;
};

/// Bilinear interpolation of the 4 neighbouring pixels, one value per
/// channel. Out-of-range coordinates are clamped to the image border.
Eigen::VectorXd sample_bilinear(const MultiChannelImage& img, Point2 x);

/// Low-level form of sample_bilinear writing K values to out.
void sample_bilinear_into(const MultiChannelImage& img, Point2 x, double* out);

/// Stacked samples I(W{x_d; p}) for every grid site, channels contiguous per
/// site; length K*D.
Eigen::VectorXd sample_warped_vector(const MultiChannelImage& img,
                                     const WarpParams& wp,
                                     const SamplingGrid& grid);

/// Central differences (f(x+1)-f(x-1))/2 per channel in x and y, sampled
/// bilinearly; row d*K+k holds the gradient of channel k at site d.
Eigen::MatrixXd finite_diff_gradients(const MultiChannelImage& img,
                                      const SamplingGrid& grid);

/// Gradients of the rectified template function t(x) = I(W{x; wp}), i.e.
/// central differences taken in the template frame through the warp.
Eigen::MatrixXd warped_gradients(const MultiChannelImage& img,
                                 const WarpParams& wp,
                                 const SamplingGrid& grid);

/// Dense 8-channel LBP transform of a grayscale image: channel j is 1.0
/// where the box-smoothed input at x is >= the smoothed value at x + o_j,
/// with o_j running over the 3x3 neighbourhood offsets in row-major order
/// (center excluded). Throws WrongChannelCount unless K = 1.
MultiChannelImage lbp_transform(const MultiChannelImage& gray);
MultiChannelImage lbp_transform_serial(const MultiChannelImage& gray);

/// Loads an 8-bit grayscale image (PGM P5 or PNG; PNG inputs are converted
/// to grayscale). Values are normalized to [0,1].
MultiChannelImage load_image(const std::string& path);
MultiChannelImage load_pgm(const std::string& path);
MultiChannelImage load_png(const std::string& path);

/// Writes a K=1 image as binary PGM with maxval 255.
void save_pgm(const MultiChannelImage& img, const std::string& path);

}  // namespace clk
