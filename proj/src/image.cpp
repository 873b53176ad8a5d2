#include "clk/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include <png.h>

#include "clk/errors.hpp"
#include "clk/parallel.hpp"

namespace clk {

MultiChannelImage::MultiChannelImage(int height, int width, int channels,
                                     std::vector<double> data)
    : height_(height), width_(width), channels_(channels),
      data_(std::move(data)) {
  if (height_ <= 0 || width_ <= 0 || channels_ <= 0)
    throw ShapeMismatch("image dimensions must be positive");
  const std::size_t expected =
      static_cast<std::size_t>(height_) * width_ * channels_;
  if (data_.size() != expected)
    throw ShapeMismatch("image data length does not match H*W*K");
  for (double& v : data_) {
    if (!std::isfinite(v)) throw ShapeMismatch("image contains non-finite values");
    v = std::clamp(v, 0.0, 1.0);
  }
}

MultiChannelImage MultiChannelImage::from_fn(
    int height, int width, int channels,
    const std::function<double(int, int, int)>& fn) {
  std::vector<double> data(static_cast<std::size_t>(height) * width * channels);
  std::size_t i = 0;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int k = 0; k < channels; ++k) data[i++] = fn(x, y, k);
  return MultiChannelImage(height, width, channels, std::move(data));
}

SamplingGrid SamplingGrid::box(int width, int height) {
  SamplingGrid g;
  g.coords.reserve(static_cast<std::size_t>(width) * height);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      g.coords.push_back({static_cast<double>(x), static_cast<double>(y)});
  return g;
}

Corners SamplingGrid::corners() const {
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
  double ymin = xmin, ymax = -xmin;
  for (const auto& c : coords) {
    xmin = std::min(xmin, c.x);
    xmax = std::max(xmax, c.x);
    ymin = std::min(ymin, c.y);
    ymax = std::max(ymax, c.y);
  }
  return {Point2{xmin, ymin}, Point2{xmax, ymin}, Point2{xmax, ymax},
          Point2{xmin, ymax}};
}

bool SamplingGrid::operator==(const SamplingGrid& other) const {
  if (coords.size() != other.coords.size()) return false;
  for (std::size_t i = 0; i < coords.size(); ++i)
    if (coords[i].x != other.coords[i].x || coords[i].y != other.coords[i].y)
      return false;
  return true;
}

void sample_bilinear_into(const MultiChannelImage& img, Point2 pt,
                          double* out) {
  const int w = img.width(), h = img.height(), k = img.channels();
  const double x = std::clamp(pt.x, 0.0, static_cast<double>(w - 1));
  const double y = std::clamp(pt.y, 0.0, static_cast<double>(h - 1));
  const int x0 = static_cast<int>(x);
  const int y0 = static_cast<int>(y);
  const int x1 = std::min(x0 + 1, w - 1);
  const int y1 = std::min(y0 + 1, h - 1);
  const double fx = x - x0;
  const double fy = y - y0;
  const double w00 = (1 - fx) * (1 - fy);
  const double w10 = fx * (1 - fy);
  const double w01 = (1 - fx) * fy;
  const double w11 = fx * fy;
  for (int c = 0; c < k; ++c) {
    out[c] = w00 * img.at(y0, x0, c) + w10 * img.at(y0, x1, c) +
             w01 * img.at(y1, x0, c) + w11 * img.at(y1, x1, c);
  }
}

Eigen::VectorXd sample_bilinear(const MultiChannelImage& img, Point2 x) {
  Eigen::VectorXd out(img.channels());
  sample_bilinear_into(img, x, out.data());
  return out;
}

Eigen::VectorXd sample_warped_vector(const MultiChannelImage& img,
                                     const WarpParams& wp,
                                     const SamplingGrid& grid) {
  const int k = img.channels();
  Eigen::VectorXd out(static_cast<Eigen::Index>(grid.size()) * k);
  for (std::size_t d = 0; d < grid.size(); ++d)
    sample_bilinear_into(img, warp_point(wp, grid.coords[d]),
                         out.data() + d * k);
  return out;
}

Eigen::MatrixXd warped_gradients(const MultiChannelImage& img,
                                 const WarpParams& wp,
                                 const SamplingGrid& grid) {
  const int k = img.channels();
  Eigen::MatrixXd grads(static_cast<Eigen::Index>(grid.size()) * k, 2);
  Eigen::VectorXd plus(k), minus(k);
  for (std::size_t d = 0; d < grid.size(); ++d) {
    const Point2 x = grid.coords[d];
    sample_bilinear_into(img, warp_point(wp, {x.x + 1.0, x.y}), plus.data());
    sample_bilinear_into(img, warp_point(wp, {x.x - 1.0, x.y}), minus.data());
    grads.col(0).segment(d * k, k) = 0.5 * (plus - minus);
    sample_bilinear_into(img, warp_point(wp, {x.x, x.y + 1.0}), plus.data());
    sample_bilinear_into(img, warp_point(wp, {x.x, x.y - 1.0}), minus.data());
    grads.col(1).segment(d * k, k) = 0.5 * (plus - minus);
  }
  return grads;
}

Eigen::MatrixXd finite_diff_gradients(const MultiChannelImage& img,
                                      const SamplingGrid& grid) {
  return warped_gradients(img, WarpParams::identity(WarpFamily::Affine), grid);
}

namespace {

// (dx, dy) offsets of the 3x3 neighbourhood in row-major order, center
// excluded. The channel order of the LBP planes follows this list.
constexpr int kLbpOffsets[8][2] = {{-1, -1}, {0, -1}, {1, -1}, {-1, 0},
                                   {1, 0},   {-1, 1}, {0, 1},  {1, 1}};

std::vector<double> box_smooth(const MultiChannelImage& img) {
  const int w = img.width(), h = img.height();
  std::vector<double> out(static_cast<std::size_t>(w) * h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int dy = -1; dy <= 1; ++dy) {
        const int yy = std::clamp(y + dy, 0, h - 1);
        for (int dx = -1; dx <= 1; ++dx) {
          const int xx = std::clamp(x + dx, 0, w - 1);
          acc += img.at(yy, xx, 0);
        }
      }
      out[static_cast<std::size_t>(y) * w + x] = acc / 9.0;
    }
  }
  return out;
}

void lbp_row(const std::vector<double>& smooth, int w, int h, int y,
             std::vector<double>& data) {
  for (int x = 0; x < w; ++x) {
    const double center = smooth[static_cast<std::size_t>(y) * w + x];
    double* px = data.data() + (static_cast<std::size_t>(y) * w + x) * 8;
    for (int j = 0; j < 8; ++j) {
      const int xx = std::clamp(x + kLbpOffsets[j][0], 0, w - 1);
      const int yy = std::clamp(y + kLbpOffsets[j][1], 0, h - 1);
      px[j] = center >= smooth[static_cast<std::size_t>(yy) * w + xx] ? 1.0 : 0.0;
    }
  }
}

}  // namespace

MultiChannelImage lbp_transform(const MultiChannelImage& gray) {
  if (gray.channels() != 1)
    throw WrongChannelCount("lbp_transform expects a single-channel image");
  const int w = gray.width(), h = gray.height();
  const std::vector<double> smooth = box_smooth(gray);
  std::vector<double> data(static_cast<std::size_t>(w) * h * 8);
  parallel_for(h, [&](std::int64_t y) {
    lbp_row(smooth, w, h, static_cast<int>(y), data);
  });
  return MultiChannelImage(h, w, 8, std::move(data));
}

MultiChannelImage lbp_transform_serial(const MultiChannelImage& gray) {
  if (gray.channels() != 1)
    throw WrongChannelCount("lbp_transform expects a single-channel image");
  const int w = gray.width(), h = gray.height();
  const std::vector<double> smooth = box_smooth(gray);
  std::vector<double> data(static_cast<std::size_t>(w) * h * 8);
  for (int y = 0; y < h; ++y) lbp_row(smooth, w, h, y, data);
  return MultiChannelImage(h, w, 8, std::move(data));
}

namespace {

int pgm_read_token(std::istream& in) {
  // Skips whitespace and '#' comments per the PNM spec.
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (!std::isspace(c)) {
      break;
    }
    c = in.get();
  }
  if (c == EOF) throw IoError("unexpected end of PGM header");
  int value = 0;
  while (c != EOF && std::isdigit(c)) {
    value = value * 10 + (c - '0');
    c = in.get();
  }
  return value;
}

}  // namespace

MultiChannelImage load_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[2];
  in.read(magic, 2);
  if (!in || magic[0] != 'P' || magic[1] != '5')
    throw IoError(path + " is not a binary PGM (P5) file");
  const int w = pgm_read_token(in);
  const int h = pgm_read_token(in);
  const int maxval = pgm_read_token(in);
  if (maxval <= 0 || maxval > 255)
    throw IoError("unsupported PGM maxval (expected <= 255)");
  std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h);
  in.read(reinterpret_cast<char*>(raw.data()), raw.size());
  if (!in) throw IoError("truncated PGM pixel data in " + path);
  std::vector<double> data(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i)
    data[i] = raw[i] / static_cast<double>(maxval);
  return MultiChannelImage(h, w, 1, std::move(data));
}

void save_pgm(const MultiChannelImage& img, const std::string& path) {
  if (img.channels() != 1)
    throw WrongChannelCount("save_pgm expects a single-channel image");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << "P5\n" << img.width() << " " << img.height() << "\n255\n";
  std::vector<unsigned char> raw(img.data().size());
  for (std::size_t i = 0; i < raw.size(); ++i)
    raw[i] = static_cast<unsigned char>(std::lround(img.data()[i] * 255.0));
  out.write(reinterpret_cast<const char*>(raw.data()), raw.size());
  if (!out) throw IoError("failed writing " + path);
}

MultiChannelImage load_png(const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw IoError("cannot open " + path);
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw IoError("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw IoError("libpng failed reading " + path);
  }
  png_init_io(png, fp);
  png_read_info(png, info);

  // Normalize everything to 8-bit grayscale.
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  const png_byte color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY &&
      png_get_bit_depth(png, info) < 8)
    png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_COLOR)
    png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  png_read_update_info(png, info);

  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h);
  std::vector<png_bytep> rows(h);
  for (int y = 0; y < h; ++y) rows[y] = raw.data() + static_cast<std::size_t>(y) * w;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);

  std::vector<double> data(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) data[i] = raw[i] / 255.0;
  return MultiChannelImage(h, w, 1, std::move(data));
}

MultiChannelImage load_image(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  unsigned char magic[2] = {0, 0};
  in.read(reinterpret_cast<char*>(magic), 2);
  in.close();
  if (magic[0] == 'P' && magic[1] == '5') return load_pgm(path);
  if (magic[0] == 0x89 && magic[1] == 'P') return load_png(path);
  throw IoError(path + ": unrecognized image format (expected PGM P5 or PNG)");
}

}  // namespace clk
