#pragma once

#include <array>
#include <cmath>

namespace clk {

/// Subpixel location in pixel units. x increases rightward (columns),
/// y downward (rows).
struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

inline Point2 operator+(Point2 a, Point2 b) { return {a.x + b.x, a.y + b.y}; }
inline Point2 operator-(Point2 a, Point2 b) { return {a.x - b.x, a.y - b.y}; }

inline double squared_distance(Point2 a, Point2 b) {
  const double dx = a.x - b.x;
  const double dy = a.y - b.y;
  return dx * dx + dy * dy;
}

/// Four box corners, ordered top-left, top-right, bottom-right, bottom-left.
using Corners = std::array<Point2, 4>;

}  // namespace clk
