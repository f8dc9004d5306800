#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "planeloc/errors.hpp"

namespace planeloc {

// Dense H x W depth grid in meters. Pixels without a measurement carry the
// invalid sentinel. Integer pixel coordinates are the sample locations.
struct DepthMap {
  int width = 0, height = 0;
  double invalid = 0.0;
  std::vector<double> data;

  DepthMap() = default;
  DepthMap(int w, int h, double sentinel = 0.0)
      : width(w), height(h), invalid(sentinel),
        data(static_cast<size_t>(w) * h, sentinel) {}

  double& at(int x, int y) { return data[static_cast<size_t>(y) * width + x]; }
  double at(int x, int y) const { return data[static_cast<size_t>(y) * width + x]; }

  bool in_bounds(int x, int y) const {
    return x >= 0 && x < width && y >= 0 && y < height;
  }

  bool is_valid_value(double v) const {
    return std::isfinite(v) && v > 0 && v != invalid;
  }

  bool valid_at(int x, int y) const {
    return in_bounds(x, y) && is_valid_value(at(x, y));
  }

  size_t valid_count() const {
    size_t n = 0;
    for (double v : data) n += is_valid_value(v) ? 1 : 0;
    return n;
  }
};

// Every factor-th sample of the grid; pair with downsample_intrinsics.
inline DepthMap downsample_depth(const DepthMap& d, int factor) {
  if (factor <= 1) return d;
  DepthMap out(d.width / factor, d.height / factor, d.invalid);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x) out.at(x, y) = d.at(x * factor, y * factor);
  return out;
}

struct BilinearSample {
  double value = 0;
  double dx = 0, dy = 0; // derivative of the interpolant at the sample point
};

// Bilinear interpolation; empty when any of the four neighbors is invalid
// or the point falls outside [0, W-1] x [0, H-1].
inline std::optional<BilinearSample> sample_bilinear(const DepthMap& d, double x,
                                                     double y) {
  if (!(x >= 0 && x <= d.width - 1 && y >= 0 && y <= d.height - 1))
    return std::nullopt;
  int x0 = static_cast<int>(std::floor(x));
  int y0 = static_cast<int>(std::floor(y));
  if (x0 == d.width - 1) --x0;
  if (y0 == d.height - 1) --y0;
  if (d.width == 1) x0 = 0;
  if (d.height == 1) y0 = 0;
  const int x1 = std::min(x0 + 1, d.width - 1);
  const int y1 = std::min(y0 + 1, d.height - 1);
  const double v00 = d.at(x0, y0), v10 = d.at(x1, y0);
  const double v01 = d.at(x0, y1), v11 = d.at(x1, y1);
  if (!d.is_valid_value(v00) || !d.is_valid_value(v10) || !d.is_valid_value(v01) ||
      !d.is_valid_value(v11))
    return std::nullopt;
  const double fx = x - x0, fy = y - y0;
  BilinearSample s;
  s.value = (1 - fy) * ((1 - fx) * v00 + fx * v10) + fy * ((1 - fx) * v01 + fx * v11);
  s.dx = (1 - fy) * (v10 - v00) + fy * (v11 - v01);
  s.dy = (1 - fx) * (v01 - v00) + fx * (v11 - v10);
  return s;
}

} // namespace planeloc
