#pragma once

// Trilinear sampling in continuous voxel-index coordinates. The volume is
// surrounded by one layer of padding voxels holding a constant value, so the
// interpolant ramps continuously to that value over one voxel beyond each face.

#include <cmath>

#include "motion4d/volgrid.hpp"

namespace motion4d {

// Index coordinates within this distance of an integer are snapped to it, so
// integer-voxel shifts reproduce the source values exactly.
inline constexpr double kIndexSnap = 1e-9;

struct TrilinearCell {
  int base[3] = {0, 0, 0};  // lower corner, -1..n-1 (out-of-grid corners are padding)
  double frac[3] = {0.0, 0.0, 0.0};
  bool inside = false;      // within the padded extent [-1, n] on every axis
  bool interior = false;    // all eight corners are grid voxels
};

inline TrilinearCell locate(const Dims3& dims, double qx, double qy, double qz) {
  TrilinearCell c;
  const double q[3] = {qx, qy, qz};
  c.interior = true;
  for (int a = 0; a < 3; ++a) {
    double v = q[a];
    const double r = std::nearbyint(v);
    if (std::abs(v - r) < kIndexSnap) v = r;
    const int n = dims[a];
    if (!(v >= -1.0 && v <= n)) return c;
    int b = static_cast<int>(std::floor(v));
    if (b > n - 1) b = n - 1;
    c.base[a] = b;
    c.frac[a] = v - b;
    if (b < 0 || b + 1 > n - 1) c.interior = false;
  }
  c.inside = true;
  return c;
}

// Value of voxel (i, j, k), or `pad` when it lies outside the grid.
template <typename T>
inline double voxel_or(const std::vector<T>& data, const Grid3& g, int i, int j, int k, double pad) {
  if (i < 0 || j < 0 || k < 0 || i >= g.dims[0] || j >= g.dims[1] || k >= g.dims[2]) return pad;
  return static_cast<double>(data[g.index(i, j, k)]);
}

// The eight corner values, indexed [dz][dy][dx].
template <typename T>
inline void cell_corners(const std::vector<T>& data, const Grid3& g, const TrilinearCell& c, double pad,
                         double v[2][2][2]) {
  if (c.interior) {
    const std::size_t sy = static_cast<std::size_t>(g.dims[0]);
    const std::size_t sz = g.slice_size();
    const std::size_t o = g.index(c.base[0], c.base[1], c.base[2]);
    for (int dz = 0; dz < 2; ++dz) {
      for (int dy = 0; dy < 2; ++dy) {
        for (int dx = 0; dx < 2; ++dx) v[dz][dy][dx] = static_cast<double>(data[o + dx + dy * sy + dz * sz]);
      }
    }
    return;
  }
  for (int dz = 0; dz < 2; ++dz) {
    for (int dy = 0; dy < 2; ++dy) {
      for (int dx = 0; dx < 2; ++dx) {
        v[dz][dy][dx] = voxel_or(data, g, c.base[0] + dx, c.base[1] + dy, c.base[2] + dz, pad);
      }
    }
  }
}

// Value at a located cell; `pad` is the padding value. The cell must be inside.
template <typename T>
inline double sample_value(const std::vector<T>& data, const Grid3& g, const TrilinearCell& c, double pad) {
  double v[2][2][2];
  cell_corners(data, g, c, pad, v);
  const double fx = c.frac[0], fy = c.frac[1], fz = c.frac[2];
  const double gx = 1.0 - fx, gy = 1.0 - fy, gz = 1.0 - fz;
  const double x00 = gx * v[0][0][0] + fx * v[0][0][1];
  const double x10 = gx * v[0][1][0] + fx * v[0][1][1];
  const double x01 = gx * v[1][0][0] + fx * v[1][0][1];
  const double x11 = gx * v[1][1][0] + fx * v[1][1][1];
  const double y0 = gy * x00 + fy * x10;
  const double y1 = gy * x01 + fy * x11;
  return gz * y0 + fz * y1;
}

struct TrilinearSample {
  double value = 0.0;
  double dq[3] = {0.0, 0.0, 0.0};  // derivative per unit index
  bool inside = false;
};

// Value and index-space gradient of the padded trilinear interpolant. Outside
// the padded extent the value is `pad` and the gradient zero.
inline TrilinearSample sample_with_gradient(const Volume& vol, const TrilinearCell& c, double pad) {
  TrilinearSample s;
  if (!c.inside) {
    s.value = pad;
    return s;
  }
  const Grid3& g = vol.grid;
  double v[2][2][2];
  cell_corners(vol.values, g, c, pad, v);
  const double fx = c.frac[0], fy = c.frac[1], fz = c.frac[2];
  const double gx = 1.0 - fx, gy = 1.0 - fy, gz = 1.0 - fz;
  const double x00 = gx * v[0][0][0] + fx * v[0][0][1];
  const double x10 = gx * v[0][1][0] + fx * v[0][1][1];
  const double x01 = gx * v[1][0][0] + fx * v[1][0][1];
  const double x11 = gx * v[1][1][0] + fx * v[1][1][1];
  const double y0 = gy * x00 + fy * x10;
  const double y1 = gy * x01 + fy * x11;
  s.value = gz * y0 + fz * y1;
  s.dq[2] = y1 - y0;
  s.dq[1] = gz * (x10 - x00) + fz * (x11 - x01);
  const double d00 = v[0][0][1] - v[0][0][0];
  const double d10 = v[0][1][1] - v[0][1][0];
  const double d01 = v[1][0][1] - v[1][0][0];
  const double d11 = v[1][1][1] - v[1][1][0];
  s.dq[0] = gz * (gy * d00 + fy * d10) + fz * (gy * d01 + fy * d11);
  s.inside = true;
  // On a node the interpolant has a kink along that axis; take the mean of
  // the one-sided derivatives there.
  for (int a = 0; a < 3; ++a) {
    if (c.frac[a] != 0.0 || c.base[a] < 0) continue;
    TrilinearCell left = c;
    left.base[a] -= 1;
    left.interior = false;
    s.dq[a] = 0.5 * (s.dq[a] + s.value - sample_value(vol.values, g, left, pad));
  }
  return s;
}

// Calls fn(voxel index, weight) for the grid voxels among the cell's corners.
template <typename Fn>
inline void for_each_corner(const Grid3& g, const TrilinearCell& c, Fn&& fn) {
  const double wx[2] = {1.0 - c.frac[0], c.frac[0]};
  const double wy[2] = {1.0 - c.frac[1], c.frac[1]};
  const double wz[2] = {1.0 - c.frac[2], c.frac[2]};
  for (int dz = 0; dz < 2; ++dz) {
    const int k = c.base[2] + dz;
    if (k < 0 || k >= g.dims[2]) continue;
    for (int dy = 0; dy < 2; ++dy) {
      const int j = c.base[1] + dy;
      if (j < 0 || j >= g.dims[1]) continue;
      for (int dx = 0; dx < 2; ++dx) {
        const int i = c.base[0] + dx;
        if (i < 0 || i >= g.dims[0]) continue;
        fn(g.index(i, j, k), wz[dz] * wy[dy] * wx[dx]);
      }
    }
  }
}

}  // namespace motion4d
