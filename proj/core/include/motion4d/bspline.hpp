#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <vector>

#include "motion4d/common.hpp"
#include "motion4d/volgrid.hpp"

namespace motion4d {

// CT value of air; used for samples that leave the reference volume.
inline constexpr float kAirHU = -1000.0f;

// Cubic B-spline control-point lattice deforming `image_grid`.
// Knot (i,j,k) sits at corigin + (i,j,k) * cspacing; displacements are in mm.
struct ControlGrid {
  Dims3 cdims{4, 4, 4};
  Vec3 cspacing{1.0, 1.0, 1.0};
  Vec3 corigin{};
  Grid3 image_grid;
  std::vector<Vec3> disp;

  std::size_t size() const {
    return static_cast<std::size_t>(cdims[0]) * static_cast<std::size_t>(cdims[1]) *
           static_cast<std::size_t>(cdims[2]);
  }
  std::size_t index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(cdims[0]) *
               (static_cast<std::size_t>(j) + static_cast<std::size_t>(cdims[1]) * static_cast<std::size_t>(k));
  }
  Vec3 knot(int i, int j, int k) const {
    return {corigin.x + i * cspacing.x, corigin.y + j * cspacing.y, corigin.z + k * cspacing.z};
  }

  bool same_geometry(const ControlGrid& o) const {
    return cdims == o.cdims && cspacing == o.cspacing && corigin == o.corigin && image_grid == o.image_grid;
  }
  // Same lattice and deformed grid, all displacements zero.
  ControlGrid zeros_like() const;

  // Checks cdims >= 4, positive spacing, coverage of the image extent with a
  // one-knot margin, and finite displacements. Throws GeometryError/NumericalError.
  void validate() const;
};

// Lattice covering `image_grid` anchored at its first voxel center.
ControlGrid make_control_grid(const Grid3& image_grid, const Vec3& spacing);

// Lattice anchored at `anchor` (mm) that covers [anchor, extent_max] with one
// knot of margin on each side. Used to share knots across pyramid levels.
ControlGrid make_control_grid(const Grid3& image_grid, const Vec3& spacing, const Vec3& anchor,
                              const Vec3& extent_max);

// Uniform cubic B-spline weights (B0..B3) for fractional position u in [0,1).
std::array<double, 4> basis_weights(double u);

// Displacement (mm) at physical point p by tensor-product interpolation of the
// 4x4x4 neighbouring knots. Throws RangeError outside the supported extent.
Vec3 displacement_at(const ControlGrid& cg, const Vec3& p);

// Dense displacement field at every voxel center of cg.image_grid.
std::vector<Vec3> displacement_field(const ControlGrid& cg);

// Pull-back warp: out(x) = ref(x + u(x)) with trilinear interpolation. ref is
// padded with one voxel of `outside`; samples beyond that take `outside`.
Volume warp_volume(const Volume& ref, const ControlGrid& cg, float outside = kAirHU);

// Trilinear warp of the {0,1} field followed by a 0.5 threshold.
Mask warp_mask(const Mask& mask, const ControlGrid& cg);

struct ResidualGradient {
  double sse = 0.0;
  std::vector<Vec3> grad;  // d sse / d control displacement, same layout as cg.disp
};

// Sum of squared residuals between warp(ref, cg) restricted to seg's slices
// and seg, together with its gradient with respect to the control displacements.
ResidualGradient residual_and_gradient(const Volume& ref, const ControlGrid& cg, const Segment& seg);

// Same residual without the gradient.
double segment_sse(const Volume& ref, const ControlGrid& cg, const Segment& seg);

// Workhorse behind the two functions above. Adds the gradient into `grad`
// when non-empty. When `modes` is non-empty, also adds to curvature[i] the
// Gauss-Newton curvature 2 * sum (grad I . u_i)^2 of the residual along the
// displacement field of modes[i]. Returns the sse.
double accumulate_segment(const Volume& ref, const ControlGrid& cg, const Segment& seg, std::span<Vec3> grad,
                          std::span<const ControlGrid* const> modes = {}, std::span<double> curvature = {});

// Re-expresses src on the lattice of `target` (whose disp is ignored) by a
// separable least-squares fit of the B-spline coefficients on a probe lattice.
// Identical lattices are copied verbatim.
ControlGrid refit_control_grid(const ControlGrid& src, const ControlGrid& target);

ControlGrid read_control_grid(const std::filesystem::path& header);
void write_control_grid(const ControlGrid& cg, const std::filesystem::path& header);

// Separable evaluation tables: for each image voxel index along an axis, the
// first of its four knots and the four basis weights.
struct AxisBasis {
  std::vector<int> first;
  std::vector<std::array<double, 4>> w;
};
using SeparableBasis = std::array<AxisBasis, 3>;

SeparableBasis separable_basis(const ControlGrid& cg);

// Displacements at the voxels of slices z_lo..z_hi (x-fastest).
void slab_displacements(const ControlGrid& cg, const SeparableBasis& basis, int z_lo, int z_hi,
                        std::vector<Vec3>& out);

// Transpose of slab_displacements: adds the control-point pullback of a
// per-voxel vector field over slices z_lo..z_hi into grad.
void slab_adjoint(const ControlGrid& cg, const SeparableBasis& basis, int z_lo, int z_hi, std::span<const Vec3> field,
                  std::span<Vec3> grad);

}  // namespace motion4d
