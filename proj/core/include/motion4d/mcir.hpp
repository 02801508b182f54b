#pragma once

#include <span>
#include <vector>

#include "motion4d/surrmodel.hpp"

namespace motion4d {

struct ReconState {
  int iteration = 0;
  int accepted_steps = 0;
  std::vector<double> history;  // objective at the start, then after every step
  double step = 0.0;            // latest accepted step length (0 when rejected)
};

// Warps `vol` by cg and extracts the slices of `like`; samples leaving the
// volume blend into `outside` as in warp_volume. With outside = 0 this is the linear forward operator
// whose transpose is adjoint_scatter.
Segment warp_extract(const Volume& vol, const ControlGrid& cg, const Segment& like, float outside = kAirHU);

// Transpose of warp_extract (outside = 0): each slab voxel's value is spread
// over the (up to eight) trilinear source voxels of its warped position. `weights`
// receives the trilinear coefficients themselves. Either span may be empty.
void adjoint_scatter(const Segment& seg_residual, const ControlGrid& cg, std::span<double> accum,
                     std::span<double> weights);

struct McirOptions {
  double armijo = 1e-4;
  double contraction = 0.5;
  int max_backtracks = 12;
  double tol_f = 1e-4;
};

struct McirStepResult {
  Volume I0;
  ReconState state;
  bool accepted = false;
  double objective_before = 0.0;
  double objective_after = 0.0;
};

// One gradient-descent update of I0 for the shared objective. The first trial
// step is 1 / (2 * max coverage weight), then Armijo backtracking.
McirStepResult mcir_step(const Volume& I0, const SurrogateMatrix& S, const MotionModel& C,
                         std::span<const Segment> segs, ReconState state, const McirOptions& options = {});

struct McirRunResult {
  Volume I0;
  ReconState state;
  Mask coverage;  // voxels reached by at least one warped segment sample
};

McirRunResult mcir_run(const Volume& I0, const SurrogateMatrix& S, const MotionModel& C,
                       std::span<const Segment> segs, int max_iters, const McirOptions& options = {});

// Voxels with nonzero accumulated trilinear weight under the current motion.
Mask coverage_mask(const Grid3& grid, const SurrogateMatrix& S, const MotionModel& C, std::span<const Segment> segs);

// Weight-normalized scatter of all segments under zero motion; voxels no
// segment covers take `fill`.
Volume scatter_init(const Grid3& grid, std::span<const Segment> segs, float fill = kAirHU);

}  // namespace motion4d
