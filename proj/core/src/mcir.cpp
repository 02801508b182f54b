#include "motion4d/mcir.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "motion4d/interp.hpp"
#include "motion4d/parallel.hpp"

namespace motion4d {

namespace {

// Calls fn(v, cell) for every voxel v of the slab z_lo..z_hi, where cell
// locates its warped sample position in the grid.
template <typename Fn>
void for_each_warped(const ControlGrid& cg, int z_lo, int z_hi, Fn&& fn) {
  const Grid3& g = cg.image_grid;
  const auto basis = separable_basis(cg);
  std::vector<Vec3> u;
  slab_displacements(cg, basis, z_lo, z_hi, u);
  const double ix = 1.0 / g.spacing.x, iy = 1.0 / g.spacing.y, iz = 1.0 / g.spacing.z;
  std::size_t v = 0;
  for (int k = z_lo; k <= z_hi; ++k) {
    for (int j = 0; j < g.dims[1]; ++j) {
      for (int i = 0; i < g.dims[0]; ++i, ++v) {
        fn(v, locate(g.dims, i + u[v].x * ix, j + u[v].y * iy, k + u[v].z * iz));
      }
    }
  }
}

void check_geometry(const ControlGrid& cg, const Segment& seg) {
  if (!(seg.parent_grid == cg.image_grid)) throw GeometryError("segment grid differs from the control grid's image");
  if (cg.disp.size() != cg.size()) throw GeometryError("control grid payload size mismatch");
  seg.validate();
}

void check_inputs(const Volume& I0, const SurrogateMatrix& S, const MotionModel& C) {
  I0.validate();
  S.validate();
  C.validate();
  if (C.signals() != S.signals()) throw GeometryError("surrogate matrix and motion model disagree on signal count");
  if (!(C.modes.front().image_grid == I0.grid)) throw GeometryError("motion model does not deform the I0 grid");
}

struct Gradient {
  std::vector<double> grad;
  std::vector<double> weights;
  double objective = 0.0;
};

Gradient assemble_gradient(const Volume& I0, const SurrogateMatrix& S, const MotionModel& C,
                           std::span<const Segment> segs) {
  for (const auto& seg : segs) {
    if (seg.t < 0 || seg.t >= S.times()) throw RangeError("segment timepoint " + std::to_string(seg.t) + " out of range");
  }
  // Residuals per segment in parallel, then a serial scatter in input order.
  std::vector<Segment> residual(segs.size());
  std::vector<double> sse(segs.size(), 0.0);
  parallel_for(segs.size(), [&](std::size_t s) {
    const Segment& seg = segs[s];
    const ControlGrid M = compose_motion(S, C, seg.t);
    check_geometry(M, seg);
    Segment r = warp_extract(I0, M, seg);
    double acc = 0.0;
    for (std::size_t v = 0; v < r.values.size(); ++v) {
      const double d = static_cast<double>(r.values[v]) - static_cast<double>(seg.values[v]);
      acc += d * d;
      r.values[v] = static_cast<float>(2.0 * d);
    }
    sse[s] = acc;
    residual[s] = std::move(r);
  });
  Gradient out;
  out.grad.assign(I0.grid.voxel_count(), 0.0);
  out.weights.assign(I0.grid.voxel_count(), 0.0);
  for (std::size_t s = 0; s < segs.size(); ++s) {
    adjoint_scatter(residual[s], compose_motion(S, C, segs[s].t), out.grad, out.weights);
    out.objective += sse[s];
  }
  return out;
}

}  // namespace

Segment warp_extract(const Volume& vol, const ControlGrid& cg, const Segment& like, float outside) {
  if (!(vol.grid == cg.image_grid)) throw GeometryError("warp_extract: control grid does not deform the volume");
  check_geometry(cg, like);
  Segment out = like;
  for_each_warped(cg, like.z_lo, like.z_hi, [&](std::size_t v, const TrilinearCell& c) {
    out.values[v] = c.inside ? static_cast<float>(sample_value(vol.values, vol.grid, c, outside)) : outside;
  });
  return out;
}

void adjoint_scatter(const Segment& seg_residual, const ControlGrid& cg, std::span<double> accum,
                     std::span<double> weights) {
  check_geometry(cg, seg_residual);
  const Grid3& g = cg.image_grid;
  if (!accum.empty() && accum.size() != g.voxel_count()) throw GeometryError("adjoint_scatter: accumulator size");
  if (!weights.empty() && weights.size() != g.voxel_count()) throw GeometryError("adjoint_scatter: weight size");
  const bool do_accum = !accum.empty();
  const bool do_weights = !weights.empty();
  for_each_warped(cg, seg_residual.z_lo, seg_residual.z_hi, [&](std::size_t v, const TrilinearCell& c) {
    if (!c.inside) return;
    const double r = seg_residual.values[v];
    for_each_corner(g, c, [&](std::size_t idx, double w) {
      if (do_accum) accum[idx] += w * r;
      if (do_weights) weights[idx] += w;
    });
  });
}

McirStepResult mcir_step(const Volume& I0, const SurrogateMatrix& S, const MotionModel& C,
                         std::span<const Segment> segs, ReconState state, const McirOptions& options) {
  check_inputs(I0, S, C);
  const Gradient g = assemble_gradient(I0, S, C, segs);
  const double f0 = g.objective;
  if (!std::isfinite(f0)) throw NumericalError("mcir_step: objective is not finite");
  if (state.history.empty()) state.history.push_back(f0);

  double gnorm2 = 0.0;
  double wmax = 0.0;
  for (std::size_t v = 0; v < g.grad.size(); ++v) {
    if (!std::isfinite(g.grad[v])) {
      throw NumericalError("mcir_step: non-finite gradient at voxel " + std::to_string(v));
    }
    gnorm2 += g.grad[v] * g.grad[v];
    wmax = std::max(wmax, g.weights[v]);
  }

  McirStepResult res;
  res.objective_before = f0;
  res.objective_after = f0;
  res.I0 = I0;
  double lambda = 0.0;
  if (gnorm2 > 0.0 && wmax > 0.0) {
    double trial = 1.0 / (2.0 * wmax);
    Volume cand(I0.grid);
    for (int b = 0; b <= options.max_backtracks; ++b, trial *= options.contraction) {
      for (std::size_t v = 0; v < g.grad.size(); ++v) {
        cand.values[v] = g.weights[v] > 0.0 ? static_cast<float>(I0.values[v] - trial * g.grad[v]) : I0.values[v];
      }
      const double fc = objective(cand, S, C, segs);
      if (std::isfinite(fc) && fc <= f0 - options.armijo * trial * gnorm2 && fc <= f0) {
        lambda = trial;
        res.I0 = cand;
        res.objective_after = fc;
        break;
      }
    }
  }
  res.accepted = lambda > 0.0;
  state.iteration += 1;
  if (res.accepted) state.accepted_steps += 1;
  state.step = lambda;
  state.history.push_back(res.objective_after);
  res.state = std::move(state);
  return res;
}

McirRunResult mcir_run(const Volume& I0, const SurrogateMatrix& S, const MotionModel& C,
                       std::span<const Segment> segs, int max_iters, const McirOptions& options) {
  if (max_iters < 1) throw ArgumentError("mcir_run: max_iters must be >= 1");
  McirRunResult run;
  run.I0 = I0;
  for (int it = 0; it < max_iters; ++it) {
    auto step = mcir_step(run.I0, S, C, segs, std::move(run.state), options);
    run.state = std::move(step.state);
    if (!step.accepted) break;
    run.I0 = std::move(step.I0);
    const double before = step.objective_before;
    if (before <= 0.0 || (before - step.objective_after) / before < options.tol_f) break;
  }
  run.coverage = coverage_mask(I0.grid, S, C, segs);
  return run;
}

Mask coverage_mask(const Grid3& grid, const SurrogateMatrix& S, const MotionModel& C, std::span<const Segment> segs) {
  std::vector<double> w(grid.voxel_count(), 0.0);
  for (const auto& seg : segs) {
    if (seg.t < 0 || seg.t >= S.times()) throw RangeError("segment timepoint " + std::to_string(seg.t) + " out of range");
    adjoint_scatter(seg, compose_motion(S, C, seg.t), {}, w);
  }
  Mask m(grid);
  for (std::size_t v = 0; v < w.size(); ++v) m.values[v] = w[v] > 0.0 ? 1 : 0;
  return m;
}

Volume scatter_init(const Grid3& grid, std::span<const Segment> segs, float fill) {
  grid.validate();
  std::vector<double> acc(grid.voxel_count(), 0.0);
  std::vector<double> w(grid.voxel_count(), 0.0);
  const std::size_t plane = grid.slice_size();
  for (const auto& seg : segs) {
    if (!(seg.parent_grid == grid)) throw GeometryError("scatter_init: segment grid mismatch");
    seg.validate();
    const std::size_t o = plane * static_cast<std::size_t>(seg.z_lo);
    for (std::size_t v = 0; v < seg.values.size(); ++v) {
      acc[o + v] += seg.values[v];
      w[o + v] += 1.0;
    }
  }
  Volume out(grid, fill);
  for (std::size_t v = 0; v < acc.size(); ++v) {
    if (w[v] > 0.0) out.values[v] = static_cast<float>(acc[v] / w[v]);
  }
  return out;
}

}  // namespace motion4d
