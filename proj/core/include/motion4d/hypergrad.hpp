#pragma once

#include <span>
#include <vector>

#include "motion4d/resp_trace.hpp"
#include "motion4d/surrmodel.hpp"

namespace motion4d {

struct HyperGradient {
  SurrogateMatrix h;
};

// h(i,t) = <C_i - lambda_km1 * S(i,t) * grad_km2[t], grad_km1[t]>, summed over
// all knots and components. An empty grad_km2 (first iteration), or an empty
// entry for some t, drops the lambda term; empty grad_km1[t] gives h(.,t) = 0.
HyperGradient compute_hypergradient(const MotionModel& C_km1, const std::vector<std::vector<Vec3>>& grad_km2,
                                    const std::vector<std::vector<Vec3>>& grad_km1, const SurrogateMatrix& S_km1,
                                    double lambda_km1);

// S - alpha * h. Throws NumericalError on a non-finite result.
SurrogateMatrix update_surrogates(const SurrogateMatrix& S, const HyperGradient& h, double alpha);

// Two signals cos(2 pi p / P), sin(2 pi p / P) from per-timepoint phases p.
SurrogateMatrix init_surrogates_phase(std::span<const double> phases, int period = 10);

// Signal and its central-difference time derivative (one-sided at the ends),
// each rescaled to unit standard deviation unless `standardize` is false.
// Rows with zero variance are left as they are.
SurrogateMatrix init_surrogates_signal(const RespTrace& signal, bool standardize = true);

struct NormalizedModel {
  SurrogateMatrix S;
  MotionModel C;
  std::vector<double> scales;     // standard deviation of each input row
  std::vector<char> degenerate;   // rows left untouched
};

// Rescales each row of S to unit standard deviation (mean kept) and multiplies
// the matching C_i by the same factor so every M_t is preserved. A zero-variance
// row raises DegenerateSignalError unless `allow_degenerate` is set, in which
// case it is left untouched and flagged.
NormalizedModel normalize_surrogates(const SurrogateMatrix& S, const MotionModel& C, bool allow_degenerate = false);

// Population standard deviation of each row.
std::vector<double> row_std(const SurrogateMatrix& S);

struct SurrogateUpdateOptions {
  double alpha = 0.01;
  // Divide h(i,t) by the Gauss-Newton curvature of f_t along C_i.
  bool precondition = true;
  // Halvings tried for a timepoint whose term would increase; after the last
  // one its column is kept unchanged.
  int max_halvings = 4;
};

struct SurrogateUpdateLog {
  int iteration = 0;
  double objective_before = 0.0;
  double objective_after = 0.0;
  double max_abs_change = 0.0;
  int reverted_timepoints = 0;
};

// Hook for fit_run that applies one hypergradient update of S after every
// accepted model step. Only timepoints with a segment are touched, and each
// column is accepted only if its own term does not increase. With alpha == 0
// the hook does nothing.
FitStepHook make_surrogate_updater(const Volume& I0, std::span<const Segment> segs,
                                   const SurrogateUpdateOptions& options, std::vector<SurrogateUpdateLog>* log = nullptr);

}  // namespace motion4d
