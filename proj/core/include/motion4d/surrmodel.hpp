#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "motion4d/bspline.hpp"
#include "motion4d/volgrid.hpp"

namespace motion4d {

// N_s x N_t matrix of surrogate values; row i is signal i over time.
class SurrogateMatrix {
 public:
  SurrogateMatrix() = default;
  SurrogateMatrix(int n_signals, int n_times, double fill = 0.0);

  int signals() const { return ns_; }
  int times() const { return nt_; }

  double& operator()(int i, int t) { return data_[static_cast<std::size_t>(i) * nt_ + t]; }
  double operator()(int i, int t) const { return data_[static_cast<std::size_t>(i) * nt_ + t]; }

  std::span<double> row(int i) { return {data_.data() + static_cast<std::size_t>(i) * nt_, static_cast<std::size_t>(nt_)}; }
  std::span<const double> row(int i) const {
    return {data_.data() + static_cast<std::size_t>(i) * nt_, static_cast<std::size_t>(nt_)};
  }
  std::span<const double> data() const { return data_; }

  // Throws ArgumentError for empty shapes and NumericalError for non-finite entries.
  void validate() const;

  friend bool operator==(const SurrogateMatrix&, const SurrogateMatrix&) = default;

 private:
  int ns_ = 0;
  int nt_ = 0;
  std::vector<double> data_;
};

// Spatial correspondence models C_i sharing one lattice.
struct MotionModel {
  std::vector<ControlGrid> modes;

  int signals() const { return static_cast<int>(modes.size()); }
  void validate() const;
};

// N_s zero modes on the lattice of `geometry`.
MotionModel zero_model(const ControlGrid& geometry, int n_signals);

// M_t = sum_i S(i,t) * C_i.
ControlGrid compose_motion(const SurrogateMatrix& S, const MotionModel& C, int t);

// Per-timepoint evaluation of the objective terms. Timepoints without a
// segment contribute nothing and keep empty gradients.
struct TimepointTerms {
  std::vector<double> sse;                // per timepoint
  std::vector<std::vector<Vec3>> grad;    // d f / d M_t, empty when not requested or no segment
  SurrogateMatrix curvature;              // Gauss-Newton curvature of f_t along C_i, when requested
};

struct TermRequest {
  bool gradient = false;
  bool curvature = false;
  // Restrict evaluation to these timepoints (empty = all).
  std::vector<char> active;
};

TimepointTerms evaluate_timepoints(const Volume& I0, const SurrogateMatrix& S, const MotionModel& C,
                                   std::span<const Segment> segs, const TermRequest& request);

// Sum over timepoints of the squared segment residuals.
double objective(const Volume& I0, const SurrogateMatrix& S, const MotionModel& C, std::span<const Segment> segs);

struct LineSearchOptions {
  double max_move_fraction = 0.5;  // initial step moves a knot by at most this fraction of its spacing
  double contraction = 0.5;
  double armijo = 1e-4;
  int max_backtracks = 12;
};

struct FitOptions {
  LineSearchOptions line_search;
  double tol_f = 1e-4;
  // Also compute the per-(signal, timepoint) curvature used to precondition
  // surrogate updates.
  bool surrogate_curvature = false;
};

struct FitState {
  int iteration = 0;
  int accepted_steps = 0;
  std::vector<double> history;  // objective at the start, then after every step
  // Gradients d f / d M_t at the start point of the latest step, and of the step before.
  std::vector<std::vector<Vec3>> grad_km1;
  std::vector<std::vector<Vec3>> grad_km2;
  double lambda_k = 0.0;    // step length of the latest step (0 when rejected)
  double lambda_km1 = 0.0;  // step length of the step before
  MotionModel c_km1;        // start point of the latest step
  SurrogateMatrix curvature;  // at c_km1, when requested
  std::vector<double> sse_t;  // per-timepoint terms at the current point
};

struct FitStepResult {
  MotionModel C;
  FitState state;
  bool accepted = false;
  double objective_before = 0.0;
  double objective_after = 0.0;
};

// One gradient-descent update of all C_i with backtracking Armijo line search.
FitStepResult fit_step(FitState state, const Volume& I0, const SurrogateMatrix& S, const MotionModel& C,
                       std::span<const Segment> segs, const FitOptions& options = {});

// Called after each accepted step; may modify S, in which case it must keep
// state.sse_t and state.history.back() in sync with the new objective.
using FitStepHook = std::function<void(FitState&, SurrogateMatrix&, const MotionModel&)>;

struct FitRunResult {
  MotionModel C;
  FitState state;
};

// Repeats fit_step until the relative objective decrease drops below tol_f,
// a step is rejected, or max_iters steps were taken.
FitRunResult fit_run(const Volume& I0, SurrogateMatrix& S, const MotionModel& C, std::span<const Segment> segs,
                     int max_iters, const FitOptions& options = {}, const FitStepHook& hook = {});

// CSV with header "t,s1,s2,..." and one row per timepoint.
SurrogateMatrix read_surrogates_csv(const std::filesystem::path& path);
void write_surrogates_csv(const SurrogateMatrix& S, const std::filesystem::path& path);

}  // namespace motion4d
