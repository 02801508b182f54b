#include "motion4d/surrmodel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <string>

#include "io_detail.hpp"
#include "motion4d/parallel.hpp"

namespace motion4d {

SurrogateMatrix::SurrogateMatrix(int n_signals, int n_times, double fill) : ns_(n_signals), nt_(n_times) {
  if (n_signals < 1 || n_times < 1) throw ArgumentError("surrogate matrix needs at least one signal and one timepoint");
  data_.assign(static_cast<std::size_t>(n_signals) * n_times, fill);
}

void SurrogateMatrix::validate() const {
  if (ns_ < 1 || nt_ < 1) throw ArgumentError("empty surrogate matrix");
  for (double v : data_) {
    if (!std::isfinite(v)) throw NumericalError("surrogate matrix contains a non-finite entry");
  }
}

void MotionModel::validate() const {
  if (modes.empty()) throw ArgumentError("motion model has no modes");
  for (const auto& m : modes) {
    m.validate();
    if (!m.same_geometry(modes.front())) throw GeometryError("motion model modes use different lattices");
  }
}

MotionModel zero_model(const ControlGrid& geometry, int n_signals) {
  if (n_signals < 1) throw ArgumentError("zero_model: need at least one signal");
  MotionModel m;
  m.modes.assign(static_cast<std::size_t>(n_signals), geometry.zeros_like());
  return m;
}

ControlGrid compose_motion(const SurrogateMatrix& S, const MotionModel& C, int t) {
  if (t < 0 || t >= S.times()) throw RangeError("compose_motion: timepoint " + std::to_string(t) + " out of range");
  if (C.signals() != S.signals()) throw GeometryError("compose_motion: signal count differs from model size");
  if (C.modes.empty()) throw ArgumentError("compose_motion: empty model");
  ControlGrid out = C.modes.front().zeros_like();
  for (int i = 0; i < C.signals(); ++i) {
    const auto& mode = C.modes[i];
    if (!mode.same_geometry(out) || mode.disp.size() != out.disp.size()) {
      throw GeometryError("compose_motion: modes use different lattices");
    }
    const double s = S(i, t);
    for (std::size_t p = 0; p < out.disp.size(); ++p) out.disp[p] += s * mode.disp[p];
  }
  return out;
}

namespace {

// Segment indices per timepoint, in input order.
std::vector<std::vector<std::size_t>> group_by_time(std::span<const Segment> segs, int n_times) {
  std::vector<std::vector<std::size_t>> groups(static_cast<std::size_t>(n_times));
  for (std::size_t s = 0; s < segs.size(); ++s) {
    const int t = segs[s].t;
    if (t < 0 || t >= n_times) {
      throw RangeError("segment timepoint " + std::to_string(t) + " outside [0, " + std::to_string(n_times) + ")");
    }
    groups[static_cast<std::size_t>(t)].push_back(s);
  }
  return groups;
}

double total(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

MotionModel take_step(const MotionModel& C, const std::vector<std::vector<Vec3>>& G, double lambda) {
  MotionModel out = C;
  for (std::size_t i = 0; i < out.modes.size(); ++i) {
    auto& d = out.modes[i].disp;
    for (std::size_t p = 0; p < d.size(); ++p) d[p] -= lambda * G[i][p];
  }
  return out;
}

}  // namespace

TimepointTerms evaluate_timepoints(const Volume& I0, const SurrogateMatrix& S, const MotionModel& C,
                                   std::span<const Segment> segs, const TermRequest& request) {
  const int nt = S.times();
  const int ns = S.signals();
  if (C.signals() != ns) throw GeometryError("surrogate matrix and motion model disagree on signal count");
  if (!request.active.empty() && request.active.size() != static_cast<std::size_t>(nt)) {
    throw ArgumentError("active timepoint mask has the wrong length");
  }
  const auto groups = group_by_time(segs, nt);

  TimepointTerms out;
  out.sse.assign(static_cast<std::size_t>(nt), 0.0);
  out.grad.resize(static_cast<std::size_t>(nt));
  if (request.curvature) out.curvature = SurrogateMatrix(ns, nt);

  std::vector<int> work;
  for (int t = 0; t < nt; ++t) {
    if (groups[t].empty()) continue;
    if (!request.active.empty() && !request.active[t]) continue;
    work.push_back(t);
  }
  std::vector<const ControlGrid*> mode_ptrs;
  for (const auto& m : C.modes) mode_ptrs.push_back(&m);
  std::vector<std::vector<double>> curv(work.size());

  parallel_for(work.size(), [&](std::size_t w) {
    const int t = work[w];
    const ControlGrid M = compose_motion(S, C, t);
    std::span<Vec3> grad;
    if (request.gradient) {
      out.grad[t].assign(M.size(), Vec3{});
      grad = out.grad[t];
    }
    std::span<const ControlGrid* const> modes;
    if (request.curvature) {
      curv[w].assign(static_cast<std::size_t>(ns), 0.0);
      modes = mode_ptrs;
    }
    double sse = 0.0;
    for (std::size_t s : groups[t]) sse += accumulate_segment(I0, M, segs[s], grad, modes, curv[w]);
    out.sse[t] = sse;
  });

  if (request.curvature) {
    for (std::size_t w = 0; w < work.size(); ++w) {
      for (int i = 0; i < ns; ++i) out.curvature(i, work[w]) = curv[w][i];
    }
  }
  return out;
}

double objective(const Volume& I0, const SurrogateMatrix& S, const MotionModel& C, std::span<const Segment> segs) {
  return total(evaluate_timepoints(I0, S, C, segs, {}).sse);
}

FitStepResult fit_step(FitState state, const Volume& I0, const SurrogateMatrix& S, const MotionModel& C,
                       std::span<const Segment> segs, const FitOptions& options) {
  const auto& ls = options.line_search;
  TermRequest req;
  req.gradient = true;
  req.curvature = options.surrogate_curvature;
  auto terms = evaluate_timepoints(I0, S, C, segs, req);
  const double f0 = total(terms.sse);
  if (!std::isfinite(f0)) throw NumericalError("fit_step: objective is not finite");
  if (state.history.empty()) state.history.push_back(f0);

  // Aggregate gradient dF/dC_i = sum_t S(i,t) grad_t, in timepoint order.
  const int ns = C.signals();
  const std::size_t nk = C.modes.front().size();
  std::vector<std::vector<Vec3>> G(static_cast<std::size_t>(ns), std::vector<Vec3>(nk));
  for (int t = 0; t < S.times(); ++t) {
    const auto& g = terms.grad[t];
    if (g.empty()) continue;
    for (int i = 0; i < ns; ++i) {
      const double s = S(i, t);
      if (s == 0.0) continue;
      auto& Gi = G[i];
      for (std::size_t p = 0; p < nk; ++p) Gi[p] += s * g[p];
    }
  }
  double gnorm2 = 0.0;
  Vec3 gmax;
  for (int i = 0; i < ns; ++i) {
    for (std::size_t p = 0; p < nk; ++p) {
      const Vec3& v = G[i][p];
      if (!v.finite()) {
        throw NumericalError("fit_step: non-finite gradient at signal " + std::to_string(i) + ", knot " +
                             std::to_string(p) + " (objective " + detail::fmt_double(f0) + ")");
      }
      gnorm2 += v.dot(v);
      for (int a = 0; a < 3; ++a) gmax[a] = std::max(gmax[a], std::abs(v[a]));
    }
  }

  FitStepResult res;
  res.objective_before = f0;
  double lambda = 0.0;
  MotionModel accepted_C = C;
  std::vector<double> accepted_sse = terms.sse;
  double f1 = f0;

  if (gnorm2 > 0.0) {
    const Vec3& h = C.modes.front().cspacing;
    double cap = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
      if (gmax[a] > 0.0) cap = std::min(cap, ls.max_move_fraction * h[a] / gmax[a]);
    }
    double trial = state.lambda_k > 0.0 ? std::min(cap, 2.0 * state.lambda_k) : cap;
    for (int b = 0; b <= ls.max_backtracks; ++b, trial *= ls.contraction) {
      MotionModel cand = take_step(C, G, trial);
      auto cand_terms = evaluate_timepoints(I0, S, cand, segs, {});
      const double fc = total(cand_terms.sse);
      if (std::isfinite(fc) && fc <= f0 - ls.armijo * trial * gnorm2 && fc <= f0) {
        lambda = trial;
        accepted_C = std::move(cand);
        accepted_sse = std::move(cand_terms.sse);
        f1 = fc;
        break;
      }
    }
  }

  res.accepted = lambda > 0.0;
  state.iteration += 1;
  if (res.accepted) state.accepted_steps += 1;
  state.c_km1 = C;
  state.grad_km2 = std::move(state.grad_km1);
  state.grad_km1 = std::move(terms.grad);
  state.lambda_km1 = state.lambda_k;
  state.lambda_k = lambda;
  state.curvature = std::move(terms.curvature);
  state.sse_t = std::move(accepted_sse);
  state.history.push_back(f1);

  res.objective_after = f1;
  res.C = std::move(accepted_C);
  res.state = std::move(state);
  return res;
}

FitRunResult fit_run(const Volume& I0, SurrogateMatrix& S, const MotionModel& C, std::span<const Segment> segs,
                     int max_iters, const FitOptions& options, const FitStepHook& hook) {
  if (max_iters < 1) throw ArgumentError("fit_run: max_iters must be >= 1");
  FitRunResult run;
  run.C = C;
  for (int it = 0; it < max_iters; ++it) {
    auto step = fit_step(std::move(run.state), I0, S, run.C, segs, options);
    run.state = std::move(step.state);
    run.C = std::move(step.C);
    if (!step.accepted) break;
    if (hook) hook(run.state, S, run.C);
    const double before = step.objective_before;
    const double after = run.state.history.back();
    if (before <= 0.0 || (before - after) / before < options.tol_f) break;
  }
  return run;
}

SurrogateMatrix read_surrogates_csv(const std::filesystem::path& path) {
  const auto [header, rows] = detail::read_csv(path);
  if (header.size() < 2 || header[0] != "t") throw FormatError(path.string() + ": expected header t,s1,...");
  for (std::size_t c = 1; c < header.size(); ++c) {
    if (header[c] != "s" + std::to_string(c)) throw FormatError(path.string() + ": unexpected column " + header[c]);
  }
  if (rows.empty()) throw FormatError(path.string() + ": no timepoints");
  const int ns = static_cast<int>(header.size() - 1);
  SurrogateMatrix S(ns, static_cast<int>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& row = rows[r];
    const std::string where = path.string() + " row " + std::to_string(r + 2);
    if (row.size() != header.size()) throw FormatError(where + ": wrong column count");
    if (detail::parse_double(row[0], where) != static_cast<double>(r)) {
      throw FormatError(where + ": timepoints must be 0..N-1 in order");
    }
    for (int i = 0; i < ns; ++i) {
      const double v = detail::parse_double(row[i + 1], where);
      if (!std::isfinite(v)) throw FormatError(where + ": non-finite value");
      S(i, static_cast<int>(r)) = v;
    }
  }
  return S;
}

void write_surrogates_csv(const SurrogateMatrix& S, const std::filesystem::path& path) {
  S.validate();
  std::string text = "t";
  for (int i = 0; i < S.signals(); ++i) text += ",s" + std::to_string(i + 1);
  text += "\n";
  for (int t = 0; t < S.times(); ++t) {
    text += std::to_string(t);
    for (int i = 0; i < S.signals(); ++i) text += "," + detail::fmt_double(S(i, t));
    text += "\n";
  }
  detail::write_text(path, text);
}

}  // namespace motion4d
