#include "motion4d/hypergrad.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace motion4d {

void RespTrace::validate() const {
  if (!(dt > 0.0) || !std::isfinite(dt)) throw ArgumentError("trace sample interval must be positive");
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericalError("trace contains a non-finite value");
  }
}

double RespTrace::sample(double t) const {
  if (values.empty()) throw ArgumentError("sampling an empty trace");
  const double u = t / dt;
  if (u <= 0.0) return values.front();
  const auto last = static_cast<double>(values.size() - 1);
  if (u >= last) return values.back();
  const auto i = static_cast<std::size_t>(std::floor(u));
  const double f = u - static_cast<double>(i);
  return (1.0 - f) * values[i] + f * values[i + 1];
}

HyperGradient compute_hypergradient(const MotionModel& C_km1, const std::vector<std::vector<Vec3>>& grad_km2,
                                    const std::vector<std::vector<Vec3>>& grad_km1, const SurrogateMatrix& S_km1,
                                    double lambda_km1) {
  const int ns = S_km1.signals();
  const int nt = S_km1.times();
  if (C_km1.signals() != ns) throw GeometryError("compute_hypergradient: model and surrogates disagree on signal count");
  if (grad_km1.size() != static_cast<std::size_t>(nt)) throw GeometryError("compute_hypergradient: grad_km1 length");
  if (!grad_km2.empty() && grad_km2.size() != static_cast<std::size_t>(nt)) {
    throw GeometryError("compute_hypergradient: grad_km2 length");
  }
  const std::size_t nk = C_km1.modes.front().size();
  HyperGradient out{SurrogateMatrix(ns, nt)};
  for (int t = 0; t < nt; ++t) {
    const auto& g1 = grad_km1[t];
    if (g1.empty()) continue;
    if (g1.size() != nk) throw GeometryError("compute_hypergradient: gradient size differs from the lattice");
    const std::vector<Vec3>* g2 = nullptr;
    if (!grad_km2.empty() && !grad_km2[t].empty() && lambda_km1 != 0.0) {
      if (grad_km2[t].size() != nk) throw GeometryError("compute_hypergradient: gradient size differs from the lattice");
      g2 = &grad_km2[t];
    }
    for (int i = 0; i < ns; ++i) {
      const auto& c = C_km1.modes[i].disp;
      const double coef = lambda_km1 * S_km1(i, t);
      double acc = 0.0;
      if (g2) {
        for (std::size_t p = 0; p < nk; ++p) acc += (c[p] - coef * (*g2)[p]).dot(g1[p]);
      } else {
        for (std::size_t p = 0; p < nk; ++p) acc += c[p].dot(g1[p]);
      }
      out.h(i, t) = acc;
    }
  }
  return out;
}

SurrogateMatrix update_surrogates(const SurrogateMatrix& S, const HyperGradient& h, double alpha) {
  if (S.signals() != h.h.signals() || S.times() != h.h.times()) {
    throw GeometryError("update_surrogates: shape mismatch");
  }
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ArgumentError("update_surrogates: alpha must be >= 0");
  SurrogateMatrix out = S;
  for (int i = 0; i < S.signals(); ++i) {
    for (int t = 0; t < S.times(); ++t) {
      const double v = S(i, t) - alpha * h.h(i, t);
      if (!std::isfinite(v)) {
        throw NumericalError("update_surrogates: non-finite value at signal " + std::to_string(i) + ", timepoint " +
                             std::to_string(t));
      }
      out(i, t) = v;
    }
  }
  return out;
}

SurrogateMatrix init_surrogates_phase(std::span<const double> phases, int period) {
  if (phases.empty()) throw ArgumentError("init_surrogates_phase: no phases");
  if (period < 2) throw ArgumentError("init_surrogates_phase: period must be >= 2");
  SurrogateMatrix S(2, static_cast<int>(phases.size()));
  for (std::size_t t = 0; t < phases.size(); ++t) {
    if (!std::isfinite(phases[t])) throw ArgumentError("init_surrogates_phase: non-finite phase");
    const double a = 2.0 * std::numbers::pi * phases[t] / period;
    S(0, static_cast<int>(t)) = std::cos(a);
    S(1, static_cast<int>(t)) = std::sin(a);
  }
  return S;
}

std::vector<double> row_std(const SurrogateMatrix& S) {
  std::vector<double> out(static_cast<std::size_t>(S.signals()));
  for (int i = 0; i < S.signals(); ++i) {
    const auto row = S.row(i);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(row.size());
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    out[i] = std::sqrt(var / static_cast<double>(row.size()));
  }
  return out;
}

namespace {

bool is_degenerate(std::span<const double> row, double sd) {
  double amax = 0.0;
  for (double v : row) amax = std::max(amax, std::abs(v));
  return !(sd > 1e-12 * amax) || sd == 0.0;
}

}  // namespace

SurrogateMatrix init_surrogates_signal(const RespTrace& signal, bool standardize) {
  signal.validate();
  const std::size_t n = signal.values.size();
  if (n < 3) throw ArgumentError("init_surrogates_signal: need at least 3 samples");
  const auto& v = signal.values;
  SurrogateMatrix S(2, static_cast<int>(n));
  for (std::size_t t = 0; t < n; ++t) {
    S(0, static_cast<int>(t)) = v[t];
    double d = 0.0;
    if (t == 0) {
      d = (v[1] - v[0]) / signal.dt;
    } else if (t == n - 1) {
      d = (v[n - 1] - v[n - 2]) / signal.dt;
    } else {
      d = (v[t + 1] - v[t - 1]) / (2.0 * signal.dt);
    }
    S(1, static_cast<int>(t)) = d;
  }
  if (!standardize) return S;
  const auto sd = row_std(S);
  for (int i = 0; i < 2; ++i) {
    if (is_degenerate(S.row(i), sd[i])) continue;
    for (double& x : S.row(i)) x /= sd[i];
  }
  return S;
}

NormalizedModel normalize_surrogates(const SurrogateMatrix& S, const MotionModel& C, bool allow_degenerate) {
  if (C.signals() != S.signals()) throw GeometryError("normalize_surrogates: model and surrogates disagree");
  NormalizedModel out{S, C, row_std(S), std::vector<char>(static_cast<std::size_t>(S.signals()), 0)};
  for (int i = 0; i < S.signals(); ++i) {
    const double sd = out.scales[i];
    if (is_degenerate(S.row(i), sd)) {
      out.degenerate[i] = 1;
      if (!allow_degenerate) {
        throw DegenerateSignalError("normalize_surrogates: signal " + std::to_string(i + 1) + " has zero variance");
      }
      continue;
    }
    for (double& x : out.S.row(i)) x /= sd;
    for (auto& d : out.C.modes[i].disp) d *= sd;
  }
  return out;
}

FitStepHook make_surrogate_updater(const Volume& I0, std::span<const Segment> segs,
                                   const SurrogateUpdateOptions& options, std::vector<SurrogateUpdateLog>* log) {
  if (!(options.alpha >= 0.0)) throw ArgumentError("surrogate updater: alpha must be >= 0");
  return [&I0, segs, options, log](FitState& state, SurrogateMatrix& S, const MotionModel& C) {
    if (options.alpha == 0.0) return;
    auto h = compute_hypergradient(state.c_km1, state.grad_km2, state.grad_km1, S, state.lambda_km1);
    const int ns = S.signals();
    const int nt = S.times();
    if (options.precondition) {
      if (state.curvature.signals() != ns || state.curvature.times() != nt) {
        throw ArgumentError("surrogate updater: preconditioning needs the curvature from fit_step");
      }
      for (int i = 0; i < ns; ++i) {
        for (int t = 0; t < nt; ++t) {
          const double g = state.curvature(i, t);
          h.h(i, t) = g > 0.0 ? h.h(i, t) / g : 0.0;
        }
      }
    }

    SurrogateUpdateLog entry;
    entry.iteration = state.iteration;
    double f_before = 0.0;
    for (double v : state.sse_t) f_before += v;
    entry.objective_before = f_before;

    // Columns still looking for an acceptable step.
    std::vector<char> pending(static_cast<std::size_t>(nt), 0);
    for (int t = 0; t < nt; ++t) {
      for (int i = 0; i < ns; ++i) {
        if (h.h(i, t) != 0.0) pending[t] = 1;
      }
    }
    SurrogateMatrix accepted = S;
    double scale = options.alpha;
    for (int attempt = 0; attempt <= options.max_halvings; ++attempt, scale *= 0.5) {
      if (std::none_of(pending.begin(), pending.end(), [](char c) { return c != 0; })) break;
      const SurrogateMatrix trial_full = update_surrogates(S, h, scale);
      SurrogateMatrix trial = accepted;
      for (int t = 0; t < nt; ++t) {
        if (!pending[t]) continue;
        for (int i = 0; i < ns; ++i) trial(i, t) = trial_full(i, t);
      }
      TermRequest req;
      req.active = pending;
      const auto terms = evaluate_timepoints(I0, trial, C, segs, req);
      for (int t = 0; t < nt; ++t) {
        if (!pending[t]) continue;
        if (std::isfinite(terms.sse[t]) && terms.sse[t] <= state.sse_t[t]) {
          for (int i = 0; i < ns; ++i) accepted(i, t) = trial(i, t);
          state.sse_t[t] = terms.sse[t];
          pending[t] = 0;
        }
      }
    }
    for (int t = 0; t < nt; ++t) {
      if (pending[t]) ++entry.reverted_timepoints;
      for (int i = 0; i < ns; ++i) entry.max_abs_change = std::max(entry.max_abs_change, std::abs(accepted(i, t) - S(i, t)));
    }
    S = std::move(accepted);
    double f_after = 0.0;
    for (double v : state.sse_t) f_after += v;
    state.history.back() = f_after;
    entry.objective_after = f_after;
    if (log) log->push_back(entry);
  };
}

}  // namespace motion4d
