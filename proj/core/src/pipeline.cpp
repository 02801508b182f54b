#include "motion4d/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "io_detail.hpp"
#include "motion4d/phantom.hpp"

namespace motion4d {

using detail::json;

const char* to_string(SurrogateMode mode) {
  switch (mode) {
    case SurrogateMode::driven:
      return "driven";
    case SurrogateMode::free:
      return "free";
    case SurrogateMode::optimized:
      return "optimized";
  }
  return "unknown";
}

SurrogateMode parse_mode(const std::string& text) {
  if (text == "driven") return SurrogateMode::driven;
  if (text == "free") return SurrogateMode::free;
  if (text == "optimized") return SurrogateMode::optimized;
  throw ConfigError("unknown mode '" + text + "' (expected driven, free or optimized)");
}

void PipelineConfig::validate() const {
  if (levels.empty()) throw ConfigError("at least one pyramid level is required");
  for (std::size_t l = 0; l < levels.size(); ++l) {
    for (int a = 0; a < 3; ++a) {
      if (levels[l][a] < 1) throw ConfigError("pyramid factors must be >= 1");
      if (l > 0 && levels[l][a] > levels[l - 1][a]) throw ConfigError("pyramid levels must be ordered coarse to fine");
    }
  }
  if (max_alternations < 1) throw ConfigError("max_alternations must be >= 1");
  if (max_inner_iters < 1) throw ConfigError("max_inner_iters must be >= 1");
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("alpha must be finite and >= 0");
  if (max_halvings < 0) throw ConfigError("max_halvings must be >= 0");
  if (!(tol_f >= 0.0)) throw ConfigError("tol_f must be >= 0");
  if (num_signals < 1 || num_signals > 2) throw ConfigError("num_signals must be 1 or 2");
  if (phase_bins < 2) throw ConfigError("phase_bins must be >= 2");
  if (knot_spacing) {
    for (int a = 0; a < 3; ++a) {
      if (!((*knot_spacing)[a] > 0.0)) throw ConfigError("knot_spacing_mm must be positive");
    }
  }
  const auto& ls = line_search;
  if (!(ls.max_move_fraction > 0.0) || !(ls.contraction > 0.0 && ls.contraction < 1.0) || !(ls.armijo >= 0.0 && ls.armijo < 1.0) ||
      ls.max_backtracks < 0) {
    throw ConfigError("invalid line search settings");
  }
}

PipelineConfig read_pipeline_config(const std::filesystem::path& path) {
  json j;
  try {
    j = detail::read_json(path);
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  }
  if (!j.is_object()) throw ConfigError(path.string() + ": config must be a JSON object");
  PipelineConfig c;
  try {
    if (j.contains("mode")) c.mode = parse_mode(j.at("mode").get<std::string>());
    if (j.contains("levels")) {
      c.levels.clear();
      for (const auto& l : j.at("levels")) c.levels.push_back(detail::dims_from(l, "levels"));
    }
    c.max_alternations = j.value("max_alternations", c.max_alternations);
    c.max_inner_iters = j.value("max_inner_iters", c.max_inner_iters);
    c.alpha = j.value("alpha", c.alpha);
    c.precondition = j.value("precondition", c.precondition);
    if (j.contains("surrogate_update")) {
      const auto s = j.at("surrogate_update").get<std::string>();
      if (s == "every_iteration") {
        c.update_every_iteration = true;
      } else if (s == "once_per_run") {
        c.update_every_iteration = false;
      } else {
        throw ConfigError("surrogate_update must be every_iteration or once_per_run");
      }
    }
    c.max_halvings = j.value("max_halvings", c.max_halvings);
    c.tol_f = j.value("tol_f", c.tol_f);
    c.seed = j.value("seed", c.seed);
    c.num_signals = j.value("num_signals", c.num_signals);
    c.phase_bins = j.value("phase_bins", c.phase_bins);
    if (j.contains("knot_spacing_mm") && !j.at("knot_spacing_mm").is_null()) {
      c.knot_spacing = detail::vec_from(j.at("knot_spacing_mm"), "knot_spacing_mm");
    }
    if (j.contains("line_search")) {
      const auto& l = j.at("line_search");
      c.line_search.max_move_fraction = l.value("max_move_fraction", c.line_search.max_move_fraction);
      c.line_search.contraction = l.value("contraction", c.line_search.contraction);
      c.line_search.armijo = l.value("armijo", c.line_search.armijo);
      c.line_search.max_backtracks = l.value("max_backtracks", c.line_search.max_backtracks);
    }
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  } catch (const FormatError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  c.validate();
  return c;
}

void write_pipeline_config(const PipelineConfig& c, const std::filesystem::path& path) {
  json levels = json::array();
  for (const auto& l : c.levels) levels.push_back(detail::dims_json(l));
  json j{{"mode", to_string(c.mode)},
         {"levels", levels},
         {"max_alternations", c.max_alternations},
         {"max_inner_iters", c.max_inner_iters},
         {"alpha", c.alpha},
         {"precondition", c.precondition},
         {"surrogate_update", c.update_every_iteration ? "every_iteration" : "once_per_run"},
         {"max_halvings", c.max_halvings},
         {"tol_f", c.tol_f},
         {"seed", c.seed},
         {"num_signals", c.num_signals},
         {"phase_bins", c.phase_bins},
         {"line_search",
          {{"max_move_fraction", c.line_search.max_move_fraction},
           {"contraction", c.line_search.contraction},
           {"armijo", c.line_search.armijo},
           {"max_backtracks", c.line_search.max_backtracks}}}};
  j["knot_spacing_mm"] = c.knot_spacing ? detail::vec_json(*c.knot_spacing) : json(nullptr);
  detail::write_json(path, j);
}

Vec3 default_knot_spacing(const Grid3& full, const std::vector<Dims3>& levels) {
  if (levels.empty()) throw ArgumentError("default_knot_spacing: no levels");
  const Dims3& f = levels.front();
  return {4.0 * f[0] * full.spacing.x, 4.0 * f[1] * full.spacing.y, 4.0 * f[2] * full.spacing.z};
}

std::vector<Segment> level_segments(std::span<const Segment> segs, const Dims3& factor, Dims3* used) {
  Dims3 f = factor;
  for (const auto& s : segs) {
    const bool end_aligned = ((s.z_hi + 1) % f[2] == 0) || s.z_hi == s.parent_grid.dims[2] - 1;
    if (s.z_lo % f[2] != 0 || !end_aligned) {
      f[2] = 1;
      break;
    }
  }
  if (used) *used = f;
  std::vector<Segment> out;
  out.reserve(segs.size());
  const bool identity = f == Dims3{1, 1, 1};
  for (const auto& s : segs) out.push_back(identity ? s : downsample_segment(s, f));
  return out;
}

ControlGrid level_lattice(const Grid3& full, const Grid3& level, const Vec3& spacing) {
  const Vec3 a = full.max_corner();
  const Vec3 b = level.max_corner();
  const Vec3 extent{std::max(a.x, b.x), std::max(a.y, b.y), std::max(a.z, b.z)};
  return make_control_grid(level, spacing, full.origin, extent);
}

namespace {

MotionModel move_model(const MotionModel& C, const ControlGrid& lattice) {
  MotionModel out;
  for (const auto& m : C.modes) out.modes.push_back(refit_control_grid(m, lattice));
  return out;
}

SurrogateMatrix initial_signals(const PipelineConfig& cfg, const PipelineInputs& in) {
  if (cfg.mode == SurrogateMode::free) {
    if (in.phases.size() != static_cast<std::size_t>(in.timepoints)) {
      throw ConfigError("free mode needs one phase label per timepoint (" + std::to_string(in.timepoints) +
                        "), got " + std::to_string(in.phases.size()));
    }
    SurrogateMatrix S = init_surrogates_phase(in.phases, cfg.phase_bins);
    if (cfg.num_signals == 1) {
      SurrogateMatrix one(1, S.times());
      for (int t = 0; t < S.times(); ++t) one(0, t) = S(0, t);
      return one;
    }
    return S;
  }
  if (!in.signals) throw ConfigError(std::string(to_string(cfg.mode)) + " mode needs surrogate signals");
  if (in.signals->times() != in.timepoints) {
    throw ConfigError("surrogate signals cover " + std::to_string(in.signals->times()) + " timepoints, expected " +
                      std::to_string(in.timepoints));
  }
  in.signals->validate();
  return *in.signals;
}

}  // namespace

PipelineResult run_pipeline(const PipelineConfig& cfg, const PipelineInputs& in, const ProgressFn& progress) {
  cfg.validate();
  if (in.segments.empty()) throw ConfigError("no segments to fit");
  if (in.timepoints < 1) throw ConfigError("timepoint count must be >= 1");
  const Grid3 full = in.segments.front().parent_grid;
  for (const auto& s : in.segments) {
    if (!(s.parent_grid == full)) throw ConfigError("segments use different grids");
    if (s.t < 0 || s.t >= in.timepoints) throw ConfigError("segment timepoint " + std::to_string(s.t) + " out of range");
    s.validate();
  }
  for (const auto& v : in.phase_volumes) {
    if (!(v.grid == full)) throw ConfigError("phase volumes do not match the segment grid");
  }

  PipelineResult res;
  res.S = initial_signals(cfg, in);
  res.knot_spacing = cfg.knot_spacing ? *cfg.knot_spacing : default_knot_spacing(full, cfg.levels);
  const Volume I0_full =
      in.phase_volumes.empty() ? scatter_init(full, in.segments) : average_volumes(in.phase_volumes);

  const bool update_signals = cfg.mode != SurrogateMode::driven && cfg.alpha > 0.0;
  FitOptions fit_opts;
  fit_opts.line_search = cfg.line_search;
  fit_opts.tol_f = cfg.tol_f;
  fit_opts.surrogate_curvature = update_signals && cfg.precondition;
  McirOptions mcir_opts;
  mcir_opts.tol_f = cfg.tol_f;
  SurrogateUpdateOptions upd_opts;
  upd_opts.alpha = cfg.alpha;
  upd_opts.precondition = cfg.precondition;
  upd_opts.max_halvings = cfg.max_halvings;

  auto emit = [&](TraceEntry e) {
    e.signal_sd = row_std(res.S);
    if (progress) progress(e);
    res.trace.push_back(std::move(e));
  };

  Volume I0;
  for (std::size_t L = 0; L < cfg.levels.size(); ++L) {
    Dims3 factor{};
    const auto segs = level_segments(in.segments, cfg.levels[L], &factor);
    const Grid3 grid = downsample_grid(full, factor);
    I0 = L == 0 ? downsample(I0_full, factor) : resample_trilinear(I0, grid);
    const ControlGrid lattice = level_lattice(full, grid, res.knot_spacing);
    res.C = L == 0 ? zero_model(lattice, res.S.signals()) : move_model(res.C, lattice);

    auto norm = normalize_surrogates(res.S, res.C, true);
    res.S = std::move(norm.S);
    res.C = std::move(norm.C);

    const int level = static_cast<int>(L);
    res.level_objectives.emplace_back();
    double f_level = objective(I0, res.S, res.C, segs);
    emit({level, 0, "start", 0, f_level, 0.0, 0.0, true, {}});

    for (int alt = 0; alt < cfg.max_alternations; ++alt) {
      const double f_before = f_level;
      int alt_index = alt + 1;

      std::vector<SurrogateUpdateLog> upd_log;
      const FitStepHook updater = update_signals ? make_surrogate_updater(I0, segs, upd_opts, &upd_log) : FitStepHook{};
      int fit_iter = 0;
      auto log_update = [&]() {
        if (upd_log.empty()) return;
        const auto& u = upd_log.back();
        emit({level, alt_index, "surrogates", fit_iter, u.objective_after, u.max_abs_change, cfg.alpha,
              u.reverted_timepoints == 0, {}});
      };
      FitStepHook hook = [&](FitState& st, SurrogateMatrix& S, const MotionModel& C) {
        ++fit_iter;
        emit({level, alt_index, "fit", fit_iter, st.history.back(), st.lambda_k, 0.0, true, {}});
        if (updater && cfg.update_every_iteration) {
          updater(st, S, C);
          log_update();
        }
      };
      auto fit = fit_run(I0, res.S, res.C, segs, cfg.max_inner_iters, fit_opts, hook);
      if (fit.state.lambda_k == 0.0) {
        emit({level, alt_index, "fit", fit_iter + 1, fit.state.history.back(), 0.0, 0.0, false, {}});
      }
      if (updater && !cfg.update_every_iteration) {
        updater(fit.state, res.S, fit.C);
        log_update();
      }
      res.C = std::move(fit.C);

      auto rec = mcir_run(I0, res.S, res.C, segs, cfg.max_inner_iters, mcir_opts);
      for (std::size_t k = 1; k < rec.state.history.size(); ++k) {
        const bool last_rejected = k + 1 == rec.state.history.size() && rec.state.step == 0.0;
        emit({level, alt_index, "mcir", static_cast<int>(k), rec.state.history[k], last_rejected ? 0.0 : rec.state.step,
              0.0, !last_rejected, {}});
      }
      I0 = std::move(rec.I0);
      res.coverage = std::move(rec.coverage);
      f_level = rec.state.history.back();
      res.level_objectives.back().push_back(f_level);
      if (f_before <= 0.0 || (f_before - f_level) / f_before < cfg.tol_f) break;
    }
  }
  res.I0 = std::move(I0);
  return res;
}

std::vector<Volume> export_frames(const PipelineResult& result, std::span<const int> timepoints) {
  std::vector<Volume> out;
  out.reserve(timepoints.size());
  for (int t : timepoints) {
    if (t < 0 || t >= result.S.times()) throw RangeError("export_frames: timepoint " + std::to_string(t) + " out of range");
    out.push_back(warp_volume(result.I0, compose_motion(result.S, result.C, t)));
  }
  return out;
}

ExtremePair find_extreme_inhalation(const SurrogateMatrix& S, const MotionModel& C, std::span<const double> phases,
                                    int bins) {
  if (phases.size() != static_cast<std::size_t>(S.times())) {
    throw ArgumentError("find_extreme_inhalation: one phase label per timepoint required");
  }
  if (C.signals() != S.signals()) throw GeometryError("find_extreme_inhalation: model and surrogates disagree");
  std::vector<int> ei;
  for (int t = 0; t < S.times(); ++t) {
    if (phase_bin(phases[t], bins) == 0) ei.push_back(t);
  }
  if (ei.empty()) throw ArgumentError("find_extreme_inhalation: no end-inhalation timepoints");

  // Mean superior-inferior displacement of each mode, so dz_t is linear in S.
  std::vector<double> mz(static_cast<std::size_t>(C.signals()), 0.0);
  for (int i = 0; i < C.signals(); ++i) {
    double acc = 0.0;
    for (const auto& d : C.modes[i].disp) acc += d.z;
    mz[i] = C.modes[i].disp.empty() ? 0.0 : acc / static_cast<double>(C.modes[i].disp.size());
  }
  const int nt = S.times();
  std::vector<double> dz(static_cast<std::size_t>(nt), 0.0);
  for (int t = 0; t < nt; ++t) {
    for (int i = 0; i < S.signals(); ++i) dz[t] += S(i, t) * mz[i];
  }
  double mean_s = 0.0, mean_dz = 0.0, mean_dz_ei = 0.0;
  for (int t = 0; t < nt; ++t) {
    mean_s += S(0, t);
    mean_dz += dz[t];
  }
  mean_s /= nt;
  mean_dz /= nt;
  for (int t : ei) mean_dz_ei += dz[t];
  mean_dz_ei /= static_cast<double>(ei.size());
  double cov = 0.0;
  for (int t = 0; t < nt; ++t) cov += (S(0, t) - mean_s) * (dz[t] - mean_dz);
  const double inhale_dir = mean_dz_ei - mean_dz;

  ExtremePair out;
  out.orientation = (cov * inhale_dir < 0.0) ? -1 : 1;
  out.deep = ei.front();
  out.shallow = ei.front();
  for (int t : ei) {
    const double v = out.orientation * S(0, t);
    if (v > out.orientation * S(0, out.deep)) out.deep = t;
    if (v < out.orientation * S(0, out.shallow)) out.shallow = t;
  }
  return out;
}

void write_objective_trace_csv(const std::vector<TraceEntry>& trace, const std::filesystem::path& path) {
  std::size_t ns = 0;
  for (const auto& e : trace) ns = std::max(ns, e.signal_sd.size());
  std::string text = "level,alternation,stage,iteration,objective,step,alpha,accepted";
  for (std::size_t i = 0; i < ns; ++i) text += ",sd_s" + std::to_string(i + 1);
  text += "\n";
  for (const auto& e : trace) {
    text += std::to_string(e.level) + "," + std::to_string(e.alternation) + "," + e.stage + "," +
            std::to_string(e.iteration) + "," + detail::fmt_double(e.objective) + "," + detail::fmt_double(e.step) + "," +
            detail::fmt_double(e.alpha) + "," + (e.accepted ? "1" : "0");
    for (std::size_t i = 0; i < ns; ++i) text += "," + (i < e.signal_sd.size() ? detail::fmt_double(e.signal_sd[i]) : "");
    text += "\n";
  }
  detail::write_text(path, text);
}

}  // namespace motion4d
