#include "motion4d/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <random>
#include <string>

#include "io_detail.hpp"
#include "motion4d/mcir.hpp"
#include "motion4d/parallel.hpp"

namespace motion4d {

using detail::json;

double AnatomySpec::diaphragm_at(double x, double y, double lung_cx) const {
  const double rx = (x - lung_cx) / lung_ax;
  const double ry = (y - lung_cy) / lung_ay;
  const double bowl = std::max(0.0, 1.0 - rx * rx - ry * ry);
  return diaphragm_z + diaphragm_tilt * (y - lung_cy) - diaphragm_dome * bowl;
}

void PhantomSpec::validate() const {
  try {
    grid.validate();
  } catch (const GeometryError& e) {
    throw SpecError(std::string("phantom grid: ") + e.what());
  }
  const Vec3 lo = grid.origin;
  const Vec3 hi = grid.max_corner();
  const auto& a = anatomy;
  auto inside = [&](double v, int axis) { return v >= lo[axis] && v <= hi[axis]; };
  if (a.torso_ax < 0 || a.torso_ay < 0 || a.lung_ax < 0 || a.lung_ay < 0 || a.spine_r < 0) {
    throw SpecError("anatomy sizes must be non-negative");
  }
  if (!inside(a.torso_cx - a.torso_ax, 0) || !inside(a.torso_cx + a.torso_ax, 0) ||
      !inside(a.torso_cy - a.torso_ay, 1) || !inside(a.torso_cy + a.torso_ay, 1)) {
    throw SpecError("torso extends beyond the grid");
  }
  const double max_spacing = std::max({grid.spacing.x, grid.spacing.y, grid.spacing.z});
  if (a.partial_volume_samples < 1) throw SpecError("partial_volume_samples must be >= 1");
  if (!(a.tumor_r >= 2.0 * max_spacing)) throw SpecError("tumor radius must be at least two voxels");
  for (int ax = 0; ax < 3; ++ax) {
    if (!inside(a.tumor_center[ax] - a.tumor_r, ax) || !inside(a.tumor_center[ax] + a.tumor_r, ax)) {
      throw SpecError("tumor extends beyond the grid");
    }
  }
  const auto& t = traces;
  if (t.timepoints < 3) throw SpecError("need at least 3 timepoints");
  if (!(t.dt > 0.0) || !(t.base_period > 0.0)) throw SpecError("trace dt and base period must be positive");
  if (t.amplitude_jitter < 0.0 || t.period_jitter < 0.0 || t.diaphragm_extra_jitter < 0.0) {
    throw SpecError("jitters must be non-negative");
  }
  if (t.period_jitter >= 1.0) throw SpecError("period jitter must be below 1");
  if (!(t.delay >= 0.0)) throw SpecError("delay must be non-negative");
  for (int ax = 0; ax < 3; ++ax) {
    if (!(motion.knot_spacing[ax] > 0.0)) throw SpecError("knot spacing must be positive");
    if (!(motion.chest_sigma[ax] > 0.0) || !(motion.diaphragm_sigma[ax] > 0.0)) {
      throw SpecError("motion sigmas must be positive");
    }
  }
  if (acquisition.couch_positions < 1 || acquisition.couch_positions > grid.dims[2]) {
    throw SpecError("couch positions must lie in [1, nz]");
  }
  if (acquisition.couch_positions > t.timepoints) throw SpecError("fewer timepoints than couch positions");
  if (acquisition.noise_sigma < 0.0) throw SpecError("noise sigma must be non-negative");
  if (acquisition.phase_bins < 2) throw SpecError("need at least two phase bins");
}

namespace {

json vec(const Vec3& v) { return detail::vec_json(v); }

Vec3 vec_or(const json& j, const char* key, const Vec3& def) {
  if (!j.contains(key)) return def;
  return detail::vec_from(j.at(key), key);
}

template <typename T>
T num_or(const json& j, const char* key, T def) {
  if (!j.contains(key)) return def;
  const auto& v = j.at(key);
  if (!v.is_number()) throw SpecError(std::string("field ") + key + " must be a number");
  if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer()) throw SpecError(std::string("field ") + key + " must be an integer");
  }
  return v.get<T>();
}

const json& section(const json& j, const char* key) {
  static const json empty = json::object();
  if (!j.contains(key)) return empty;
  if (!j.at(key).is_object()) throw SpecError(std::string("section ") + key + " must be an object");
  return j.at(key);
}

}  // namespace

PhantomSpec read_phantom_spec(const std::filesystem::path& path) {
  const json j = detail::read_json(path);
  if (!j.is_object()) throw SpecError(path.string() + ": spec must be a JSON object");
  PhantomSpec s;
  try {
    if (j.contains("grid")) s.grid = detail::grid_from(j.at("grid"));
    const auto& a = section(j, "anatomy");
    auto& an = s.anatomy;
    an.torso_cx = num_or(a, "torso_cx", an.torso_cx);
    an.torso_cy = num_or(a, "torso_cy", an.torso_cy);
    an.torso_ax = num_or(a, "torso_ax", an.torso_ax);
    an.torso_ay = num_or(a, "torso_ay", an.torso_ay);
    an.lung_offset_x = num_or(a, "lung_offset_x", an.lung_offset_x);
    an.lung_cy = num_or(a, "lung_cy", an.lung_cy);
    an.lung_ax = num_or(a, "lung_ax", an.lung_ax);
    an.lung_ay = num_or(a, "lung_ay", an.lung_ay);
    an.lung_top_z = num_or(a, "lung_top_z", an.lung_top_z);
    an.diaphragm_z = num_or(a, "diaphragm_z", an.diaphragm_z);
    an.diaphragm_dome = num_or(a, "diaphragm_dome", an.diaphragm_dome);
    an.diaphragm_tilt = num_or(a, "diaphragm_tilt", an.diaphragm_tilt);
    an.spine_cy = num_or(a, "spine_cy", an.spine_cy);
    an.spine_r = num_or(a, "spine_r", an.spine_r);
    an.tumor_center = vec_or(a, "tumor_center", an.tumor_center);
    an.tumor_r = num_or(a, "tumor_r", an.tumor_r);
    an.hu_air = num_or(a, "hu_air", an.hu_air);
    an.hu_lung = num_or(a, "hu_lung", an.hu_lung);
    an.hu_tissue = num_or(a, "hu_tissue", an.hu_tissue);
    an.hu_bone = num_or(a, "hu_bone", an.hu_bone);
    an.hu_tumor = num_or(a, "hu_tumor", an.hu_tumor);
    an.partial_volume_samples = static_cast<int>(num_or(a, "partial_volume_samples", an.partial_volume_samples));

    const auto& m = section(j, "motion");
    auto& mo = s.motion;
    mo.knot_spacing = vec_or(m, "knot_spacing_mm", mo.knot_spacing);
    mo.chest_amplitude = num_or(m, "chest_amplitude_mm", mo.chest_amplitude);
    mo.chest_center = vec_or(m, "chest_center", mo.chest_center);
    mo.chest_sigma = vec_or(m, "chest_sigma", mo.chest_sigma);
    mo.diaphragm_amplitude = num_or(m, "diaphragm_amplitude_mm", mo.diaphragm_amplitude);
    mo.diaphragm_center = vec_or(m, "diaphragm_center", mo.diaphragm_center);
    mo.diaphragm_sigma = vec_or(m, "diaphragm_sigma", mo.diaphragm_sigma);

    const auto& t = section(j, "traces");
    auto& tr = s.traces;
    tr.seed = num_or<std::uint64_t>(t, "seed", tr.seed);
    tr.timepoints = num_or(t, "timepoints", tr.timepoints);
    tr.dt = num_or(t, "dt_s", tr.dt);
    tr.base_period = num_or(t, "base_period_s", tr.base_period);
    tr.amplitude_jitter = num_or(t, "amplitude_jitter", tr.amplitude_jitter);
    tr.period_jitter = num_or(t, "period_jitter", tr.period_jitter);
    tr.diaphragm_extra_jitter = num_or(t, "diaphragm_extra_jitter", tr.diaphragm_extra_jitter);
    tr.delay = num_or(t, "delay_s", tr.delay);

    const auto& q = section(j, "acquisition");
    auto& ac = s.acquisition;
    ac.couch_positions = num_or(q, "couch_positions", ac.couch_positions);
    ac.noise_sigma = num_or(q, "noise_sigma_hu", ac.noise_sigma);
    ac.phase_bins = num_or(q, "phase_bins", ac.phase_bins);
  } catch (const json::exception& e) {
    throw SpecError(path.string() + ": " + e.what());
  } catch (const FormatError& e) {
    throw SpecError(path.string() + ": " + e.what());
  }
  s.validate();
  return s;
}

void write_phantom_spec(const PhantomSpec& s, const std::filesystem::path& path) {
  const auto& an = s.anatomy;
  const auto& mo = s.motion;
  const auto& tr = s.traces;
  const auto& ac = s.acquisition;
  json j;
  j["grid"] = detail::grid_json(s.grid);
  j["anatomy"] = {{"torso_cx", an.torso_cx},
                  {"torso_cy", an.torso_cy},
                  {"torso_ax", an.torso_ax},
                  {"torso_ay", an.torso_ay},
                  {"lung_offset_x", an.lung_offset_x},
                  {"lung_cy", an.lung_cy},
                  {"lung_ax", an.lung_ax},
                  {"lung_ay", an.lung_ay},
                  {"lung_top_z", an.lung_top_z},
                  {"diaphragm_z", an.diaphragm_z},
                  {"diaphragm_dome", an.diaphragm_dome},
                  {"diaphragm_tilt", an.diaphragm_tilt},
                  {"spine_cy", an.spine_cy},
                  {"spine_r", an.spine_r},
                  {"tumor_center", vec(an.tumor_center)},
                  {"tumor_r", an.tumor_r},
                  {"hu_air", an.hu_air},
                  {"hu_lung", an.hu_lung},
                  {"hu_tissue", an.hu_tissue},
                  {"hu_bone", an.hu_bone},
                  {"hu_tumor", an.hu_tumor},
                  {"partial_volume_samples", an.partial_volume_samples}};
  j["motion"] = {{"knot_spacing_mm", vec(mo.knot_spacing)},
                 {"chest_amplitude_mm", mo.chest_amplitude},
                 {"chest_center", vec(mo.chest_center)},
                 {"chest_sigma", vec(mo.chest_sigma)},
                 {"diaphragm_amplitude_mm", mo.diaphragm_amplitude},
                 {"diaphragm_center", vec(mo.diaphragm_center)},
                 {"diaphragm_sigma", vec(mo.diaphragm_sigma)}};
  j["traces"] = {{"seed", tr.seed},
                 {"timepoints", tr.timepoints},
                 {"dt_s", tr.dt},
                 {"base_period_s", tr.base_period},
                 {"amplitude_jitter", tr.amplitude_jitter},
                 {"period_jitter", tr.period_jitter},
                 {"diaphragm_extra_jitter", tr.diaphragm_extra_jitter},
                 {"delay_s", tr.delay}};
  j["acquisition"] = {{"couch_positions", ac.couch_positions},
                      {"noise_sigma_hu", ac.noise_sigma},
                      {"phase_bins", ac.phase_bins}};
  detail::write_json(path, j);
}

PhantomTemplate build_template(const PhantomSpec& spec) {
  spec.validate();
  const auto& a = spec.anatomy;
  const Grid3& g = spec.grid;
  PhantomTemplate out{Volume(g, a.hu_air), Mask(g)};
  const double lung_cx[2] = {a.torso_cx - a.lung_offset_x, a.torso_cx + a.lung_offset_x};
  auto in_ellipse = [](double dx, double dy, double ax, double ay) {
    if (ax <= 0.0 || ay <= 0.0) return false;
    const double rx = dx / ax, ry = dy / ay;
    return rx * rx + ry * ry <= 1.0;
  };
  enum Tissue { kAir, kLung, kTissue, kBone, kTumor, kTissueCount };
  auto classify = [&](const Vec3& p) {
    if (const Vec3 d = p - a.tumor_center; d.dot(d) <= a.tumor_r * a.tumor_r) return kTumor;
    if (!in_ellipse(p.x - a.torso_cx, p.y - a.torso_cy, a.torso_ax, a.torso_ay)) return kAir;
    if (a.spine_r > 0.0) {
      const double dx = p.x - a.torso_cx, dy = p.y - a.spine_cy;
      if (dx * dx + dy * dy <= a.spine_r * a.spine_r) return kBone;
    }
    for (double cx : lung_cx) {
      if (in_ellipse(p.x - cx, p.y - a.lung_cy, a.lung_ax, a.lung_ay) && p.z >= a.lung_top_z &&
          p.z <= a.diaphragm_at(p.x, p.y, cx)) {
        return kLung;
      }
    }
    return kTissue;
  };
  const double hu[kTissueCount] = {a.hu_air, a.hu_lung, a.hu_tissue, a.hu_bone, a.hu_tumor};
  // Each voxel averages n^3 sub-samples (partial volume); counting per tissue
  // keeps mirrored voxels bit-identical.
  const int n = a.partial_volume_samples;
  std::vector<double> offs(static_cast<std::size_t>(n));
  for (int s = 0; s < n; ++s) offs[s] = (s + 0.5) / n - 0.5;
  parallel_for(static_cast<std::size_t>(g.dims[2]), [&](std::size_t kk) {
    const int k = static_cast<int>(kk);
    for (int j = 0; j < g.dims[1]; ++j) {
      for (int i = 0; i < g.dims[0]; ++i) {
        const Vec3 p = g.point(i, j, k);
        int count[kTissueCount] = {0, 0, 0, 0, 0};
        for (double oz : offs) {
          for (double oy : offs) {
            for (double ox : offs) ++count[classify({p.x + ox * g.spacing.x, p.y + oy * g.spacing.y, p.z + oz * g.spacing.z})];
          }
        }
        double acc = 0.0;
        for (int c = 0; c < kTissueCount; ++c) acc += count[c] * hu[c];
        out.volume.at(i, j, k) = static_cast<float>(acc / (n * n * n));
        if (const Vec3 d = p - a.tumor_center; d.dot(d) <= a.tumor_r * a.tumor_r) out.tumor.at(i, j, k) = 1;
      }
    }
  });
  return out;
}

namespace {

// Raised-cosine cycles; cycle_of[s] receives the cycle index of sample s.
RespTrace raised_cosine_cycles(std::uint64_t seed, int n, double dt, double base_period, double amplitude_jitter,
                               double period_jitter, std::vector<int>* cycle_of) {
  if (n < 1) throw ArgumentError("make_irregular_trace: n must be >= 1");
  if (!(dt > 0.0) || !(base_period > 0.0)) throw ArgumentError("make_irregular_trace: dt and period must be positive");
  if (amplitude_jitter < 0.0 || period_jitter < 0.0 || period_jitter >= 1.0) {
    throw ArgumentError("make_irregular_trace: jitters must lie in [0, 1)");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  RespTrace tr;
  tr.dt = dt;
  tr.values.resize(static_cast<std::size_t>(n));
  if (cycle_of) cycle_of->assign(static_cast<std::size_t>(n), 0);
  int cycle = 0;
  double cycle_start = 0.0;
  double period = base_period * (1.0 + period_jitter * unit(rng));
  double amp = 1.0 + amplitude_jitter * unit(rng);
  for (int s = 0; s < n; ++s) {
    const double t = s * dt;
    while (t >= cycle_start + period) {
      cycle_start += period;
      period = base_period * (1.0 + period_jitter * unit(rng));
      amp = 1.0 + amplitude_jitter * unit(rng);
      ++cycle;
    }
    const double phi = (t - cycle_start) / period;
    tr.values[s] = amp * 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * phi));
    if (cycle_of) (*cycle_of)[s] = cycle;
  }
  return tr;
}

}  // namespace

RespTrace make_irregular_trace(std::uint64_t seed, int n, double dt, double base_period, double amplitude_jitter,
                               double period_jitter) {
  return raised_cosine_cycles(seed, n, dt, base_period, amplitude_jitter, period_jitter, nullptr);
}

PhantomTraces make_traces(const PhantomSpec& spec) {
  const auto& t = spec.traces;
  PhantomTraces out;
  std::vector<int> cycle_of;
  out.chest = raised_cosine_cycles(t.seed, t.timepoints, t.dt, t.base_period, t.amplitude_jitter, t.period_jitter,
                                   &cycle_of);
  // Same cycles, each scaled by its own extra factor.
  std::mt19937_64 rng(t.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::vector<double> factor(static_cast<std::size_t>(cycle_of.back() + 1));
  for (double& f : factor) f = 1.0 + t.diaphragm_extra_jitter * unit(rng);
  out.diaphragm = out.chest;
  for (std::size_t s = 0; s < out.chest.values.size(); ++s) out.diaphragm.values[s] *= factor[cycle_of[s]];
  return out;
}

MotionModel gt_model(const PhantomSpec& spec) {
  const auto& m = spec.motion;
  const ControlGrid lattice = make_control_grid(spec.grid, m.knot_spacing);
  MotionModel model = zero_model(lattice, 2);
  auto gauss = [](const Vec3& p, const Vec3& c, const Vec3& s) {
    double e = 0.0;
    for (int a = 0; a < 3; ++a) {
      const double d = (p[a] - c[a]) / s[a];
      e += d * d;
    }
    return std::exp(-0.5 * e);
  };
  for (int k = 0; k < lattice.cdims[2]; ++k) {
    for (int j = 0; j < lattice.cdims[1]; ++j) {
      for (int i = 0; i < lattice.cdims[0]; ++i) {
        const Vec3 p = lattice.knot(i, j, k);
        const std::size_t idx = lattice.index(i, j, k);
        model.modes[0].disp[idx].y = m.chest_amplitude * gauss(p, m.chest_center, m.chest_sigma);
        model.modes[1].disp[idx].z = -m.diaphragm_amplitude * gauss(p, m.diaphragm_center, m.diaphragm_sigma);
      }
    }
  }
  return model;
}

SurrogateMatrix gt_signals(const PhantomSpec& spec, const PhantomTraces& traces) {
  const int n = static_cast<int>(traces.chest.values.size());
  SurrogateMatrix S(2, n);
  for (int t = 0; t < n; ++t) {
    S(0, t) = traces.chest.values[t];
    S(1, t) = traces.diaphragm.sample(t * traces.chest.dt - spec.traces.delay);
  }
  return S;
}

ControlGrid gt_motion(const PhantomSpec& spec, const PhantomTraces& traces, const MotionModel& model, int t) {
  if (t < 0 || t >= static_cast<int>(traces.chest.values.size())) {
    throw RangeError("gt_motion: timepoint " + std::to_string(t) + " out of range");
  }
  SurrogateMatrix S(2, 1);
  S(0, 0) = traces.chest.values[t];
  S(1, 0) = traces.diaphragm.sample(t * traces.chest.dt - spec.traces.delay);
  return compose_motion(S, model, 0);
}

ControlGrid gt_motion(const PhantomSpec& spec, int t) {
  return gt_motion(spec, make_traces(spec), gt_model(spec), t);
}

std::vector<double> detect_peaks(const RespTrace& trace) {
  const auto& v = trace.values;
  std::vector<double> peaks;
  if (v.size() < 3) return peaks;
  const auto [mn, mx] = std::minmax_element(v.begin(), v.end());
  const double threshold = *mn + 0.3 * (*mx - *mn);
  for (std::size_t i = 1; i + 1 < v.size(); ++i) {
    if (v[i] > v[i - 1] && v[i] >= v[i + 1] && v[i] > threshold) {
      const double denom = v[i - 1] - 2.0 * v[i] + v[i + 1];
      double delta = denom != 0.0 ? 0.5 * (v[i - 1] - v[i + 1]) / denom : 0.0;
      delta = std::clamp(delta, -0.5, 0.5);
      peaks.push_back(static_cast<double>(i) + delta);
    }
  }
  return peaks;
}

std::vector<double> compute_phases(const RespTrace& trace, int bins) {
  trace.validate();
  if (bins < 2) throw ArgumentError("compute_phases: need at least two bins");
  const auto peaks = detect_peaks(trace);
  if (peaks.size() < 2) throw DegenerateSignalError("compute_phases: fewer than two breath peaks detected");
  std::vector<double> out(trace.values.size());
  for (std::size_t s = 0; s < out.size(); ++s) {
    const double x = static_cast<double>(s);
    std::size_t k = 0;
    while (k + 2 < peaks.size() && x >= peaks[k + 1]) ++k;
    double start = peaks[k], len = peaks[k + 1] - peaks[k];
    if (x >= peaks.back()) {
      start = peaks.back();
      len = peaks.back() - peaks[peaks.size() - 2];
    }
    double ph = bins * (x - start) / len;
    ph = std::fmod(ph, static_cast<double>(bins));
    if (ph < 0.0) ph += bins;
    if (ph >= bins) ph = 0.0;
    out[s] = ph;
  }
  return out;
}

int phase_bin(double phase, int bins) {
  int b = static_cast<int>(std::lround(phase)) % bins;
  if (b < 0) b += bins;
  return b;
}

std::vector<std::array<int, 2>> lung_columns(const PhantomSpec& spec, double shrink) {
  const auto& a = spec.anatomy;
  const Grid3& g = spec.grid;
  std::vector<std::array<int, 2>> cols;
  if (a.lung_ax <= 0.0 || a.lung_ay <= 0.0) return cols;
  for (int j = 0; j < g.dims[1]; ++j) {
    for (int i = 0; i < g.dims[0]; ++i) {
      const Vec3 p = g.point(i, j, 0);
      for (double cx : {a.torso_cx - a.lung_offset_x, a.torso_cx + a.lung_offset_x}) {
        const double rx = (p.x - cx) / (shrink * a.lung_ax);
        const double ry = (p.y - a.lung_cy) / (shrink * a.lung_ay);
        if (rx * rx + ry * ry <= 1.0) {
          cols.push_back({i, j});
          break;
        }
      }
    }
  }
  return cols;
}

void AcquisitionSchedule::validate(const Grid3& grid) const {
  for (std::size_t n = 0; n < entries.size(); ++n) {
    const auto& e = entries[n];
    if (e.t != static_cast<int>(n)) throw ScheduleError("schedule timepoints must be 0..N-1 in order");
    if (e.z_lo < 0 || e.z_hi < e.z_lo || e.z_hi >= grid.dims[2]) {
      throw ScheduleError("schedule slab of timepoint " + std::to_string(e.t) + " outside the grid");
    }
    if (!std::isfinite(e.phase) || e.phase < 0.0) throw ScheduleError("invalid phase label");
  }
}

void AcquisitionSchedule::check_tiling(const Grid3& grid) const {
  std::vector<char> hit(static_cast<std::size_t>(grid.dims[2]), 0);
  for (const auto& e : entries) {
    for (int z = std::max(0, e.z_lo); z <= std::min(e.z_hi, grid.dims[2] - 1); ++z) hit[z] = 1;
  }
  for (int z = 0; z < grid.dims[2]; ++z) {
    if (!hit[z]) throw ScheduleError("schedule never acquires slice " + std::to_string(z));
  }
}

AcquisitionSchedule make_schedule(const PhantomSpec& spec, std::span<const double> phases) {
  spec.validate();
  const int n = spec.traces.timepoints;
  const int cp = spec.acquisition.couch_positions;
  const int nz = spec.grid.dims[2];
  if (phases.size() != static_cast<std::size_t>(n)) throw ArgumentError("make_schedule: one phase per timepoint");
  const double dwell = (static_cast<double>(n) / cp) * spec.traces.dt;
  if (dwell < spec.traces.base_period) {
    throw ScheduleError("couch dwell " + detail::fmt_double(dwell) + " s is shorter than one breath period");
  }
  AcquisitionSchedule s;
  for (int t = 0; t < n; ++t) {
    ScheduleEntry e;
    e.t = t;
    e.couch = static_cast<int>(static_cast<long long>(t) * cp / n);
    e.z_lo = e.couch * nz / cp;
    e.z_hi = (e.couch + 1) * nz / cp - 1;
    e.phase = phases[t];
    s.entries.push_back(e);
  }
  return s;
}

AcquisitionSchedule read_schedule_csv(const std::filesystem::path& path) {
  const auto [header, rows] = detail::read_csv(path);
  const std::vector<std::string> expected{"t", "couch", "z_lo", "z_hi", "phase"};
  if (header != expected) throw FormatError(path.string() + ": expected header t,couch,z_lo,z_hi,phase");
  AcquisitionSchedule s;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const std::string where = path.string() + " row " + std::to_string(r + 2);
    if (rows[r].size() != expected.size()) throw FormatError(where + ": wrong column count");
    auto as_int = [&](const std::string& f) {
      const double v = detail::parse_double(f, where);
      if (v != std::floor(v)) throw FormatError(where + ": expected an integer, got " + f);
      return static_cast<int>(v);
    };
    ScheduleEntry e;
    e.t = as_int(rows[r][0]);
    e.couch = as_int(rows[r][1]);
    e.z_lo = as_int(rows[r][2]);
    e.z_hi = as_int(rows[r][3]);
    e.phase = detail::parse_double(rows[r][4], where);
    s.entries.push_back(e);
  }
  return s;
}

void write_schedule_csv(const AcquisitionSchedule& schedule, const std::filesystem::path& path) {
  std::string text = "t,couch,z_lo,z_hi,phase\n";
  for (const auto& e : schedule.entries) {
    text += std::to_string(e.t) + "," + std::to_string(e.couch) + "," + std::to_string(e.z_lo) + "," +
            std::to_string(e.z_hi) + "," + detail::fmt_double(e.phase) + "\n";
  }
  detail::write_text(path, text);
}

RespTrace read_trace_csv(const std::filesystem::path& path) {
  const auto [header, rows] = detail::read_csv(path);
  if (header != std::vector<std::string>{"t_seconds", "value"}) {
    throw FormatError(path.string() + ": expected header t_seconds,value");
  }
  if (rows.size() < 2) throw FormatError(path.string() + ": need at least two samples");
  RespTrace tr;
  std::vector<double> times;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const std::string where = path.string() + " row " + std::to_string(r + 2);
    if (rows[r].size() != 2) throw FormatError(where + ": wrong column count");
    times.push_back(detail::parse_double(rows[r][0], where));
    tr.values.push_back(detail::parse_double(rows[r][1], where));
  }
  tr.dt = times[1] - times[0];
  if (!(tr.dt > 0.0)) throw FormatError(path.string() + ": sample times must increase");
  for (std::size_t r = 0; r < times.size(); ++r) {
    if (std::abs(times[r] - (times[0] + r * tr.dt)) > 1e-6 * tr.dt * (1.0 + r)) {
      throw FormatError(path.string() + ": samples must be uniformly spaced");
    }
  }
  try {
    tr.validate();
  } catch (const Error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return tr;
}

void write_trace_csv(const RespTrace& trace, const std::filesystem::path& path) {
  trace.validate();
  std::string text = "t_seconds,value\n";
  for (std::size_t s = 0; s < trace.values.size(); ++s) {
    text += detail::fmt_double(static_cast<double>(s) * trace.dt) + "," + detail::fmt_double(trace.values[s]) + "\n";
  }
  detail::write_text(path, text);
}

Acquisition simulate_acquisition(const PhantomSpec& spec, const PhantomTemplate& tmpl, const PhantomTraces& traces,
                                 const MotionModel& model, const AcquisitionSchedule& schedule) {
  schedule.validate(spec.grid);
  schedule.check_tiling(spec.grid);
  if (!(tmpl.volume.grid == spec.grid)) throw GeometryError("simulate_acquisition: template grid differs from spec");
  const std::size_t n = schedule.entries.size();
  if (n > traces.chest.values.size()) throw ScheduleError("schedule is longer than the breathing traces");
  Acquisition out;
  out.segments.resize(n);
  out.phases.resize(n);
  parallel_for(n, [&](std::size_t s) {
    const auto& e = schedule.entries[s];
    const ControlGrid M = gt_motion(spec, traces, model, e.t);
    Segment like;
    like.parent_grid = spec.grid;
    like.z_lo = e.z_lo;
    like.z_hi = e.z_hi;
    like.t = e.t;
    like.values.assign(like.slab_voxels(), 0.0f);
    out.segments[s] = warp_extract(tmpl.volume, M, like);
    out.phases[s] = e.phase;
  });
  if (spec.acquisition.noise_sigma > 0.0) {
    std::mt19937_64 rng(spec.traces.seed + 0x5bd1e995ULL);
    std::normal_distribution<double> noise(0.0, spec.acquisition.noise_sigma);
    for (auto& seg : out.segments) {
      for (float& v : seg.values) v = static_cast<float>(v + noise(rng));
    }
  }
  return out;
}

Volume gt_frame(const PhantomSpec& spec, const PhantomTemplate& tmpl, const PhantomTraces& traces,
                const MotionModel& model, int t) {
  return warp_volume(tmpl.volume, gt_motion(spec, traces, model, t));
}

SortedPhases sort_4dct(std::span<const Segment> segments, std::span<const double> phases, int bins) {
  if (segments.empty()) throw ArgumentError("sort_4dct: no segments");
  if (bins < 2) throw ArgumentError("sort_4dct: need at least two bins");
  const Grid3& grid = segments.front().parent_grid;
  // Couch positions are the distinct slabs, ordered by z.
  std::map<std::pair<int, int>, std::vector<std::size_t>> slabs;
  for (std::size_t s = 0; s < segments.size(); ++s) {
    const auto& seg = segments[s];
    if (!(seg.parent_grid == grid)) throw GeometryError("sort_4dct: segments use different grids");
    if (seg.t < 0 || static_cast<std::size_t>(seg.t) >= phases.size()) {
      throw RangeError("sort_4dct: no phase label for timepoint " + std::to_string(seg.t));
    }
    slabs[{seg.z_lo, seg.z_hi}].push_back(s);
  }
  SortedPhases out;
  out.chosen.assign(static_cast<std::size_t>(bins), std::vector<int>(slabs.size(), -1));
  for (int b = 0; b < bins; ++b) {
    Volume vol(grid, kAirHU);
    std::vector<char> covered(static_cast<std::size_t>(grid.dims[2]), 0);
    int couch = 0;
    for (const auto& [range, members] : slabs) {
      std::size_t best = members.front();
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t s : members) {
        double d = std::fmod(std::abs(phases[segments[s].t] - b), static_cast<double>(bins));
        d = std::min(d, bins - d);
        if (d < best_d || (d == best_d && segments[s].t < segments[best].t)) {
          best_d = d;
          best = s;
        }
      }
      if (best_d > 0.5) out.gaps.push_back({b, couch, segments[best].t});
      out.chosen[b][couch] = segments[best].t;
      insert_segment(vol, segments[best]);
      for (int z = range.first; z <= range.second; ++z) covered[z] = 1;
      ++couch;
    }
    for (int z = 0; z < grid.dims[2]; ++z) {
      if (!covered[z]) throw ScheduleError("sort_4dct: slice " + std::to_string(z) + " is never acquired");
    }
    out.volumes.push_back(std::move(vol));
  }
  return out;
}

}  // namespace motion4d
