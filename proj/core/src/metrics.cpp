#include "motion4d/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>

#include "io_detail.hpp"
#include "motion4d/parallel.hpp"

namespace motion4d {

namespace {

void same_grid(const Grid3& a, const Grid3& b, const char* what) {
  if (!(a == b)) throw GeometryError(std::string(what) + ": grids differ");
}

}  // namespace

double dsc(const Mask& a, const Mask& b) {
  same_grid(a.grid, b.grid, "dsc");
  std::size_t na = 0, nb = 0, both = 0;
  for (std::size_t v = 0; v < a.values.size(); ++v) {
    const bool x = a.values[v] != 0, y = b.values[v] != 0;
    na += x;
    nb += y;
    both += x && y;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

Vec3 centroid(const Mask& m) {
  const Grid3& g = m.grid;
  double sx = 0.0, sy = 0.0, sz = 0.0;
  std::size_t n = 0;
  std::size_t v = 0;
  for (int k = 0; k < g.dims[2]; ++k) {
    for (int j = 0; j < g.dims[1]; ++j) {
      for (int i = 0; i < g.dims[0]; ++i, ++v) {
        if (!m.values[v]) continue;
        sx += i;
        sy += j;
        sz += k;
        ++n;
      }
    }
  }
  if (n == 0) throw ArgumentError("centroid of an empty mask");
  const double inv = 1.0 / static_cast<double>(n);
  return {g.origin.x + sx * inv * g.spacing.x, g.origin.y + sy * inv * g.spacing.y,
          g.origin.z + sz * inv * g.spacing.z};
}

double tre_centroid(const Mask& a, const Mask& b) {
  same_grid(a.grid, b.grid, "tre_centroid");
  return (centroid(a) - centroid(b)).norm();
}

double rmse(const Volume& a, const Volume& b, const Mask* region) {
  same_grid(a.grid, b.grid, "rmse");
  if (region) same_grid(a.grid, region->grid, "rmse region");
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t v = 0; v < a.values.size(); ++v) {
    if (region && !region->values[v]) continue;
    const double d = static_cast<double>(a.values[v]) - static_cast<double>(b.values[v]);
    acc += d * d;
    ++n;
  }
  if (n == 0) throw ArgumentError("rmse: empty region");
  return std::sqrt(acc / static_cast<double>(n));
}

Summary summarize(std::span<const double> values) {
  Summary s;
  double sum = 0.0;
  for (double v : values) {
    if (!std::isfinite(v)) continue;
    sum += v;
    ++s.count;
  }
  if (s.count == 0) {
    s.mean = std::numeric_limits<double>::quiet_NaN();
    return s;
  }
  s.mean = sum / s.count;
  if (s.count > 1) {
    double var = 0.0;
    for (double v : values) {
      if (std::isfinite(v)) var += (v - s.mean) * (v - s.mean);
    }
    s.sd = std::sqrt(var / (s.count - 1));
  }
  return s;
}

void write_report_csv(const EvalReport& r, const std::filesystem::path& path) {
  std::string text = "t,dsc,tre_mm,rmse_hu\n";
  auto num = [](double v) { return std::isfinite(v) ? detail::fmt_double(v) : std::string("nan"); };
  for (std::size_t n = 0; n < r.timepoints.size(); ++n) {
    text += std::to_string(r.timepoints[n]) + "," + num(r.dsc[n]) + "," + num(r.tre_mm[n]) + "," + num(r.rmse_hu[n]) +
            "\n";
  }
  detail::write_text(path, text);
}

void write_report_json(std::span<const EvalReport> reports, const std::filesystem::path& path) {
  using detail::json;
  auto summary = [](const Summary& s) {
    json j{{"sd", s.sd}, {"count", s.count}};
    j["mean"] = std::isfinite(s.mean) ? json(s.mean) : json(nullptr);
    return j;
  };
  json out = json::object();
  for (const auto& r : reports) {
    out[r.label] = {{"timepoints", r.timepoints.size()},
                    {"dsc", summary(r.dsc_summary())},
                    {"tre_mm", summary(r.tre_summary())},
                    {"rmse_hu", summary(r.rmse_summary())}};
  }
  detail::write_json(path, out);
}

Box envelope_box(std::span<const Mask> masks, int margin) {
  if (masks.empty()) throw ArgumentError("envelope_box: no masks");
  const Grid3& g = masks.front().grid;
  Box b{{g.dims[0], g.dims[1], g.dims[2]}, {-1, -1, -1}};
  for (const auto& m : masks) {
    same_grid(g, m.grid, "envelope_box");
    std::size_t v = 0;
    for (int k = 0; k < g.dims[2]; ++k) {
      for (int j = 0; j < g.dims[1]; ++j) {
        for (int i = 0; i < g.dims[0]; ++i, ++v) {
          if (!m.values[v]) continue;
          const int p[3] = {i, j, k};
          for (int a = 0; a < 3; ++a) {
            b.lo[a] = std::min(b.lo[a], p[a]);
            b.hi[a] = std::max(b.hi[a], p[a]);
          }
        }
      }
    }
  }
  if (b.hi[0] < 0) throw ArgumentError("envelope_box: all masks are empty");
  for (int a = 0; a < 3; ++a) {
    b.lo[a] = std::max(0, b.lo[a] - margin);
    b.hi[a] = std::min(g.dims[a] - 1, b.hi[a] + margin);
  }
  return b;
}

Mask threshold_in_box(const Volume& vol, const Box& box, float threshold) {
  Mask m(vol.grid);
  for (int k = box.lo[2]; k <= box.hi[2]; ++k) {
    for (int j = box.lo[1]; j <= box.hi[1]; ++j) {
      for (int i = box.lo[0]; i <= box.hi[0]; ++i) {
        if (vol.at(i, j, k) > threshold) m.at(i, j, k) = 1;
      }
    }
  }
  return m;
}

Box tumor_roi(const GroundTruth& gt, const EvalOptions& options) {
  std::vector<Mask> masks(static_cast<std::size_t>(gt.signals.times()));
  parallel_for(masks.size(), [&](std::size_t t) {
    masks[t] = warp_mask(gt.tumor, compose_motion(gt.signals, gt.model, static_cast<int>(t)));
  });
  return envelope_box(masks, options.roi_margin);
}

EvalReport evaluate_frames(const std::string& label, const GroundTruth& gt, std::span<const int> timepoints,
                           const FrameSource& frame, const MaskSource& mask) {
  EvalReport r;
  r.label = label;
  const std::size_t n = timepoints.size();
  r.timepoints.assign(timepoints.begin(), timepoints.end());
  r.dsc.assign(n, 0.0);
  r.tre_mm.assign(n, 0.0);
  r.rmse_hu.assign(n, 0.0);
  for (int t : timepoints) {
    if (t < 0 || t >= gt.signals.times()) throw RangeError("evaluate: timepoint " + std::to_string(t) + " out of range");
  }
  parallel_for(n, [&](std::size_t k) {
    const int t = timepoints[k];
    const ControlGrid gm = compose_motion(gt.signals, gt.model, t);
    const Volume gt_vol = warp_volume(gt.reference, gm);
    const Mask gt_mask = warp_mask(gt.tumor, gm);
    const Volume est = frame(t);
    const Mask est_mask = mask(t, est);
    r.dsc[k] = dsc(est_mask, gt_mask);
    r.tre_mm[k] = est_mask.count() > 0 && gt_mask.count() > 0 ? tre_centroid(est_mask, gt_mask)
                                                               : std::numeric_limits<double>::quiet_NaN();
    r.rmse_hu[k] = rmse(est, gt_vol);
  });
  return r;
}

EvalReport evaluate_run(const std::string& label, const Volume& I0, const SurrogateMatrix& S, const MotionModel& C,
                        const GroundTruth& gt, std::span<const int> timepoints, const EvalOptions& options) {
  same_grid(I0.grid, gt.reference.grid, "evaluate_run");
  const Box roi = tumor_roi(gt, options);
  const Mask tumor = threshold_in_box(I0, roi, options.tumor_threshold);
  return evaluate_frames(
      label, gt, timepoints, [&](int t) { return warp_volume(I0, compose_motion(S, C, t)); },
      [&](int t, const Volume&) { return warp_mask(tumor, compose_motion(S, C, t)); });
}

EvalReport evaluate_sorted(const std::string& label, std::span<const Volume> phase_volumes,
                           std::span<const double> phases, const GroundTruth& gt, std::span<const int> timepoints,
                           const EvalOptions& options) {
  if (phase_volumes.empty()) throw ArgumentError("evaluate_sorted: no phase volumes");
  const int bins = static_cast<int>(phase_volumes.size());
  for (const auto& v : phase_volumes) same_grid(v.grid, gt.reference.grid, "evaluate_sorted");
  const Box roi = tumor_roi(gt, options);
  return evaluate_frames(
      label, gt, timepoints,
      [&](int t) {
        if (t < 0 || static_cast<std::size_t>(t) >= phases.size()) throw RangeError("evaluate_sorted: no phase for t");
        const double p = phases[t];
        int b = static_cast<int>(std::lround(p)) % bins;
        if (b < 0) b += bins;
        return phase_volumes[b];
      },
      [&](int, const Volume& frame) { return threshold_in_box(frame, roi, options.tumor_threshold); });
}

std::vector<double> diaphragm_heights(const Volume& vol, std::span<const std::array<int, 2>> columns,
                                      float threshold) {
  const Grid3& g = vol.grid;
  std::vector<double> h(columns.size(), std::numeric_limits<double>::quiet_NaN());
  for (std::size_t c = 0; c < columns.size(); ++c) {
    const int i = columns[c][0], j = columns[c][1];
    if (i < 0 || j < 0 || i >= g.dims[0] || j >= g.dims[1]) throw RangeError("diaphragm_heights: column outside grid");
    for (int k = g.dims[2] - 2; k >= 0; --k) {
      const double above = vol.at(i, j, k);
      const double below = vol.at(i, j, k + 1);
      if (above < threshold && below >= threshold) {
        h[c] = k + (threshold - above) / (below - above);
        break;
      }
    }
  }
  return h;
}

double diaphragm_step(const Volume& vol, std::span<const std::array<int, 2>> columns, float threshold) {
  const auto h = diaphragm_heights(vol, columns, threshold);
  std::map<std::pair<int, int>, double> at;
  for (std::size_t c = 0; c < columns.size(); ++c) {
    if (std::isfinite(h[c])) at[{columns[c][0], columns[c][1]}] = h[c];
  }
  double step = 0.0;
  for (const auto& [ij, v] : at) {
    for (const auto& nb : {std::pair{ij.first + 1, ij.second}, std::pair{ij.first, ij.second + 1}}) {
      auto it = at.find(nb);
      if (it != at.end()) step = std::max(step, std::abs(it->second - v));
    }
  }
  return step;
}

}  // namespace motion4d
