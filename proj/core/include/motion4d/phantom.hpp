#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "motion4d/resp_trace.hpp"
#include "motion4d/surrmodel.hpp"

namespace motion4d {

// Analytic thorax. x is left-right, y anterior (small) to posterior, z
// superior (small) to inferior. All lengths in mm.
struct AnatomySpec {
  double torso_cx = 95.0, torso_cy = 79.0;
  double torso_ax = 85.0, torso_ay = 65.0;
  double lung_offset_x = 38.0;  // lung centers sit at torso_cx -/+ offset
  double lung_cy = 79.0;
  double lung_ax = 28.0, lung_ay = 45.0;
  double lung_top_z = 15.0;
  double diaphragm_z = 95.0;     // lower lung surface at the lung rim, y = lung_cy
  double diaphragm_dome = 8.0;   // rise of that surface at the lung center
  double diaphragm_tilt = 0.3;   // dz/dy of the surface
  double spine_cy = 130.0, spine_r = 12.0;
  Vec3 tumor_center{133.0, 79.0, 55.0};
  double tumor_r = 10.0;
  float hu_air = -1000.0f, hu_lung = -800.0f, hu_tissue = 40.0f, hu_bone = 700.0f, hu_tumor = 60.0f;
  int partial_volume_samples = 3;  // per axis; 1 = point sampling at voxel centers

  // Height of the lower lung surface below (x, y) for the lung centered at lung_cx.
  double diaphragm_at(double x, double y, double lung_cx) const;
};

// Ground-truth modes: Gaussian bumps sampled on the knot lattice.
struct MotionSpec {
  Vec3 knot_spacing{32.0, 32.0, 24.0};
  double chest_amplitude = 6.0;  // mm of anterior-posterior displacement per trace unit
  Vec3 chest_center{95.0, 14.0, 60.0};
  Vec3 chest_sigma{60.0, 40.0, 60.0};
  double diaphragm_amplitude = 15.0;  // mm of superior-inferior displacement per trace unit
  Vec3 diaphragm_center{95.0, 79.0, 90.0};
  Vec3 diaphragm_sigma{60.0, 60.0, 40.0};
};

struct TraceSpec {
  std::uint64_t seed = 7;
  int timepoints = 120;
  double dt = 1.0 / 3.0;
  double base_period = 4.0;
  double amplitude_jitter = 0.3;
  double period_jitter = 0.1;
  double diaphragm_extra_jitter = 0.1;  // per-cycle amplitude jitter of the diaphragm relative to the chest
  double delay = 1.0;                   // seconds the diaphragm trace lags
};

struct AcquisitionSpec {
  int couch_positions = 8;
  double noise_sigma = 0.0;  // HU
  int phase_bins = 10;
};

struct PhantomSpec {
  Grid3 grid{{96, 80, 48}, {2.0, 2.0, 3.0}, {0.0, 0.0, 0.0}};
  AnatomySpec anatomy;
  MotionSpec motion;
  TraceSpec traces;
  AcquisitionSpec acquisition;

  // Throws SpecError for structures outside the grid, a tumor radius below
  // two voxels, a negative delay or non-positive trace parameters.
  void validate() const;
};

PhantomSpec read_phantom_spec(const std::filesystem::path& path);
void write_phantom_spec(const PhantomSpec& spec, const std::filesystem::path& path);

// Template volume of the piecewise-constant anatomy, each voxel averaged over
// its footprint, and the tumor mask (voxel centers inside the sphere).
struct PhantomTemplate {
  Volume volume;
  Mask tumor;
};
PhantomTemplate build_template(const PhantomSpec& spec);

// Raised-cosine breath cycles (0 at end-exhale, cycle amplitude at the peak)
// with per-cycle amplitude and period scaled by 1 + U(-jitter, jitter).
RespTrace make_irregular_trace(std::uint64_t seed, int n, double dt, double base_period, double amplitude_jitter,
                               double period_jitter);

struct PhantomTraces {
  RespTrace chest;
  RespTrace diaphragm;  // undelayed
};
PhantomTraces make_traces(const PhantomSpec& spec);

// Ground-truth modes (chest-driven, diaphragm-driven) on the spec's knot lattice.
MotionModel gt_model(const PhantomSpec& spec);

// Ground-truth surrogates: chest(t) and diaphragm(t - delay), clamped at the start.
SurrogateMatrix gt_signals(const PhantomSpec& spec, const PhantomTraces& traces);

// chest(t) C1 + diaphragm(t - delay) C2.
ControlGrid gt_motion(const PhantomSpec& spec, const PhantomTraces& traces, const MotionModel& model, int t);
ControlGrid gt_motion(const PhantomSpec& spec, int t);

// Real-valued phase in [0, bins) per sample: 0 at each detected peak, rising
// linearly to the next peak; extrapolated with the neighbouring cycle length
// before the first and after the last peak.
std::vector<double> compute_phases(const RespTrace& trace, int bins = 10);

// Sample indices of detected peaks.
std::vector<double> detect_peaks(const RespTrace& trace);

int phase_bin(double phase, int bins = 10);

// (i, j) columns inside either lung footprint shrunk by `shrink`; used to
// trace the diaphragm surface.
std::vector<std::array<int, 2>> lung_columns(const PhantomSpec& spec, double shrink = 0.7);

struct ScheduleEntry {
  int t = 0;
  int couch = 0;
  int z_lo = 0;
  int z_hi = 0;
  double phase = 0.0;
};

struct AcquisitionSchedule {
  std::vector<ScheduleEntry> entries;

  // Throws ScheduleError when indices are not 0..N-1 in order or slices are out of range.
  void validate(const Grid3& grid) const;
  // Throws ScheduleError when some slice is never acquired.
  void check_tiling(const Grid3& grid) const;
};

// Equal dwell per couch position; slabs tile the z axis in order.
AcquisitionSchedule make_schedule(const PhantomSpec& spec, std::span<const double> phases);

AcquisitionSchedule read_schedule_csv(const std::filesystem::path& path);
void write_schedule_csv(const AcquisitionSchedule& schedule, const std::filesystem::path& path);

RespTrace read_trace_csv(const std::filesystem::path& path);
void write_trace_csv(const RespTrace& trace, const std::filesystem::path& path);

struct Acquisition {
  std::vector<Segment> segments;
  std::vector<double> phases;
};

// Warps the template by the ground-truth motion at every scheduled timepoint
// and extracts the scheduled slab, optionally adding Gaussian noise.
Acquisition simulate_acquisition(const PhantomSpec& spec, const PhantomTemplate& tmpl, const PhantomTraces& traces,
                                 const MotionModel& model, const AcquisitionSchedule& schedule);

// Ground-truth dynamic volume at timepoint t.
Volume gt_frame(const PhantomSpec& spec, const PhantomTemplate& tmpl, const PhantomTraces& traces,
                const MotionModel& model, int t);

struct SortGap {
  int bin = 0;
  int couch = 0;
  int filled_from_t = 0;  // timepoint used instead
};

struct SortedPhases {
  std::vector<Volume> volumes;             // one per bin
  std::vector<std::vector<int>> chosen;    // [bin][couch] -> timepoint
  std::vector<SortGap> gaps;
};

// Stacks, for every phase bin and couch position, the segment whose phase is
// circularly closest to the bin center. A bin with no segment at a couch
// position is reported as a gap and filled from the nearest phase.
SortedPhases sort_4dct(std::span<const Segment> segments, std::span<const double> phases, int bins = 10);

}  // namespace motion4d
