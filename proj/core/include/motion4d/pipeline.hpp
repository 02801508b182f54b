#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "motion4d/hypergrad.hpp"
#include "motion4d/mcir.hpp"
#include "motion4d/surrmodel.hpp"

namespace motion4d {

enum class SurrogateMode { driven, free, optimized };

const char* to_string(SurrogateMode mode);
SurrogateMode parse_mode(const std::string& text);

struct PipelineConfig {
  SurrogateMode mode = SurrogateMode::optimized;
  std::vector<Dims3> levels{{4, 4, 2}, {2, 2, 1}, {1, 1, 1}};  // coarse to fine
  int max_alternations = 6;
  int max_inner_iters = 5;
  double alpha = 0.02;
  bool precondition = true;
  bool update_every_iteration = true;  // false: one surrogate update per fit run
  int max_halvings = 4;
  double tol_f = 1e-4;
  std::uint64_t seed = 0;
  int num_signals = 2;  // free mode: 1 = cos only, 2 = cos and sin
  int phase_bins = 10;
  // Knot spacing in mm; unset = four voxels of the coarsest level.
  std::optional<Vec3> knot_spacing;
  LineSearchOptions line_search;

  // Throws ConfigError.
  void validate() const;
};

PipelineConfig read_pipeline_config(const std::filesystem::path& path);
void write_pipeline_config(const PipelineConfig& cfg, const std::filesystem::path& path);

struct PipelineInputs {
  std::vector<Segment> segments;           // full resolution, any order
  std::optional<SurrogateMatrix> signals;  // initial/fixed surrogates (driven, optimized)
  std::vector<double> phases;              // per-timepoint phase labels (free mode)
  std::vector<Volume> phase_volumes;       // sorted 4DCT used to initialize I0, optional
  int timepoints = 0;
};

struct TraceEntry {
  int level = 0;
  int alternation = 0;
  std::string stage;  // "fit", "surrogates" or "mcir"
  int iteration = 0;
  double objective = 0.0;
  double step = 0.0;
  double alpha = 0.0;
  bool accepted = false;
  std::vector<double> signal_sd;
};

struct PipelineResult {
  Volume I0;
  MotionModel C;
  SurrogateMatrix S;
  Mask coverage;
  std::vector<TraceEntry> trace;
  std::vector<std::vector<double>> level_objectives;  // objective after each alternation, per level
  Vec3 knot_spacing;
};

using ProgressFn = std::function<void(const TraceEntry&)>;

// Throws ConfigError when the mode's inputs are missing or inconsistent.
PipelineResult run_pipeline(const PipelineConfig& cfg, const PipelineInputs& inputs, const ProgressFn& progress = {});

// Default knot spacing: four voxels of the coarsest level.
Vec3 default_knot_spacing(const Grid3& full, const std::vector<Dims3>& levels);

// The segments of one pyramid level. Falls back to no z reduction when some
// slab is not aligned with the z factor.
std::vector<Segment> level_segments(std::span<const Segment> segs, const Dims3& factor, Dims3* used = nullptr);

// Lattice for a pyramid level: knots anchored at the full-resolution origin so
// every level shares them.
ControlGrid level_lattice(const Grid3& full, const Grid3& level, const Vec3& spacing);

// I0 warped by compose_motion(S, C, t) for each t.
std::vector<Volume> export_frames(const PipelineResult& result, std::span<const int> timepoints);

struct ExtremePair {
  int deep = 0;
  int shallow = 0;
  int orientation = 1;  // sign applied to signal 1
};

// Among timepoints labelled end-inhale (phase bin 0), the largest and
// smallest oriented first signal. The orientation makes larger values move
// the model further along its mean superior-inferior inhalation direction.
ExtremePair find_extreme_inhalation(const SurrogateMatrix& S, const MotionModel& C, std::span<const double> phases,
                                    int bins = 10);

void write_objective_trace_csv(const std::vector<TraceEntry>& trace, const std::filesystem::path& path);

}  // namespace motion4d
