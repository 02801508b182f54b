#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "motion4d/surrmodel.hpp"
#include "motion4d/volgrid.hpp"

namespace motion4d {

// 2|A and B| / (|A| + |B|); 1 when both masks are empty.
double dsc(const Mask& a, const Mask& b);

// Voxel-center centroid of a mask, in mm. Throws ArgumentError when empty.
Vec3 centroid(const Mask& m);

// Distance between the centroids of a and b, in mm.
double tre_centroid(const Mask& a, const Mask& b);

// Root-mean-square difference over `region` (whole volume when null).
double rmse(const Volume& a, const Volume& b, const Mask* region = nullptr);

struct Summary {
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation, 0 for a single value
  int count = 0;    // finite values used
};

// Ignores non-finite entries.
Summary summarize(std::span<const double> values);

struct EvalReport {
  std::string label;
  std::vector<int> timepoints;
  std::vector<double> dsc;
  std::vector<double> tre_mm;   // NaN when the estimated mask is empty
  std::vector<double> rmse_hu;

  Summary dsc_summary() const { return summarize(dsc); }
  Summary tre_summary() const { return summarize(tre_mm); }
  Summary rmse_summary() const { return summarize(rmse_hu); }
};

void write_report_csv(const EvalReport& report, const std::filesystem::path& path);
void write_report_json(std::span<const EvalReport> reports, const std::filesystem::path& path);

// Inclusive voxel box.
struct Box {
  Dims3 lo{0, 0, 0};
  Dims3 hi{0, 0, 0};
};

// Bounding box of the union of masks, grown by `margin` voxels and clipped.
Box envelope_box(std::span<const Mask> masks, int margin);

// Voxels of `vol` inside `box` above `threshold`.
Mask threshold_in_box(const Volume& vol, const Box& box, float threshold);

// Ground truth of a simulated acquisition: dynamic frames are the template
// warped by compose_motion(signals, model, t).
struct GroundTruth {
  Volume reference;
  Mask tumor;
  MotionModel model;
  SurrogateMatrix signals;
};

struct EvalOptions {
  float tumor_threshold = -370.0f;  // HU separating lung from tumor
  int roi_margin = 2;                // voxels around the ground-truth tumor envelope
};

// Tumor search region shared by every method: the envelope of the
// ground-truth tumor over all timepoints.
Box tumor_roi(const GroundTruth& gt, const EvalOptions& options = {});

// Per-timepoint comparison of estimated frames and tumor masks against the
// ground truth.
using FrameSource = std::function<Volume(int t)>;
using MaskSource = std::function<Mask(int t, const Volume& frame)>;
EvalReport evaluate_frames(const std::string& label, const GroundTruth& gt, std::span<const int> timepoints,
                           const FrameSource& frame, const MaskSource& mask);

// Estimated frames: I0 warped by each M_t. The tumor is segmented once in I0
// (threshold inside the ROI) and warped along with it.
EvalReport evaluate_run(const std::string& label, const Volume& I0, const SurrogateMatrix& S, const MotionModel& C,
                        const GroundTruth& gt, std::span<const int> timepoints, const EvalOptions& options = {});

// Sorted 4DCT baseline: the frame for t is the phase volume of t's bin and its
// tumor is segmented directly in that volume.
EvalReport evaluate_sorted(const std::string& label, std::span<const Volume> phase_volumes,
                           std::span<const double> phases, const GroundTruth& gt, std::span<const int> timepoints,
                           const EvalOptions& options = {});

// Height (fractional slice index) of the first tissue-to-lung crossing met
// when scanning each column upward from the last slice; NaN if none.
std::vector<double> diaphragm_heights(const Volume& vol, std::span<const std::array<int, 2>> columns,
                                      float threshold = -380.0f);

// Largest height difference (slices) between 4-neighbouring columns that
// both have a crossing.
double diaphragm_step(const Volume& vol, std::span<const std::array<int, 2>> columns, float threshold = -380.0f);

}  // namespace motion4d
