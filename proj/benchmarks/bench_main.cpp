#include <benchmark/benchmark.h>

#include "motion4d/hypergrad.hpp"
#include "motion4d/mcir.hpp"
#include "motion4d/phantom.hpp"
#include "motion4d/pipeline.hpp"

using namespace motion4d;

namespace {

// Default phantom downsampled by `factor`, with the true motion refit to the
// level lattice and one surrogate row taken from the chest trace.
struct Setup {
  Volume I0;
  SurrogateMatrix S;
  MotionModel C;
  std::vector<Segment> segs;
};

const Setup& setup(int level) {
  static Setup levels[3];
  static bool ready[3] = {};
  if (!ready[level]) {
    static const PhantomSpec spec;
    static const PhantomTemplate tmpl = build_template(spec);
    static const PhantomTraces traces = make_traces(spec);
    static const MotionModel model = gt_model(spec);
    static const Acquisition acq =
        simulate_acquisition(spec, tmpl, traces, model, make_schedule(spec, compute_phases(traces.chest)));
    const Dims3 factors[3] = {{4, 4, 2}, {2, 2, 1}, {1, 1, 1}};
    Setup& s = levels[level];
    Dims3 used{};
    s.segs = level_segments(acq.segments, factors[level], &used);
    s.I0 = downsample(tmpl.volume, used);
    const ControlGrid lattice = level_lattice(spec.grid, s.I0.grid, spec.motion.knot_spacing);
    s.S = gt_signals(spec, traces);
    s.C.modes.clear();
    for (const auto& mode : model.modes) s.C.modes.push_back(refit_control_grid(mode, lattice));
    ready[level] = true;
  }
  return levels[level];
}

void BM_Warp(benchmark::State& state) {
  const Setup& s = setup(static_cast<int>(state.range(0)));
  const ControlGrid m = compose_motion(s.S, s.C, 0);
  for (auto _ : state) benchmark::DoNotOptimize(warp_volume(s.I0, m));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(s.I0.grid.voxel_count()));
}

void BM_ObjectiveAndGradient(benchmark::State& state) {
  const Setup& s = setup(static_cast<int>(state.range(0)));
  TermRequest req;
  req.gradient = true;
  for (auto _ : state) benchmark::DoNotOptimize(evaluate_timepoints(s.I0, s.S, s.C, s.segs, req));
}

void BM_FitStep(benchmark::State& state) {
  const Setup& s = setup(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(fit_step(FitState{}, s.I0, s.S, s.C, s.segs));
}

void BM_McirStep(benchmark::State& state) {
  const Setup& s = setup(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(mcir_step(s.I0, s.S, s.C, s.segs, ReconState{}));
}

}  // namespace

BENCHMARK(BM_Warp)->DenseRange(0, 2)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ObjectiveAndGradient)->DenseRange(0, 1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_FitStep)->DenseRange(0, 1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_McirStep)->DenseRange(0, 1)->Unit(benchmark::kMillisecond);
BENCHMARK_MAIN();
