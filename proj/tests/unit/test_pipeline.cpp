#include "doctest.h"
#include "motion4d/pipeline.hpp"
#include "small_phantom.hpp"
#include "temp_dir.hpp"

using namespace motion4d;

namespace {

const test::SmallData& data() {
  static const test::SmallData d = test::small_data();
  return d;
}

PipelineInputs inputs_for(SurrogateMode mode) {
  const auto& d = data();
  PipelineInputs in;
  in.segments = d.acq.segments;
  in.timepoints = d.spec.traces.timepoints;
  in.phases = d.acq.phases;
  if (mode != SurrogateMode::free) {
    in.signals = init_surrogates_signal(d.traces.chest);
  }
  return in;
}

// Objective entries within each level never increase.
void check_monotone(const PipelineResult& r) {
  int level = -1;
  double last = 0.0;
  for (const auto& e : r.trace) {
    if (e.level != level) {
      level = e.level;
      last = e.objective;
      continue;
    }
    CHECK(e.objective <= last * (1.0 + 1e-12));
    last = e.objective;
  }
}

}  // namespace

TEST_CASE("config validation and round trip") {
  PipelineConfig c;
  CHECK_NOTHROW(c.validate());
  c.levels.clear();
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = PipelineConfig{};
  c.alpha = -0.1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = PipelineConfig{};
  c.num_signals = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  test::TempDir dir;
  c = test::small_config(SurrogateMode::free);
  c.knot_spacing = Vec3{20, 20, 18};
  c.update_every_iteration = false;
  write_pipeline_config(c, dir / "c.json");
  const PipelineConfig r = read_pipeline_config(dir / "c.json");
  CHECK(r.mode == SurrogateMode::free);
  CHECK(r.levels == c.levels);
  CHECK(r.knot_spacing->z == 18);
  CHECK_FALSE(r.update_every_iteration);
  CHECK(r.alpha == c.alpha);
  test::write_text(dir / "bad.json", R"({"mode": "sideways"})");
  CHECK_THROWS_AS(read_pipeline_config(dir / "bad.json"), ConfigError);
  CHECK(parse_mode("driven") == SurrogateMode::driven);
  CHECK(std::string(to_string(SurrogateMode::optimized)) == "optimized");
}

TEST_CASE("pyramid geometry") {
  const Grid3 full{{96, 80, 48}, {2, 2, 3}, {0, 0, 0}};
  const Vec3 ks = default_knot_spacing(full, {{4, 4, 2}, {1, 1, 1}});
  CHECK(ks == Vec3{32, 32, 24});
  const Grid3 coarse = downsample_grid(full, {4, 4, 2});
  const ControlGrid a = level_lattice(full, coarse, ks);
  const ControlGrid b = level_lattice(full, full, ks);
  CHECK(a.cdims == b.cdims);
  CHECK(a.corigin == b.corigin);
  CHECK_NOTHROW(a.validate());

  const Volume v(full, 0.0f);
  std::vector<Segment> segs{extract_segment(v, 0, 5, 0), extract_segment(v, 6, 11, 1)};
  Dims3 used{};
  CHECK(level_segments(segs, {4, 4, 2}, &used).front().z_hi == 2);
  CHECK(used == Dims3{4, 4, 2});
  segs.push_back(extract_segment(v, 12, 14, 2));
  segs.push_back(extract_segment(v, 15, 17, 3));
  level_segments(segs, {4, 4, 2}, &used);
  CHECK(used == Dims3{4, 4, 1});
}

TEST_CASE("missing mode inputs are configuration errors") {
  PipelineInputs in = inputs_for(SurrogateMode::free);
  PipelineConfig c = test::small_config(SurrogateMode::driven);
  CHECK_THROWS_AS(run_pipeline(c, in), ConfigError);
  c.mode = SurrogateMode::free;
  in.phases.clear();
  CHECK_THROWS_AS(run_pipeline(c, in), ConfigError);
}

TEST_CASE("alpha = 0 in optimized mode reproduces the driven fit") {
  PipelineConfig c = test::small_config(SurrogateMode::optimized);
  c.alpha = 0.0;
  c.levels = {{2, 2, 1}};
  c.max_alternations = 1;
  const auto in = inputs_for(SurrogateMode::driven);
  const PipelineResult a = run_pipeline(c, in);
  c.mode = SurrogateMode::driven;
  const PipelineResult b = run_pipeline(c, in);
  CHECK(a.I0.values == b.I0.values);
  CHECK(a.S == b.S);
  for (int i = 0; i < 2; ++i) CHECK(a.C.modes[i].disp == b.C.modes[i].disp);
}

TEST_CASE("free-mode fit decreases the objective monotonically and is deterministic") {
  const PipelineConfig c = test::small_config(SurrogateMode::free);
  const auto in = inputs_for(SurrogateMode::free);
  const PipelineResult r = run_pipeline(c, in);
  check_monotone(r);
  REQUIRE(r.level_objectives.size() == 2);
  const auto& first = r.trace.front();
  CHECK(first.stage == "start");
  CHECK(r.level_objectives[0].back() < first.objective);
  bool updated = false;
  for (const auto& e : r.trace) updated = updated || e.stage == "surrogates";
  CHECK(updated);
  CHECK(r.I0.grid == data().spec.grid);
  CHECK(r.coverage.count() > r.coverage.values.size() / 2);

  const PipelineResult again = run_pipeline(c, in);
  CHECK(again.I0.values == r.I0.values);
  CHECK(again.S == r.S);

  test::TempDir dir;
  write_objective_trace_csv(r.trace, dir / "trace.csv");
  CHECK(test::read_text(dir / "trace.csv").rfind("level,alternation,stage,iteration,objective", 0) == 0);

  const auto frames = export_frames(r, std::vector<int>{0, 5});
  CHECK(frames.size() == 2);
  CHECK_THROWS_AS(export_frames(r, std::vector<int>{120}), RangeError);
}

TEST_CASE("extreme end-inhalation pair follows the oriented first signal") {
  const Grid3 g{{8, 8, 8}, {4, 4, 4}, {}};
  MotionModel C = zero_model(make_control_grid(g, {16, 16, 16}), 1);
  for (auto& d : C.modes[0].disp) d.z = -1.0;  // larger signal moves up (inhale)
  SurrogateMatrix S(1, 6);
  const std::vector<double> phases{0.1, 5.0, 9.8, 5.0, 0.2, 5.0};
  const double v[6] = {2.0, -1.0, 3.0, -1.0, 1.0, -1.0};
  for (int t = 0; t < 6; ++t) S(0, t) = v[t];
  const ExtremePair p = find_extreme_inhalation(S, C, phases);
  CHECK(p.deep == 2);
  CHECK(p.shallow == 4);
  CHECK(p.orientation == 1);
  // Flipping the sign of both factors gives the same motion and the same pair.
  for (auto& d : C.modes[0].disp) d.z = 1.0;
  for (int t = 0; t < 6; ++t) S(0, t) = -v[t];
  const ExtremePair q = find_extreme_inhalation(S, C, phases);
  CHECK(q.deep == 2);
  CHECK(q.shallow == 4);
  CHECK(q.orientation == -1);
}
