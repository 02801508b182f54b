#include <random>

#include "doctest.h"
#include "fixtures.hpp"
#include "motion4d/mcir.hpp"
#include "oracles.hpp"

using namespace motion4d;

TEST_CASE("warp-extract matches the oracle warp") {
  const test::World w = test::make_world(1);
  for (const auto& seg : w.segs) {
    const ControlGrid m = compose_motion(w.S, w.start, seg.t);
    const Segment a = warp_extract(w.I0, m, seg);
    const Segment b = oracle::observed_segment(w.I0, m, seg.z_lo, seg.z_hi, seg.t);
    for (std::size_t v = 0; v < a.values.size(); ++v) CHECK(a.values[v] == doctest::Approx(b.values[v]).epsilon(1e-5));
  }
}

TEST_CASE("scatter is the transpose of warp-extract") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0, 1);
  for (const Dims3 f : {Dims3{1, 1, 1}, Dims3{2, 2, 1}, Dims3{4, 4, 2}}) {
    const Grid3 g = downsample_grid(Grid3{{24, 24, 12}, {2, 2, 3}, {0, 0, 0}}, f);
    ControlGrid cg = make_control_grid(g, {16, 16, 18});
    oracle::randomize(cg, rng, 6.0);  // large enough to push samples off the grid
    Volume x(g);
    for (auto& v : x.values) v = static_cast<float>(n(rng));
    Segment y = oracle::blank_segment(g, 1, g.dims[2] - 2, 0);
    for (auto& v : y.values) v = static_cast<float>(n(rng));
    const Segment ax = warp_extract(x, cg, y, 0.0f);
    std::vector<double> aty(g.voxel_count(), 0.0);
    adjoint_scatter(y, cg, aty, {});
    double lhs = 0, rhs = 0, scale = 0;
    for (std::size_t v = 0; v < ax.values.size(); ++v) {
      lhs += static_cast<double>(ax.values[v]) * y.values[v];
      scale += std::abs(static_cast<double>(ax.values[v]) * y.values[v]);
    }
    for (std::size_t v = 0; v < aty.size(); ++v) rhs += x.values[v] * aty[v];
    CHECK(std::abs(lhs - rhs) <= 1e-6 * scale);
  }
}

TEST_CASE("scatter weights are the adjoint applied to ones") {
  const test::World w = test::make_world(3);
  const ControlGrid m = compose_motion(w.S, w.start, 1);
  Segment ones = w.segs[1];
  std::fill(ones.values.begin(), ones.values.end(), 1.0f);
  std::vector<double> a(w.I0.grid.voxel_count(), 0.0), wt(w.I0.grid.voxel_count(), 0.0);
  adjoint_scatter(ones, m, a, wt);
  for (std::size_t v = 0; v < a.size(); ++v) CHECK(a[v] == doctest::Approx(wt[v]).epsilon(1e-12));
  Segment other = ones;
  other.parent_grid.dims[0] = 11;
  std::vector<double> small(10);
  CHECK_THROWS_AS(adjoint_scatter(other, m, small, {}), GeometryError);
}

TEST_CASE("reconstruction steps never increase the objective and approach the truth") {
  const test::World w = test::make_world(4);
  Volume I0(w.I0.grid, 0.0f);
  ReconState state;
  double f = objective(I0, w.S, w.truth, w.segs);
  for (int k = 0; k < 15; ++k) {
    auto r = mcir_step(I0, w.S, w.truth, w.segs, state);
    CHECK(r.objective_before == doctest::Approx(f));
    CHECK(r.objective_after <= r.objective_before);
    state = r.state;
    if (!r.accepted) break;
    CHECK(r.objective_after == doctest::Approx(objective(r.I0, w.S, w.truth, w.segs)).epsilon(1e-9));
    I0 = r.I0;
    f = r.objective_after;
  }
  CHECK(f < 1e-2 * state.history.front());
}

TEST_CASE("reconstruction run reports coverage") {
  const test::World w = test::make_world(5);
  const auto run = mcir_run(w.I0, w.S, w.truth, w.segs, 3);
  const Mask cov = coverage_mask(w.I0.grid, w.S, w.truth, w.segs);
  CHECK(run.coverage.values == cov.values);
  CHECK(cov.count() > 0);
  CHECK_THROWS_AS(mcir_run(w.I0, w.S, w.truth, w.segs, 0), ArgumentError);
}

TEST_CASE("zero-motion scatter initialization stacks the slabs") {
  const Grid3 g{{4, 4, 6}, {1, 1, 1}, {}};
  const Volume v = oracle::smooth_volume(g);
  std::vector<Segment> segs{extract_segment(v, 0, 1, 0), extract_segment(v, 1, 3, 1)};
  const Volume init = scatter_init(g, segs, -7.0f);
  CHECK(init.at(2, 2, 0) == v.at(2, 2, 0));
  CHECK(init.at(2, 2, 1) == v.at(2, 2, 1));
  CHECK(init.at(2, 2, 3) == v.at(2, 2, 3));
  CHECK(init.at(2, 2, 5) == -7.0f);
}
