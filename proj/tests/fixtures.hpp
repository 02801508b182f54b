#pragma once

#include <random>
#include <vector>

#include "motion4d/surrmodel.hpp"
#include "oracles.hpp"

namespace test {

// Small synthetic problem: a smooth 12^3 image observed through a random
// two-mode motion model, one 4-slice slab per timepoint.
struct World {
  motion4d::Volume I0;
  motion4d::MotionModel truth;
  motion4d::MotionModel start;  // perturbed truth
  motion4d::SurrogateMatrix S;
  std::vector<motion4d::Segment> segs;
};

inline World make_world(std::uint64_t seed, int timepoints = 3, double sigma = 1.5, double perturb = 0.5) {
  using namespace motion4d;
  const Grid3 g{{12, 12, 12}, {2, 2, 3}, {0, 0, 0}};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  World w;
  w.I0 = oracle::smooth_volume(g, 0.1 * static_cast<double>(seed % 7));
  const ControlGrid lattice = make_control_grid(g, {8, 8, 9});
  w.truth = zero_model(lattice, 2);
  for (auto& m : w.truth.modes) oracle::randomize(m, rng, sigma);
  w.start = w.truth;
  for (auto& m : w.start.modes) {
    for (auto& d : m.disp) d += Vec3{n(rng), n(rng), n(rng)} * perturb;
  }
  w.S = SurrogateMatrix(2, timepoints);
  for (int t = 0; t < timepoints; ++t) {
    for (int i = 0; i < 2; ++i) w.S(i, t) = n(rng);
  }
  for (int t = 0; t < timepoints; ++t) {
    const int z0 = (4 * t) % 12;
    w.segs.push_back(oracle::observed_segment(w.I0, oracle::compose(w.S, w.truth, t), z0, z0 + 3, t));
  }
  return w;
}

}  // namespace test
