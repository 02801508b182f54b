#include <random>

#include "doctest.h"
#include "motion4d/metrics.hpp"
#include "oracles.hpp"
#include "temp_dir.hpp"

using namespace motion4d;

namespace {

const Grid3 kGrid{{10, 9, 8}, {2, 2, 3}, {1, 0, -3}};

Mask random_mask(std::mt19937_64& rng, double p) {
  Mask m(kGrid);
  std::bernoulli_distribution b(p);
  for (auto& v : m.values) v = b(rng);
  return m;
}

Mask ball(const Vec3& c, double r) {
  Mask m(kGrid);
  for (int k = 0; k < 8; ++k)
    for (int j = 0; j < 9; ++j)
      for (int i = 0; i < 10; ++i) m.at(i, j, k) = (kGrid.point(i, j, k) - c).norm() <= r;
  return m;
}

}  // namespace

TEST_CASE("dice and centroid agree with brute force") {
  std::mt19937_64 rng(1);
  for (int n = 0; n < 10; ++n) {
    const Mask a = random_mask(rng, 0.3), b = random_mask(rng, 0.5);
    CHECK(dsc(a, b) == doctest::Approx(oracle::dice(a, b)).epsilon(1e-12));
    CHECK((centroid(a) - oracle::centroid(a)).norm() < 1e-9);
    CHECK(tre_centroid(a, b) == doctest::Approx((oracle::centroid(a) - oracle::centroid(b)).norm()));
  }
  CHECK(dsc(Mask(kGrid), Mask(kGrid)) == 1.0);
  CHECK_THROWS_AS(centroid(Mask(kGrid)), ArgumentError);
  Mask other(Grid3{{3, 3, 3}, {1, 1, 1}, {}});
  CHECK_THROWS_AS(dsc(other, Mask(kGrid)), GeometryError);
}

TEST_CASE("shifted ball: dice of identical masks is 1 and TRE is the shift") {
  const Mask a = ball({10, 8, 9}, 5);
  const Mask b = ball({14, 8, 9}, 5);
  CHECK(dsc(a, a) == 1.0);
  CHECK(tre_centroid(a, b) == doctest::Approx(4.0));
  CHECK(dsc(a, b) < 1.0);
}

TEST_CASE("rmse over a region") {
  Volume a(kGrid, 1.0f), b(kGrid, 1.0f);
  b.at(0, 0, 0) = 4.0f;
  const double n = static_cast<double>(kGrid.voxel_count());
  CHECK(rmse(a, b) == doctest::Approx(std::sqrt(9.0 / n)));
  Mask r(kGrid);
  r.at(0, 0, 0) = 1;
  r.at(1, 0, 0) = 1;
  CHECK(rmse(a, b, &r) == doctest::Approx(std::sqrt(4.5)));
  CHECK(rmse(a, a) == 0.0);
}

TEST_CASE("summaries skip non-finite values") {
  const std::vector<double> v{1.0, 2.0, std::nan(""), 3.0};
  const Summary s = summarize(v);
  CHECK(s.count == 3);
  CHECK(s.mean == doctest::Approx(2.0));
  CHECK(s.sd == doctest::Approx(1.0));
  const std::vector<double> one{5.0};
  CHECK(summarize(one).sd == 0.0);
}

TEST_CASE("envelope box and thresholding") {
  const Mask a = ball({10, 8, 9}, 3), b = ball({14, 8, 9}, 3);
  const Mask ms[] = {a, b};
  const Box box = envelope_box(ms, 1);
  CHECK(box.lo[0] == 2);  // x = 7..17 mm -> voxels 3..8, grown by one
  CHECK(box.hi[0] == 9);
  Volume v(kGrid, -800.0f);
  v.at(5, 4, 4) = 60.0f;
  v.at(0, 0, 0) = 60.0f;  // outside the box
  const Mask t = threshold_in_box(v, box, -370.0f);
  CHECK(t.count() == 1);
  CHECK(t.at(5, 4, 4) == 1);
}

TEST_CASE("ground truth evaluated against itself is perfect") {
  GroundTruth gt;
  gt.reference = Volume(kGrid, -800.0f);
  gt.tumor = ball({10, 8, 9}, 4);
  for (std::size_t v = 0; v < gt.tumor.values.size(); ++v) {
    if (gt.tumor.values[v]) gt.reference.values[v] = 60.0f;
  }
  ControlGrid lattice = make_control_grid(kGrid, {8, 8, 9});
  gt.model = zero_model(lattice, 1);
  for (auto& d : gt.model.modes[0].disp) d = {2.0, 0.0, 0.0};
  gt.signals = SurrogateMatrix(1, 3);
  gt.signals(0, 1) = 1.0;
  gt.signals(0, 2) = 2.0;
  const std::vector<int> ts{0, 1, 2};
  const EvalReport r = evaluate_run("gt", gt.reference, gt.signals, gt.model, gt, ts);
  for (int t = 0; t < 3; ++t) {
    CHECK(r.dsc[t] == 1.0);
    CHECK(r.tre_mm[t] == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(r.rmse_hu[t] == 0.0);
  }
  // A static estimate is wrong by the motion it missed.
  MotionModel none = zero_model(lattice, 1);
  const EvalReport s = evaluate_run("static", gt.reference, gt.signals, none, gt, ts);
  CHECK(s.tre_mm[2] == doctest::Approx(4.0));
  CHECK(s.dsc[0] == 1.0);
}

TEST_CASE("reports are written deterministically") {
  test::TempDir dir;
  EvalReport r;
  r.label = "m";
  r.timepoints = {0, 1};
  r.dsc = {0.9, 0.8};
  r.tre_mm = {1.0, std::nan("")};
  r.rmse_hu = {10.0, 12.5};
  write_report_csv(r, dir / "a.csv");
  write_report_csv(r, dir / "b.csv");
  CHECK(test::read_text(dir / "a.csv") == test::read_text(dir / "b.csv"));
  CHECK(test::read_text(dir / "a.csv").rfind("t,dsc,tre_mm,rmse_hu\n", 0) == 0);
  const EvalReport rs[] = {r};
  write_report_json(rs, dir / "r.json");
  CHECK(test::read_text(dir / "r.json").find("\"m\"") != std::string::npos);
}

TEST_CASE("diaphragm height is the interpolated lung-to-tissue crossing") {
  const Grid3 g{{2, 1, 10}, {1, 1, 1}, {}};
  Volume v(g, -800.0f);
  for (int k = 6; k < 10; ++k) v.at(0, 0, k) = 40.0f;
  for (int k = 4; k < 10; ++k) v.at(1, 0, k) = 40.0f;
  v.at(1, 0, 3) = -380.0f;  // exactly on the threshold: crossing at slice 3
  const std::vector<std::array<int, 2>> cols{{0, 0}, {1, 0}};
  const auto h = diaphragm_heights(v, cols);
  CHECK(h[0] == doctest::Approx(5 + 420.0 / 840.0));
  CHECK(h[1] == doctest::Approx(2.0 + 420.0 / 420.0));
  CHECK(diaphragm_step(v, cols) == doctest::Approx(std::abs(h[0] - h[1])));
  const std::vector<std::array<int, 2>> bad{{5, 0}};
  CHECK_THROWS_AS(diaphragm_heights(v, bad), RangeError);
}
