#include <filesystem>
#include <random>

#include "doctest.h"
#include "motion4d/volgrid.hpp"
#include "oracles.hpp"
#include "temp_dir.hpp"

using namespace motion4d;

TEST_CASE("grid validation rejects empty dims and bad spacing") {
  Grid3 g{{4, 4, 4}, {1, 1, 1}, {}};
  CHECK_NOTHROW(g.validate());
  g.dims[1] = 0;
  CHECK_THROWS_AS(g.validate(), GeometryError);
  g.dims[1] = 4;
  g.spacing.z = -1.0;
  CHECK_THROWS_AS(g.validate(), GeometryError);
  g.spacing.z = std::nan("");
  CHECK_THROWS_AS(g.validate(), GeometryError);
}

TEST_CASE("extract then insert restores the slab") {
  const Grid3 g{{5, 4, 6}, {1, 1, 2}, {}};
  const Volume v = oracle::smooth_volume(g);
  const Segment s = extract_segment(v, 2, 3, 7);
  CHECK(s.slices() == 2);
  CHECK(s.t == 7);
  CHECK(s.values.size() == 40);
  CHECK(s.values[0] == v.at(0, 0, 2));
  CHECK(s.values[39] == v.at(4, 3, 3));
  Volume blank(g, 0.0f);
  insert_segment(blank, s);
  for (int k = 0; k < 6; ++k) {
    const bool in = k == 2 || k == 3;
    CHECK(blank.at(1, 2, k) == (in ? v.at(1, 2, k) : 0.0f));
  }
  CHECK_THROWS(extract_segment(v, 4, 6, 0));
  CHECK_THROWS(extract_segment(v, 3, 2, 0));
}

TEST_CASE("slab grid is shifted to its first slice") {
  const Grid3 g{{3, 3, 8}, {1, 1, 2.5}, {1, 2, 3}};
  const Segment s = oracle::blank_segment(g, 4, 5, 0);
  const Grid3 sg = s.slab_grid();
  CHECK(sg.dims == Dims3{3, 3, 2});
  CHECK(sg.origin.z == doctest::Approx(13.0));
}

TEST_CASE("block-average downsampling including partial edge blocks") {
  const Grid3 g{{5, 3, 3}, {1, 2, 3}, {10, 0, 0}};
  Volume v(g);
  for (std::size_t i = 0; i < v.values.size(); ++i) v.values[i] = static_cast<float>(i);
  const Volume d = downsample(v, {2, 2, 2});
  CHECK(d.grid.dims == Dims3{3, 2, 2});
  CHECK(d.grid.spacing.x == 2.0);
  CHECK(d.grid.spacing.z == 6.0);
  // Block centers: mean of the voxel centers in the block.
  CHECK(d.grid.origin.x == doctest::Approx(10.5));
  for (int K = 0; K < 2; ++K) {
    for (int J = 0; J < 2; ++J) {
      for (int I = 0; I < 3; ++I) {
        double sum = 0;
        int n = 0;
        for (int k = 2 * K; k < std::min(2 * K + 2, 3); ++k) {
          for (int j = 2 * J; j < std::min(2 * J + 2, 3); ++j) {
            for (int i = 2 * I; i < std::min(2 * I + 2, 5); ++i, ++n) sum += v.at(i, j, k);
          }
        }
        CHECK(d.at(I, J, K) == doctest::Approx(sum / n));
      }
    }
  }
}

TEST_CASE("segment downsampling matches downsampling the parent volume") {
  const Grid3 g{{8, 6, 8}, {1, 1, 1}, {}};
  const Volume v = oracle::smooth_volume(g, 0.3);
  const Segment s = extract_segment(v, 2, 5, 1);
  const Segment ds = downsample_segment(s, {2, 2, 2});
  const Volume dv = downsample(v, {2, 2, 2});
  REQUIRE(ds.z_lo == 1);
  REQUIRE(ds.z_hi == 2);
  const Segment ref = extract_segment(dv, 1, 2, 1);
  REQUIRE(ds.values.size() == ref.values.size());
  for (std::size_t i = 0; i < ref.values.size(); ++i) CHECK(ds.values[i] == doctest::Approx(ref.values[i]));
  CHECK_THROWS(downsample_segment(extract_segment(v, 1, 4, 0), {2, 2, 2}));
}

TEST_CASE("averaging does not depend on input order") {
  const Grid3 g{{7, 5, 3}, {1, 1, 1}, {}};
  std::vector<Volume> vols;
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> u(-1000.0f, 1000.0f);
  for (int n = 0; n < 5; ++n) {
    Volume v(g);
    for (auto& x : v.values) x = u(rng);
    vols.push_back(v);
  }
  const Volume a = average_volumes(vols);
  std::reverse(vols.begin(), vols.end());
  std::swap(vols[1], vols[3]);
  const Volume b = average_volumes(vols);
  CHECK(a.values == b.values);
  double mean0 = 0;
  for (const auto& v : vols) mean0 += v.values[0];
  CHECK(a.values[0] == doctest::Approx(mean0 / 5).epsilon(1e-6));
}

TEST_CASE("trilinear resampling onto the same grid is the identity") {
  const Grid3 g{{6, 5, 4}, {2, 2, 3}, {1, 1, 1}};
  const Volume v = oracle::smooth_volume(g);
  const Volume r = resample_trilinear(v, g);
  for (std::size_t i = 0; i < v.values.size(); ++i) CHECK(r.values[i] == doctest::Approx(v.values[i]));
  Grid3 half = g;
  half.origin.x += 1.0;  // half a voxel
  half.dims[0] = 5;
  const Volume h = resample_trilinear(v, half);
  CHECK(h.at(0, 2, 2) == doctest::Approx(0.5 * (v.at(0, 2, 2) + v.at(1, 2, 2))));
}

TEST_CASE("volume, mask and segment files round-trip") {
  test::TempDir dir;
  const Grid3 g{{4, 3, 5}, {1.5, 2, 3}, {-3, 4, 5}};
  const Volume v = oracle::smooth_volume(g);
  write_volume(v, dir / "v.json");
  const Volume v2 = read_volume(dir / "v.json");
  CHECK(v2.grid == g);
  CHECK(v2.values == v.values);

  Mask m(g);
  m.at(1, 1, 1) = 1;
  m.at(3, 2, 4) = 1;
  write_mask(m, dir / "m.json");
  const Mask m2 = read_mask(dir / "m.json");
  CHECK(m2.values == m.values);
  CHECK(m2.count() == 2);

  const Segment s = extract_segment(v, 1, 3, 9);
  write_segment(s, dir / "s.json");
  const Segment s2 = read_segment(dir / "s.json");
  CHECK(s2.z_lo == 1);
  CHECK(s2.z_hi == 3);
  CHECK(s2.t == 9);
  CHECK(s2.values == s.values);
}

TEST_CASE("corrupt or missing files raise typed errors") {
  test::TempDir dir;
  CHECK_THROWS_AS(read_volume(dir / "none.json"), IoError);
  test::write_text(dir / "bad.json", "{not json");
  CHECK_THROWS_AS(read_volume(dir / "bad.json"), FormatError);
  const Volume v(Grid3{{2, 2, 2}, {1, 1, 1}, {}}, 1.0f);
  write_volume(v, dir / "v.json");
  std::filesystem::resize_file(dir / "v.raw", 5);
  CHECK_THROWS_AS(read_volume(dir / "v.json"), FormatError);
}
