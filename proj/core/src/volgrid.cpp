#include "motion4d/volgrid.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "io_detail.hpp"

namespace motion4d {

namespace {

std::string dims_str(const Dims3& d) {
  return std::to_string(d[0]) + "x" + std::to_string(d[1]) + "x" + std::to_string(d[2]);
}

}  // namespace

void Grid3::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (dims[a] < 1) throw GeometryError("grid dims must be >= 1, got " + dims_str(dims));
    if (!std::isfinite(spacing[a]) || spacing[a] <= 0.0) throw GeometryError("grid spacing must be finite and positive");
    if (!std::isfinite(origin[a])) throw GeometryError("grid origin must be finite");
  }
}

void Volume::validate() const {
  grid.validate();
  if (values.size() != grid.voxel_count()) throw GeometryError("volume payload length does not match dims");
  for (float v : values) {
    if (!std::isfinite(v)) throw NumericalError("volume contains a non-finite value");
  }
}

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count_if(values.begin(), values.end(), [](std::uint8_t v) { return v != 0; }));
}

void Mask::validate() const {
  grid.validate();
  if (values.size() != grid.voxel_count()) throw GeometryError("mask payload length does not match dims");
  for (auto v : values) {
    if (v > 1) throw FormatError("mask values must be 0 or 1");
  }
}

Grid3 Segment::slab_grid() const {
  Grid3 g = parent_grid;
  g.dims[2] = slices();
  g.origin.z = parent_grid.origin.z + z_lo * parent_grid.spacing.z;
  return g;
}

void Segment::validate() const {
  parent_grid.validate();
  if (z_lo < 0 || z_hi < z_lo || z_hi >= parent_grid.dims[2]) {
    throw RangeError("segment z-range [" + std::to_string(z_lo) + "," + std::to_string(z_hi) +
                     "] outside [0," + std::to_string(parent_grid.dims[2]) + ")");
  }
  if (values.size() != slab_voxels()) throw GeometryError("segment payload length does not match its slab");
}

Segment extract_segment(const Volume& vol, int z_lo, int z_hi, int t) {
  const int nz = vol.grid.dims[2];
  if (z_lo < 0 || z_hi >= nz || z_lo > z_hi) {
    throw RangeError("extract_segment: z-range [" + std::to_string(z_lo) + "," + std::to_string(z_hi) +
                     "] invalid for nz=" + std::to_string(nz));
  }
  Segment seg;
  seg.parent_grid = vol.grid;
  seg.z_lo = z_lo;
  seg.z_hi = z_hi;
  seg.t = t;
  const auto begin = vol.values.begin() + static_cast<std::ptrdiff_t>(vol.grid.slice_size() * z_lo);
  seg.values.assign(begin, begin + static_cast<std::ptrdiff_t>(seg.slab_voxels()));
  return seg;
}

void insert_segment(Volume& vol, const Segment& seg) {
  if (!(seg.parent_grid == vol.grid)) throw GeometryError("insert_segment: grid mismatch");
  seg.validate();
  std::copy(seg.values.begin(), seg.values.end(),
            vol.values.begin() + static_cast<std::ptrdiff_t>(vol.grid.slice_size() * seg.z_lo));
}

Grid3 downsample_grid(const Grid3& grid, const Dims3& factor) {
  Grid3 out = grid;
  for (int a = 0; a < 3; ++a) {
    if (factor[a] < 1) throw ArgumentError("downsample factor must be >= 1");
    out.dims[a] = (grid.dims[a] + factor[a] - 1) / factor[a];
    out.spacing[a] = grid.spacing[a] * factor[a];
    out.origin[a] = grid.origin[a] + 0.5 * (factor[a] - 1) * grid.spacing[a];
  }
  return out;
}

Volume downsample(const Volume& vol, const Dims3& factor) {
  const Grid3 out_grid = downsample_grid(vol.grid, factor);
  if (factor == Dims3{1, 1, 1}) return vol;
  Volume out(out_grid);
  const auto& d = vol.grid.dims;
  for (int k = 0; k < out_grid.dims[2]; ++k) {
    const int k1 = std::min(d[2], (k + 1) * factor[2]);
    for (int j = 0; j < out_grid.dims[1]; ++j) {
      const int j1 = std::min(d[1], (j + 1) * factor[1]);
      for (int i = 0; i < out_grid.dims[0]; ++i) {
        const int i1 = std::min(d[0], (i + 1) * factor[0]);
        double sum = 0.0;
        int count = 0;
        for (int kk = k * factor[2]; kk < k1; ++kk) {
          for (int jj = j * factor[1]; jj < j1; ++jj) {
            for (int ii = i * factor[0]; ii < i1; ++ii) {
              sum += vol.at(ii, jj, kk);
              ++count;
            }
          }
        }
        out.at(i, j, k) = static_cast<float>(sum / count);
      }
    }
  }
  return out;
}

Segment downsample_segment(const Segment& seg, const Dims3& factor) {
  seg.validate();
  const int fz = factor[2];
  if (fz < 1) throw ArgumentError("downsample factor must be >= 1");
  const bool end_aligned = ((seg.z_hi + 1) % fz == 0) || seg.z_hi == seg.parent_grid.dims[2] - 1;
  if (seg.z_lo % fz != 0 || !end_aligned) {
    throw ArgumentError("segment z-range is not aligned with the z downsample factor");
  }
  Volume slab(seg.slab_grid());
  slab.values = seg.values;
  const Volume small = downsample(slab, factor);
  Segment out;
  out.parent_grid = downsample_grid(seg.parent_grid, factor);
  out.z_lo = seg.z_lo / fz;
  out.z_hi = seg.z_hi / fz;
  out.t = seg.t;
  out.values = small.values;
  return out;
}

Volume average_volumes(std::span<const Volume> vols) {
  if (vols.empty()) throw ArgumentError("average_volumes: empty input");
  const Grid3& grid = vols.front().grid;
  for (const auto& v : vols) {
    if (!(v.grid == grid) || v.values.size() != grid.voxel_count()) {
      throw GeometryError("average_volumes: grid mismatch");
    }
  }
  std::vector<std::size_t> order(vols.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::lexicographical_compare(vols[a].values.begin(), vols[a].values.end(), vols[b].values.begin(),
                                        vols[b].values.end());
  });
  Volume out(grid);
  const double n = static_cast<double>(vols.size());
  for (std::size_t v = 0; v < grid.voxel_count(); ++v) {
    double sum = 0.0;
    for (std::size_t idx : order) sum += vols[idx].values[v];
    out.values[v] = static_cast<float>(sum / n);
  }
  return out;
}

Volume resample_trilinear(const Volume& vol, const Grid3& target) {
  target.validate();
  Volume out(target);
  const auto& g = vol.grid;
  auto axis = [&](int a, double p, int& base, double& frac) {
    const int n = g.dims[a];
    double q = (p - g.origin[a]) / g.spacing[a];
    q = std::clamp(q, 0.0, static_cast<double>(n - 1));
    if (n == 1) {
      base = 0;
      frac = 0.0;
      return;
    }
    base = std::min(static_cast<int>(std::floor(q)), n - 2);
    frac = q - base;
  };
  for (int k = 0; k < target.dims[2]; ++k) {
    for (int j = 0; j < target.dims[1]; ++j) {
      for (int i = 0; i < target.dims[0]; ++i) {
        const Vec3 p = target.point(i, j, k);
        int b[3];
        double f[3];
        for (int a = 0; a < 3; ++a) axis(a, p[a], b[a], f[a]);
        double acc = 0.0;
        for (int dz = 0; dz < 2; ++dz) {
          const double wz = dz ? f[2] : 1.0 - f[2];
          if (wz == 0.0) continue;
          for (int dy = 0; dy < 2; ++dy) {
            const double wy = dy ? f[1] : 1.0 - f[1];
            if (wy == 0.0) continue;
            for (int dx = 0; dx < 2; ++dx) {
              const double wx = dx ? f[0] : 1.0 - f[0];
              if (wx == 0.0) continue;
              acc += wx * wy * wz * vol.at(b[0] + dx, b[1] + dy, b[2] + dz);
            }
          }
        }
        out.at(i, j, k) = static_cast<float>(acc);
      }
    }
  }
  return out;
}

// ---- IO ----

Volume read_volume(const std::filesystem::path& header) {
  const auto j = detail::read_json(header);
  detail::expect_dtype(header, j, "f32le");
  Volume vol;
  vol.grid = detail::grid_from(j);
  vol.values = detail::read_raw<float>(detail::resolve_data(header, j), vol.grid.voxel_count());
  for (float v : vol.values) {
    if (!std::isfinite(v)) throw FormatError(header.string() + ": non-finite voxel value");
  }
  return vol;
}

void write_volume(const Volume& vol, const std::filesystem::path& header) {
  vol.validate();
  const auto data = detail::data_path_for(header);
  auto j = detail::grid_json(vol.grid);
  j["dtype"] = "f32le";
  j["data_file"] = data.filename().string();
  detail::write_json(header, j);
  detail::write_raw(data, vol.values);
}

Mask read_mask(const std::filesystem::path& header) {
  const auto j = detail::read_json(header);
  detail::expect_dtype(header, j, "u8");
  Mask mask;
  mask.grid = detail::grid_from(j);
  mask.values = detail::read_raw<std::uint8_t>(detail::resolve_data(header, j), mask.grid.voxel_count());
  mask.validate();
  return mask;
}

void write_mask(const Mask& mask, const std::filesystem::path& header) {
  mask.validate();
  const auto data = detail::data_path_for(header);
  auto j = detail::grid_json(mask.grid);
  j["dtype"] = "u8";
  j["data_file"] = data.filename().string();
  detail::write_json(header, j);
  detail::write_raw(data, mask.values);
}

Segment read_segment(const std::filesystem::path& header) {
  const auto j = detail::read_json(header);
  detail::expect_dtype(header, j, "f32le");
  Segment seg;
  try {
    seg.parent_grid = detail::grid_from(j.at("parent"));
    seg.z_lo = j.at("z_lo").get<int>();
    seg.z_hi = j.at("z_hi").get<int>();
    seg.t = j.at("t").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(header.string() + ": " + e.what());
  }
  if (seg.z_lo < 0 || seg.z_hi < seg.z_lo || seg.z_hi >= seg.parent_grid.dims[2] || seg.t < 0) {
    throw FormatError(header.string() + ": invalid segment range");
  }
  if (!(detail::grid_from(j) == seg.slab_grid())) throw FormatError(header.string() + ": slab grid inconsistent with parent");
  seg.values = detail::read_raw<float>(detail::resolve_data(header, j), seg.slab_voxels());
  for (float v : seg.values) {
    if (!std::isfinite(v)) throw FormatError(header.string() + ": non-finite voxel value");
  }
  return seg;
}

void write_segment(const Segment& seg, const std::filesystem::path& header) {
  seg.validate();
  const auto data = detail::data_path_for(header);
  auto j = detail::grid_json(seg.slab_grid());
  j["dtype"] = "f32le";
  j["data_file"] = data.filename().string();
  j["parent"] = detail::grid_json(seg.parent_grid);
  j["z_lo"] = seg.z_lo;
  j["z_hi"] = seg.z_hi;
  j["t"] = seg.t;
  detail::write_json(header, j);
  detail::write_raw(data, seg.values);
}

}  // namespace motion4d
