#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "motion4d/common.hpp"

namespace motion4d {

// Regular voxel grid. Voxel (i,j,k) sits at origin + (i,j,k) * spacing (mm).
// Values are stored x-fastest, then y, then z.
struct Grid3 {
  Dims3 dims{1, 1, 1};
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{};

  std::size_t voxel_count() const {
    return static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]) *
           static_cast<std::size_t>(dims[2]);
  }
  std::size_t slice_size() const {
    return static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]);
  }
  std::size_t index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(dims[0]) *
               (static_cast<std::size_t>(j) + static_cast<std::size_t>(dims[1]) * static_cast<std::size_t>(k));
  }
  Vec3 point(int i, int j, int k) const {
    return {origin.x + i * spacing.x, origin.y + j * spacing.y, origin.z + k * spacing.z};
  }
  // Center of the last voxel.
  Vec3 max_corner() const { return point(dims[0] - 1, dims[1] - 1, dims[2] - 1); }

  // Throws GeometryError when dims < 1 or spacing is not finite and positive.
  void validate() const;

  friend bool operator==(const Grid3&, const Grid3&) = default;
};

struct Volume {
  Grid3 grid;
  std::vector<float> values;

  Volume() = default;
  explicit Volume(const Grid3& g, float fill = 0.0f) : grid(g), values(g.voxel_count(), fill) {}

  float& at(int i, int j, int k) { return values[grid.index(i, j, k)]; }
  float at(int i, int j, int k) const { return values[grid.index(i, j, k)]; }

  void validate() const;
};

struct Mask {
  Grid3 grid;
  std::vector<std::uint8_t> values;

  Mask() = default;
  explicit Mask(const Grid3& g, std::uint8_t fill = 0) : grid(g), values(g.voxel_count(), fill) {}

  std::uint8_t& at(int i, int j, int k) { return values[grid.index(i, j, k)]; }
  std::uint8_t at(int i, int j, int k) const { return values[grid.index(i, j, k)]; }
  std::size_t count() const;

  void validate() const;
};

// Contiguous slab of slices z_lo..z_hi (inclusive) acquired at timepoint t.
struct Segment {
  Grid3 parent_grid;
  int z_lo = 0;
  int z_hi = 0;
  int t = 0;
  std::vector<float> values;

  int slices() const { return z_hi - z_lo + 1; }
  std::size_t slab_voxels() const { return parent_grid.slice_size() * static_cast<std::size_t>(slices()); }
  // Grid of the slab alone (origin shifted to slice z_lo).
  Grid3 slab_grid() const;

  void validate() const;
};

Segment extract_segment(const Volume& vol, int z_lo, int z_hi, int t);

// Writes the slab back into its slices of vol (the inverse of extraction).
void insert_segment(Volume& vol, const Segment& seg);

Grid3 downsample_grid(const Grid3& grid, const Dims3& factor);

// Block-average pooling; partial edge blocks average the voxels present.
Volume downsample(const Volume& vol, const Dims3& factor);

// Downsamples a slab consistently with downsample() of its parent volume. The
// slab must start on a block boundary and end on one (or at the last slice).
Segment downsample_segment(const Segment& seg, const Dims3& factor);

// Voxel-wise mean. Inputs are summed in a canonical (content-sorted) order so
// the result does not depend on the order of the sequence.
Volume average_volumes(std::span<const Volume> vols);

// Trilinear resampling at the target voxel centers, clamping to the source extent.
Volume resample_trilinear(const Volume& vol, const Grid3& target);

// File IO: a JSON header plus a raw little-endian payload next to it.
Volume read_volume(const std::filesystem::path& header);
void write_volume(const Volume& vol, const std::filesystem::path& header);
Mask read_mask(const std::filesystem::path& header);
void write_mask(const Mask& mask, const std::filesystem::path& header);
Segment read_segment(const std::filesystem::path& header);
void write_segment(const Segment& seg, const std::filesystem::path& header);

}  // namespace motion4d
