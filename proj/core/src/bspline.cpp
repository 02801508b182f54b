#include "motion4d/bspline.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <string>

#include "io_detail.hpp"
#include "motion4d/interp.hpp"

namespace motion4d {

namespace {

inline std::array<double, 4> cubic_weights(double u) {
  const double u2 = u * u;
  const double u3 = u2 * u;
  const double v = 1.0 - u;
  return {v * v * v / 6.0, (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0, (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
          u3 / 6.0};
}

// Knot interval holding knot coordinate u; the four supporting knots are
// first..first+3. The very top of the supported range uses frac = 1.
bool knot_locate(double u, int cdim, int& first, double& frac) {
  const double r = std::nearbyint(u);
  if (std::abs(u - r) < kIndexSnap) u = r;
  int base = static_cast<int>(std::floor(u));
  if (base == cdim - 2 && u == cdim - 2) base = cdim - 3;
  if (base < 1 || base > cdim - 3) return false;
  first = base - 1;
  frac = u - base;
  return true;
}

void check_segment_geometry(const Volume& ref, const ControlGrid& cg, const Segment& seg) {
  if (!(cg.image_grid == ref.grid)) throw GeometryError("control grid does not deform the reference grid");
  if (!(seg.parent_grid == ref.grid)) throw GeometryError("segment parent grid differs from the reference grid");
  if (cg.disp.size() != cg.size()) throw GeometryError("control grid payload size mismatch");
  if (ref.values.size() != ref.grid.voxel_count()) throw GeometryError("reference payload size mismatch");
  seg.validate();
}

}  // namespace

ControlGrid ControlGrid::zeros_like() const {
  ControlGrid out = *this;
  out.disp.assign(size(), Vec3{});
  return out;
}

void ControlGrid::validate() const {
  image_grid.validate();
  for (int a = 0; a < 3; ++a) {
    if (cdims[a] < 4) throw GeometryError("control grid needs at least 4 knots per axis");
    if (!std::isfinite(cspacing[a]) || cspacing[a] <= 0.0) throw GeometryError("control spacing must be positive");
    int first = 0;
    double frac = 0.0;
    const double lo = (image_grid.origin[a] - corigin[a]) / cspacing[a];
    const double hi = (image_grid.max_corner()[a] - corigin[a]) / cspacing[a];
    if (!knot_locate(lo, cdims[a], first, frac) || !knot_locate(hi, cdims[a], first, frac)) {
      throw GeometryError("control grid does not cover the image extent with a one-knot margin");
    }
  }
  if (disp.size() != size()) throw GeometryError("control grid payload size mismatch");
  for (const auto& d : disp) {
    if (!d.finite()) throw NumericalError("control grid contains a non-finite displacement");
  }
}

ControlGrid make_control_grid(const Grid3& image_grid, const Vec3& spacing) {
  return make_control_grid(image_grid, spacing, image_grid.origin, image_grid.max_corner());
}

ControlGrid make_control_grid(const Grid3& image_grid, const Vec3& spacing, const Vec3& anchor,
                              const Vec3& extent_max) {
  image_grid.validate();
  ControlGrid cg;
  cg.image_grid = image_grid;
  cg.cspacing = spacing;
  for (int a = 0; a < 3; ++a) {
    if (!std::isfinite(spacing[a]) || spacing[a] <= 0.0) throw ArgumentError("knot spacing must be positive");
    if (extent_max[a] < anchor[a]) throw ArgumentError("extent_max below anchor");
    cg.corigin[a] = anchor[a] - spacing[a];
    cg.cdims[a] = static_cast<int>(std::floor((extent_max[a] - anchor[a]) / spacing[a] + 1e-9)) + 4;
  }
  cg.disp.assign(cg.size(), Vec3{});
  cg.validate();
  return cg;
}

std::array<double, 4> basis_weights(double u) {
  if (!(u >= 0.0 && u < 1.0)) throw ArgumentError("basis_weights: u must lie in [0,1)");
  return cubic_weights(u);
}

Vec3 displacement_at(const ControlGrid& cg, const Vec3& p) {
  int first[3];
  double frac[3];
  for (int a = 0; a < 3; ++a) {
    const double u = (p[a] - cg.corigin[a]) / cg.cspacing[a];
    if (!knot_locate(u, cg.cdims[a], first[a], frac[a])) {
      throw RangeError("displacement_at: point outside the supported extent");
    }
  }
  const auto wx = cubic_weights(frac[0]);
  const auto wy = cubic_weights(frac[1]);
  const auto wz = cubic_weights(frac[2]);
  Vec3 out;
  for (int l = 0; l < 4; ++l) {
    for (int m = 0; m < 4; ++m) {
      const double wzy = wz[l] * wy[m];
      for (int n = 0; n < 4; ++n) {
        out += (wzy * wx[n]) * cg.disp[cg.index(first[0] + n, first[1] + m, first[2] + l)];
      }
    }
  }
  return out;
}

SeparableBasis separable_basis(const ControlGrid& cg) {
  SeparableBasis basis;
  const Grid3& g = cg.image_grid;
  for (int a = 0; a < 3; ++a) {
    auto& ax = basis[a];
    ax.first.resize(g.dims[a]);
    ax.w.resize(g.dims[a]);
    for (int idx = 0; idx < g.dims[a]; ++idx) {
      const double x = g.origin[a] + idx * g.spacing[a];
      double frac = 0.0;
      if (!knot_locate((x - cg.corigin[a]) / cg.cspacing[a], cg.cdims[a], ax.first[idx], frac)) {
        throw GeometryError("control grid does not cover the image extent");
      }
      ax.w[idx] = cubic_weights(frac);
    }
  }
  return basis;
}

void slab_displacements(const ControlGrid& cg, const SeparableBasis& basis, int z_lo, int z_hi,
                        std::vector<Vec3>& out) {
  const Grid3& g = cg.image_grid;
  const int nx = g.dims[0], ny = g.dims[1];
  const int cx = cg.cdims[0];
  const std::size_t plane = static_cast<std::size_t>(cg.cdims[0]) * cg.cdims[1];
  out.resize(static_cast<std::size_t>(nx) * ny * (z_hi - z_lo + 1));
  std::vector<Vec3> tz(plane);
  std::vector<Vec3> ty(cx);
  std::size_t o = 0;
  for (int k = z_lo; k <= z_hi; ++k) {
    const int fz = basis[2].first[k];
    const auto& wz = basis[2].w[k];
    const Vec3* d0 = cg.disp.data() + plane * fz;
    for (std::size_t idx = 0; idx < plane; ++idx) {
      tz[idx] = wz[0] * d0[idx] + wz[1] * d0[idx + plane] + wz[2] * d0[idx + 2 * plane] + wz[3] * d0[idx + 3 * plane];
    }
    for (int j = 0; j < ny; ++j) {
      const int fy = basis[1].first[j];
      const auto& wy = basis[1].w[j];
      const Vec3* r0 = tz.data() + static_cast<std::size_t>(fy) * cx;
      for (int c = 0; c < cx; ++c) {
        ty[c] = wy[0] * r0[c] + wy[1] * r0[c + cx] + wy[2] * r0[c + 2 * cx] + wy[3] * r0[c + 3 * cx];
      }
      for (int i = 0; i < nx; ++i) {
        const int fx = basis[0].first[i];
        const auto& wx = basis[0].w[i];
        out[o++] = wx[0] * ty[fx] + wx[1] * ty[fx + 1] + wx[2] * ty[fx + 2] + wx[3] * ty[fx + 3];
      }
    }
  }
}

void slab_adjoint(const ControlGrid& cg, const SeparableBasis& basis, int z_lo, int z_hi, std::span<const Vec3> field,
                  std::span<Vec3> grad) {
  const Grid3& g = cg.image_grid;
  const int nx = g.dims[0], ny = g.dims[1];
  const int cx = cg.cdims[0];
  const std::size_t plane = static_cast<std::size_t>(cg.cdims[0]) * cg.cdims[1];
  std::vector<Vec3> gz(plane);
  std::vector<Vec3> gy(cx);
  std::size_t o = 0;
  for (int k = z_lo; k <= z_hi; ++k) {
    std::fill(gz.begin(), gz.end(), Vec3{});
    for (int j = 0; j < ny; ++j) {
      std::fill(gy.begin(), gy.end(), Vec3{});
      for (int i = 0; i < nx; ++i) {
        const Vec3& f = field[o++];
        const int fx = basis[0].first[i];
        const auto& wx = basis[0].w[i];
        gy[fx] += wx[0] * f;
        gy[fx + 1] += wx[1] * f;
        gy[fx + 2] += wx[2] * f;
        gy[fx + 3] += wx[3] * f;
      }
      const int fy = basis[1].first[j];
      const auto& wy = basis[1].w[j];
      Vec3* r0 = gz.data() + static_cast<std::size_t>(fy) * cx;
      for (int m = 0; m < 4; ++m) {
        Vec3* row = r0 + static_cast<std::size_t>(m) * cx;
        for (int c = 0; c < cx; ++c) row[c] += wy[m] * gy[c];
      }
    }
    const int fz = basis[2].first[k];
    const auto& wz = basis[2].w[k];
    for (int l = 0; l < 4; ++l) {
      Vec3* dst = grad.data() + plane * (fz + l);
      for (std::size_t idx = 0; idx < plane; ++idx) dst[idx] += wz[l] * gz[idx];
    }
  }
}

std::vector<Vec3> displacement_field(const ControlGrid& cg) {
  cg.validate();
  std::vector<Vec3> out;
  slab_displacements(cg, separable_basis(cg), 0, cg.image_grid.dims[2] - 1, out);
  return out;
}

Volume warp_volume(const Volume& ref, const ControlGrid& cg, float outside) {
  if (!(cg.image_grid == ref.grid)) throw GeometryError("warp_volume: control grid does not deform the reference grid");
  if (cg.disp.size() != cg.size()) throw GeometryError("warp_volume: control grid payload size mismatch");
  const Grid3& g = ref.grid;
  const auto basis = separable_basis(cg);
  Volume out(g);
  std::vector<Vec3> u;
  std::size_t o = 0;
  for (int k = 0; k < g.dims[2]; ++k) {
    slab_displacements(cg, basis, k, k, u);
    std::size_t v = 0;
    for (int j = 0; j < g.dims[1]; ++j) {
      for (int i = 0; i < g.dims[0]; ++i, ++v, ++o) {
        const auto c = locate(g.dims, i + u[v].x / g.spacing.x, j + u[v].y / g.spacing.y, k + u[v].z / g.spacing.z);
        out.values[o] = c.inside ? static_cast<float>(sample_value(ref.values, g, c, outside)) : outside;
      }
    }
  }
  return out;
}

Mask warp_mask(const Mask& mask, const ControlGrid& cg) {
  if (!(cg.image_grid == mask.grid)) throw GeometryError("warp_mask: control grid does not deform the mask grid");
  const Grid3& g = mask.grid;
  const auto basis = separable_basis(cg);
  Mask out(g);
  std::vector<Vec3> u;
  std::size_t o = 0;
  for (int k = 0; k < g.dims[2]; ++k) {
    slab_displacements(cg, basis, k, k, u);
    std::size_t v = 0;
    for (int j = 0; j < g.dims[1]; ++j) {
      for (int i = 0; i < g.dims[0]; ++i, ++v, ++o) {
        const auto c = locate(g.dims, i + u[v].x / g.spacing.x, j + u[v].y / g.spacing.y, k + u[v].z / g.spacing.z);
        out.values[o] = (c.inside && sample_value(mask.values, g, c, 0.0) >= 0.5) ? 1 : 0;
      }
    }
  }
  return out;
}

double accumulate_segment(const Volume& ref, const ControlGrid& cg, const Segment& seg, std::span<Vec3> grad,
                          std::span<const ControlGrid* const> modes, std::span<double> curvature) {
  check_segment_geometry(ref, cg, seg);
  if (!grad.empty() && grad.size() != cg.size()) throw GeometryError("gradient buffer size mismatch");
  if (modes.size() != curvature.size()) throw ArgumentError("curvature buffer size mismatch");
  for (const ControlGrid* m : modes) {
    if (!m->same_geometry(cg)) throw GeometryError("mode lattice differs from the motion lattice");
  }
  const Grid3& g = ref.grid;
  const auto basis = separable_basis(cg);
  std::vector<Vec3> u;
  slab_displacements(cg, basis, seg.z_lo, seg.z_hi, u);
  std::vector<std::vector<Vec3>> mode_u(modes.size());
  for (std::size_t m = 0; m < modes.size(); ++m) slab_displacements(*modes[m], basis, seg.z_lo, seg.z_hi, mode_u[m]);

  const bool want_grad = !grad.empty();
  std::vector<Vec3> field(want_grad ? u.size() : 0);
  const double ix = 1.0 / g.spacing.x, iy = 1.0 / g.spacing.y, iz = 1.0 / g.spacing.z;
  double sse = 0.0;
  std::size_t v = 0;
  for (int k = seg.z_lo; k <= seg.z_hi; ++k) {
    for (int j = 0; j < g.dims[1]; ++j) {
      for (int i = 0; i < g.dims[0]; ++i, ++v) {
        const auto c = locate(g.dims, i + u[v].x * ix, j + u[v].y * iy, k + u[v].z * iz);
        const auto s = sample_with_gradient(ref, c, kAirHU);
        const double r = s.value - static_cast<double>(seg.values[v]);
        sse += r * r;
        if (!s.inside) continue;
        const Vec3 gmm{s.dq[0] * ix, s.dq[1] * iy, s.dq[2] * iz};
        if (want_grad) field[v] = (2.0 * r) * gmm;
        for (std::size_t m = 0; m < modes.size(); ++m) {
          const double jm = gmm.dot(mode_u[m][v]);
          curvature[m] += 2.0 * jm * jm;
        }
      }
    }
  }
  if (want_grad) slab_adjoint(cg, basis, seg.z_lo, seg.z_hi, field, grad);
  return sse;
}

ResidualGradient residual_and_gradient(const Volume& ref, const ControlGrid& cg, const Segment& seg) {
  ResidualGradient out;
  out.grad.assign(cg.size(), Vec3{});
  out.sse = accumulate_segment(ref, cg, seg, out.grad);
  return out;
}

double segment_sse(const Volume& ref, const ControlGrid& cg, const Segment& seg) {
  return accumulate_segment(ref, cg, seg, {});
}

ControlGrid refit_control_grid(const ControlGrid& src, const ControlGrid& target) {
  src.validate();
  ControlGrid out = target.zeros_like();
  if (src.cdims == target.cdims && src.cspacing == target.cspacing && src.corigin == target.corigin) {
    out.disp = src.disp;
    out.validate();
    return out;
  }
  // Per-axis map R_a (target knots x source knots): least-squares projection of
  // each source basis function onto the target basis over probe points.
  std::array<Eigen::MatrixXd, 3> maps;
  const Grid3& g = target.image_grid;
  for (int a = 0; a < 3; ++a) {
    const double lo = g.origin[a];
    const double hi = g.max_corner()[a];
    const double step = std::min(src.cspacing[a], target.cspacing[a]) / 4.0;
    const int probes = std::max(2, static_cast<int>(std::ceil((hi - lo) / step)) + 1);
    Eigen::MatrixXd at = Eigen::MatrixXd::Zero(probes, target.cdims[a]);
    Eigen::MatrixXd as = Eigen::MatrixXd::Zero(probes, src.cdims[a]);
    for (int p = 0; p < probes; ++p) {
      const double x = (probes == 1 || hi == lo) ? lo : lo + (hi - lo) * p / (probes - 1);
      int first = 0;
      double frac = 0.0;
      if (!knot_locate((x - target.corigin[a]) / target.cspacing[a], target.cdims[a], first, frac)) {
        throw GeometryError("refit_control_grid: target lattice does not cover its image");
      }
      auto w = cubic_weights(frac);
      for (int n = 0; n < 4; ++n) at(p, first + n) = w[n];
      if (!knot_locate((x - src.corigin[a]) / src.cspacing[a], src.cdims[a], first, frac)) {
        throw GeometryError("refit_control_grid: source lattice does not cover the target image");
      }
      w = cubic_weights(frac);
      for (int n = 0; n < 4; ++n) as(p, first + n) = w[n];
    }
    maps[a] = at.completeOrthogonalDecomposition().solve(as);
  }
  // Apply R_x, then R_y, then R_z.
  const auto& sd = src.cdims;
  const auto& td = target.cdims;
  std::vector<Vec3> t1(static_cast<std::size_t>(td[0]) * sd[1] * sd[2]);
  for (int k = 0; k < sd[2]; ++k)
    for (int j = 0; j < sd[1]; ++j)
      for (int i = 0; i < td[0]; ++i) {
        Vec3 acc;
        for (int s = 0; s < sd[0]; ++s) acc += maps[0](i, s) * src.disp[src.index(s, j, k)];
        t1[i + static_cast<std::size_t>(td[0]) * (j + static_cast<std::size_t>(sd[1]) * k)] = acc;
      }
  std::vector<Vec3> t2(static_cast<std::size_t>(td[0]) * td[1] * sd[2]);
  for (int k = 0; k < sd[2]; ++k)
    for (int j = 0; j < td[1]; ++j)
      for (int i = 0; i < td[0]; ++i) {
        Vec3 acc;
        for (int s = 0; s < sd[1]; ++s)
          acc += maps[1](j, s) * t1[i + static_cast<std::size_t>(td[0]) * (s + static_cast<std::size_t>(sd[1]) * k)];
        t2[i + static_cast<std::size_t>(td[0]) * (j + static_cast<std::size_t>(td[1]) * k)] = acc;
      }
  for (int k = 0; k < td[2]; ++k)
    for (int j = 0; j < td[1]; ++j)
      for (int i = 0; i < td[0]; ++i) {
        Vec3 acc;
        for (int s = 0; s < sd[2]; ++s)
          acc += maps[2](k, s) * t2[i + static_cast<std::size_t>(td[0]) * (j + static_cast<std::size_t>(td[1]) * s)];
        out.disp[out.index(i, j, k)] = acc;
      }
  return out;
}

ControlGrid read_control_grid(const std::filesystem::path& header) {
  const auto j = detail::read_json(header);
  detail::expect_dtype(header, j, "f32le");
  ControlGrid cg;
  try {
    cg.cdims = detail::dims_from(j.at("cdims"), "cdims");
    cg.cspacing = detail::vec_from(j.at("cspacing_mm"), "cspacing_mm");
    cg.corigin = detail::vec_from(j.at("corigin_mm"), "corigin_mm");
    cg.image_grid = detail::grid_from(j.at("image_grid"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(header.string() + ": " + e.what());
  }
  for (int a = 0; a < 3; ++a) {
    if (cg.cdims[a] < 4) throw FormatError(header.string() + ": cdims must be >= 4");
  }
  const auto raw = detail::read_raw<float>(detail::resolve_data(header, j), cg.size() * 3);
  cg.disp.resize(cg.size());
  for (std::size_t i = 0; i < cg.size(); ++i) cg.disp[i] = {raw[3 * i], raw[3 * i + 1], raw[3 * i + 2]};
  try {
    cg.validate();
  } catch (const Error& e) {
    throw FormatError(header.string() + ": " + e.what());
  }
  return cg;
}

void write_control_grid(const ControlGrid& cg, const std::filesystem::path& header) {
  cg.validate();
  const auto data = detail::data_path_for(header);
  detail::json j{{"cdims", detail::dims_json(cg.cdims)},
                 {"cspacing_mm", detail::vec_json(cg.cspacing)},
                 {"corigin_mm", detail::vec_json(cg.corigin)},
                 {"image_grid", detail::grid_json(cg.image_grid)},
                 {"dtype", "f32le"},
                 {"data_file", data.filename().string()}};
  detail::write_json(header, j);
  std::vector<float> raw(cg.size() * 3);
  for (std::size_t i = 0; i < cg.size(); ++i) {
    raw[3 * i] = static_cast<float>(cg.disp[i].x);
    raw[3 * i + 1] = static_cast<float>(cg.disp[i].y);
    raw[3 * i + 2] = static_cast<float>(cg.disp[i].z);
  }
  detail::write_raw(data, raw);
}

}  // namespace motion4d
