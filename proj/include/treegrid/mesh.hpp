#pragma once

// Particle-mesh long-range gravity: cloud-in-cell deposit, a Poisson solve
// filtered with exp(-k^2 r_s^2) and split into x-slab work units, CIC force
// interpolation, and the occupied-cells codec used for inter-site exchange.
//
// Mesh cells have centres at (i + 1/2) h, h = 1 / size. Layout is x-major:
// index = (ix * size + iy) * size + iz.

#include <fftw3.h>

#include <cmath>
#include <complex>
#include <cstdint>
#include <memory>
#include <mutex>
#include <numbers>
#include <span>
#include <vector>

#include "treegrid/domain.hpp"
#include "treegrid/parallel.hpp"
#include "treegrid/wire.hpp"

namespace treegrid {

/// Cell masses on a periodic mesh. `slab` is the x-range this site owns; the
/// deposit may also touch one ghost plane on either side.
struct DensityMesh {
  std::uint32_t size = 0;
  SlabDomain slab;
  std::vector<double> cells;

  DensityMesh() = default;
  explicit DensityMesh(std::uint32_t n, SlabDomain s = {})
      : size(n), slab(s), cells(static_cast<std::size_t>(n) * n * n, 0.0) {}

  [[nodiscard]] std::size_t index(std::uint32_t ix, std::uint32_t iy, std::uint32_t iz) const {
    return (static_cast<std::size_t>(ix) * size + iy) * size + iz;
  }
  [[nodiscard]] double total() const {
    long double s = 0.0L;  // extended accumulator keeps the check about the deposit
    for (double v : cells) s += v;
    return static_cast<double>(s);
  }
};

/// One acceleration component per axis.
struct ForceMesh {
  std::uint32_t size = 0;
  std::array<std::vector<double>, 3> comp;
};

struct SparseMeshPayload {
  std::uint32_t mesh_size = 0;
  std::uint32_t origin = 0;  // not on the wire; the channel identifies the sender
  std::vector<std::uint64_t> indices;
  std::vector<double> values;
};

namespace detail {

struct CicStencil {
  std::array<std::uint32_t, 3> lo;
  std::array<std::uint32_t, 3> hi;
  std::array<double, 3> frac;  // weight of the hi cell
};

inline CicStencil cic_stencil(const Vec3& pos, std::uint32_t n) {
  CicStencil s;
  for (int k = 0; k < 3; ++k) {
    const double u = pos[k] * n - 0.5;
    const double fl = std::floor(u);
    s.frac[k] = u - fl;
    const auto i0 = static_cast<std::int64_t>(fl);
    const auto nn = static_cast<std::int64_t>(n);
    s.lo[k] = static_cast<std::uint32_t>(((i0 % nn) + nn) % nn);
    s.hi[k] = static_cast<std::uint32_t>((((i0 + 1) % nn) + nn) % nn);
  }
  return s;
}

}  // namespace detail

inline void cic_deposit(DensityMesh& mesh, std::span<const Particle> particles) {
  const std::uint32_t n = mesh.size;
  for (const auto& p : particles) {
    if (!(p.mass > 0.0)) throw InvalidInput("particle mass must be positive");
    const auto s = detail::cic_stencil(p.pos, n);
    for (int a = 0; a < 2; ++a) {
      const double wx = a ? s.frac[0] : 1.0 - s.frac[0];
      const std::uint32_t ix = a ? s.hi[0] : s.lo[0];
      for (int b = 0; b < 2; ++b) {
        const double wy = b ? s.frac[1] : 1.0 - s.frac[1];
        const std::uint32_t iy = b ? s.hi[1] : s.lo[1];
        for (int c = 0; c < 2; ++c) {
          const double wz = c ? s.frac[2] : 1.0 - s.frac[2];
          const std::uint32_t iz = c ? s.hi[2] : s.lo[2];
          mesh.cells[mesh.index(ix, iy, iz)] += p.mass * wx * wy * wz;
        }
      }
    }
  }
}

/// Cloud-in-cell deposit of particles owned by `slab`.
inline DensityMesh cic_assign(std::span<const Particle> particles, std::uint32_t mesh_size,
                              const SlabDomain& slab = {}) {
  if (mesh_size < 2) throw InvalidInput("mesh size must be >= 2");
  for (const auto& p : particles) {
    if (!(p.pos.x >= 0.0 && p.pos.x < 1.0 && p.pos.y >= 0.0 && p.pos.y < 1.0 && p.pos.z >= 0.0 &&
          p.pos.z < 1.0))
      throw InvalidInput("particle outside the unit box");
    if (!slab.contains(p.pos.x)) throw InvalidInput("particle outside the owning slab");
  }
  DensityMesh mesh(mesh_size, slab);
  cic_deposit(mesh, particles);
  return mesh;
}

/// Trilinear gather with the deposit kernel.
inline Vec3 cic_interpolate(const ForceMesh& f, const Vec3& pos) {
  const std::uint32_t n = f.size;
  const auto s = detail::cic_stencil(pos, n);
  Vec3 out;
  for (int a = 0; a < 2; ++a) {
    const double wx = a ? s.frac[0] : 1.0 - s.frac[0];
    const std::uint32_t ix = a ? s.hi[0] : s.lo[0];
    for (int b = 0; b < 2; ++b) {
      const double wy = b ? s.frac[1] : 1.0 - s.frac[1];
      const std::uint32_t iy = b ? s.hi[1] : s.lo[1];
      for (int c = 0; c < 2; ++c) {
        const double wz = c ? s.frac[2] : 1.0 - s.frac[2];
        const std::uint32_t iz = c ? s.hi[2] : s.lo[2];
        const std::size_t idx = (static_cast<std::size_t>(ix) * n + iy) * n + iz;
        const double w = wx * wy * wz;
        out.x += w * f.comp[0][idx];
        out.y += w * f.comp[1][idx];
        out.z += w * f.comp[2][idx];
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sparse codec

inline SparseMeshPayload sparse_encode(const DensityMesh& mesh, std::uint32_t origin = 0) {
  SparseMeshPayload p;
  p.mesh_size = mesh.size;
  p.origin = origin;
  for (std::size_t i = 0; i < mesh.cells.size(); ++i) {
    if (mesh.cells[i] != 0.0) {
      p.indices.push_back(i);
      p.values.push_back(mesh.cells[i]);
    }
  }
  return p;
}

/// Every cell, zeros included; the dense reference for the sparse exchange.
inline SparseMeshPayload dense_encode(const DensityMesh& mesh, std::uint32_t origin = 0) {
  SparseMeshPayload p;
  p.mesh_size = mesh.size;
  p.origin = origin;
  p.indices.resize(mesh.cells.size());
  for (std::size_t i = 0; i < mesh.cells.size(); ++i) p.indices[i] = i;
  p.values = mesh.cells;
  return p;
}

inline void validate_payload(const SparseMeshPayload& p, std::uint32_t size) {
  if (p.mesh_size != size) throw InvalidInput("mesh size mismatch in payload");
  if (p.indices.size() != p.values.size()) throw InvalidInput("payload index/value length mismatch");
  const std::uint64_t cells = static_cast<std::uint64_t>(size) * size * size;
  for (std::size_t i = 0; i < p.indices.size(); ++i) {
    if (p.indices[i] >= cells) throw InvalidInput("payload cell index out of range");
    if (i > 0 && p.indices[i] <= p.indices[i - 1]) throw InvalidInput("payload indices not strictly increasing");
  }
}

inline DensityMesh sparse_decode(const SparseMeshPayload& p, std::uint32_t size) {
  validate_payload(p, size);
  DensityMesh mesh(size);
  for (std::size_t i = 0; i < p.indices.size(); ++i) mesh.cells[p.indices[i]] = p.values[i];
  return mesh;
}

/// Adds payload cells into `mesh`, in payload order.
inline void accumulate(DensityMesh& mesh, const SparseMeshPayload& p) {
  validate_payload(p, mesh.size);
  for (std::size_t i = 0; i < p.indices.size(); ++i) mesh.cells[p.indices[i]] += p.values[i];
}

inline std::size_t payload_wire_bytes(std::size_t count) { return 4 + 8 + count * 16; }

inline wire::Bytes encode_mesh_payload(const SparseMeshPayload& p) {
  wire::Writer w(payload_wire_bytes(p.indices.size()));
  w.put(p.mesh_size).put(static_cast<std::uint64_t>(p.indices.size()));
  for (std::size_t i = 0; i < p.indices.size(); ++i) w.put(p.indices[i]).put(p.values[i]);
  return std::move(w).take();
}

inline SparseMeshPayload decode_mesh_payload(std::span<const std::byte> bytes, std::uint32_t origin = 0) {
  wire::Reader r(bytes);
  SparseMeshPayload p;
  p.origin = origin;
  p.mesh_size = r.get<std::uint32_t>();
  const auto count = r.get<std::uint64_t>();
  if (count > r.remaining() / 16) throw wire::DecodeError("mesh payload count exceeds data");
  p.indices.resize(count);
  p.values.resize(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    p.indices[i] = r.get<std::uint64_t>();
    p.values[i] = r.get<double>();
  }
  if (r.remaining() != 0) throw wire::DecodeError("trailing bytes after mesh payload");
  return p;
}

// ---------------------------------------------------------------------------
// Poisson solve

namespace detail {

inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

struct PlanDeleter {
  void operator()(fftw_plan_s* p) const {
    std::lock_guard lock(fftw_planner_mutex());
    fftw_destroy_plan(p);
  }
};
using Plan = std::unique_ptr<fftw_plan_s, PlanDeleter>;

struct FftwFree {
  void operator()(fftw_complex* p) const { fftw_free(p); }
};
using ComplexBuffer = std::unique_ptr<fftw_complex[], FftwFree>;

inline ComplexBuffer make_buffer(std::size_t n) {
  auto* p = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * n));
  if (!p) throw std::bad_alloc();
  return ComplexBuffer(p);
}

/// 2-D transforms over planes [x_lo, x_hi).
inline Plan plane_plan(fftw_complex* data, int n, int x_lo, int x_hi, int sign) {
  const int dims[2] = {n, n};
  std::lock_guard lock(fftw_planner_mutex());
  fftw_complex* base = data + static_cast<std::ptrdiff_t>(x_lo) * n * n;
  return Plan(fftw_plan_many_dft(2, dims, x_hi - x_lo, base, nullptr, 1, n * n, base, nullptr, 1,
                                 n * n, sign, FFTW_ESTIMATE | FFTW_UNALIGNED));
}

/// 1-D transforms along x for lines with y in [y_lo, y_hi).
inline Plan line_plan(fftw_complex* data, int n, int y_lo, int y_hi, int sign) {
  const int dims[1] = {n};
  std::lock_guard lock(fftw_planner_mutex());
  fftw_complex* base = data + static_cast<std::ptrdiff_t>(y_lo) * n;
  return Plan(fftw_plan_many_dft(1, dims, (y_hi - y_lo) * n, base, nullptr, n * n, 1, base, nullptr,
                                 n * n, 1, sign, FFTW_ESTIMATE | FFTW_UNALIGNED));
}

}  // namespace detail

/// Plane ranges each work unit transforms. Built from site slabs so the FFT
/// work follows the ownership decomposition.
struct SlabPlan {
  std::vector<std::pair<std::uint32_t, std::uint32_t>> ranges;

  static SlabPlan whole(std::uint32_t n) { return {{{0, n}}}; }

  static SlabPlan from_domains(std::span<const SlabDomain> domains, std::uint32_t n) {
    SlabPlan plan;
    std::uint32_t prev = 0;
    for (std::size_t i = 0; i < domains.size(); ++i) {
      auto hi = i + 1 == domains.size()
                    ? n
                    : static_cast<std::uint32_t>(std::lround(domains[i].hi * n));
      hi = std::clamp(hi, prev, n);
      if (hi > prev) plan.ranges.emplace_back(prev, hi);
      prev = hi;
    }
    if (plan.ranges.empty()) plan.ranges.emplace_back(0, n);
    return plan;
  }
};

namespace detail {

// Forward or inverse 3-D transform: plane transforms per slab range, then
// line transforms along x per matching range of y.
inline void slab_transform(fftw_complex* data, int n, const SlabPlan& plan, int sign, unsigned workers) {
  auto planes = [&] {
    std::vector<Plan> plans;
    for (auto [lo, hi] : plan.ranges) plans.push_back(plane_plan(data, n, lo, hi, sign));
    parallel_for(plans.size(), workers, [&](std::size_t b, std::size_t e, unsigned) {
      for (std::size_t i = b; i < e; ++i) {
        fftw_complex* base = data + static_cast<std::ptrdiff_t>(plan.ranges[i].first) * n * n;
        fftw_execute_dft(plans[i].get(), base, base);
      }
    });
  };
  auto lines = [&] {
    std::vector<Plan> plans;
    for (auto [lo, hi] : plan.ranges) plans.push_back(line_plan(data, n, lo, hi, sign));
    parallel_for(plans.size(), workers, [&](std::size_t b, std::size_t e, unsigned) {
      for (std::size_t i = b; i < e; ++i) {
        fftw_complex* base = data + static_cast<std::ptrdiff_t>(plan.ranges[i].first) * n;
        fftw_execute_dft(plans[i].get(), base, base);
      }
    });
  };
  if (sign == FFTW_FORWARD) {
    planes();
    lines();
  } else {
    lines();
    planes();
  }
}

}  // namespace detail

/// Long-range accelerations on the mesh from the assembled cell masses:
///   a(k) = i k 4 pi exp(-k^2 r_s^2) / k^2 * rho(k),   a(0) = 0
/// with spectral derivatives (Nyquist components zeroed).
inline ForceMesh solve_long_range(const DensityMesh& density, double r_split,
                                  const SlabPlan& plan, unsigned workers = 1, bool deconvolve = false) {
  const std::uint32_t un = density.size;
  if (un < 2 || (un & (un - 1)) != 0) throw InvalidInput("mesh size must be a power of two");
  if (density.cells.size() != static_cast<std::size_t>(un) * un * un)
    throw InvalidInput("mesh size mismatch");
  {
    std::uint32_t covered = 0;
    for (auto [lo, hi] : plan.ranges) {
      if (lo != covered || hi <= lo) throw InvalidInput("slab plan must tile the mesh");
      covered = hi;
    }
    if (covered != un) throw InvalidInput("slab plan must tile the mesh");
  }
  const int n = static_cast<int>(un);
  const std::size_t total = density.cells.size();
  const double cells_per_volume = static_cast<double>(total);

  auto rho = detail::make_buffer(total);
  for (std::size_t i = 0; i < total; ++i) {
    rho[i][0] = density.cells[i] * cells_per_volume;  // mass density, mean 1
    rho[i][1] = 0.0;
  }
  detail::slab_transform(rho.get(), n, plan, FFTW_FORWARD, workers);

  std::array<detail::ComplexBuffer, 3> acc = {detail::make_buffer(total), detail::make_buffer(total),
                                              detail::make_buffer(total)};
  const double two_pi = 2.0 * std::numbers::pi;
  auto wavenumber = [n, two_pi](int i) {
    const int f = i <= n / 2 ? i : i - n;
    return two_pi * f;
  };
  const double rs2 = r_split * r_split;
  // Deposit and gather each smooth by the CIC window sinc^2 per axis.
  auto sinc2 = [n](int i) {
    const int f = i <= n / 2 ? i : i - n;
    if (f == 0) return 1.0;
    const double x = std::numbers::pi * f / n;
    const double s = std::sin(x) / x;
    return s * s;
  };
  auto cic_window_sq = [&](std::size_t ix, int iy, int iz) {
    const double w = sinc2(static_cast<int>(ix)) * sinc2(iy) * sinc2(iz);
    return w * w;
  };
  parallel_for(static_cast<std::size_t>(n), workers, [&](std::size_t b, std::size_t e, unsigned) {
    for (std::size_t ix = b; ix < e; ++ix) {
      const double kx = wavenumber(static_cast<int>(ix));
      for (int iy = 0; iy < n; ++iy) {
        const double ky = wavenumber(iy);
        for (int iz = 0; iz < n; ++iz) {
          const double kz = wavenumber(iz);
          const std::size_t idx = (ix * n + iy) * n + iz;
          const double k2 = kx * kx + ky * ky + kz * kz;
          double green = k2 > 0.0 ? 4.0 * std::numbers::pi * std::exp(-k2 * rs2) / k2 : 0.0;
          if (deconvolve && green != 0.0) green /= cic_window_sq(ix, iy, iz);
          const double kd[3] = {static_cast<int>(ix) == n / 2 ? 0.0 : kx, iy == n / 2 ? 0.0 : ky,
                                iz == n / 2 ? 0.0 : kz};
          const double re = rho[idx][0] * green;
          const double im = rho[idx][1] * green;
          for (int c = 0; c < 3; ++c) {
            // i * k * (re + i im) = -k im + i k re
            acc[c][idx][0] = -kd[c] * im;
            acc[c][idx][1] = kd[c] * re;
          }
        }
      }
    }
  });

  ForceMesh out;
  out.size = un;
  const double norm = 1.0 / static_cast<double>(total);
  for (int c = 0; c < 3; ++c) {
    detail::slab_transform(acc[c].get(), n, plan, FFTW_BACKWARD, workers);
    out.comp[c].resize(total);
    for (std::size_t i = 0; i < total; ++i) out.comp[c][i] = acc[c][i][0] * norm;
  }
  return out;
}

inline ForceMesh solve_long_range(const DensityMesh& density, double r_split) {
  return solve_long_range(density, r_split, SlabPlan::whole(density.size));
}

}  // namespace treegrid
