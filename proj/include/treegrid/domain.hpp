#pragma once

// Core value types shared by every treegrid module.
//
// Internal units: G = 1, box length = 1, mean comoving density = 1 (so the
// total mass in the box is 1). Physical units only appear at I/O.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace treegrid {

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  constexpr double& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }
  constexpr double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }

  constexpr Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }
  constexpr Vec3& operator-=(const Vec3& o) { x -= o.x; y -= o.y; z -= o.z; return *this; }
  constexpr Vec3& operator*=(double s) { x *= s; y *= s; z *= s; return *this; }

  friend constexpr Vec3 operator+(Vec3 a, const Vec3& b) { return a += b; }
  friend constexpr Vec3 operator-(Vec3 a, const Vec3& b) { return a -= b; }
  friend constexpr Vec3 operator*(Vec3 a, double s) { return a *= s; }
  friend constexpr Vec3 operator*(double s, Vec3 a) { return a *= s; }
  friend constexpr Vec3 operator-(const Vec3& a) { return {-a.x, -a.y, -a.z}; }
  friend constexpr bool operator==(const Vec3&, const Vec3&) = default;
};

constexpr double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

struct Particle {
  std::uint64_t id = 0;
  Vec3 pos;   // comoving, box units, [0,1) per axis
  Vec3 mom;   // p = a^2 dx/dt, box units per internal time unit
  double mass = 0.0;

  friend bool operator==(const Particle&, const Particle&) = default;
};

/// Error raised when an argument breaks a documented precondition.
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct CosmologyParams {
  double omega0 = 0.3;
  double lambda0 = 0.7;
  double h0 = 70.0;            // km/s/Mpc
  double sigma8 = 0.8;         // carried as metadata only
  double box_mpc = 30.0;       // comoving
  double softening_box = 175.0e-6 / 30.0;  // 175 pc in a 30 Mpc box
  double a_initial = 1.0 / 1.0026;

  void validate() const {
    if (!(omega0 > 0.0)) throw InvalidInput("omega0 must be positive");
    if (!(lambda0 >= 0.0)) throw InvalidInput("lambda0 must be non-negative");
    if (!(std::abs(omega0 + lambda0 - 1.0) < 1e-12))
      throw InvalidInput("omega0 + lambda0 must equal 1 (flat universe)");
    if (!(a_initial > 0.0 && a_initial <= 1.0)) throw InvalidInput("a_initial must lie in (0, 1]");
    if (!(softening_box >= 0.0)) throw InvalidInput("softening must be non-negative");
    if (!(box_mpc > 0.0) || !(h0 > 0.0)) throw InvalidInput("box size and H0 must be positive");
  }
};

struct RunConfig {
  std::uint64_t n_particles = 32 * 32 * 32;
  std::uint32_t mesh_size = 64;
  double theta = 0.5;
  std::uint32_t sampling_rate = 20000;
  double boundary_move_limit = 1e-5;
  std::uint32_t n_sites = 3;
  std::uint32_t workers_per_site = 1;
  double r_split = 0.0;   // 0: derive 1.25 mesh cells
  double r_cut = 0.0;     // 0: derive kRcutOverRsplit * r_split
  std::uint64_t seed = 12345;
  std::uint32_t leaf_capacity = 8;
  double cost_alpha = 0.5;
  bool sparse_mesh = true;
  bool cic_deconvolve = true;   // divide out the deposit and gather CIC windows in k-space

  static constexpr double kRsplitCells = 1.25;
  static constexpr double kRcutOverRsplit = 8.0;

  [[nodiscard]] double split_scale() const {
    return r_split > 0.0 ? r_split : kRsplitCells / static_cast<double>(mesh_size);
  }
  [[nodiscard]] double cutoff() const {
    return r_cut > 0.0 ? r_cut : kRcutOverRsplit * split_scale();
  }

  void validate() const {
    if (!(theta >= 0.0)) throw InvalidInput("theta must be >= 0");
    if (sampling_rate < 1) throw InvalidInput("sampling_rate must be >= 1");
    if (!(boundary_move_limit >= 0.0 && boundary_move_limit <= 1.0))
      throw InvalidInput("boundary_move_limit must lie in [0, 1]");
    if (n_sites < 1) throw InvalidInput("n_sites must be >= 1");
    if (workers_per_site < 1) throw InvalidInput("workers_per_site must be >= 1");
    if (mesh_size < 2 || (mesh_size & (mesh_size - 1)) != 0)
      throw InvalidInput("mesh_size must be a power of two");
    if (!(cutoff() >= 3.0 * split_scale())) throw InvalidInput("r_cut must be >= 3 r_split");
    if (!(cutoff() < 0.5)) throw InvalidInput("r_cut must stay below half the box");
    if (leaf_capacity < 1) throw InvalidInput("leaf_capacity must be >= 1");
    if (!(cost_alpha >= 0.0 && cost_alpha <= 1.0)) throw InvalidInput("cost_alpha must lie in [0, 1]");
  }
};

/// One site's slab [lo, hi) along x.
struct SlabDomain {
  std::uint32_t site_id = 0;
  double lo = 0.0;
  double hi = 1.0;

  [[nodiscard]] bool contains(double x) const { return x >= lo && x < hi; }
  friend bool operator==(const SlabDomain&, const SlabDomain&) = default;
};

struct StepTimings {
  std::uint64_t step = 0;
  double z = 0.0;
  double calc_s = 0.0;
  double migrate_s = 0.0;
  double sample_s = 0.0;
  double let_s = 0.0;
  double mesh_s = 0.0;
  double total_s = 0.0;
  std::uint64_t interactions = 0;

  [[nodiscard]] double comm_s() const { return migrate_s + sample_s + let_s + mesh_s; }
};

struct DomainViolation {
  std::uint32_t site_id = 0;
  double boundary = 0.0;
  std::string message;
};

/// Checks that the slabs tile [0,1) in site order. Returns the first problem
/// found, or nothing.
inline std::optional<DomainViolation> validate_domains(std::span<const SlabDomain> domains) {
  if (domains.empty()) return DomainViolation{0, 0.0, "empty domain list"};
  auto fail = [](const SlabDomain& d, double b, const char* what) {
    std::ostringstream os;
    os << what << " at " << b << " (site " << d.site_id << ")";
    return DomainViolation{d.site_id, b, os.str()};
  };
  double expect = 0.0;
  for (std::size_t i = 0; i < domains.size(); ++i) {
    const auto& d = domains[i];
    if (d.site_id != i) return fail(d, d.lo, "site out of order");
    if (!std::isfinite(d.lo) || !std::isfinite(d.hi)) return fail(d, d.lo, "non-finite boundary");
    if (d.lo > expect) return fail(d, expect, "gap");
    if (d.lo < expect) return fail(d, d.lo, "overlap");
    if (!(d.hi > d.lo)) return fail(d, d.hi, "empty or inverted slab");
    expect = d.hi;
  }
  if (expect != 1.0) return fail(domains.back(), expect, "gap");
  return std::nullopt;
}

/// Equal-width slabs for n sites.
inline std::vector<SlabDomain> equal_slabs(std::uint32_t n) {
  if (n == 0) throw InvalidInput("need at least one site");
  std::vector<SlabDomain> out(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    out[i].site_id = i;
    out[i].lo = i == 0 ? 0.0 : static_cast<double>(i) / n;
    out[i].hi = i + 1 == n ? 1.0 : static_cast<double>(i + 1) / n;
  }
  return out;
}

/// Index of the slab that owns x (lo-inclusive, hi-exclusive).
inline std::uint32_t owner_of(std::span<const SlabDomain> domains, double x) {
  for (const auto& d : domains)
    if (d.contains(x)) return d.site_id;
  return domains.back().site_id;
}

inline double wrap_unit(double v) {
  double w = v - std::floor(v);
  // floor can leave w == 1.0 for tiny negative inputs.
  if (w >= 1.0) w = 0.0;
  return w;
}

inline Vec3 wrap_position(const Vec3& p) {
  if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z))
    throw InvalidInput("non-finite position");
  return {wrap_unit(p.x), wrap_unit(p.y), wrap_unit(p.z)};
}

/// Minimum-image displacement component in a unit periodic box.
inline double min_image(double d) {
  if (d > 0.5) return d - 1.0;
  if (d < -0.5) return d + 1.0;
  return d;
}

inline Vec3 min_image(const Vec3& d) { return {min_image(d.x), min_image(d.y), min_image(d.z)}; }

/// Conversion between internal and physical units for a given cosmology.
struct UnitSystem {
  double length_mpc = 1.0;       // internal length -> comoving Mpc
  double mass_msun = 1.0;        // internal mass -> solar masses
  double velocity_kms = 1.0;     // internal velocity -> km/s

  static UnitSystem from(const CosmologyParams& c) {
    // Critical density today in Msun/Mpc^3 for H0 = 100 h km/s/Mpc.
    constexpr double kRhoCrit100 = 2.77536627e11;
    const double h = c.h0 / 100.0;
    UnitSystem u;
    u.length_mpc = c.box_mpc;
    u.mass_msun = kRhoCrit100 * h * h * c.omega0 * c.box_mpc * c.box_mpc * c.box_mpc;
    // Internal H0 follows from G = rho_bar = 1: H0^2 = 8 pi / (3 omega0).
    const double h0_internal = std::sqrt(8.0 * std::numbers::pi / (3.0 * c.omega0));
    u.velocity_kms = c.box_mpc * c.h0 / h0_internal;
    return u;
  }

  [[nodiscard]] double to_mpc(double x) const { return x * length_mpc; }
  [[nodiscard]] double from_mpc(double x) const { return x / length_mpc; }
  [[nodiscard]] double to_msun(double m) const { return m * mass_msun; }
  [[nodiscard]] double from_msun(double m) const { return m / mass_msun; }
  [[nodiscard]] double to_kms(double v) const { return v * velocity_kms; }
  [[nodiscard]] double from_kms(double v) const { return v / velocity_kms; }
};

}  // namespace treegrid
