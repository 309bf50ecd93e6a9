#pragma once

// Initial conditions, a brute-force Ewald oracle, and desk-scale experiment
// scenarios with tab-separated reports.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <functional>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "treegrid/balancer.hpp"
#include "treegrid/domain.hpp"
#include "treegrid/mesh.hpp"
#include "treegrid/orchestrator.hpp"
#include "treegrid/transport.hpp"
#include "treegrid/tree.hpp"

namespace treegrid {

// ---------------------------------------------------------------------------
// Initial conditions

enum class IcKind { uniform, lattice, lattice_perturbed, plummer };

inline IcKind parse_ic_kind(const std::string& s) {
  if (s == "uniform" || s == "uniform-random") return IcKind::uniform;
  if (s == "lattice") return IcKind::lattice;
  if (s == "lattice-perturbed") return IcKind::lattice_perturbed;
  if (s == "plummer") return IcKind::plummer;
  throw InvalidInput("unknown initial-condition kind '" + s + "'");
}

inline std::uint32_t lattice_side(std::uint64_t n) {
  const auto side = static_cast<std::uint32_t>(std::llround(std::cbrt(static_cast<double>(n))));
  if (static_cast<std::uint64_t>(side) * side * side != n) throw InvalidInput("lattice needs a cubic particle count");
  return side;
}

/// Equal-mass particles with total mass 1. For lattice-perturbed, `amplitude`
/// is the x-displacement of a single sine mode along x; for plummer it is the
/// scale radius (0 selects 0.05).
inline std::vector<Particle> generate_ic(IcKind kind, std::uint64_t n, std::uint64_t seed, double amplitude = 0.0) {
  if (n < 1) throw InvalidInput("need at least one particle");
  std::vector<Particle> out(n);
  const double m = 1.0 / static_cast<double>(n);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (std::uint64_t i = 0; i < n; ++i) {
    out[i].id = i;
    out[i].mass = m;
  }
  switch (kind) {
    case IcKind::uniform:
      for (auto& p : out) {
        p.pos.x = u01(rng);
        p.pos.y = u01(rng);
        p.pos.z = u01(rng);
        p.pos = wrap_position(p.pos);
      }
      break;
    case IcKind::lattice:
    case IcKind::lattice_perturbed: {
      const std::uint32_t side = lattice_side(n);
      const double a = kind == IcKind::lattice_perturbed ? amplitude : 0.0;
      std::uint64_t k = 0;
      for (std::uint32_t i = 0; i < side; ++i)
        for (std::uint32_t j = 0; j < side; ++j)
          for (std::uint32_t l = 0; l < side; ++l, ++k) {
            const double qx = (i + 0.5) / side;
            Vec3 q{qx, (j + 0.5) / side, (l + 0.5) / side};
            if (a != 0.0) q.x += a * std::sin(2.0 * std::numbers::pi * qx);
            out[k].pos = wrap_position(q);
          }
      break;
    }
    case IcKind::plummer: {
      const double b = amplitude > 0.0 ? amplitude : 0.05;
      const double r_max = std::min(0.45, 20.0 * b);
      Vec3 vcm;
      for (auto& p : out) {
        double r = 0.0;
        do {
          const double x = std::max(u01(rng), 1e-300);
          r = b / std::sqrt(std::pow(x, -2.0 / 3.0) - 1.0);
        } while (!(r < r_max));
        auto iso = [&](double len) {
          const double cz = 2.0 * u01(rng) - 1.0;
          const double ph = 2.0 * std::numbers::pi * u01(rng);
          const double sz = std::sqrt(1.0 - cz * cz);
          return Vec3{len * sz * std::cos(ph), len * sz * std::sin(ph), len * cz};
        };
        p.pos = wrap_position(Vec3{0.5, 0.5, 0.5} + iso(r));
        // Rejection sample q = v / v_escape from q^2 (1 - q^2)^(7/2).
        double q = 0.0;
        for (;;) {
          q = u01(rng);
          if (0.1 * u01(rng) < q * q * std::pow(1.0 - q * q, 3.5)) break;
        }
        const double v_esc = std::sqrt(2.0) * std::pow(r * r + b * b, -0.25);  // G = M = 1
        p.mom = iso(q * v_esc);
        vcm += p.mom;
      }
      vcm *= 1.0 / static_cast<double>(n);
      for (auto& p : out) p.mom -= vcm;
      break;
    }
  }
  return out;
}

inline std::vector<Particle> generate_ic(const std::string& kind, std::uint64_t n, std::uint64_t seed,
                                         double amplitude = 0.0) {
  return generate_ic(parse_ic_kind(kind), n, seed, amplitude);
}

// ---------------------------------------------------------------------------
// Ewald oracle

struct EwaldParams {
  double alpha = 2.0;          // splitting, 1/box
  int replica_cutoff = 3;      // real-space images with |n| <= cutoff
  int recip_cutoff = 8;        // reciprocal vectors with |h| <= cutoff
  double eps = 0.0;            // Plummer softening on the nearest image
  // When r_split > 0 the softening correction is weighted by the short-range
  // split factor and cut at r_cut, matching the TreePM force law exactly in
  // the continuum limit. Otherwise plain Plummer softening is applied.
  double r_split = 0.0;
  double r_cut = 0.0;
};

inline constexpr std::size_t kEwaldMaxParticles = 4096;

namespace detail {

inline std::vector<Vec3> lattice_vectors(int cutoff, bool skip_origin) {
  std::vector<Vec3> out;
  for (int i = -cutoff; i <= cutoff; ++i)
    for (int j = -cutoff; j <= cutoff; ++j)
      for (int k = -cutoff; k <= cutoff; ++k) {
        if (i * i + j * j + k * k > cutoff * cutoff) continue;
        if (skip_origin && i == 0 && j == 0 && k == 0) continue;
        out.push_back({double(i), double(j), double(k)});
      }
  return out;
}

// Reciprocal half-space: one of each +-h pair.
inline std::vector<Vec3> half_space(int cutoff) {
  std::vector<Vec3> out;
  for (const auto& h : lattice_vectors(cutoff, true)) {
    if (h.x > 0 || (h.x == 0 && (h.y > 0 || (h.y == 0 && h.z > 0)))) out.push_back(h);
  }
  return out;
}

// Short-range split factor S(r) (see short_range_kernel).
inline double split_factor(double r, double r_split) {
  const double u = r / (2.0 * r_split);
  return std::erfc(u) + r / (r_split * std::sqrt(std::numbers::pi)) * std::exp(-u * u);
}

// Softening correction g such that the extra acceleration on i from j is
// m_j g(r) d, and its pair potential per unit mass product.
inline double softening_force(double r, const EwaldParams& ep) {
  const double s2 = r * r + ep.eps * ep.eps;
  const double diff = 1.0 / (s2 * std::sqrt(s2)) - 1.0 / (r * r * r);
  if (ep.r_split <= 0.0) return diff;
  if (r >= ep.r_cut) return 0.0;
  return split_factor(r, ep.r_split) * diff;
}

inline double softening_potential(double r, const EwaldParams& ep) {
  if (ep.r_split <= 0.0) return 1.0 / r - 1.0 / std::sqrt(r * r + ep.eps * ep.eps);
  if (r >= ep.r_cut) return 0.0;
  // V = -int_r^rc g(s) s ds, integrated in ln s.
  constexpr int kPanels = 48;
  static constexpr double x[4] = {-0.8611363115940526, -0.3399810435848563, 0.3399810435848563, 0.8611363115940526};
  static constexpr double w[4] = {0.3478548451374538, 0.6521451548625461, 0.6521451548625461, 0.3478548451374538};
  const double t0 = std::log(r), t1 = std::log(ep.r_cut);
  const double h = (t1 - t0) / kPanels;
  double sum = 0.0;
  for (int p = 0; p < kPanels; ++p) {
    const double mid = t0 + (p + 0.5) * h;
    for (int k = 0; k < 4; ++k) {
      const double s = std::exp(mid + 0.5 * h * x[k]);
      sum += 0.5 * h * w[k] * softening_force(s, ep) * s * s;
    }
  }
  return -sum;
}

inline void check_ewald(std::size_t n, const EwaldParams& ep) {
  if (n > kEwaldMaxParticles) throw InvalidInput("Ewald oracle limited to " + std::to_string(kEwaldMaxParticles) + " particles");
  if (ep.replica_cutoff < 1 || ep.recip_cutoff < 1 || !(ep.alpha > 0.0)) throw InvalidInput("bad Ewald parameters");
}

}  // namespace detail

/// Periodic accelerations by classic Ewald summation (unit box, G = 1,
/// uniform neutralising background).
inline std::vector<Vec3> ewald_force(std::span<const Particle> ps, const EwaldParams& ep = {}) {
  detail::check_ewald(ps.size(), ep);
  const std::size_t n = ps.size();
  const double al = ep.alpha;
  const double two_al_sqrt_pi = 2.0 * al / std::sqrt(std::numbers::pi);
  std::vector<Vec3> acc(n);
  const auto images = detail::lattice_vectors(ep.replica_cutoff, false);

  for (std::size_t i = 0; i < n; ++i) {
    Vec3 a;
    for (std::size_t j = 0; j < n; ++j) {
      const Vec3 d0 = min_image(ps[j].pos - ps[i].pos);
      for (const auto& im : images) {
        const Vec3 d = d0 + im;
        const double r2 = dot(d, d);
        if (r2 == 0.0) continue;
        const double r = std::sqrt(r2);
        const double f = (std::erfc(al * r) + two_al_sqrt_pi * r * std::exp(-al * al * r2)) / (r2 * r);
        a += d * (f * ps[j].mass);
      }
      if (ep.eps > 0.0 && j != i) {
        const double r = norm(d0);
        if (r > 0.0) a += d0 * (ps[j].mass * detail::softening_force(r, ep));
      }
    }
    acc[i] = a;
  }

  // Reciprocal part through structure factors.
  for (const auto& h : detail::half_space(ep.recip_cutoff)) {
    const Vec3 k = h * (2.0 * std::numbers::pi);
    const double k2 = dot(k, k);
    const double w = 2.0 * 4.0 * std::numbers::pi * std::exp(-k2 / (4.0 * al * al)) / k2;  // x2 for -h
    std::complex<double> s{0.0, 0.0};
    std::vector<std::complex<double>> e(n);
    for (std::size_t j = 0; j < n; ++j) {
      const double ph = dot(k, ps[j].pos);
      e[j] = {std::cos(ph), std::sin(ph)};
      s += ps[j].mass * e[j];
    }
    for (std::size_t i = 0; i < n; ++i) {
      // sum_j m_j sin(k.(x_j - x_i)) = Im(conj(e_i) * S)
      const double im = (std::conj(e[i]) * s).imag();
      acc[i] += k * (w * im);
    }
  }
  return acc;
}

/// Per-particle periodic potential consistent with ewald_force (self-image
/// terms included, zero-mean background).
inline std::vector<double> ewald_potential(std::span<const Particle> ps, const EwaldParams& ep = {}) {
  detail::check_ewald(ps.size(), ep);
  const std::size_t n = ps.size();
  const double al = ep.alpha;
  const double pi = std::numbers::pi;
  std::vector<double> phi(n, 0.0);
  const auto images = detail::lattice_vectors(ep.replica_cutoff, false);
  const auto recip = detail::half_space(ep.recip_cutoff);

  // Self interaction with own images, the reciprocal sum at r = 0 and the
  // background term.
  double self = 0.0;
  for (const auto& im : images) {
    const double r = norm(im);
    if (r > 0.0) self += std::erfc(al * r) / r;
  }
  for (const auto& h : recip) {
    const Vec3 k = h * (2.0 * pi);
    const double k2 = dot(k, k);
    self += 2.0 * 4.0 * pi * std::exp(-k2 / (4.0 * al * al)) / k2;
  }
  self += -pi / (al * al) - 2.0 * al / std::sqrt(pi);

  for (std::size_t i = 0; i < n; ++i) {
    double p = -ps[i].mass * self;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const Vec3 d0 = min_image(ps[j].pos - ps[i].pos);
      double psi = -pi / (al * al);
      for (const auto& im : images) {
        const double r = norm(d0 + im);
        if (r > 0.0) psi += std::erfc(al * r) / r;
      }
      if (ep.eps > 0.0) {
        const double r = norm(d0);
        if (r > 0.0) psi -= detail::softening_potential(r, ep);
      }
      p -= ps[j].mass * psi;
    }
    phi[i] = p;
  }
  for (const auto& h : recip) {
    const Vec3 k = h * (2.0 * pi);
    const double k2 = dot(k, k);
    const double w = 2.0 * 4.0 * pi * std::exp(-k2 / (4.0 * al * al)) / k2;
    std::complex<double> s{0.0, 0.0};
    std::vector<std::complex<double>> e(n);
    for (std::size_t j = 0; j < n; ++j) {
      const double ph = dot(k, ps[j].pos);
      e[j] = {std::cos(ph), std::sin(ph)};
      s += ps[j].mass * e[j];
    }
    for (std::size_t i = 0; i < n; ++i) {
      // j != i only: remove the self term, which sits in `self` above.
      const double c = (std::conj(e[i]) * s).real() - ps[i].mass;
      phi[i] -= w * c;
    }
  }
  return phi;
}

/// Kinetic plus potential energy with the expansion frozen (a = 1).
inline double total_energy(std::span<const Particle> ps, const EwaldParams& ep) {
  const auto phi = ewald_potential(ps, ep);
  double e = 0.0;
  for (std::size_t i = 0; i < ps.size(); ++i) e += 0.5 * ps[i].mass * dot(ps[i].mom, ps[i].mom) + 0.5 * ps[i].mass * phi[i];
  return e;
}

/// sqrt(mean_i |a_i - ref_i|^2 / |ref_i|^2)
inline double rms_relative_error(std::span<const Vec3> a, std::span<const Vec3> ref) {
  if (a.size() != ref.size() || a.empty()) throw InvalidInput("force arrays must match and be non-empty");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Vec3 d = a[i] - ref[i];
    s += dot(d, d) / dot(ref[i], ref[i]);
  }
  return std::sqrt(s / static_cast<double>(a.size()));
}

// ---------------------------------------------------------------------------
// Single-site TreePM force, in input order

inline std::vector<Vec3> treepm_forces(std::span<const Particle> ps, const RunConfig& cfg, double eps,
                                       std::uint64_t* interactions = nullptr) {
  RunConfig c = cfg;
  c.n_sites = 1;
  c.validate();
  SiteRuntime rt;
  rt.domains = equal_slabs(1);
  rt.particles.assign(ps.begin(), ps.end());
  rt.config = c;
  rt.cosmo.softening_box = eps;
  rt.channels.assign(1, nullptr);
  const auto ft = force_phases(rt);
  if (interactions) *interactions = ft.interactions;
  return rt.accel;
}

// ---------------------------------------------------------------------------
// Scenarios

struct Assertion {
  std::string name;
  double measured = 0.0;
  double expected = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  bool timing = false;  // wall-clock dependent; left out of deterministic reports
};

struct ScenarioReport {
  std::string scenario;
  std::vector<Assertion> assertions;
  std::vector<StepTimings> timings;

  [[nodiscard]] bool passed() const {
    return std::all_of(assertions.begin(), assertions.end(), [](const Assertion& a) { return a.pass; });
  }
};

inline std::string format_number(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

inline std::string format_report(const ScenarioReport& r, bool include_timing = true) {
  std::string out;
  for (const auto& a : r.assertions) {
    if (a.timing && !include_timing) continue;
    out += a.name + '\t' + format_number(a.measured) + '\t' + format_number(a.expected) + '\t' +
           format_number(a.tolerance) + '\t' + (a.pass ? "PASS" : "FAIL") + '\n';
  }
  return out;
}

class ScenarioFailure : public std::runtime_error {
 public:
  explicit ScenarioFailure(const ScenarioReport& r) : std::runtime_error(describe(r)), report_(r) {}
  [[nodiscard]] const ScenarioReport& report() const { return report_; }

 private:
  static std::string describe(const ScenarioReport& r) {
    std::string s = "scenario '" + r.scenario + "' failed:";
    for (const auto& a : r.assertions)
      if (!a.pass)
        s += "\n  " + a.name + ": measured " + format_number(a.measured) + ", expected " +
             format_number(a.expected) + " (tolerance " + format_number(a.tolerance) + ")";
    return s;
  }
  ScenarioReport report_;
};

namespace detail {

inline Assertion at_most(std::string name, double measured, double limit, bool timing = false) {
  return {std::move(name), measured, limit, 0.0, measured <= limit, timing};
}
inline Assertion less_than(std::string name, double measured, double bound, bool timing = false) {
  return {std::move(name), measured, bound, 0.0, measured < bound, timing};
}
inline Assertion within(std::string name, double measured, double expected, double tol, bool timing = false) {
  return {std::move(name), measured, expected, tol, std::abs(measured - expected) <= tol, timing};
}

}  // namespace detail

struct ScenarioOptions {
  std::uint64_t seed = 20100401;
  std::string timings_dir;  // when set, scenarios write timings CSV files here
};

/// Force error against Ewald for theta in {0.3, 0.5}.
struct ForceAccuracy {
  double rms_theta_05 = 0.0;
  double rms_theta_03 = 0.0;
};

inline ForceAccuracy measure_force_accuracy(std::uint64_t n, std::uint64_t seed, std::uint32_t mesh = 64) {
  const auto ps = generate_ic(IcKind::uniform, n, seed);
  RunConfig cfg;
  cfg.mesh_size = mesh;
  const double eps = CosmologyParams{}.softening_box;
  EwaldParams ep;
  ep.eps = eps;
  const auto ref = ewald_force(ps, ep);
  ForceAccuracy fa;
  cfg.theta = 0.5;
  fa.rms_theta_05 = rms_relative_error(treepm_forces(ps, cfg, eps), ref);
  cfg.theta = 0.3;
  fa.rms_theta_03 = rms_relative_error(treepm_forces(ps, cfg, eps), ref);
  return fa;
}

/// Per-step comm seconds and comm fraction of one emulated run.
struct OverheadSample {
  double latency_ms = 0.0;
  double comm_s_per_step = 0.0;
  double comm_fraction = 0.0;
  std::vector<StepTimings> rows;
};

inline OverheadSample measure_overhead(const SimulationOptions& base, std::span<const Particle> ic, double latency_ms,
                                       std::uint64_t seed) {
  transport::EmuNetConfig net;
  net.one_way_latency_ms = latency_ms;
  net.seed = seed;
  const auto res = run_emulated(base, ic, net);
  OverheadSample s;
  s.latency_ms = latency_ms;
  s.rows = res.rows;
  // Per-site comm seconds: sites wait on each other, so take the step's
  // largest per-site comm total.
  double comm = 0.0, total = 0.0;
  for (std::size_t k = 0; k < res.rows.size(); ++k) {
    double step_comm = 0.0;
    for (const auto& site : res.site_rows) step_comm = std::max(step_comm, site[k].comm_s());
    comm += step_comm;
    total += res.rows[k].total_s;
  }
  const double steps = std::max<double>(1.0, static_cast<double>(res.rows.size()));
  s.comm_s_per_step = comm / steps;
  s.comm_fraction = total > 0.0 ? comm / total : 0.0;
  return s;
}

/// Two sites with static per-particle costs 2:1 (left site's particles cost
/// twice as much). Returns the cost spread (max/min - 1) after each step, and
/// every boundary move.
struct BalancerTrace {
  std::vector<double> spread;
  std::vector<double> moves;
  double boundary = 0.5;
};

inline BalancerTrace synthetic_balance(std::uint32_t steps, double move_limit, std::uint64_t seed,
                                       std::size_t n = 200000, std::uint32_t sampling_rate = 100) {
  // Uniform particles; a particle left of x = 0.5 costs 2 units, right 1.
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::vector<Particle> ps(n);
  for (std::size_t i = 0; i < n; ++i) {
    ps[i].id = i;
    ps[i].pos = {u01(rng), u01(rng), u01(rng)};
    ps[i].mass = 1.0 / n;
  }
  auto unit_cost = [](double x) { return x < 0.5 ? 2.0 : 1.0; };
  auto doms = equal_slabs(2);
  BalancerParams bp;
  bp.alpha = 1.0;  // force time only; counts are meant to diverge
  bp.move_limit = move_limit;
  BalancerTrace tr;
  for (std::uint32_t s = 0; s < steps; ++s) {
    std::vector<SiteLoadReport> reps(2);
    std::vector<std::vector<Particle>> local(2);
    for (const auto& p : ps) local[owner_of(doms, p.pos.x)].push_back(p);
    double cost[2] = {0.0, 0.0};
    for (std::uint32_t i = 0; i < 2; ++i) {
      for (const auto& p : local[i]) cost[i] += unit_cost(p.pos.x);
      reps[i].site_id = i;
      reps[i].force_time_s = cost[i];
      reps[i].particle_count = local[i].size();
      reps[i].sample_positions = sample_particles(local[i], sampling_rate, seed + 31 * s + i);
    }
    auto next = propose_boundaries(doms, reps, bp);
    tr.moves.push_back(next[0].hi - doms[0].hi);
    doms = next;
    double after[2] = {0.0, 0.0};
    for (const auto& p : ps) after[owner_of(doms, p.pos.x)] += unit_cost(p.pos.x);
    tr.spread.push_back(std::max(after[0], after[1]) / std::min(after[0], after[1]) - 1.0);
  }
  tr.boundary = doms[0].hi;
  return tr;
}

inline std::vector<std::string> scenario_names() {
  return {"force-accuracy", "three-site-overhead", "distributed-serial", "sparse-mesh", "balancer-convergence",
          "energy-plummer"};
}

/// Runs a named scenario and evaluates its assertions.
inline ScenarioReport run_scenario(const std::string& name, const ScenarioOptions& so = {}) {
  ScenarioReport rep;
  rep.scenario = name;
  auto& as = rep.assertions;
  if (name == "force-accuracy") {
    const auto fa = measure_force_accuracy(512, so.seed);
    as.push_back(detail::at_most("rms_error_theta_0.5", fa.rms_theta_05, 0.02));
    as.push_back(detail::less_than("rms_error_theta_0.3", fa.rms_theta_03, fa.rms_theta_05));
  } else if (name == "three-site-overhead") {
    SimulationOptions opt;
    opt.run.n_particles = 4096;
    opt.run.mesh_size = 32;
    opt.run.n_sites = 3;
    opt.run.sampling_rate = 100;
    opt.steps = 3;
    opt.channel.n_streams = 4;
    const auto ic = generate_ic(IcKind::uniform, opt.run.n_particles, so.seed);
    const auto fast = measure_overhead(opt, ic, 0.0, so.seed);
    const auto slow = measure_overhead(opt, ic, 20.0, so.seed);
    rep.timings = slow.rows;
    as.push_back(detail::less_than("comm_fraction_0ms_vs_20ms", fast.comm_fraction, slow.comm_fraction, true));
    as.push_back(detail::less_than("comm_s_per_step_0ms_vs_20ms", fast.comm_s_per_step, slow.comm_s_per_step, true));
  } else if (name == "distributed-serial") {
    SimulationOptions opt;
    opt.run.n_particles = 4096;
    opt.run.mesh_size = 32;
    opt.run.sampling_rate = 100;
    opt.steps = 3;
    opt.channel.n_streams = 2;
    opt.channel.pace_bytes_per_s = 0;
    const auto ic = generate_ic(IcKind::uniform, opt.run.n_particles, so.seed);
    opt.run.n_sites = 1;
    const auto serial = run_emulated(opt, ic);
    opt.run.n_sites = 3;
    const auto dist = run_emulated(opt, ic);
    double worst = 0.0;
    for (std::size_t i = 0; i < serial.particles.size(); ++i) {
      const Vec3 d = min_image(dist.particles[i].pos - serial.particles[i].pos);
      worst = std::max({worst, std::abs(d.x), std::abs(d.y), std::abs(d.z)});
    }
    as.push_back(detail::at_most("max_position_difference", worst, 1e-10));
    as.push_back(detail::within("census", static_cast<double>(dist.particles.size()), static_cast<double>(ic.size()), 0.0));
  } else if (name == "sparse-mesh") {
    const std::uint32_t ng = 64;
    // Uniform fill: one particle per cell on average.
    const auto ps = generate_ic(IcKind::uniform, static_cast<std::uint64_t>(ng) * ng * ng, so.seed);
    const auto doms = equal_slabs(3);
    const auto parts = distribute(ps, doms);
    const double dense = static_cast<double>(payload_wire_bytes(static_cast<std::size_t>(ng) * ng * ng));
    for (std::uint32_t s = 0; s < 3; ++s) {
      const auto mesh = cic_assign(parts[s], ng, doms[s]);
      const double ratio = static_cast<double>(encode_mesh_payload(sparse_encode(mesh)).size()) / dense;
      as.push_back(detail::within("payload_ratio_site_" + std::to_string(s), ratio, 0.335, 0.055));
    }
  } else if (name == "balancer-convergence") {
    const auto tr = synthetic_balance(60, 0.01, so.seed);
    double worst_move = 0.0;
    for (double m : tr.moves) worst_move = std::max(worst_move, std::abs(m));
    as.push_back(detail::at_most("max_boundary_move", worst_move, 0.01));
    as.push_back(detail::at_most("final_cost_spread", tr.spread.back(), 0.05));
  } else if (name == "energy-plummer") {
    SimulationOptions opt;
    opt.run.n_particles = 1000;
    opt.run.n_sites = 1;
    opt.run.mesh_size = 64;
    opt.cosmo.softening_box = 0.01;
    opt.frozen_dt = 5e-4;
    opt.steps = 100;
    auto ic = generate_ic(IcKind::plummer, 1000, so.seed, 0.05);
    EwaldParams ep;
    ep.eps = opt.cosmo.softening_box;
    ep.r_split = opt.run.split_scale();
    ep.r_cut = opt.run.cutoff();
    const double e0 = total_energy(ic, ep);
    const auto res = run_emulated(opt, ic);
    const double e1 = total_energy(res.particles, ep);
    as.push_back(detail::at_most("relative_energy_drift", std::abs(e1 - e0) / std::abs(e0), 0.01));
  } else {
    throw InvalidInput("unknown scenario '" + name + "'");
  }
  if (!so.timings_dir.empty() && !rep.timings.empty()) {
    TimingsWriter w(so.timings_dir + "/" + name + ".csv");
    for (const auto& t : rep.timings) w.append(t);
  }
  return rep;
}

}  // namespace treegrid
