#pragma once

// Per-step state machine across sites. Each step runs, in order:
//   1 sample exchange and boundary update (site 0 coordinates)
//   2 migration to the new boundaries
//   3 CIC deposit, sparse mesh exchange, FFT solve, long-range interpolation
//   4 LET exchange and short-range tree walk
//   5 kick and drift
//   6 migration of particles that drifted across a boundary
// Every phase message starts with (step, phase) so a site that falls out of
// step is caught immediately.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <iterator>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "treegrid/balancer.hpp"
#include "treegrid/cosmology.hpp"
#include "treegrid/domain.hpp"
#include "treegrid/mesh.hpp"
#include "treegrid/parallel.hpp"
#include "treegrid/transport.hpp"
#include "treegrid/tree.hpp"
#include "treegrid/wire.hpp"

namespace treegrid {

enum class Phase : std::uint8_t {
  sample = 1,
  domains = 2,
  migrate = 3,
  mesh = 4,
  let = 5,
  settle = 6,
  gather = 7,
};

inline const char* phase_name(Phase p) {
  switch (p) {
    case Phase::sample: return "sample";
    case Phase::domains: return "domains";
    case Phase::migrate: return "migrate";
    case Phase::mesh: return "mesh";
    case Phase::let: return "let";
    case Phase::settle: return "settle";
    case Phase::gather: return "gather";
  }
  return "unknown";
}

/// A peer's message carried the wrong step or phase.
class SyncFault : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Any failure inside a phase, labelled with the phase and site.
class PhaseError : public std::runtime_error {
 public:
  PhaseError(Phase phase, std::uint32_t site, const std::string& what)
      : std::runtime_error(std::string("phase ") + phase_name(phase) + " (site " + std::to_string(site) +
                           "): " + what),
        phase_(phase) {}
  [[nodiscard]] Phase phase() const { return phase_; }

 private:
  Phase phase_;
};

// ---------------------------------------------------------------------------
// Particle codec

inline void put_particle(wire::Writer& w, const Particle& p) {
  w.put(p.id).put(p.pos.x).put(p.pos.y).put(p.pos.z).put(p.mom.x).put(p.mom.y).put(p.mom.z).put(p.mass);
}

inline Particle get_particle(wire::Reader& r) {
  Particle p;
  p.id = r.get<std::uint64_t>();
  p.pos.x = r.get<double>();
  p.pos.y = r.get<double>();
  p.pos.z = r.get<double>();
  p.mom.x = r.get<double>();
  p.mom.y = r.get<double>();
  p.mom.z = r.get<double>();
  p.mass = r.get<double>();
  return p;
}

inline constexpr std::size_t kParticleBytes = 64;

inline wire::Bytes encode_particles(std::span<const Particle> ps) {
  wire::Writer w(8 + ps.size() * kParticleBytes);
  w.put(static_cast<std::uint64_t>(ps.size()));
  for (const auto& p : ps) put_particle(w, p);
  return std::move(w).take();
}

inline std::vector<Particle> decode_particles(std::span<const std::byte> bytes) {
  wire::Reader r(bytes);
  const auto n = r.get<std::uint64_t>();
  if (n > r.remaining() / kParticleBytes) throw wire::DecodeError("particle count exceeds payload");
  std::vector<Particle> out(n);
  for (auto& p : out) p = get_particle(r);
  return out;
}

// ---------------------------------------------------------------------------
// Snapshots

class SnapshotError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class SnapshotMagicError : public SnapshotError {
 public:
  using SnapshotError::SnapshotError;
};
class SnapshotVersionError : public SnapshotError {
 public:
  using SnapshotError::SnapshotError;
};
class SnapshotTruncatedError : public SnapshotError {
 public:
  using SnapshotError::SnapshotError;
};

inline constexpr std::uint32_t kSnapshotVersion = 1;
inline constexpr std::size_t kSnapshotHeaderBytes = 4 + 4 + 8 + 6 * 8;

struct Snapshot {
  std::vector<Particle> particles;
  CosmologyParams cosmo;
  double a = 1.0;
};

inline void write_snapshot(const std::string& path, std::span<const Particle> particles,
                           const CosmologyParams& cosmo, double a) {
  wire::Writer w(kSnapshotHeaderBytes + particles.size() * kParticleBytes);
  w.put_tag("TGSN").put(kSnapshotVersion).put(static_cast<std::uint64_t>(particles.size()));
  w.put(a).put(cosmo.box_mpc).put(cosmo.omega0).put(cosmo.lambda0).put(cosmo.h0).put(cosmo.sigma8);
  for (const auto& p : particles) put_particle(w, p);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw SnapshotError("cannot open '" + path + "' for writing");
  const auto& b = w.bytes();
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
  if (!out) throw SnapshotError("write to '" + path + "' failed");
}

inline Snapshot read_snapshot(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw SnapshotError("cannot open '" + path + "'");
  const std::string raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  wire::Bytes bytes(raw.size());
  std::memcpy(bytes.data(), raw.data(), raw.size());
  if (bytes.size() < 4) throw SnapshotTruncatedError("file shorter than the magic");
  wire::Reader r(bytes);
  if (!r.match_tag("TGSN")) throw SnapshotMagicError("not a TGSN snapshot");
  if (bytes.size() < kSnapshotHeaderBytes) throw SnapshotTruncatedError("truncated header");
  const auto version = r.get<std::uint32_t>();
  if (version != kSnapshotVersion)
    throw SnapshotVersionError("unsupported snapshot version " + std::to_string(version));
  const auto n = r.get<std::uint64_t>();
  Snapshot s;
  s.a = r.get<double>();
  s.cosmo.box_mpc = r.get<double>();
  s.cosmo.omega0 = r.get<double>();
  s.cosmo.lambda0 = r.get<double>();
  s.cosmo.h0 = r.get<double>();
  s.cosmo.sigma8 = r.get<double>();
  const std::size_t body = r.remaining();
  if (n > body / kParticleBytes || body != n * kParticleBytes)
    throw SnapshotTruncatedError("header declares " + std::to_string(n) + " particles but the file holds " +
                                 std::to_string(body) + " record bytes");
  s.particles.resize(n);
  for (auto& p : s.particles) p = get_particle(r);
  return s;
}

// ---------------------------------------------------------------------------
// Timings CSV

inline constexpr const char* kTimingsHeader = "step,z,calc_s,migrate_s,sample_s,let_s,mesh_s,total_s,interactions";

inline std::string format_timings_row(const StepTimings& t) {
  char buf[320];
  std::snprintf(buf, sizeof buf, "%llu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%llu",
                static_cast<unsigned long long>(t.step), t.z, t.calc_s, t.migrate_s, t.sample_s, t.let_s,
                t.mesh_s, t.total_s, static_cast<unsigned long long>(t.interactions));
  return buf;
}

/// Appends rows as they arrive, flushing each, so an aborted run leaves a
/// readable partial file.
class TimingsWriter {
 public:
  explicit TimingsWriter(const std::string& path) : out_(path, std::ios::trunc) {
    if (!out_) throw std::runtime_error("cannot open timings file '" + path + "'");
    out_ << kTimingsHeader << '\n';
    out_.flush();
  }
  void append(const StepTimings& t) {
    out_ << format_timings_row(t) << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

inline std::vector<StepTimings> read_timings_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open timings file '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line != kTimingsHeader) throw std::runtime_error("bad timings header");
  std::vector<StepTimings> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    StepTimings t;
    unsigned long long step = 0, inter = 0;
    if (std::sscanf(line.c_str(), "%llu,%lf,%lf,%lf,%lf,%lf,%lf,%lf,%llu", &step, &t.z, &t.calc_s, &t.migrate_s,
                    &t.sample_s, &t.let_s, &t.mesh_s, &t.total_s, &inter) != 9)
      throw std::runtime_error("bad timings row: " + line);
    t.step = step;
    t.interactions = inter;
    rows.push_back(t);
  }
  return rows;
}

struct RunSummary {
  std::uint64_t steps = 0;
  double wall_s = 0.0;
  std::uint64_t interactions = 0;
  double sustained_per_s = 0.0;  // total interactions / total step time
  double peak_per_s = 0.0;       // best single step
};

inline RunSummary summarize(std::span<const StepTimings> rows) {
  RunSummary s;
  s.steps = rows.size();
  for (const auto& r : rows) {
    s.wall_s += r.total_s;
    s.interactions += r.interactions;
    if (r.total_s > 0.0) s.peak_per_s = std::max(s.peak_per_s, static_cast<double>(r.interactions) / r.total_s);
  }
  if (s.wall_s > 0.0) s.sustained_per_s = static_cast<double>(s.interactions) / s.wall_s;
  return s;
}

// ---------------------------------------------------------------------------
// Site runtime

struct SiteRuntime {
  std::uint32_t site_id = 0;
  std::vector<SlabDomain> domains;
  std::vector<Particle> particles;
  std::vector<Vec3> accel;                       // from the latest force evaluation
  std::vector<transport::Channel*> channels;     // by site id, null for self
  std::vector<StepTimings> timings;
  RunConfig config;
  CosmologyParams cosmo;

  bool frozen = false;  // a = 1, time advances by the step span directly
  std::uint64_t step = 0;
  double momentum_time = 0.0;  // time (or a) at which momenta are valid
  bool momentum_set = false;
  double last_calc_s = 0.0;

  // Per-step records used by tests and scenario reports.
  std::vector<std::vector<SlabDomain>> domain_log;  // after each balance (site 0)
  std::vector<std::uint64_t> count_log;             // local particle count after each step
  std::vector<std::uint64_t> id_hash_log;           // sum of mixed ids after each step (mod 2^64)
  std::vector<std::uint64_t> migrated_log;          // particles received by migration each step
  std::uint64_t migrated_this_step = 0;
  std::uint64_t last_mesh_payload_bytes = 0;
  std::uint64_t last_mesh_dense_bytes = 0;

  [[nodiscard]] std::uint32_t n_sites() const { return static_cast<std::uint32_t>(domains.size()); }
};

namespace detail {

inline double midpoint(const SiteRuntime& rt, double t0, double t1) {
  return rt.frozen ? 0.5 * (t0 + t1) : std::sqrt(t0 * t1);
}

inline StepCoefficients coefficients(const SiteRuntime& rt, double t0, double t1) {
  if (rt.frozen) return frozen_step_coefficients(t1 - t0);
  return step_coefficients(t0, t1, rt.cosmo);
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline wire::Bytes with_header(std::uint64_t step, Phase phase, std::span<const std::byte> body) {
  wire::Writer w(9 + body.size());
  w.put(step).put(static_cast<std::uint8_t>(phase)).put_bytes(body);
  return std::move(w).take();
}

inline void send_to(SiteRuntime& rt, std::uint32_t peer, Phase phase, std::span<const std::byte> body) {
  rt.channels.at(peer)->send_message(with_header(rt.step, phase, body));
}

inline wire::Bytes recv_from(SiteRuntime& rt, std::uint32_t peer, Phase phase) {
  wire::Bytes msg = rt.channels.at(peer)->recv_message();
  wire::Reader r(msg);
  const auto step = r.get<std::uint64_t>();
  const auto ph = r.get<std::uint8_t>();
  if (step != rt.step || ph != static_cast<std::uint8_t>(phase)) {
    std::ostringstream os;
    os << "site " << peer << " sent step " << step << " phase " << static_cast<int>(ph) << ", expected step "
       << rt.step << " phase " << static_cast<int>(phase);
    throw SyncFault(os.str());
  }
  return wire::Bytes(msg.begin() + 9, msg.end());
}

/// Sends out[j] to every peer j, then receives one message from each.
inline std::vector<wire::Bytes> exchange(SiteRuntime& rt, Phase phase, const std::vector<wire::Bytes>& out) {
  const std::uint32_t n = rt.n_sites();
  for (std::uint32_t j = 0; j < n; ++j)
    if (j != rt.site_id) send_to(rt, j, phase, out[j]);
  std::vector<wire::Bytes> in(n);
  for (std::uint32_t j = 0; j < n; ++j)
    if (j != rt.site_id) in[j] = recv_from(rt, j, phase);
  return in;
}

template <typename Fn>
auto labelled(SiteRuntime& rt, Phase phase, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const PhaseError&) {
    throw;
  } catch (const std::exception& e) {
    throw PhaseError(phase, rt.site_id, e.what());
  }
}

inline void sort_by_id(std::vector<Particle>& ps) {
  std::sort(ps.begin(), ps.end(), [](const Particle& a, const Particle& b) { return a.id < b.id; });
}

inline BalancerParams balancer_params(const RunConfig& c) {
  return {c.cost_alpha, c.boundary_move_limit, 2.0 / static_cast<double>(c.mesh_size)};
}

}  // namespace detail

/// Phase 1: site 0 gathers load reports, proposes boundaries and broadcasts
/// them. Returns the communication seconds.
inline double balance_phase(SiteRuntime& rt) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::uint32_t n = rt.n_sites();
  if (n == 1) {
    rt.domain_log.push_back(rt.domains);
    return 0.0;
  }
  double calc = 0.0;
  detail::labelled(rt, Phase::sample, [&] {
    SiteLoadReport mine;
    mine.site_id = rt.site_id;
    mine.force_time_s = rt.last_calc_s;
    mine.particle_count = rt.particles.size();
    mine.sample_positions = sample_particles(rt.particles, rt.config.sampling_rate,
                                             rt.config.seed ^ (rt.step * 0x9e3779b97f4a7c15ULL + rt.site_id));
    if (rt.site_id != 0) {
      detail::send_to(rt, 0, Phase::sample, encode_report(mine));
      rt.domains = decode_domains(detail::recv_from(rt, 0, Phase::domains));
      if (auto v = validate_domains(rt.domains)) throw SyncFault("coordinator sent bad domains: " + v->message);
      return;
    }
    std::vector<SiteLoadReport> reports(n);
    reports[0] = std::move(mine);
    for (std::uint32_t j = 1; j < n; ++j) {
      reports[j] = decode_report(detail::recv_from(rt, j, Phase::sample));
      if (reports[j].site_id != j) throw SyncFault("report from site " + std::to_string(j) + " is mislabelled");
    }
    const auto tc = std::chrono::steady_clock::now();
    auto next = propose_boundaries(rt.domains, reports, detail::balancer_params(rt.config));
    for (std::uint32_t i = 0; i < n; ++i)
      if (std::abs(next[i].hi - rt.domains[i].hi) > rt.config.boundary_move_limit)
        throw std::logic_error("boundary move exceeds the limit");
    calc = detail::seconds_since(tc);
    rt.domains = std::move(next);
    const auto bytes = encode_domains(rt.domains);
    for (std::uint32_t j = 1; j < n; ++j) detail::send_to(rt, j, Phase::domains, bytes);
  });
  rt.domain_log.push_back(rt.domains);
  return detail::seconds_since(t0) - calc;
}

/// Sends every particle outside the local slab to its owner. Returns the
/// communication seconds.
inline double migrate_phase(SiteRuntime& rt, Phase phase) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::uint32_t n = rt.n_sites();
  if (n == 1) return 0.0;
  detail::labelled(rt, phase, [&] {
    std::vector<std::vector<Particle>> out(n);
    std::vector<Particle> keep;
    keep.reserve(rt.particles.size());
    for (const auto& p : rt.particles) {
      const auto owner = owner_of(rt.domains, p.pos.x);
      (owner == rt.site_id ? keep : out[owner]).push_back(p);
    }
    std::vector<wire::Bytes> payloads(n);
    for (std::uint32_t j = 0; j < n; ++j)
      if (j != rt.site_id) payloads[j] = encode_particles(out[j]);
    const auto in = detail::exchange(rt, phase, payloads);
    for (std::uint32_t j = 0; j < n; ++j) {
      if (j == rt.site_id) continue;
      for (auto& p : decode_particles(in[j])) {
        if (!rt.domains[rt.site_id].contains(p.pos.x))
          throw SyncFault("site " + std::to_string(j) + " sent a particle outside this slab");
        keep.push_back(p);
        ++rt.migrated_this_step;
      }
    }
    detail::sort_by_id(keep);
    rt.particles = std::move(keep);
  });
  return detail::seconds_since(t0);
}

struct ForceTimes {
  double calc_s = 0.0;
  double mesh_s = 0.0;
  double let_s = 0.0;
  std::uint64_t interactions = 0;
};

/// Phases 3 and 4: total (mesh + tree) acceleration for every local particle,
/// stored in rt.accel.
inline ForceTimes force_phases(SiteRuntime& rt) {
  using clock = std::chrono::steady_clock;
  ForceTimes ft;
  const std::uint32_t n = rt.n_sites();
  const RunConfig& cfg = rt.config;
  const std::uint32_t ng = cfg.mesh_size;
  const unsigned workers = cfg.workers_per_site;
  const std::size_t np = rt.particles.size();
  rt.accel.assign(np, Vec3{});

  // Phase 3: PM.
  detail::labelled(rt, Phase::mesh, [&] {
    auto t = clock::now();
    const DensityMesh local = cic_assign(rt.particles, ng, rt.domains[rt.site_id]);
    const SparseMeshPayload mine = cfg.sparse_mesh ? sparse_encode(local, rt.site_id) : dense_encode(local, rt.site_id);
    ft.calc_s += detail::seconds_since(t);

    t = clock::now();
    std::vector<SparseMeshPayload> all(n);
    const wire::Bytes mine_bytes = encode_mesh_payload(mine);
    rt.last_mesh_payload_bytes = mine_bytes.size();
    rt.last_mesh_dense_bytes = payload_wire_bytes(static_cast<std::size_t>(ng) * ng * ng);
    if (n > 1) {
      std::vector<wire::Bytes> out(n, mine_bytes);
      const auto in = detail::exchange(rt, Phase::mesh, out);
      for (std::uint32_t j = 0; j < n; ++j) {
        if (j == rt.site_id) continue;
        all[j] = decode_mesh_payload(in[j], j);
        validate_payload(all[j], ng);
      }
    }
    all[rt.site_id] = mine;
    ft.mesh_s += detail::seconds_since(t);

    t = clock::now();
    DensityMesh global(ng);
    for (const auto& p : all) accumulate(global, p);  // site order
    const ForceMesh field = solve_long_range(global, cfg.split_scale(), SlabPlan::from_domains(rt.domains, ng), workers,
                                             cfg.cic_deconvolve);
    parallel_for(np, workers, [&](std::size_t b, std::size_t e, unsigned) {
      for (std::size_t i = b; i < e; ++i) rt.accel[i] = cic_interpolate(field, rt.particles[i].pos);
    });
    ft.calc_s += detail::seconds_since(t);
  });

  // Phase 4: PP.
  detail::labelled(rt, Phase::let, [&] {
    auto t = clock::now();
    std::vector<Body> bodies;
    bodies.reserve(np);
    for (const auto& p : rt.particles) bodies.push_back(to_body(p));
    const Region box = Region::unit_box();
    std::vector<LetPayload> remote;
    if (n > 1) {
      const Octree local = build_tree(std::span<const Body>(bodies), box, cfg.leaf_capacity);
      std::vector<LetPayload> lets(n);
      for (std::uint32_t j = 0; j < n; ++j)
        if (j != rt.site_id) lets[j] = extract_let(local, rt.domains[j], cfg.theta, cfg.cutoff(), rt.site_id);
      ft.calc_s += detail::seconds_since(t);

      t = clock::now();
      std::vector<wire::Bytes> out(n);
      for (std::uint32_t j = 0; j < n; ++j)
        if (j != rt.site_id) out[j] = encode_let(lets[j]);
      const auto in = detail::exchange(rt, Phase::let, out);
      for (std::uint32_t j = 0; j < n; ++j) {
        if (j == rt.site_id) continue;
        remote.push_back(decode_let(in[j]));
        if (remote.back().origin != j || remote.back().destination != rt.site_id)
          throw SyncFault("LET from site " + std::to_string(j) + " is misaddressed");
      }
      ft.let_s += detail::seconds_since(t);
      t = clock::now();
    }
    const Octree tree = assemble_tree(bodies, remote, box, cfg.leaf_capacity);
    const WalkParams wp{cfg.theta, rt.cosmo.softening_box, cfg.split_scale(), cfg.cutoff()};
    std::vector<std::uint64_t> counts(workers, 0);
    parallel_for(np, workers, [&](std::size_t b, std::size_t e, unsigned w) {
      for (std::size_t i = b; i < e; ++i) {
        const TreeForce f = tree_force(tree, rt.particles[i].pos, wp);
        rt.accel[i] += f.accel;
        counts[w] += f.interactions;
      }
    });
    for (auto c : counts) ft.interactions += c;
    ft.calc_s += detail::seconds_since(t);
  });
  return ft;
}

/// Order-independent fingerprint of the ids held; equal id multisets give
/// equal sums.
inline std::uint64_t id_hash(std::span<const Particle> ps) {
  std::uint64_t h = 0;
  for (const auto& p : ps) {
    std::uint64_t z = p.id + 0x9e3779b97f4a7c15ull;  // splitmix64 finaliser
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    h += z ^ (z >> 31);
  }
  return h;
}

/// One full step from t_start to t_end (scale factors, or times when the
/// expansion is frozen).
inline StepTimings run_step(SiteRuntime& rt, double t_start, double t_end) {
  using clock = std::chrono::steady_clock;
  if (!(t_end >= t_start)) throw InvalidInput("step must not run backwards");
  const auto t_step = clock::now();
  StepTimings st;
  st.step = rt.step;
  if (!rt.momentum_set) {
    rt.momentum_time = t_start;
    rt.momentum_set = true;
  }

  st.sample_s = balance_phase(rt);
  st.migrate_s = migrate_phase(rt, Phase::migrate);

  const ForceTimes ft = force_phases(rt);
  st.calc_s = ft.calc_s;
  st.mesh_s = ft.mesh_s;
  st.let_s = ft.let_s;
  st.interactions = ft.interactions;

  // Phase 5: momenta stay half a step ahead of positions between steps.
  auto t = clock::now();
  const double t_mid = detail::midpoint(rt, t_start, t_end);
  kick(rt.particles, rt.accel, detail::coefficients(rt, rt.momentum_time, t_mid).kick);
  rt.momentum_time = t_mid;
  drift(rt.particles, detail::coefficients(rt, t_start, t_end).drift);
  st.calc_s += detail::seconds_since(t);

  // Phase 6.
  st.migrate_s += migrate_phase(rt, Phase::settle);
  for (const auto& p : rt.particles)
    if (!rt.domains[rt.site_id].contains(p.pos.x))
      throw PhaseError(Phase::settle, rt.site_id, "particle left outside the local slab");

  st.z = rt.frozen ? z_of_a(rt.cosmo.a_initial) : z_of_a(t_end);
  st.total_s = detail::seconds_since(t_step);
  rt.last_calc_s = st.calc_s;
  rt.count_log.push_back(rt.particles.size());
  rt.id_hash_log.push_back(id_hash(rt.particles));
  rt.migrated_log.push_back(rt.migrated_this_step);
  rt.migrated_this_step = 0;
  rt.timings.push_back(st);
  ++rt.step;
  return st;
}

/// Closing half-kick: forces at the final positions bring momenta level with
/// positions at time t.
inline void synchronize(SiteRuntime& rt, double t) {
  if (!rt.momentum_set) return;
  force_phases(rt);
  kick(rt.particles, rt.accel, detail::coefficients(rt, rt.momentum_time, t).kick);
  rt.momentum_time = t;
  ++rt.step;
}

/// Collects every site's particles and accelerations on site 0, sorted by id.
inline void gather_phase(SiteRuntime& rt, std::vector<Particle>* all, std::vector<Vec3>* accel) {
  const std::uint32_t n = rt.n_sites();
  detail::labelled(rt, Phase::gather, [&] {
    wire::Writer w;
    w.put_bytes(encode_particles(rt.particles));
    for (std::size_t i = 0; i < rt.particles.size(); ++i) {
      const Vec3 a = i < rt.accel.size() ? rt.accel[i] : Vec3{};
      w.put(a.x).put(a.y).put(a.z);
    }
    if (rt.site_id != 0) {
      detail::send_to(rt, 0, Phase::gather, w.bytes());
      return;
    }
    std::vector<std::pair<Particle, Vec3>> rows;
    auto take = [&](std::span<const std::byte> bytes) {
      wire::Reader r(bytes);
      const auto np = r.get<std::uint64_t>();
      if (np > r.remaining() / (kParticleBytes + 24)) throw wire::DecodeError("gather count exceeds payload");
      std::vector<Particle> ps(np);
      for (auto& p : ps) p = get_particle(r);
      for (auto& p : ps) {
        Vec3 a;
        a.x = r.get<double>();
        a.y = r.get<double>();
        a.z = r.get<double>();
        rows.emplace_back(p, a);
      }
    };
    take(w.bytes());
    for (std::uint32_t j = 1; j < n; ++j) take(detail::recv_from(rt, j, Phase::gather));
    std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.first.id < b.first.id; });
    if (all) {
      all->clear();
      for (auto& r : rows) all->push_back(r.first);
    }
    if (accel) {
      accel->clear();
      for (auto& r : rows) accel->push_back(r.second);
    }
  });
}

// ---------------------------------------------------------------------------
// Simulation driver

struct SimulationOptions {
  RunConfig run;
  CosmologyParams cosmo;
  transport::ChannelConfig channel{8, 786432, 10'000'000, 0, 5000, 64 * 1024};
  double z_stop = 0.0024;
  std::uint32_t steps = 2;
  double frozen_dt = 0.0;  // > 0 switches to fixed-a test mode with this step
  std::string snapshot_path;
  std::string timings_path;

  void validate() const {
    run.validate();
    cosmo.validate();
    channel.validate();
    if (frozen_dt < 0.0) throw InvalidInput("frozen_dt must be >= 0");
    if (frozen_dt == 0.0 && !(a_of_z(z_stop) >= cosmo.a_initial && a_of_z(z_stop) <= 1.0))
      throw InvalidInput("z_stop must not precede the initial redshift");
  }

  /// Step boundaries: scale factors, or times in frozen mode.
  [[nodiscard]] std::vector<double> schedule() const {
    if (frozen_dt > 0.0) {
      std::vector<double> t(steps + 1);
      for (std::uint32_t i = 0; i <= steps; ++i) t[i] = frozen_dt * i;
      return t;
    }
    const double a_end = a_of_z(z_stop);
    if (a_end == cosmo.a_initial) return {a_end};
    return log_a_schedule(cosmo.a_initial, a_end, steps);
  }
};

struct SimulationResult {
  RunSummary summary;
  std::vector<StepTimings> rows;                     // merged across sites
  std::vector<std::vector<StepTimings>> site_rows;   // per site
  std::vector<Particle> particles;                   // final, id order
  std::vector<Vec3> accel;                           // at final positions, id order
  std::vector<std::vector<SlabDomain>> domain_log;   // partitions after each balance
  std::vector<std::uint64_t> census;                 // global count after each step
  std::vector<std::uint64_t> census_hash;            // global id_hash after each step
  std::vector<std::uint64_t> migrated;               // particles migrated each step, all sites
  std::vector<std::uint64_t> mesh_payload_bytes;     // per site, last exchange
  std::uint64_t mesh_dense_bytes = 0;
};

/// Drives one site through the whole schedule; site 0 also gathers the final
/// state and writes the snapshot.
inline void run_site(SiteRuntime& rt, const SimulationOptions& opt, SimulationResult* result,
                     const std::function<void(const StepTimings&)>& on_step = {}) {
  const auto sched = opt.schedule();
  rt.frozen = opt.frozen_dt > 0.0;
  for (std::size_t k = 0; k + 1 < sched.size(); ++k) {
    const auto st = run_step(rt, sched[k], sched[k + 1]);
    if (on_step) on_step(st);
  }
  synchronize(rt, sched.back());
  std::vector<Particle> all;
  std::vector<Vec3> acc;
  gather_phase(rt, &all, &acc);
  if (rt.site_id == 0) {
    if (!opt.snapshot_path.empty())
      write_snapshot(opt.snapshot_path, all, rt.cosmo, rt.frozen ? rt.cosmo.a_initial : sched.back());
    if (result) {
      result->particles = std::move(all);
      result->accel = std::move(acc);
    }
  }
}

/// Bulk-synchronous merge: a step takes as long as its slowest site; the
/// interactions are summed.
inline std::vector<StepTimings> merge_site_rows(const std::vector<std::vector<StepTimings>>& per_site) {
  std::vector<StepTimings> out;
  if (per_site.empty()) return out;
  out = per_site[0];
  for (std::size_t s = 1; s < per_site.size(); ++s) {
    if (per_site[s].size() != out.size()) throw std::logic_error("sites ran different step counts");
    for (std::size_t k = 0; k < out.size(); ++k) {
      const auto& r = per_site[s][k];
      auto& m = out[k];
      m.calc_s = std::max(m.calc_s, r.calc_s);
      m.migrate_s = std::max(m.migrate_s, r.migrate_s);
      m.sample_s = std::max(m.sample_s, r.sample_s);
      m.let_s = std::max(m.let_s, r.let_s);
      m.mesh_s = std::max(m.mesh_s, r.mesh_s);
      m.total_s = std::max(m.total_s, r.total_s);
      m.interactions += r.interactions;
    }
  }
  return out;
}

/// Initial ownership: every particle goes to its equal-slab owner.
inline std::vector<std::vector<Particle>> distribute(std::span<const Particle> ic, std::span<const SlabDomain> domains) {
  std::vector<std::vector<Particle>> out(domains.size());
  for (const auto& p : ic) out[owner_of(domains, p.pos.x)].push_back(p);
  for (auto& v : out) detail::sort_by_id(v);
  return out;
}

/// Runs all sites as threads in this process, connected by the network
/// emulator. Sites share nothing but their channels.
inline SimulationResult run_emulated(const SimulationOptions& opt, std::span<const Particle> ic,
                                     const transport::EmuNetConfig& net = {}) {
  opt.validate();
  for (const auto& p : ic)
    if (!Region::unit_box().contains(p.pos)) throw InvalidInput("initial particle outside the unit box");
  const std::uint32_t n = opt.run.n_sites;
  const auto domains = equal_slabs(n);
  auto parts = distribute(ic, domains);

  // One emulated path per site pair.
  std::vector<std::vector<std::unique_ptr<transport::Channel>>> links(n);
  for (auto& v : links) v.resize(n);
  std::uint64_t pair = 0;
  for (std::uint32_t i = 0; i < n; ++i) {
    for (std::uint32_t j = i + 1; j < n; ++j) {
      auto cfg = net;
      cfg.seed = net.seed + 7919 * (++pair);
      auto [a, b] = transport::emulated_pair(opt.channel, cfg);
      links[i][j] = std::move(a);
      links[j][i] = std::move(b);
    }
  }

  std::vector<SiteRuntime> sites(n);
  for (std::uint32_t s = 0; s < n; ++s) {
    auto& rt = sites[s];
    rt.site_id = s;
    rt.domains = domains;
    rt.particles = std::move(parts[s]);
    rt.config = opt.run;
    rt.cosmo = opt.cosmo;
    rt.channels.resize(n, nullptr);
    for (std::uint32_t j = 0; j < n; ++j)
      if (j != s) rt.channels[j] = links[s][j].get();
  }

  SimulationResult result;
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> threads;
  for (std::uint32_t s = 0; s < n; ++s) {
    threads.emplace_back([&, s] {
      try {
        run_site(sites[s], opt, s == 0 ? &result : nullptr);
      } catch (...) {
        errors[s] = std::current_exception();
        // Unblock peers waiting on this site.
        for (auto& ch : links[s])
          if (ch) ch->close();
      }
    });
  }
  for (auto& t : threads) t.join();
  // Report the root cause: a site that failed on its own rather than one
  // that only saw a peer disappear.
  std::exception_ptr first;
  for (auto& e : errors) {
    if (!e) continue;
    try {
      std::rethrow_exception(e);
    } catch (const PhaseError& pe) {
      if (std::string(pe.what()).find("channel closed") == std::string::npos) {
        first = e;
        break;
      }
      if (!first) first = e;
    } catch (...) {
      first = e;
      break;
    }
  }
  if (first) {
    if (!opt.timings_path.empty()) {
      TimingsWriter w(opt.timings_path);
      std::vector<std::vector<StepTimings>> per;
      std::size_t k = SIZE_MAX;
      for (auto& s : sites) k = std::min(k, s.timings.size());
      for (auto& s : sites) per.emplace_back(s.timings.begin(), s.timings.begin() + static_cast<long>(k));
      for (const auto& r : merge_site_rows(per)) w.append(r);
    }
    std::rethrow_exception(first);
  }

  for (auto& s : sites) result.site_rows.push_back(s.timings);
  result.rows = merge_site_rows(result.site_rows);
  result.summary = summarize(result.rows);
  result.domain_log = sites[0].domain_log;
  const std::size_t steps = sites[0].count_log.size();
  result.census.assign(steps, 0);
  result.census_hash.assign(steps, 0);
  result.migrated.assign(steps, 0);
  for (auto& s : sites) {
    for (std::size_t k = 0; k < steps; ++k) {
      result.census[k] += s.count_log.at(k);
      result.census_hash[k] += s.id_hash_log.at(k);
      result.migrated[k] += s.migrated_log.at(k);
    }
  }
  for (auto& s : sites) result.mesh_payload_bytes.push_back(s.last_mesh_payload_bytes);
  result.mesh_dense_bytes = sites[0].last_mesh_dense_bytes;
  if (!opt.timings_path.empty()) {
    TimingsWriter w(opt.timings_path);
    for (const auto& r : result.rows) w.append(r);
  }
  return result;
}

// ---------------------------------------------------------------------------
// key = value configuration

/// Parses `key = value` lines ('#' starts a comment) into `opt`. Unknown
/// keys are rejected so typos do not silently fall back to defaults.
inline std::map<std::string, std::string> parse_config(std::istream& in, SimulationOptions& opt) {
  std::map<std::string, std::string> extra;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw InvalidInput("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    auto num = [&] {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(val, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != val.size() || val.empty())
        throw InvalidInput("config line " + std::to_string(lineno) + ": '" + key + "' needs a number");
      return v;
    };
    auto u = [&] {
      const double v = num();
      if (v < 0 || v != std::floor(v))
        throw InvalidInput("config line " + std::to_string(lineno) + ": '" + key + "' needs a non-negative integer");
      return static_cast<std::uint64_t>(v);
    };
    auto& r = opt.run;
    auto& c = opt.cosmo;
    auto& ch = opt.channel;
    if (key == "n_particles") r.n_particles = u();
    else if (key == "mesh_size") r.mesh_size = static_cast<std::uint32_t>(u());
    else if (key == "theta") r.theta = num();
    else if (key == "sampling_rate") r.sampling_rate = static_cast<std::uint32_t>(u());
    else if (key == "boundary_move_limit") r.boundary_move_limit = num();
    else if (key == "n_sites") r.n_sites = static_cast<std::uint32_t>(u());
    else if (key == "workers_per_site") r.workers_per_site = static_cast<std::uint32_t>(u());
    else if (key == "r_split") r.r_split = num();
    else if (key == "r_cut") r.r_cut = num();
    else if (key == "seed") r.seed = u();
    else if (key == "leaf_capacity") r.leaf_capacity = static_cast<std::uint32_t>(u());
    else if (key == "cost_alpha") r.cost_alpha = num();
    else if (key == "sparse_mesh") r.sparse_mesh = u() != 0;
    else if (key == "cic_deconvolve") r.cic_deconvolve = u() != 0;
    else if (key == "omega0") c.omega0 = num();
    else if (key == "lambda0") c.lambda0 = num();
    else if (key == "h0") c.h0 = num();
    else if (key == "sigma8") c.sigma8 = num();
    else if (key == "box_mpc") c.box_mpc = num();
    else if (key == "softening") c.softening_box = num();
    else if (key == "a_initial") c.a_initial = num();
    else if (key == "z_initial") c.a_initial = a_of_z(num());
    else if (key == "z_stop") opt.z_stop = num();
    else if (key == "steps") opt.steps = static_cast<std::uint32_t>(u());
    else if (key == "frozen_dt") opt.frozen_dt = num();
    else if (key == "snapshot") opt.snapshot_path = val;
    else if (key == "timings") opt.timings_path = val;
    else if (key == "n_streams") ch.n_streams = static_cast<std::uint32_t>(u());
    else if (key == "buffer_bytes") ch.buffer_bytes = static_cast<std::uint32_t>(u());
    else if (key == "pace_bytes_per_s") ch.pace_bytes_per_s = u();
    else if (key == "aggregate_pace_bytes_per_s") ch.aggregate_pace_bytes_per_s = u();
    else if (key == "connect_timeout_ms") ch.connect_timeout_ms = static_cast<std::uint32_t>(u());
    else if (key == "chunk_bytes") ch.chunk_bytes = static_cast<std::uint32_t>(u());
    else if (key == "ic" || key == "ic_file" || key == "hosts" || key == "ic_amplitude")
      extra[key] = val;
    else
      throw InvalidInput("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
  return extra;
}

}  // namespace treegrid
