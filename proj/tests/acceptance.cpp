// Acceptance checks, one PASS/FAIL line per criterion. Run with no argument
// for all of them or with a criterion number for one.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <thread>

#include "treegrid/harness.hpp"

using namespace treegrid;

namespace {

// Tolerances, fixed here rather than read from anywhere.
constexpr double kForceRms = 0.02;
constexpr double kPositionAbs = 1e-10;
constexpr double kPayloadLo = 0.28, kPayloadHi = 0.39;
constexpr double kMoveLimit = 0.01;
constexpr double kSpread = 0.05;
constexpr std::uint32_t kBalanceSteps = 60;
constexpr double kThroughputCap = 44e6;  // 4 streams x 10 MB/s x 1.10
constexpr double kMassClosure = 1e-12;
constexpr double kEnergyDrift = 0.01;
constexpr double kMetricRel = 1e-9;
constexpr std::uint64_t kSeed = 20100401;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double max_move(const std::vector<std::vector<SlabDomain>>& log, std::size_t n_sites) {
  double worst = 0.0;
  auto prev = equal_slabs(static_cast<std::uint32_t>(n_sites));
  for (const auto& d : log) {
    for (std::size_t i = 0; i < d.size(); ++i) worst = std::max(worst, std::abs(d[i].hi - prev[i].hi));
    prev = d;
  }
  return worst;
}

Outcome force_accuracy() {
  const auto fa = measure_force_accuracy(512, kSeed, 64);
  const bool ok = fa.rms_theta_05 <= kForceRms && fa.rms_theta_03 < fa.rms_theta_05;
  return {ok, fmt("rms(theta=0.5)=%.6g (<= %.2g)  rms(theta=0.3)=%.17g  rms(theta=0.5)=%.17g (strictly less required)",
                  fa.rms_theta_05, kForceRms, fa.rms_theta_03, fa.rms_theta_05)};
}

Outcome distributed_serial() {
  SimulationOptions opt;
  opt.steps = 5;
  opt.run.sampling_rate = 1000;
  opt.channel.n_streams = 2;
  opt.channel.pace_bytes_per_s = 0;
  const auto ic = generate_ic(IcKind::uniform, 32768, kSeed);
  opt.run.n_sites = 1;
  const auto serial = run_emulated(opt, ic);
  opt.run.n_sites = 3;
  const auto dist = run_emulated(opt, ic);
  double worst = 0.0;
  bool ids = dist.particles.size() == serial.particles.size();
  for (std::size_t i = 0; ids && i < serial.particles.size(); ++i) {
    ids = dist.particles[i].id == serial.particles[i].id;
    const Vec3 d = min_image(dist.particles[i].pos - serial.particles[i].pos);
    worst = std::max({worst, std::abs(d.x), std::abs(d.y), std::abs(d.z)});
  }
  return {ids && worst <= kPositionAbs, fmt("max |dx| = %.3g (<= %.0e), ids aligned: %s", worst, kPositionAbs, ids ? "yes" : "no")};
}

Outcome sparse_payload() {
  const std::uint32_t ng = 64;
  // Uniform fill: one particle per cell on average.
  const auto ps = generate_ic(IcKind::uniform, static_cast<std::uint64_t>(ng) * ng * ng, kSeed);
  const auto doms = equal_slabs(3);
  const auto parts = distribute(ps, doms);
  const double dense = static_cast<double>(payload_wire_bytes(static_cast<std::size_t>(ng) * ng * ng));
  bool ok = true;
  std::string ratios;
  for (std::uint32_t s = 0; s < 3; ++s) {
    const auto mesh = cic_assign(parts[s], ng, doms[s]);
    const auto payload = sparse_encode(mesh);
    const auto bytes = encode_mesh_payload(payload);
    const double ratio = static_cast<double>(bytes.size()) / dense;
    ok = ok && ratio >= kPayloadLo && ratio <= kPayloadHi;
    const auto back = sparse_decode(decode_mesh_payload(bytes), ng);
    for (std::size_t i = 0; i < mesh.cells.size(); ++i)
      ok = ok && std::bit_cast<std::uint64_t>(back.cells[i]) == std::bit_cast<std::uint64_t>(mesh.cells[i]);
    ratios += fmt("%.4f ", ratio);
  }
  const auto empty = sparse_encode(cic_assign(std::vector<Particle>{}, ng, doms[1]));
  const bool empty_ok = empty.indices.empty() && encode_mesh_payload(empty).size() == payload_wire_bytes(0);
  return {ok && empty_ok, fmt("ratios %sin [%.2f, %.2f], round trip bit-exact, empty slab count 0: %s", ratios.c_str(),
                              kPayloadLo, kPayloadHi, empty_ok ? "yes" : "no")};
}

Outcome balancer() {
  bool ok = true;
  std::string parts;
  // Every scenario that moves boundaries: the synthetic 2:1 case and
  // emulated runs with clustered matter.
  const auto tr = synthetic_balance(kBalanceSteps, kMoveLimit, kSeed);
  double worst = 0.0;
  for (double m : tr.moves) worst = std::max(worst, std::abs(m));
  ok = ok && worst <= kMoveLimit && tr.spread.back() <= kSpread;
  parts += fmt("synthetic: max move %.17g <= %.2g, spread after %u steps %.4f <= %.2f", worst, kMoveLimit,
               kBalanceSteps, tr.spread.back(), kSpread);
  for (double limit : {1e-5, 2e-3}) {
    SimulationOptions opt;
    opt.run.n_particles = 4096;
    opt.run.mesh_size = 32;
    opt.run.n_sites = 3;
    opt.run.sampling_rate = 100;
    opt.run.boundary_move_limit = limit;
    opt.steps = 6;
    opt.channel.n_streams = 2;
    opt.channel.pace_bytes_per_s = 0;
    const auto res = run_emulated(opt, generate_ic(IcKind::plummer, 4096, kSeed, 0.1));
    const double m = max_move(res.domain_log, 3);
    ok = ok && m <= limit && res.domain_log.size() == opt.steps;
    parts += fmt("; emulated limit %.0e: max move %.17g", limit, m);
  }
  return {ok, parts};
}

Outcome transport_check() {
  transport::ChannelConfig cfg{4, 786432, 10'000'000, 0, 5000, 64 * 1024};
  transport::EmuNetConfig net;
  net.one_way_latency_ms = 50.0;
  auto [a, b] = transport::emulated_pair(cfg, net);
  transport::Bytes msg(100'000'000);
  std::mt19937_64 rng(kSeed);
  for (std::size_t i = 0; i < msg.size(); i += 8) {
    const auto v = rng();
    std::memcpy(msg.data() + i, &v, std::min<std::size_t>(8, msg.size() - i));
  }
  transport::Bytes got;
  const auto t0 = std::chrono::steady_clock::now();
  std::thread rx([&, &b = b] { got = b->recv_message(); });
  a->send_message(msg);
  rx.join();
  const double el = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const double rate = static_cast<double>(msg.size()) / el;
  const bool exact = got == msg;

  // The published configuration: 64 streams, 768 kB buffers, 10 MB/s each.
  transport::ChannelConfig published{64, 786432, 10'000'000, 0, 5000, 64 * 1024};
  auto [c, d] = transport::emulated_pair(published, {});
  transport::Bytes small(10'000'000);
  for (auto& x : small) x = static_cast<std::byte>(rng());
  transport::Bytes back;
  std::thread rx2([&, &d = d] { back = d->recv_message(); });
  c->send_message(small);
  rx2.join();
  const bool published_ok = back == small;
  return {exact && rate <= kThroughputCap && published_ok,
          fmt("100 MB in %.3f s = %.2f MB/s (<= %.0f), bit-exact: %s, 64-stream config: %s", el, rate / 1e6,
              kThroughputCap / 1e6, exact ? "yes" : "no", published_ok ? "ok" : "failed")};
}

Outcome overhead() {
  SimulationOptions opt;
  opt.run.n_particles = 4096;
  opt.run.mesh_size = 32;
  opt.run.n_sites = 3;
  opt.run.sampling_rate = 100;
  opt.steps = 3;
  opt.channel.n_streams = 4;
  const auto ic = generate_ic(IcKind::uniform, opt.run.n_particles, kSeed);
  bool ok = true;
  double prev = -1.0;
  std::string parts;
  for (double lat : {0.0, 5.0, 20.0, 50.0}) {
    const auto s = measure_overhead(opt, ic, lat, kSeed);
    ok = ok && s.comm_s_per_step >= prev;
    prev = s.comm_s_per_step;
    bool cols = !s.rows.empty();
    for (const auto& r : s.rows) cols = cols && r.migrate_s > 0 && r.sample_s > 0 && r.let_s > 0 && r.mesh_s > 0;
    ok = ok && cols;
    parts += fmt("%g ms: %.4f s/step%s; ", lat, s.comm_s_per_step, cols ? "" : " (empty column)");
  }
  return {ok, parts + "non-decreasing, all phase columns > 0"};
}

Outcome conservation() {
  // Mass closure.
  const auto ps = generate_ic(IcKind::uniform, 100000, kSeed);
  long double sum = 0.0L;
  for (const auto& p : ps) sum += p.mass;
  const double total = static_cast<double>(sum);
  const double closure = std::abs(cic_assign(ps, 64).total() - total) / total;

  // Census with particles crossing slab boundaries every step.
  SimulationOptions opt;
  opt.run.n_particles = 4096;
  opt.run.mesh_size = 32;
  opt.run.n_sites = 3;
  opt.run.sampling_rate = 100;
  opt.run.boundary_move_limit = 0.01;
  opt.frozen_dt = 0.01;
  opt.steps = 20;
  opt.channel.n_streams = 2;
  opt.channel.pace_bytes_per_s = 0;
  auto ic = generate_ic(IcKind::uniform, 4096, kSeed);
  std::mt19937_64 rng(kSeed);
  std::normal_distribution<double> g(0.0, 0.5);
  for (auto& p : ic) p.mom = {g(rng), g(rng), g(rng)};
  const auto res = run_emulated(opt, ic);
  bool census = res.census.size() == 20;
  std::uint64_t moved = 0;
  for (std::size_t k = 0; k < res.census.size(); ++k) {
    census = census && res.census[k] == ic.size() && res.census_hash[k] == id_hash(ic);
    moved += res.migrated[k];
  }

  // Energy of a Plummer sphere with the expansion frozen.
  const auto rep = run_scenario("energy-plummer", {kSeed, {}});
  const double drift = rep.assertions.at(0).measured;

  const bool ok = closure <= kMassClosure && census && moved > 0 && drift < kEnergyDrift;
  return {ok, fmt("mass closure %.3g (<= %.0e), census exact over 20 steps: %s (%llu migrations), energy drift %.4g (< %.2f)",
                  closure, kMassClosure, census ? "yes" : "no", static_cast<unsigned long long>(moved), drift,
                  kEnergyDrift)};
}

Outcome metrics() {
  SimulationOptions opt;
  opt.run.n_particles = 4096;
  opt.run.mesh_size = 32;
  opt.run.n_sites = 2;
  opt.run.sampling_rate = 100;
  opt.steps = 3;
  opt.channel.n_streams = 2;
  opt.timings_path = (std::filesystem::temp_directory_path() / "treegrid_acceptance_timings.csv").string();
  const auto res = run_emulated(opt, generate_ic(IcKind::uniform, 4096, kSeed));
  const auto rows = read_timings_csv(opt.timings_path);
  std::filesystem::remove(opt.timings_path);
  double wall = 0.0, peak = 0.0;
  double inter = 0.0;
  for (const auto& r : rows) {
    wall += r.total_s;
    inter += static_cast<double>(r.interactions);
    peak = std::max(peak, static_cast<double>(r.interactions) / r.total_s);
  }
  const double sustained = inter / wall;
  const double e1 = std::abs(sustained / res.summary.sustained_per_s - 1.0);
  const double e2 = std::abs(peak / res.summary.peak_per_s - 1.0);
  return {rows.size() == 3 && e1 <= kMetricRel && e2 <= kMetricRel,
          fmt("sustained %.6g/s rel diff %.2g, peak %.6g/s rel diff %.2g (<= %.0e)", sustained, e1, peak, e2, kMetricRel)};
}

Outcome scaling() {
  const auto ps = generate_ic(IcKind::uniform, 32768, kSeed);
  double t[3] = {0, 0, 0};
  const unsigned workers[3] = {1, 2, 4};
  for (int k = 0; k < 3; ++k) {
    RunConfig cfg;
    cfg.workers_per_site = workers[k];
    SiteRuntime rt;
    rt.domains = equal_slabs(1);
    rt.particles = ps;
    rt.config = cfg;
    rt.channels.assign(1, nullptr);
    // Best of three force evaluations.
    t[k] = 1e300;
    for (int rep = 0; rep < 3; ++rep) t[k] = std::min(t[k], force_phases(rt).calc_s);
  }
  return {t[1] < t[0] && t[2] < t[1],
          fmt("force-phase seconds 1/2/4 workers: %.4f / %.4f / %.4f, strictly decreasing required (%u hardware threads)",
              t[0], t[1], t[2], std::thread::hardware_concurrency())};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"force accuracy", force_accuracy},
      {"distributed equals serial", distributed_serial},
      {"sparse mesh payload", sparse_payload},
      {"balancer clamp and convergence", balancer},
      {"transport", transport_check},
      {"overhead monotonicity", overhead},
      {"conservation and mechanics", conservation},
      {"metric definitions", metrics},
      {"intra-site scaling", scaling},
  };
  int only = 0;
  if (argc > 1) only = std::atoi(argv[1]);
  if (only < 0 || only > static_cast<int>(criteria.size())) {
    std::fprintf(stderr, "usage: %s [criterion 1-%zu]\n", argv[0], criteria.size());
    return 2;
  }
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (only != 0 && static_cast<int>(i) + 1 != only) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double el = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s criterion %zu (%s): %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first,
                o.detail.c_str(), el);
    std::fflush(stdout);
    failed += o.pass ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}
