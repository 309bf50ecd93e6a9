// treegrid command-line driver.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "treegrid/harness.hpp"

namespace tg = treegrid;
namespace tr = treegrid::transport;

namespace {

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

std::vector<tg::Particle> load_ic(const tg::SimulationOptions& opt, const std::map<std::string, std::string>& extra,
                                  tg::CosmologyParams& cosmo) {
  if (auto it = extra.find("ic_file"); it != extra.end()) {
    auto snap = tg::read_snapshot(it->second);
    cosmo.a_initial = snap.a;
    return std::move(snap.particles);
  }
  const std::string kind = extra.count("ic") ? extra.at("ic") : "uniform";
  const double amp = extra.count("ic_amplitude") ? std::stod(extra.at("ic_amplitude")) : 0.0;
  return tg::generate_ic(kind, opt.run.n_particles, opt.run.seed, amp);
}

void print_summary(const tg::RunSummary& s, std::size_t rows) {
  std::printf("steps\t%zu\n", rows);
  std::printf("wall_s\t%.6f\n", s.wall_s);
  std::printf("interactions\t%llu\n", static_cast<unsigned long long>(s.interactions));
  std::printf("sustained_interactions_per_s\t%.6e\n", s.sustained_per_s);
  std::printf("peak_interactions_per_s\t%.6e\n", s.peak_per_s);
}

// One site of a multi-process run over TCP. Site j listens on
// port_base + j * n_streams; the lower-numbered site of each pair connects.
int run_net_site(tg::SimulationOptions opt, const std::map<std::string, std::string>& extra, std::uint32_t site) {
  const std::uint32_t n = opt.run.n_sites;
  std::vector<std::string> hosts(n, "127.0.0.1");
  if (auto it = extra.find("hosts"); it != extra.end()) {
    hosts = split_list(it->second);
    if (hosts.size() != n) throw tg::InvalidInput("hosts must list one address per site");
  }
  const std::uint16_t base = tr::port_base_from_env();
  auto port_of = [&](std::uint32_t s) {
    const std::uint32_t p = base + s * opt.channel.n_streams;
    if (p + opt.channel.n_streams > 65536) throw tg::InvalidInput("port range exceeds 65535");
    return static_cast<std::uint16_t>(p);
  };

  tg::SiteRuntime rt;
  rt.site_id = site;
  rt.config = opt.run;
  rt.cosmo = opt.cosmo;
  const auto ic = load_ic(opt, extra, rt.cosmo);
  opt.cosmo = rt.cosmo;
  opt.validate();
  rt.domains = tg::equal_slabs(n);
  rt.particles = tg::distribute(ic, rt.domains)[site];

  std::vector<std::unique_ptr<tr::Channel>> owned(n);
  {
    std::unique_ptr<tr::TcpListener> listener;
    if (site > 0) listener = std::make_unique<tr::TcpListener>(port_of(site), opt.channel);
    for (std::uint32_t j = site + 1; j < n; ++j)
      owned[j] = tr::open_tcp_channel({hosts[j], port_of(j), site}, opt.channel);
    for (std::uint32_t k = 0; k < site; ++k) {
      auto [tag, ch] = listener->accept(std::chrono::milliseconds(opt.channel.connect_timeout_ms * 4));
      if (tag >= site || owned[tag]) throw tr::TransportError("unexpected peer tag " + std::to_string(tag));
      owned[tag] = std::move(ch);
    }
  }
  rt.channels.resize(n, nullptr);
  for (std::uint32_t j = 0; j < n; ++j) rt.channels[j] = owned[j].get();

  std::unique_ptr<tg::TimingsWriter> csv;
  if (!opt.timings_path.empty()) {
    const std::string path = n > 1 ? opt.timings_path + ".site" + std::to_string(site) : opt.timings_path;
    csv = std::make_unique<tg::TimingsWriter>(path);
  }
  if (site != 0) opt.snapshot_path.clear();
  tg::run_site(rt, opt, nullptr, [&](const tg::StepTimings& t) {
    if (csv) csv->append(t);
  });
  for (auto& ch : owned)
    if (ch) ch->close();
  print_summary(tg::summarize(rt.timings), rt.timings.size());
  return 0;
}

int cmd_run(const std::string& config_path, std::uint32_t site, std::uint32_t sites, const std::string& backend,
            double latency_ms, double bandwidth_mbps) {
  tg::SimulationOptions opt;
  std::map<std::string, std::string> extra;
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw tg::InvalidInput("cannot open config '" + config_path + "'");
    extra = tg::parse_config(in, opt);
  }
  if (sites > 0) opt.run.n_sites = sites;
  if (site >= opt.run.n_sites) throw tg::InvalidInput("--site must be below --sites");

  if (backend == "net") return run_net_site(opt, extra, site);

  tr::EmuNetConfig net;
  net.one_way_latency_ms = latency_ms;
  if (bandwidth_mbps > 0.0) net.bandwidth_bytes_per_s = bandwidth_mbps * 1e6 / 8.0;
  net.seed = opt.run.seed;
  const auto ic = load_ic(opt, extra, opt.cosmo);
  const auto res = tg::run_emulated(opt, ic, net);
  print_summary(res.summary, res.rows.size());
  return 0;
}

int cmd_bench(const std::string& backend, const std::string& role, const std::string& host, std::uint32_t streams,
              std::uint32_t buffer, double pace_mb_s, double latency_ms, double bandwidth_mbps, double megabytes,
              std::uint32_t reps) {
  tr::ChannelConfig cfg;
  cfg.n_streams = streams;
  cfg.buffer_bytes = buffer;
  cfg.pace_bytes_per_s = static_cast<std::uint64_t>(pace_mb_s * 1e6);
  const auto bytes = static_cast<std::size_t>(megabytes * 1e6);

  if (backend == "net") {
    const std::uint16_t base = tr::port_base_from_env();
    if (role == "server") {
      tr::TcpListener listener(base, cfg);
      auto [tag, ch] = listener.accept(std::chrono::milliseconds(60000));
      tr::serve_path_probes(*ch);
      ch->close();
      return 0;
    }
    auto ch = tr::open_tcp_channel({host, base, 1}, cfg);
    const auto est = tr::measure_path(*ch, bytes, reps);
    std::printf("rtt_s\t%.6f\nthroughput_bytes_per_s\t%.6e\n", est.rtt_s, est.throughput_bytes_per_s);
    ch->close();
    return 0;
  }

  tr::EmuNetConfig net;
  net.one_way_latency_ms = latency_ms;
  if (bandwidth_mbps > 0.0) net.bandwidth_bytes_per_s = bandwidth_mbps * 1e6 / 8.0;
  auto [a, b] = tr::emulated_pair(cfg, net);
  tr::Bytes msg(bytes);
  std::mt19937_64 rng(1);
  for (auto& x : msg) x = static_cast<std::byte>(rng());
  tr::Bytes got;
  const auto t0 = std::chrono::steady_clock::now();
  std::thread rx([&, &b = b] { got = b->recv_message(); });
  a->send_message(msg);
  rx.join();
  const double el = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("bytes\t%zu\nelapsed_s\t%.6f\nthroughput_bytes_per_s\t%.6e\nintact\t%s\n", msg.size(), el,
              el > 0.0 ? static_cast<double>(msg.size()) / el : 0.0, got == msg ? "yes" : "no");
  std::thread srv([&, &b = b] { tr::serve_path_probes(*b); });
  const auto est = tr::measure_path(*a, 0, reps);
  srv.join();
  std::printf("rtt_s\t%.6f\n", est.rtt_s);
  return got == msg ? 0 : 1;
}

int cmd_oracle(std::uint64_t n, std::uint64_t seed, std::uint32_t mesh) {
  const auto fa = tg::measure_force_accuracy(n, seed, mesh);
  tg::ScenarioReport rep;
  rep.scenario = "oracle";
  rep.assertions.push_back(tg::detail::at_most("rms_error_theta_0.5", fa.rms_theta_05, 0.02));
  rep.assertions.push_back(tg::detail::less_than("rms_error_theta_0.3", fa.rms_theta_03, fa.rms_theta_05));
  std::fputs(tg::format_report(rep).c_str(), stdout);
  return rep.passed() ? 0 : 3;
}

int cmd_balance(std::uint32_t steps, double limit, std::uint64_t seed) {
  const auto t = tg::synthetic_balance(steps, limit, seed);
  std::printf("step\tboundary_move\tcost_spread\n");
  for (std::size_t k = 0; k < t.spread.size(); ++k) std::printf("%zu\t%.9g\t%.6f\n", k, t.moves[k], t.spread[k]);
  std::printf("final_boundary\t%.9g\n", t.boundary);
  return 0;
}

int cmd_scenario(const std::string& name, std::uint64_t seed, const std::string& dir) {
  tg::ScenarioOptions so;
  so.seed = seed;
  so.timings_dir = dir;
  const auto rep = tg::run_scenario(name, so);
  std::fputs(tg::format_report(rep).c_str(), stdout);
  return rep.passed() ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"treegrid: multi-site TreePM N-body simulator"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "run a simulation (all sites in-process, or one site over TCP)");
  std::string config, backend = "emu";
  std::uint32_t site = 0, sites = 0;
  double latency = 0.0, bandwidth = 0.0;
  run->add_option("--config", config, "key = value configuration file");
  run->add_option("--site", site, "this site's id (net backend)");
  run->add_option("--sites", sites, "number of sites (overrides the config)");
  run->add_option("--backend", backend, "emu or net")->check(CLI::IsMember({"emu", "net"}));
  run->add_option("--emu-latency-ms", latency, "emulated one-way latency")->check(CLI::NonNegativeNumber);
  run->add_option("--emu-bandwidth-mbps", bandwidth, "emulated bandwidth, Mbit/s")->check(CLI::NonNegativeNumber);

  auto* bench = app.add_subcommand("bench-transport", "measure a channel");
  std::string bbackend = "emu", role = "client", host = "127.0.0.1";
  std::uint32_t streams = 64, buffer = 786432, reps = 3;
  double pace = 10.0, blat = 0.0, bbw = 0.0, mb = 100.0;
  bench->add_option("--backend", bbackend, "emu or net")->check(CLI::IsMember({"emu", "net"}));
  bench->add_option("--role", role, "net backend: server or client")->check(CLI::IsMember({"server", "client"}));
  bench->add_option("--host", host, "server address (net client)");
  bench->add_option("--streams", streams, "parallel streams");
  bench->add_option("--buffer-bytes", buffer, "socket buffer size");
  bench->add_option("--pace-mbs", pace, "per-stream pacing, MB/s (0 = unpaced)");
  bench->add_option("--latency-ms", blat, "emulated one-way latency");
  bench->add_option("--bandwidth-mbps", bbw, "emulated bandwidth, Mbit/s");
  bench->add_option("--megabytes", mb, "transfer size");
  bench->add_option("--reps", reps, "probe repetitions");

  auto* oracle = app.add_subcommand("oracle", "compare TreePM forces with the Ewald sum");
  std::uint64_t on = 512, oseed = 20100401;
  std::uint32_t omesh = 64;
  oracle->add_option("--n", on, "particle count");
  oracle->add_option("--seed", oseed, "random seed");
  oracle->add_option("--mesh", omesh, "mesh cells per axis");

  auto* balance = app.add_subcommand("balance-demo", "two sites with a 2:1 cost imbalance");
  std::uint32_t bsteps = 60;
  double blimit = 0.01;
  std::uint64_t bseed = 1;
  balance->add_option("--steps", bsteps, "balancing steps");
  balance->add_option("--limit", blimit, "boundary move limit, box lengths");
  balance->add_option("--seed", bseed, "random seed");

  auto* scen = app.add_subcommand("scenario", "run a named experiment scenario");
  std::string sname, sdir;
  std::uint64_t sseed = 20100401;
  scen->add_option("name", sname, "scenario name")->required();
  scen->add_option("--seed", sseed, "random seed");
  scen->add_option("--timings-dir", sdir, "directory for timings CSV files");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(config, site, sites, backend, latency, bandwidth);
    if (*bench) return cmd_bench(bbackend, role, host, streams, buffer, pace, blat, bbw, mb, reps);
    if (*oracle) return cmd_oracle(on, oseed, omesh);
    if (*balance) return cmd_balance(bsteps, blimit, bseed);
    if (*scen) return cmd_scenario(sname, sseed, sdir);
  } catch (const tg::PhaseError& e) {
    std::fprintf(stderr, "treegrid: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "treegrid: error: %s\n", e.what());
    return 1;
  }
  return 0;
}
