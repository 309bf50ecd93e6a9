#pragma once

// Sampled-particle load balancing across slab sites.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "treegrid/domain.hpp"
#include "treegrid/wire.hpp"

namespace treegrid {

struct SiteLoadReport {
  std::uint32_t site_id = 0;
  double force_time_s = 0.0;
  std::uint64_t particle_count = 0;
  std::vector<double> sample_positions;  // x, box units
};

struct LoadTotals {
  double mean_force_time = 0.0;
  double mean_particle_count = 0.0;
};

struct BalancerParams {
  double alpha = 0.5;          // weight of force time against particle count
  double move_limit = 1e-5;    // box lengths per step
  double min_width = 2.0 / 64; // box lengths; two mesh cells by default
};

inline std::size_t sample_size(std::size_t n, std::uint32_t sampling_rate) {
  if (sampling_rate < 1) throw InvalidInput("sampling_rate must be >= 1");
  if (n == 0) return 0;
  return std::max<std::size_t>(1, n / sampling_rate);
}

/// x-coordinates of a uniform random subset (without replacement), kept in
/// input order.
inline std::vector<double> sample_particles(std::span<const Particle> particles,
                                            std::uint32_t sampling_rate, std::uint64_t seed) {
  const std::size_t k = sample_size(particles.size(), sampling_rate);
  std::vector<double> out;
  out.reserve(k);
  std::mt19937_64 rng(seed);
  // Selection sampling (Knuth's algorithm S): deterministic for a fixed seed.
  std::size_t needed = k;
  for (std::size_t i = 0; i < particles.size() && needed > 0; ++i) {
    const std::size_t left = particles.size() - i;
    if (std::uniform_int_distribution<std::size_t>(0, left - 1)(rng) < needed) {
      out.push_back(particles[i].pos.x);
      --needed;
    }
  }
  return out;
}

inline LoadTotals load_totals(std::span<const SiteLoadReport> reports) {
  LoadTotals t;
  if (reports.empty()) return t;
  for (const auto& r : reports) {
    t.mean_force_time += r.force_time_s;
    t.mean_particle_count += static_cast<double>(r.particle_count);
  }
  t.mean_force_time /= static_cast<double>(reports.size());
  t.mean_particle_count /= static_cast<double>(reports.size());
  return t;
}

/// alpha * (time / mean time) + (1 - alpha) * (count / mean count). A term
/// whose mean is zero counts as 1.
inline double site_cost(const SiteLoadReport& report, const LoadTotals& totals, double alpha = 0.5) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw InvalidInput("alpha must lie in [0, 1]");
  const double time_term =
      totals.mean_force_time > 0.0 ? report.force_time_s / totals.mean_force_time : 1.0;
  const double count_term = totals.mean_particle_count > 0.0
                                ? static_cast<double>(report.particle_count) / totals.mean_particle_count
                                : 1.0;
  return alpha * time_term + (1.0 - alpha) * count_term;
}

namespace detail {

// Piecewise-linear CDF through the sorted samples: the k-th sample (0-based)
// sits at (k + 1/2) / M, anchored at (0, 0) and (1, 1).
class SampleCdf {
 public:
  explicit SampleCdf(std::vector<double> xs) : xs_(std::move(xs)) {
    std::sort(xs_.begin(), xs_.end());
    knots_x_.push_back(0.0);
    knots_f_.push_back(0.0);
    const double m = static_cast<double>(xs_.size());
    for (std::size_t k = 0; k < xs_.size(); ++k) {
      knots_x_.push_back(xs_[k]);
      knots_f_.push_back((static_cast<double>(k) + 0.5) / m);
    }
    knots_x_.push_back(1.0);
    knots_f_.push_back(1.0);
  }

  [[nodiscard]] double cdf(double x) const {
    auto it = std::upper_bound(knots_x_.begin(), knots_x_.end(), x);
    if (it == knots_x_.begin()) return 0.0;
    if (it == knots_x_.end()) return 1.0;
    const std::size_t j = static_cast<std::size_t>(it - knots_x_.begin());
    const double x0 = knots_x_[j - 1], x1 = knots_x_[j];
    const double f0 = knots_f_[j - 1], f1 = knots_f_[j];
    if (x1 == x0) return f1;
    return f0 + (f1 - f0) * (x - x0) / (x1 - x0);
  }

  [[nodiscard]] double quantile(double f) const {
    if (f <= 0.0) return 0.0;
    if (f >= 1.0) return 1.0;
    auto it = std::lower_bound(knots_f_.begin(), knots_f_.end(), f);
    const std::size_t j = static_cast<std::size_t>(it - knots_f_.begin());
    if (j == 0) return knots_x_[0];
    const double f0 = knots_f_[j - 1], f1 = knots_f_[j];
    const double x0 = knots_x_[j - 1], x1 = knots_x_[j];
    if (f1 == f0) return x1;
    return x0 + (x1 - x0) * (f - f0) / (f1 - f0);
  }

  [[nodiscard]] bool empty() const { return xs_.empty(); }

 private:
  std::vector<double> xs_;
  std::vector<double> knots_x_;
  std::vector<double> knots_f_;
};

}  // namespace detail

/// Moves the interior slab boundaries toward an equal-cost split. Each site's
/// target sample share is its current share divided by its cost
/// (renormalised); targets are read off the merged sample CDF and each
/// boundary moves at most `move_limit` per call.
inline std::vector<SlabDomain> propose_boundaries(std::span<const SlabDomain> domains,
                                                  std::span<const SiteLoadReport> reports,
                                                  const BalancerParams& params) {
  if (auto v = validate_domains(domains)) throw InvalidInput("invalid partition: " + v->message);
  if (reports.size() != domains.size()) throw InvalidInput("need one report per site");
  std::vector<SlabDomain> out(domains.begin(), domains.end());
  const std::size_t n = domains.size();
  if (n == 1 || params.move_limit <= 0.0) return out;

  std::vector<const SiteLoadReport*> by_site(n, nullptr);
  for (const auto& r : reports) {
    if (r.site_id >= n || by_site[r.site_id]) throw InvalidInput("duplicate or unknown site in reports");
    by_site[r.site_id] = &r;
  }

  std::vector<double> merged;
  for (const auto& r : reports) merged.insert(merged.end(), r.sample_positions.begin(), r.sample_positions.end());
  if (merged.empty()) return out;
  const detail::SampleCdf cdf(std::move(merged));

  const LoadTotals totals = load_totals(reports);
  std::vector<double> share(n), target(n);
  double prev_f = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double f_hi = i + 1 == n ? 1.0 : cdf.cdf(domains[i].hi);
    share[i] = f_hi - prev_f;
    prev_f = f_hi;
  }
  double norm = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double c = site_cost(*by_site[i], totals, params.alpha);
    target[i] = c > 0.0 ? share[i] / c : share[i];
    norm += target[i];
  }
  if (!(norm > 0.0)) return out;

  // Boundaries closer than this to their target are left alone, so a
  // balanced partition is a fixed point despite rounding in the shares.
  constexpr double kDeadband = 1e-12;

  double cum_current = 0.0, cum_target = 0.0;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    cum_current += share[i];
    cum_target += target[i] / norm;
    const double b = domains[i].hi;
    const double want = b + (cdf.quantile(cum_target) - cdf.quantile(cum_current));
    double move = want - b;
    if (std::abs(move) <= kDeadband) move = 0.0;
    move = std::clamp(move, -params.move_limit, params.move_limit);
    double nb = b + move;
    // Rounding in b + move can overshoot the limit by an ulp.
    while (std::abs(nb - b) > params.move_limit) nb = std::nextafter(nb, b);
    out[i].hi = nb;
    out[i + 1].lo = out[i].hi;
  }

  // Revert both edges of any slab that would fall below the minimum width.
  // Each pass restores original boundaries only, so the move limit holds.
  for (bool changed = true; changed;) {
    changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      if (out[i].hi - out[i].lo >= params.min_width) continue;
      if (i > 0 && out[i].lo != domains[i].lo) {
        out[i].lo = domains[i].lo;
        out[i - 1].hi = domains[i].lo;
        changed = true;
      }
      if (i + 1 < n && out[i].hi != domains[i].hi) {
        out[i].hi = domains[i].hi;
        out[i + 1].lo = domains[i].hi;
        changed = true;
      }
    }
  }
  return out;
}

inline wire::Bytes encode_report(const SiteLoadReport& r) {
  wire::Writer w(32 + r.sample_positions.size() * 8);
  w.put(r.site_id).put(r.force_time_s).put(r.particle_count);
  w.put(static_cast<std::uint64_t>(r.sample_positions.size()));
  for (double x : r.sample_positions) w.put(x);
  return std::move(w).take();
}

inline SiteLoadReport decode_report(std::span<const std::byte> bytes) {
  wire::Reader rd(bytes);
  SiteLoadReport r;
  r.site_id = rd.get<std::uint32_t>();
  r.force_time_s = rd.get<double>();
  r.particle_count = rd.get<std::uint64_t>();
  const auto n = rd.get<std::uint64_t>();
  if (n > rd.remaining() / 8) throw wire::DecodeError("sample count exceeds payload");
  r.sample_positions.resize(n);
  for (auto& x : r.sample_positions) x = rd.get<double>();
  return r;
}

inline wire::Bytes encode_domains(std::span<const SlabDomain> d) {
  wire::Writer w(8 + d.size() * 20);
  w.put(static_cast<std::uint32_t>(d.size()));
  for (const auto& s : d) w.put(s.site_id).put(s.lo).put(s.hi);
  return std::move(w).take();
}

inline std::vector<SlabDomain> decode_domains(std::span<const std::byte> bytes) {
  wire::Reader r(bytes);
  const auto n = r.get<std::uint32_t>();
  if (n > r.remaining() / 20) throw wire::DecodeError("domain count exceeds payload");
  std::vector<SlabDomain> d(n);
  for (auto& s : d) {
    s.site_id = r.get<std::uint32_t>();
    s.lo = r.get<double>();
    s.hi = r.get<double>();
  }
  return d;
}

}  // namespace treegrid
