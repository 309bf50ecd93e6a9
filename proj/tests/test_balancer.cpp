#include <gtest/gtest.h>

#include "treegrid/balancer.hpp"
#include "treegrid/harness.hpp"

using namespace treegrid;

namespace {

std::vector<Particle> uniform(std::size_t n, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<Particle> ps(n);
  for (std::size_t i = 0; i < n; ++i) ps[i] = {i, {u(rng), 0.5, 0.5}, {}, 1.0};
  return ps;
}

// Evenly spaced samples over [lo, hi).
std::vector<double> grid(double lo, double hi, int n) {
  std::vector<double> v;
  for (int i = 0; i < n; ++i) v.push_back(lo + (hi - lo) * (i + 0.5) / n);
  return v;
}

}  // namespace

TEST(Sample, Sizes) {
  EXPECT_EQ(sample_particles(uniform(20000, 1), 20000, 1).size(), 1u);
  EXPECT_EQ(sample_size(1000000, 5000), 200u);
  EXPECT_EQ(sample_particles(uniform(10, 1), 100, 1).size(), 1u);
  EXPECT_TRUE(sample_particles({}, 10, 1).empty());
  EXPECT_THROW(sample_size(10, 0), InvalidInput);
}

TEST(Sample, DeterministicSubsetWithoutReplacement) {
  const auto ps = uniform(5000, 2);
  const auto a = sample_particles(ps, 50, 9);
  const auto b = sample_particles(ps, 50, 9);
  EXPECT_EQ(a, b);
  std::vector<double> xs;
  for (const auto& p : ps) xs.push_back(p.pos.x);
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(std::adjacent_find(sorted.begin(), sorted.end()), sorted.end());
  for (double x : a) EXPECT_NE(std::find(xs.begin(), xs.end(), x), xs.end());
  EXPECT_NE(sample_particles(ps, 50, 10), a);
}

TEST(Cost, Formula) {
  std::vector<SiteLoadReport> same{{0, 1.0, 10, {}}, {1, 1.0, 10, {}}};
  const auto t = load_totals(same);
  EXPECT_DOUBLE_EQ(site_cost(same[0], t), 1.0);

  std::vector<SiteLoadReport> r{{0, 3.0, 10, {}}, {1, 1.0, 10, {}}, {2, 2.0, 10, {}}};
  const auto t2 = load_totals(r);  // mean time 2
  EXPECT_DOUBLE_EQ(site_cost(r[0], t2, 1.0), 1.5);
  std::vector<SiteLoadReport> r2{{0, 4.0, 10, {}}, {1, 0.0, 10, {}}};  // ratio 2, counts equal
  EXPECT_DOUBLE_EQ(site_cost(r2[0], load_totals(r2), 1.0), 2.0);
  EXPECT_DOUBLE_EQ(site_cost(r2[0], load_totals(r2), 0.5), 1.5);

  std::vector<SiteLoadReport> zeros{{0, 0.0, 0, {}}, {1, 0.0, 0, {}}};
  EXPECT_DOUBLE_EQ(site_cost(zeros[0], load_totals(zeros)), 1.0);
  EXPECT_THROW(site_cost(r[0], t2, 1.5), InvalidInput);
}

TEST(Propose, BalancedIsFixedPoint) {
  const auto d = equal_slabs(2);
  std::vector<SiteLoadReport> r{{0, 1.0, 100, grid(0.0, 0.5, 100)}, {1, 1.0, 100, grid(0.5, 1.0, 100)}};
  EXPECT_EQ(propose_boundaries(d, r, {0.5, 0.01, 2.0 / 64}), d);
}

TEST(Propose, ZeroLimitFreezes) {
  const auto d = equal_slabs(3);
  std::vector<SiteLoadReport> r{
      {0, 9.0, 100, grid(0.0, 1.0 / 3, 100)}, {1, 1.0, 100, grid(1.0 / 3, 2.0 / 3, 100)}, {2, 1.0, 100, grid(2.0 / 3, 1.0, 100)}};
  EXPECT_EQ(propose_boundaries(d, r, {0.5, 0.0, 2.0 / 64}), d);
}

TEST(Propose, TwoToOneMovesExactlyTheLimit) {
  // Site 0 costs twice site 1 (alpha = 1). Target share 1/3 for site 0:
  // the boundary wants to move from 0.5 to 1/3, far beyond the 0.01 limit.
  const auto d = equal_slabs(2);
  std::vector<SiteLoadReport> r{{0, 2.0, 1000, grid(0.0, 0.5, 1000)}, {1, 1.0, 1000, grid(0.5, 1.0, 1000)}};
  const auto out = propose_boundaries(d, r, {1.0, 0.01, 2.0 / 64});
  EXPECT_NEAR(out[0].hi, 0.49, 1e-15);  // clamped, toward the costly site
  EXPECT_LE(std::abs(out[0].hi - d[0].hi), 0.01);
  EXPECT_EQ(out[1].lo, out[0].hi);
  EXPECT_FALSE(validate_domains(out));

  // The unclamped move agrees with the documented weighting.
  const auto free = propose_boundaries(d, r, {1.0, 1.0, 2.0 / 64});
  EXPECT_NEAR(free[0].hi, 1.0 / 3.0, 1e-3);
}

TEST(Propose, ClampHoldsExactlyUnderFuzz) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::uint32_t n = 2 + rng() % 4;
    std::vector<double> cuts;
    for (std::uint32_t i = 1; i < n; ++i) cuts.push_back(u(rng));
    std::sort(cuts.begin(), cuts.end());
    std::vector<SlabDomain> d(n);
    bool ok = true;
    for (std::uint32_t i = 0; i < n; ++i) {
      d[i] = {i, i == 0 ? 0.0 : cuts[i - 1], i + 1 == n ? 1.0 : cuts[i]};
      ok = ok && d[i].hi - d[i].lo > 0.05;
    }
    if (!ok) continue;
    std::vector<SiteLoadReport> r(n);
    for (std::uint32_t i = 0; i < n; ++i) {
      r[i] = {i, u(rng) * 5.0, static_cast<std::uint64_t>(1 + rng() % 1000), {}};
      for (int k = 0; k < 50; ++k) r[i].sample_positions.push_back(d[i].lo + (d[i].hi - d[i].lo) * u(rng));
    }
    const double limit = std::pow(10.0, -1.0 - 5.0 * u(rng));
    const BalancerParams bp{u(rng), limit, 2.0 / 64};
    const auto out = propose_boundaries(d, r, bp);
    ASSERT_FALSE(validate_domains(out));
    for (std::uint32_t i = 0; i + 1 < n; ++i) ASSERT_LE(std::abs(out[i].hi - d[i].hi), limit);
    ASSERT_EQ(out, propose_boundaries(d, r, bp));  // deterministic
  }
}

TEST(Propose, MinimumWidthIsKept) {
  // A narrow cheap slab squeezed by expensive neighbours keeps two cells.
  std::vector<SlabDomain> d{{0, 0.0, 0.45}, {1, 0.45, 0.49}, {2, 0.49, 1.0}};
  std::vector<SiteLoadReport> r{{0, 1.0, 100, grid(0.0, 0.45, 100)}, {1, 10.0, 100, grid(0.45, 0.49, 100)},
                                {2, 1.0, 100, grid(0.49, 1.0, 100)}};
  const auto out = propose_boundaries(d, r, {1.0, 0.01, 2.0 / 64});
  for (const auto& s : out) EXPECT_GE(s.hi - s.lo, 2.0 / 64);
  EXPECT_FALSE(validate_domains(out));
}

TEST(Propose, EmptySamplesLeaveDomains) {
  const auto d = equal_slabs(2);
  std::vector<SiteLoadReport> r{{0, 5.0, 0, {}}, {1, 1.0, 0, {}}};
  EXPECT_EQ(propose_boundaries(d, r, {}), d);
}

TEST(Propose, SyntheticConvergence) {
  const auto tr = synthetic_balance(60, 0.01, 17);
  for (double m : tr.moves) ASSERT_LE(std::abs(m), 0.01);
  EXPECT_LE(tr.spread.back(), 0.05);
  // Spread shrinks every step until it reaches the balanced floor.
  for (std::size_t k = 1; k < tr.spread.size() && tr.spread[k - 1] > 0.05; ++k) EXPECT_LT(tr.spread[k], tr.spread[k - 1]);
}

TEST(Codec, ReportAndDomainsRoundTrip) {
  SiteLoadReport r{2, 1.25, 77, {0.1, 0.2, 0.9}};
  const auto back = decode_report(encode_report(r));
  EXPECT_EQ(back.site_id, 2u);
  EXPECT_EQ(back.force_time_s, 1.25);
  EXPECT_EQ(back.particle_count, 77u);
  EXPECT_EQ(back.sample_positions, r.sample_positions);
  const auto d = equal_slabs(3);
  EXPECT_EQ(decode_domains(encode_domains(d)), d);
  auto bytes = encode_report(r);
  bytes.resize(bytes.size() - 1);
  EXPECT_THROW(decode_report(bytes), wire::DecodeError);
}
