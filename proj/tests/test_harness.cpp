#include <gtest/gtest.h>

#include <random>

#include "treegrid/harness.hpp"

using namespace treegrid;

TEST(InitialConditions, DeterministicAndNormalised) {
  for (auto kind : {IcKind::uniform, IcKind::lattice, IcKind::lattice_perturbed, IcKind::plummer}) {
    const auto a = generate_ic(kind, 512, 7, kind == IcKind::lattice_perturbed ? 0.01 : 0.0);
    const auto b = generate_ic(kind, 512, 7, kind == IcKind::lattice_perturbed ? 0.01 : 0.0);
    EXPECT_EQ(a, b);
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_EQ(a[i].id, i);
      EXPECT_TRUE(Region::unit_box().contains(a[i].pos));
      m += a[i].mass;
    }
    EXPECT_NEAR(m, 1.0, 1e-12);
  }
  EXPECT_NE(generate_ic(IcKind::uniform, 64, 1), generate_ic(IcKind::uniform, 64, 2));
}

TEST(InitialConditions, ZeroAmplitudeIsTheLattice) {
  EXPECT_EQ(generate_ic(IcKind::lattice_perturbed, 512, 3, 0.0), generate_ic(IcKind::lattice, 512, 3));
  EXPECT_THROW(generate_ic(IcKind::lattice, 500, 3), InvalidInput);
  EXPECT_THROW(generate_ic("spiral", 8, 1), InvalidInput);
  EXPECT_THROW(generate_ic(IcKind::uniform, 0, 1), InvalidInput);
  EXPECT_EQ(generate_ic("uniform", 8, 1), generate_ic(IcKind::uniform, 8, 1));
}

TEST(Ewald, PairIsAntisymmetric) {
  std::vector<Particle> ps{{0, {0.2, 0.3, 0.4}, {}, 0.5}, {1, {0.6, 0.1, 0.9}, {}, 0.5}};
  const auto a = ewald_force(ps);
  EXPECT_LT(norm(a[0] + a[1]), 1e-12);
}

TEST(Ewald, CloseSeparationIsNewtonian) {
  const double r = 1e-3;
  std::vector<Particle> ps{{0, {0.5, 0.5, 0.5}, {}, 0.5}, {1, {0.5 + r, 0.5, 0.5}, {}, 0.5}};
  const auto a = ewald_force(ps);
  const double newton = 0.5 / (r * r);
  EXPECT_NEAR(a[0].x / newton, 1.0, 1e-3);
  EXPECT_NEAR(a[1].x / -newton, 1.0, 1e-3);
}

TEST(Ewald, ConvergedInTheReplicaCutoff) {
  const auto ps = generate_ic(IcKind::uniform, 64, 5);
  EwaldParams p3, p4;
  p4.replica_cutoff = 4;
  p4.recip_cutoff = 10;
  const auto a3 = ewald_force(ps, p3);
  const auto a4 = ewald_force(ps, p4);
  for (std::size_t i = 0; i < ps.size(); ++i) EXPECT_LT(norm(a3[i] - a4[i]), 1e-6 * std::max(1.0, norm(a4[i])));
}

TEST(Ewald, PerfectLatticeFeelsNoForce) {
  const auto ps = generate_ic(IcKind::lattice, 512, 1);
  for (const auto& a : ewald_force(ps)) ASSERT_LT(norm(a), 1e-8);
}

TEST(Ewald, PotentialIsTheForceIntegral) {
  // Finite difference of the pair potential along x matches the force.
  const double h = 1e-5;
  auto energy = [](double x) {
    std::vector<Particle> ps{{0, {0.3, 0.5, 0.5}, {}, 0.5}, {1, {x, 0.55, 0.5}, {}, 0.5}};
    return total_energy(ps, {});
  };
  std::vector<Particle> ps{{0, {0.3, 0.5, 0.5}, {}, 0.5}, {1, {0.6, 0.55, 0.5}, {}, 0.5}};
  const double fx = 0.5 * ewald_force(ps)[1].x;
  const double de = (energy(0.6 + h) - energy(0.6 - h)) / (2 * h);
  EXPECT_NEAR(-de / fx, 1.0, 1e-5);
}

TEST(Ewald, GuardsItsInputs) {
  const auto big = generate_ic(IcKind::uniform, kEwaldMaxParticles + 1, 1);
  EXPECT_THROW(ewald_force(big), InvalidInput);
  EwaldParams bad;
  bad.alpha = 0.0;
  EXPECT_THROW(ewald_force(generate_ic(IcKind::uniform, 4, 1), bad), InvalidInput);
  EXPECT_THROW(rms_relative_error(std::vector<Vec3>{}, std::vector<Vec3>{}), InvalidInput);
}

TEST(RmsError, Definition) {
  const std::vector<Vec3> ref{{1, 0, 0}, {0, 2, 0}};
  const std::vector<Vec3> a{{1.1, 0, 0}, {0, 2, 0}};
  EXPECT_NEAR(rms_relative_error(a, ref), std::sqrt(0.01 / 2), 1e-14);
  EXPECT_EQ(rms_relative_error(ref, ref), 0.0);
}

TEST(Scenarios, UnknownNameFails) {
  EXPECT_THROW(run_scenario("no-such-scenario"), InvalidInput);
  EXPECT_EQ(scenario_names().size(), 6u);
}

TEST(Scenarios, DeterministicReports) {
  for (const char* name : {"sparse-mesh", "balancer-convergence"}) {
    const auto a = run_scenario(name);
    const auto b = run_scenario(name);
    EXPECT_EQ(format_report(a, false), format_report(b, false));
    EXPECT_TRUE(a.passed()) << format_report(a);
  }
}

TEST(Scenarios, ReportLineFormat) {
  ScenarioReport r;
  r.scenario = "x";
  r.assertions.push_back(detail::at_most("err", 0.01, 0.02));
  r.assertions.push_back(detail::less_than("t", 2.0, 1.0, true));
  const auto full = format_report(r);
  EXPECT_NE(full.find("err\t0.01\t"), std::string::npos) << full;
  EXPECT_NE(full.find("\tPASS\n"), std::string::npos);
  EXPECT_NE(full.find("\tFAIL\n"), std::string::npos);
  EXPECT_EQ(format_report(r, false).find("FAIL"), std::string::npos);
  EXPECT_FALSE(r.passed());
}
