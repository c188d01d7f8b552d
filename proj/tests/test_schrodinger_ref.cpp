#include <gtest/gtest.h>

#include <cmath>

#include "madkin/schrodinger.hpp"
#include "oracles.hpp"

using namespace madkin;

namespace {

GridSpec free_grid(int n = 1024) { return GridSpec::periodic_box(1, -20.0, 20.0, n); }
GridSpec harmonic_grid() { return GridSpec::periodic_box(1, -8.0, 8.0, 256); }

InitialState packet(double k0 = 0.0) {
  InitialState s;
  s.kind = InitialState::Kind::gaussian_packet;
  s.k0[0] = k0;
  return s;
}

InitialState ground() {
  InitialState s;
  s.kind = InitialState::Kind::harmonic_ground;
  return s;
}

double second_moment(const ComplexField& psi) {
  double s = 0;
  for (std::size_t i = 0; i < psi.size(); ++i) {
    const double x = psi.grid().position(i)[0];
    s += x * x * std::norm(psi[i]);
  }
  return s * psi.grid().spacing(0);
}

}  // namespace

TEST(InitScenario, NormalisedStates) {
  const PhysicalConstants c;
  EXPECT_NEAR(norm(init_scenario(packet(), free_grid(), c)), 1.0, 1e-10);
  EXPECT_NEAR(norm(init_scenario(packet(0.7), free_grid(), c)), 1.0, 1e-10);
  EXPECT_NEAR(norm(init_scenario(ground(), harmonic_grid(), c)), 1.0, 1e-10);
}

TEST(InitScenario, HarmonicGroundIsRealGaussian) {
  PhysicalConstants c{1.0, 2.0};
  InitialState s = ground();
  s.omega[0] = 1.5;
  auto psi = init_scenario(s, harmonic_grid(), c);
  const double s2 = c.hbar / (2 * c.mass * 1.5);
  for (std::size_t i = 0; i < psi.size(); ++i) {
    const double x = psi.grid().position(i)[0];
    EXPECT_EQ(psi[i].imag(), 0.0);
    EXPECT_NEAR(psi[i].real(), std::pow(2 * M_PI * s2, -0.25) * std::exp(-x * x / (4 * s2)), 1e-12);
  }
}

TEST(InitScenario, CentredPacketIsEven) {
  auto psi = init_scenario(packet(), free_grid(), PhysicalConstants{});
  const int n = 1024;
  // node i at -20 + i*h; its mirror is node n - i.
  for (int i = 1; i < n; ++i) EXPECT_NEAR(std::abs(psi[i] - psi[n - i]), 0.0, 1e-15);
}

TEST(InitScenario, UnderResolvedWidthRejected) {
  InitialState s = packet();
  s.sigma0[0] = 0.1;
  EXPECT_THROW(init_scenario(s, GridSpec::periodic_box(1, -20, 20, 256), PhysicalConstants{}), NumericalRejection);
}

TEST(Propagate, ZeroStepsIsBitIdentical) {
  auto psi = init_scenario(packet(0.3), free_grid(), PhysicalConstants{});
  auto out = propagate(psi, PotentialSpec::free(), PhysicalConstants{}, 0.01, 0);
  EXPECT_EQ(out.values(), psi.values());
  EXPECT_EQ(out.time(), psi.time());
}

TEST(Propagate, FreeSpreadingMatchesAnalyticWidth) {
  const PhysicalConstants c;
  const oracle::FreeGaussian ref;
  auto psi = init_scenario(packet(), free_grid(), c);
  // characteristic time 2 m sigma0^2 / hbar = 2, resolved with 200 steps
  const double dt = 0.01;
  for (int chunk = 1; chunk <= 4; ++chunk) {
    psi = propagate(psi, PotentialSpec::free(), c, dt, 100);
    const double t = chunk * 1.0;
    EXPECT_NEAR(psi.time(), t, 1e-12);
    EXPECT_NEAR(second_moment(psi) / ref.sigma2(t), 1.0, 1e-6) << "t=" << t;
  }
}

TEST(Propagate, NormConservedPerStepAndOverRun) {
  const PhysicalConstants c;
  auto psi = init_scenario(packet(1.0), free_grid(), c);
  SplitStepPropagator prop(psi.grid(), PotentialSpec::harmonic({0.2, 0, 0}), c, 0.01);
  double prev = norm(psi);
  for (int s = 0; s < 400; ++s) {
    prop.step(psi);
    const double now = norm(psi);
    EXPECT_LT(std::abs(now - prev), 1e-12);
    prev = now;
  }
  EXPECT_LT(std::abs(prev - 1.0), 1e-10);
}

TEST(Propagate, HarmonicGroundReturnsAfterOnePeriod) {
  const PhysicalConstants c;
  auto psi0 = init_scenario(ground(), harmonic_grid(), c);
  const int steps = 1000;
  auto psi = propagate(psi0, PotentialSpec::harmonic({1, 1, 1}), c, 2 * M_PI / steps, steps);
  EXPECT_NEAR(std::abs(overlap(psi0, psi)), 1.0, 1e-8);
}

TEST(Propagate, EnergyDriftSmall) {
  const PhysicalConstants c;
  InitialState s;
  s.kind = InitialState::Kind::harmonic_coherent;
  s.displacement[0] = 1.5;
  auto psi = init_scenario(s, harmonic_grid(), c);
  const auto pot = PotentialSpec::harmonic({1, 1, 1});
  const double e0 = energy(psi, pot, c);
  EXPECT_NEAR(e0, 0.5 + 0.5 * 1.5 * 1.5, 1e-10);
  psi = propagate(psi, pot, c, 2 * M_PI / 1000, 1000);
  EXPECT_LT(std::abs(energy(psi, pot, c) - e0) / e0, 1e-6);
}

TEST(Propagate, TimeReversal) {
  const PhysicalConstants c;
  InitialState s;
  s.kind = InitialState::Kind::harmonic_coherent;
  s.displacement[0] = 1.0;
  auto psi0 = init_scenario(s, harmonic_grid(), c);
  const auto pot = PotentialSpec::harmonic({1, 1, 1});
  auto fwd = propagate(psi0, pot, c, 0.005, 400);
  auto back = propagate(fwd, pot, c, -0.005, 400);
  double err = 0;
  for (std::size_t i = 0; i < psi0.size(); ++i) err += std::norm(back[i] - psi0[i]);
  EXPECT_LT(std::sqrt(err * psi0.grid().spacing(0)), 1e-8);
}

TEST(Propagate, RejectsBoundedGridAndWarnsOnLargeKick) {
  const PhysicalConstants c;
  GridSpec b = GridSpec::bounded_box(1, -8, 8, 256);
  ComplexField psi(b);
  psi[128] = 1.0;
  EXPECT_THROW(propagate(psi, PotentialSpec::free(), c, 0.01, 1), NumericalRejection);
  PropagationReport rep;
  auto g = init_scenario(ground(), harmonic_grid(), c);
  propagate(g, PotentialSpec::harmonic({1, 1, 1}), c, 0.1, 1, &rep);
  EXPECT_FALSE(rep.warnings.empty());
}

TEST(Propagate, SecondOrderInTime) {
  const PhysicalConstants c;
  InitialState s;
  s.kind = InitialState::Kind::harmonic_coherent;
  s.displacement[0] = 1.0;
  auto psi0 = init_scenario(s, harmonic_grid(), c);
  const auto pot = PotentialSpec::harmonic({1, 1, 1});
  auto ref = propagate(psi0, pot, c, 1.0 / 3200, 3200);
  std::vector<double> err;
  for (int n : {50, 100, 200}) {
    auto p = propagate(psi0, pot, c, 1.0 / n, n);
    double e = 0;
    for (std::size_t i = 0; i < p.size(); ++i) e += std::norm(p[i] - ref[i]);
    err.push_back(std::sqrt(e));
  }
  EXPECT_NEAR(std::log2(err[0] / err[1]), 2.0, 0.2);
  EXPECT_NEAR(std::log2(err[1] / err[2]), 2.0, 0.2);
}
