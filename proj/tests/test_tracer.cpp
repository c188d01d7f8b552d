#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <sstream>

#include "madkin/tracer.hpp"
#include "oracles.hpp"

using namespace madkin;

namespace {

const PhysicalConstants kUnit{};

GridSpec harmonic_grid() { return GridSpec::periodic_box(1, -8.0, 8.0, 256); }

FieldSeries harmonic_series(double t_end, double dt_field) {
  InitialState s;
  s.kind = InitialState::Kind::harmonic_ground;
  s.omega = {1.0, 1.0, 1.0};
  auto pot = PotentialSpec::harmonic({1.0, 1.0, 1.0});
  auto psi0 = init_scenario(s, harmonic_grid(), kUnit);
  const int steps = static_cast<int>(std::lround(t_end / dt_field));
  std::vector<FluidState> st;
  for (auto& psi : propagate_series(psi0, pot, kUnit, dt_field, steps, 1)) st.push_back(build_fluid_state(psi, pot, kUnit));
  return FieldSeries(std::move(st));
}

FieldSeries free_series(double t0, double t1, double dt_field) {
  InitialState init;
  auto psi0 = init_scenario(init, GridSpec::periodic_box(1, -20.0, 20.0, 1024), kUnit);
  const int sub = 5;
  const double h = dt_field / sub;
  auto all = propagate_series(psi0, PotentialSpec::free(), kUnit, h, static_cast<int>(std::lround(t1 / h)), sub);
  std::vector<FluidState> st;
  for (auto& psi : all)
    if (psi.time() >= t0 - 1e-12) st.push_back(build_fluid_state(psi, PotentialSpec::free(), kUnit));
  return FieldSeries(std::move(st));
}

FluidState uniform_state(double T = 0.3) {
  GridSpec g = GridSpec::periodic_box(1, 0.0, 10.0, 64);
  ScalarField f(g, 0.0, 0.1);
  return make_fluid_state(f, VectorField(g), VectorField(g), {T});
}

}  // namespace

TEST(Sample, VelocityStatisticsAndWeights) {
  auto fs = free_series(1.0, 1.0, 0.01);
  const FluidState& s = fs.states[0];
  const std::size_t n = 100000;
  auto e = sample_maxwellian(s, n, 1234, kUnit);
  ASSERT_EQ(e.size(), n);
  EXPECT_EQ(e.alive_count(), n);
  oracle::FreeGaussian ref;
  double mu = 0, mu2 = 0, vbar = 0, xbar = 0, x2 = 0;
  for (std::size_t p = 0; p < n; ++p) {
    EXPECT_EQ(e.weight[p], 1.0 / n);
    const double u = e.v[p][0] - ref.velocity(e.r[p][0], 1.0);
    mu += u, mu2 += u * u, vbar += e.v[p][0];
    xbar += e.r[p][0], x2 += e.r[p][0] * e.r[p][0];
  }
  mu /= n, mu2 /= n, vbar /= n, xbar /= n, x2 /= n;
  const double T = ref.temperature(1.0);
  EXPECT_NEAR(mu, 0.0, 4 * std::sqrt(T / n));
  EXPECT_NEAR(mu2, T, 4 * T * std::sqrt(2.0 / n));
  const double sdv = std::sqrt(T + ref.rate(1.0) * ref.rate(1.0) * ref.sigma2(1.0));
  EXPECT_NEAR(vbar, 0.0, 4 * sdv / std::sqrt(n));
  EXPECT_NEAR(xbar, 0.0, 4 * ref.sigma(1.0) / std::sqrt(n));
  EXPECT_NEAR(x2, ref.sigma2(1.0), 4 * ref.sigma2(1.0) * std::sqrt(2.0 / n));
}

TEST(Sample, EmptyDeterministicAndThreadIndependent) {
  auto fs = harmonic_series(0.0, 0.1);
  auto e0 = sample_maxwellian(fs.states[0], 0, 1, kUnit);
  EXPECT_EQ(e0.size(), 0u);
  auto a = sample_maxwellian(fs.states[0], 20000, 99, kUnit);
  setenv("MK_THREADS", "1", 1);
  auto b = sample_maxwellian(fs.states[0], 20000, 99, kUnit);
  unsetenv("MK_THREADS");
  EXPECT_TRUE(a == b);
  auto c = sample_maxwellian(fs.states[0], 20000, 100, kUnit);
  EXPECT_FALSE(a == c);
}

TEST(Sample, MixtureWeightsAreUnbiased) {
  auto fs = harmonic_series(0.0, 0.1);
  const std::size_t n = 200000;
  SampleOptions opt;
  opt.uniform_fraction = 0.2;
  auto e = sample_maxwellian(fs.states[0], n, 5, kUnit, opt);
  double sw = 0, sx2 = 0, tail = 0;
  for (std::size_t p = 0; p < n; ++p) {
    sw += e.weight[p];
    sx2 += e.weight[p] * e.r[p][0] * e.r[p][0];
    if (std::abs(e.r[p][0]) > 4.0) tail += 1;
  }
  EXPECT_NEAR(sw, 1.0, 0.01);
  EXPECT_NEAR(sx2 / sw, 0.5, 0.01);
  EXPECT_GT(tail, 0.2 * n * 8.0 / 16.0 * 0.9);
  EXPECT_THROW(sample_maxwellian(fs.states[0], 10, 5, kUnit, SampleOptions{1.0, nullptr}), UsageError);
}

TEST(Sample, PositionalVariance) {
  auto fs = harmonic_series(0.0, 0.1);
  const FluidState& s = fs.states[0];
  const GridSpec& g = s.grid();
  auto cl = ClosureSpec::positional({ScalarField::from_function(
      g, [&](const Point& r) { return 1.0 + 0.5 * std::sin(2 * M_PI * (r[0] + 8.0) / 16.0); })});
  cl.prepare(s);
  SampleOptions opt;
  opt.closure = &cl;
  const std::size_t n = 200000;
  auto e = sample_maxwellian(s, n, 3, kUnit, opt);
  double a = 0, b = 0;
  std::size_t na = 0, nb = 0;
  for (std::size_t p = 0; p < n; ++p) {
    const double x = e.r[p][0];
    if (x > 0.3 && x < 0.7) a += e.v[p][0] * e.v[p][0], ++na;
    if (x < -0.3 && x > -0.7) b += e.v[p][0] * e.v[p][0], ++nb;
  }
  const double ka = 1.0 + 0.5 * std::sin(2 * M_PI * 8.5 / 16.0);  // x = 0.5
  const double kb = 1.0 + 0.5 * std::sin(2 * M_PI * 7.5 / 16.0);  // x = -0.5
  EXPECT_NEAR(a / na, 0.5 * ka, 0.5 * ka * 0.05);
  EXPECT_NEAR(b / nb, 0.5 * kb, 0.5 * kb * 0.05);
}

TEST(Advance, ZeroStepsUnchanged) {
  auto fs = harmonic_series(0.1, 0.05);
  auto e = sample_maxwellian(fs.states[0], 1000, 1, kUnit);
  auto before = e;
  auto cl = ClosureSpec::maxwellian();
  auto rep = advance(e, fs, ClosureEval{&cl, nullptr, 1.0}, 0.01, 0);
  EXPECT_TRUE(before == e);
  EXPECT_EQ(rep.dead, 0u);
}

TEST(Advance, HarmonicOrbitOnePeriod) {
  const double P = 2 * M_PI;
  auto fs = harmonic_series(P, P / 1000);
  auto cl = ClosureSpec::maxwellian();
  ParticleEnsemble e;
  e.dim = 1;
  e.resize(3);
  e.r[0][0] = 1.0;
  e.r[1][0] = -2.0;
  e.r[2][0] = 0.5;
  e.v[2][0] = 0.7;
  const int steps = 2000;
  auto rep = advance(e, fs, ClosureEval{&cl, nullptr, 1.0}, P / steps, steps);
  EXPECT_EQ(rep.dead, 0u);
  EXPECT_NEAR(e.time, P, 1e-14);
  EXPECT_NEAR(e.r[0][0], 1.0, 1e-6);
  EXPECT_NEAR(e.r[1][0], -2.0, 2e-6);
  EXPECT_NEAR(e.v[0][0], 0.0, 1e-6);
  EXPECT_NEAR(e.r[2][0], 0.5, 1e-6);
  EXPECT_NEAR(e.v[2][0], 0.7, 1e-6);
  for (double lj : e.logJ) EXPECT_NEAR(lj, 0.0, 1e-8);
}

TEST(Advance, UniformStateMovesInStraightLines) {
  auto s0 = uniform_state(), s1 = uniform_state();
  s1.time = 1.0;
  FieldSeries fs({s0, s1});
  auto cl = ClosureSpec::maxwellian();
  ParticleEnsemble e;
  e.dim = 1;
  e.resize(2);
  e.r[0][0] = 2.0;
  e.v[0][0] = 1.5;
  e.r[1][0] = 9.5;
  e.v[1][0] = 1.0;
  advance(e, fs, ClosureEval{&cl, nullptr, 1.0}, 0.1, 10);
  EXPECT_NEAR(e.r[0][0], 3.5, 1e-13);
  EXPECT_NEAR(e.r[1][0], 0.5, 1e-13);  // wrapped
  EXPECT_EQ(e.v[0][0], 1.5);
  EXPECT_EQ(e.logJ[0], 0.0);
}

TEST(Advance, LiouvilleInvarianceOnFreeGaussian) {
  auto fs = free_series(0.0, 1.0, 0.0025);
  auto cl = ClosureSpec::maxwellian();
  auto e = sample_maxwellian(fs.states[0], 200, 11, kUnit);
  auto e0 = e;
  std::vector<Trajectory> trs;
  AdvanceOptions opt;
  opt.record = {0, 1, 2};
  opt.trajectories = &trs;
  advance(e, fs, ClosureEval{&cl, nullptr, 1.0}, 0.0025, 400, opt);
  oracle::FreeMaxwellian ref;
  double worst = 0;
  for (std::size_t p = 0; p < e.size(); ++p) {
    ASSERT_TRUE(e.alive[p]);
    const double ratio = std::exp(e.logJ[p]) * ref.g(e.r[p][0], e.v[p][0], 1.0) / ref.g(e0.r[p][0], e0.v[p][0], 0.0);
    worst = std::max(worst, std::abs(ratio - 1.0));
  }
  EXPECT_LT(worst, 1e-6);
  ASSERT_EQ(trs.size(), 3u);
  EXPECT_EQ(trs[0].size(), 401u);
  // Closed forms agree with the integrated exponent.
  const double Jm = jacobian_closed_form_maxwellian(fs.states.front(), fs.states.back(), {e0.r[0], e0.v[0]},
                                                    {e.r[0], e.v[0]}, kUnit);
  EXPECT_NEAR(Jm / std::exp(e.logJ[0]), 1.0, 1e-6);
  std::vector<RawMoments> mom;
  for (auto& s : fs.states) mom.push_back(RawMoments::of_maxwellian(s));
  auto Jr = jacobian_closed_form_raw(fs, mom, trs[0], kUnit);
  EXPECT_TRUE(Jr.converged);
  EXPECT_NEAR(Jr.J / std::exp(e.logJ[0]), 1.0, 1e-6);
}

TEST(Advance, SplittingIntoSingleStepsChangesNothing) {
  // Stage times must follow the particle clock on a time-dependent series.
  auto fs = free_series(0.0, 0.5, 0.01);
  const GridSpec& g = fs.grid();
  auto cl = ClosureSpec::positional({ScalarField::from_function(
      g, [](const Point& r) { return 1.0 + 0.3 * std::sin(M_PI * r[0] / 20.0); })});
  cl.prepare(fs.states[0]);
  auto a = sample_maxwellian(fs.states[0], 50, 5, kUnit);
  auto b = a;
  advance(a, fs, ClosureEval{&cl, nullptr, 1.0}, 0.01, 40);
  for (int s = 0; s < 40; ++s) advance(b, fs, ClosureEval{&cl, nullptr, 1.0}, 0.01, 1);
  EXPECT_NEAR(a.time, 0.4, 1e-12);
  EXPECT_NEAR(b.time, 0.4, 1e-12);
  for (std::size_t p = 0; p < a.size(); ++p) {
    EXPECT_NEAR(a.r[p][0], b.r[p][0], 1e-13);
    EXPECT_NEAR(a.v[p][0], b.v[p][0], 1e-13);
    EXPECT_NEAR(a.logJ[p], b.logJ[p], 1e-13);
  }
}

TEST(Advance, RejectsUncoveredTimesAndUnstableDt) {
  auto fs = harmonic_series(0.5, 0.05);
  auto cl = ClosureSpec::maxwellian();
  auto e = sample_maxwellian(fs.states[0], 10, 1, kUnit);
  EXPECT_THROW(advance(e, fs, ClosureEval{&cl, nullptr, 1.0}, 0.1, 10), UsageError);
  auto ff = free_series(0.0, 0.5, 0.05);
  auto e2 = sample_maxwellian(ff.states[0], 10, 1, kUnit);
  // |dV/dx| + |dlnT/dt|/2 is about 0.4 at t = 0.5; dt = 0.5 breaks the bound.
  EXPECT_THROW(advance(e2, ff, ClosureEval{&cl, nullptr, 1.0}, 0.5, 1), NumericalRejection);
}

TEST(Advance, ParticlesEnteringNodesAreFrozen) {
  auto fs = harmonic_series(0.5, 0.05);
  auto cl = ClosureSpec::maxwellian();
  ParticleEnsemble e;
  e.dim = 1;
  e.resize(2);
  e.r[0][0] = 7.5;  // f ~ e^{-56}: below the floor
  e.r[1][0] = 0.1;
  auto rep = advance(e, fs, ClosureEval{&cl, nullptr, 1.0}, 0.05, 10);
  EXPECT_EQ(rep.dead, 1u);
  EXPECT_FALSE(e.alive[0]);
  EXPECT_EQ(e.r[0][0], 7.5);
  EXPECT_TRUE(e.alive[1]);
}

TEST(Advance, WallContactSplitsTheStep) {
  GridSpec g = GridSpec::bounded_box(1, 0.0, 10.0, 64);
  ScalarField f(g, 0.0, 0.1);
  auto s0 = make_fluid_state(f, VectorField(g), VectorField(g), {0.3});
  auto s1 = s0;
  s1.time = 1.0;
  FieldSeries fs({s0, s1});
  auto cl = ClosureSpec::maxwellian();
  ParticleEnsemble e;
  e.dim = 1;
  e.resize(1);
  e.r[0][0] = 9.95;
  e.v[0][0] = 1.0;
  // Wall velocity 0.5: contact at t = 0.05, v -> 0, so the particle stays on
  // the wall. Mirroring after the full step would put it at 9.95.
  auto geo = BoundaryGeometry::from_grid(g, {0.5, 0.0, 0.0});
  AdvanceOptions opt;
  opt.geometry = &geo;
  advance(e, fs, ClosureEval{&cl, nullptr, 1.0}, 0.1, 1, opt);
  EXPECT_NEAR(e.r[0][0], 10.0, 1e-12);
  EXPECT_NEAR(e.v[0][0], 0.0, 1e-12);
}

TEST(Advance, LiouvilleInvarianceAcrossBounces) {
  // Fine field step: the split-step ground state breathes at O(dt^2), which
  // is largest relative to g near the walls.
  auto full = harmonic_series(0.6, 2.0 * M_PI / 8000.0);
  std::vector<FluidState> st;
  for (const auto& s : full.states) st.push_back(restrict_state(s, {60, 0, 0}, {137, 1, 1}));
  FieldSeries fs(std::move(st));
  const GridSpec& g = fs.grid();
  auto geo = BoundaryGeometry::from_grid(g);
  auto cl = ClosureSpec::maxwellian();
  ParticleEnsemble e;
  e.dim = 1;
  e.resize(4);
  e.r[0][0] = g.upper[0] - 0.05, e.v[0][0] = 1.0;
  e.r[1][0] = g.upper[0] - 0.2, e.v[1][0] = 1.7;
  e.r[2][0] = g.lower[0] + 0.03, e.v[2][0] = -1.5;
  e.r[3][0] = g.lower[0] + 0.1, e.v[3][0] = -0.6;
  const auto e0 = e;
  AdvanceOptions opt;
  opt.geometry = &geo;
  const int steps = static_cast<int>(full.states.size()) - 1;
  advance(e, fs, ClosureEval{&cl, nullptr, 1.0}, full.states[1].time, steps, opt);
  for (std::size_t p = 0; p < e.size(); ++p) {
    ASSERT_TRUE(e.alive[p]);
    EXPECT_LT(e.v[p][0] * e0.v[p][0], 0.0) << p;  // bounced
    LocalFields L0, L1;
    ASSERT_TRUE(local_fields(fs.states.front(), e0.r[p], L0, nullptr, fs.dlnT_dt.front()));
    ASSERT_TRUE(local_fields(fs.states.back(), e.r[p], L1, nullptr, fs.dlnT_dt.back()));
    const double lg = e.logJ[p] + log_maxwellian(L1, e.v[p], 1.0) - log_maxwellian(L0, e0.v[p], 1.0);
    EXPECT_LT(std::abs(std::expm1(lg)), 1e-5) << p;
  }
}

TEST(BounceBack, Examples) {
  GridSpec g = GridSpec::bounded_box(1, 0.0, 1.0, 16);
  ParticleEnsemble e;
  e.dim = 1;
  e.resize(4);
  e.r[0][0] = 1.02, e.v[0][0] = 3.0;
  e.r[1][0] = 1.05, e.v[1][0] = 3.0;
  e.r[2][0] = 0.5, e.v[2][0] = 3.0;
  e.r[3][0] = -0.01, e.v[3][0] = 0.0;
  auto g0 = BoundaryGeometry::from_grid(g);
  auto w0 = e.weight;
  auto e1 = e;
  bounce_back(e1, g, g0);
  EXPECT_EQ(e1.v[0][0], -3.0);
  EXPECT_NEAR(e1.r[0][0], 0.98, 1e-15);
  EXPECT_EQ(e1.r[2][0], 0.5);
  EXPECT_EQ(e1.v[2][0], 3.0);
  EXPECT_EQ(e1.weight, w0);
  // Zero relative speed at a wall: left in place, flagged.
  EXPECT_EQ(e1.flags[3], ParticleEnsemble::kStuckAtWall);
  EXPECT_EQ(e1.v[3][0], 0.0);
  auto g1 = BoundaryGeometry::from_grid(g, {1.0, 0, 0});
  auto e2 = e;
  bounce_back(e2, g, g1);
  EXPECT_EQ(e2.v[1][0], -1.0);
  EXPECT_EQ(e2.v[3][0], 2.0);
  EXPECT_THROW(BoundaryGeometry::from_grid(g).validate(GridSpec::periodic_box(1, 0, 1, 16)), UsageError);
}

TEST(Deposit, SingleParticleAndTwoPointMoments) {
  GridSpec g = GridSpec::periodic_box(1, 0.0, 10.0, 200);
  ParticleEnsemble e;
  e.dim = 1;
  e.resize(1);
  e.r[0][0] = 4.0;
  e.weight[0] = 0.37;
  auto d = deposit(e, g, kUnit, {0.2, 0, 0});
  EXPECT_NEAR(integrate(d.f), 0.37, 1e-14);
  e.resize(2);
  e.r[0][0] = e.r[1][0] = 4.0;
  e.weight[0] = e.weight[1] = 0.5;
  e.v[0][0] = 1.0 + 0.3;
  e.v[1][0] = 1.0 - 0.3;
  PhysicalConstants c{1.0, 2.0};
  auto d2 = deposit(e, g, c, {0.2, 0, 0});
  Stencil st;
  Stencil::build(g, {4.0, 0, 0}, st);
  EXPECT_NEAR(st.apply(d2.V[0]), 1.0, 1e-14);
  EXPECT_NEAR(d2.T[0], 2.0 * 0.09, 1e-14);
  EXPECT_THROW(deposit(ParticleEnsemble{}, g, c), NumericalRejection);
}

TEST(Deposit, FreshSampleMatchesFields) {
  auto fs = harmonic_series(0.0, 0.1);
  const FluidState& s = fs.states[0];
  const std::size_t n = 100000;
  auto e = sample_maxwellian(s, n, 8, kUnit);
  auto d = deposit(e, s.grid(), kUnit);
  const double h = s.grid().spacing(0);
  double l1 = 0, bound = 0;
  for (std::size_t i = 0; i < s.f.size(); ++i) {
    l1 += h * std::abs(d.f[i] - s.f[i]);
    bound += h * s.f[i] / std::sqrt(std::max(1.0, n * s.f[i] * h));
  }
  EXPECT_LT(l1, 5 * bound);
  EXPECT_NEAR(d.T[0], s.T[0], 4 * d.T_se[0] + 1e-3 * s.T[0]);
  EXPECT_NEAR(d.mass, 1.0, 1e-12);
}

TEST(WallCheck, BalancedUnbalancedAndEmpty) {
  GridSpec g = GridSpec::bounded_box(1, 0.0, 1.0, 32);
  auto geo = BoundaryGeometry::from_grid(g, {0.5, 0, 0});
  ParticleEnsemble e;
  e.dim = 1;
  e.resize(200);
  for (std::size_t p = 0; p < 200; ++p) {
    e.r[p][0] = (p % 2 ? 0.02 : 0.98) + 0.001 * (p % 7);
    e.weight[p] = 1.0 / 200;
    const double v = 0.1 * ((p / 2) % 10) - 0.45;
    e.v[p][0] = p % 4 < 2 ? v : 2 * 0.5 - v;
  }
  // Pair every v with 2 V_w - v.
  for (std::size_t p = 0; p < 200; p += 2) {
    e.r[p + 1] = e.r[p];
    e.v[p + 1][0] = 2 * 0.5 - e.v[p][0];
  }
  auto ok = wall_consistency_check(e, g, geo, kUnit);
  EXPECT_EQ(ok.status, WallCheck::Status::pass);
  EXPECT_NEAR(ok.mean_velocity[0], 0.0, 1e-15);
  auto bad = e;
  for (auto& v : bad.v) v[0] += 0.3;
  EXPECT_EQ(wall_consistency_check(bad, g, geo, kUnit).status, WallCheck::Status::fail);
  ParticleEnsemble inner;
  inner.dim = 1;
  inner.resize(50);
  for (auto& r : inner.r) r[0] = 0.5;
  for (auto& w : inner.weight) w = 0.02;
  EXPECT_EQ(wall_consistency_check(inner, g, geo, kUnit).status, WallCheck::Status::inconclusive);
}

TEST(EnsembleIo, RoundTripAndMissingFile) {
  auto fs = harmonic_series(0.0, 0.1);
  auto e = sample_maxwellian(fs.states[0], 500, 77, kUnit);
  e.alive[3] = 0;
  e.flags[4] = 1;
  e.logJ[5] = -0.25;
  std::stringstream ss;
  io::write_ensemble(ss, e);
  auto back = io::read_ensemble(ss);
  EXPECT_TRUE(back == e);
  try {
    io::load_ensemble("/nonexistent/ens.bin");
    FAIL();
  } catch (const UsageError& err) {
    EXPECT_NE(std::string(err.what()).find("ensemble checkpoint not found"), std::string::npos);
  }
  std::stringstream bad("MKFLD1xxxxxxxx");
  EXPECT_THROW(io::read_ensemble(bad), UsageError);
}

TEST(Trajectory, CsvColumns) {
  Trajectory t;
  t.push(0.0, {1.0, 0, 0}, {2.0, 0, 0}, 0.0);
  std::ostringstream os;
  write_trajectory_csv(os, t, 1);
  EXPECT_EQ(os.str().substr(0, 13), "t,r,v,logJ\n0,");
}

TEST(RestrictState, SubBlockKeepsNodeValues) {
  auto fs = harmonic_series(0.0, 0.1);
  const FluidState& s = fs.states[0];
  auto b = restrict_state(s, {60, 0, 0}, {136, 1, 1});
  EXPECT_FALSE(b.grid().periodic[0]);
  EXPECT_EQ(b.grid().nodes(0), 136);
  for (int i = 0; i < 136; ++i) {
    EXPECT_NEAR(b.grid().coord(0, i), s.grid().coord(0, 60 + i), 1e-12);
    EXPECT_EQ(b.f[static_cast<std::size_t>(i)], s.f[static_cast<std::size_t>(60 + i)]);
  }
  EXPECT_THROW(restrict_state(s, {250, 0, 0}, {10, 1, 1}), UsageError);
}
