#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "madkin/verify.hpp"
#include "oracles.hpp"

using namespace madkin;

namespace {

const PhysicalConstants kUnit{};

GridSpec free_grid() { return GridSpec::periodic_box(1, -20.0, 20.0, 1024); }

ComplexField free_psi(double t) {
  InitialState init;
  auto psi0 = init_scenario(init, free_grid(), kUnit);
  if (t == 0.0) return psi0;
  const int steps = 20;
  return propagate_series(psi0, PotentialSpec::free(), kUnit, t / steps, steps, steps).back();
}

ComplexField harmonic_psi() {
  InitialState s;
  s.kind = InitialState::Kind::harmonic_ground;
  return init_scenario(s, GridSpec::periodic_box(1, -8.0, 8.0, 256), kUnit);
}

FluidState state_of(const ComplexField& psi, const PotentialSpec& pot = PotentialSpec::free()) {
  return build_fluid_state(psi, pot, kUnit);
}

const CheckRecord& find(const std::vector<CheckRecord>& rs, const std::string& name) {
  for (const auto& r : rs)
    if (r.name == name) return r;
  throw std::runtime_error("no record " + name);
}

}  // namespace

TEST(CheckRecord, StatusIsAFunctionOfTheNumbers) {
  using K = CheckRecord::Kind;
  EXPECT_TRUE(make_record("a", "s", K::equal, 1.05, 1.0, 0.1).passed());
  EXPECT_TRUE(make_record("a", "s", K::equal, 1.2, 1.0, 0.1).failed());
  EXPECT_TRUE(make_record("a", "s", K::at_most, 0.5, 0.0, 0.6).passed());
  EXPECT_TRUE(make_record("a", "s", K::at_most, 0.7, 0.0, 0.6).failed());
  EXPECT_TRUE(make_record("a", "s", K::at_least, 0.2499999999, 0.25, 1e-9).passed());
  EXPECT_TRUE(make_record("a", "s", K::at_least, 0.2, 0.25, 1e-9).failed());
  // Statistical records widen to four error bars, others do not.
  EXPECT_TRUE(make_record("a", "s", K::equal, 1.3, 1.0, 0.0, 0.1, true).passed());
  EXPECT_TRUE(make_record("a", "s", K::equal, 1.5, 1.0, 0.0, 0.1, true).failed());
  EXPECT_TRUE(make_record("a", "s", K::equal, 1.3, 1.0, 0.0, 0.1, false).failed());
  EXPECT_TRUE(make_record("a", "s", K::at_most, std::nan(""), 0.0, 1.0).failed());
  CheckRecord r = make_record("a", "s", K::equal, 5.0, 1.0, 0.1);
  r.inconclusive = true;
  r.evaluate();
  EXPECT_EQ(r.status, "inconclusive");
}

TEST(Report, JsonRoundTripAndReevaluation) {
  using K = CheckRecord::Kind;
  VerificationReport rep;
  rep.metadata = {{"seed", 42}, {"N", 1000}};
  rep.add(make_record("hard.pass", "x", K::at_most, 1e-12, 0.0, 1e-10));
  rep.add(make_record("stat.fail", "x", K::equal, 2.0, 1.0, 0.0, 0.1, true));
  rep.add(make_record("nan.value", "x", K::at_most, std::numeric_limits<double>::quiet_NaN(), 0.0, 1.0));
  EXPECT_EQ(rep.statistical_count(), 1u);
  EXPECT_TRUE(rep.any_failed());
  EXPECT_TRUE(rep.any_hard_failed());  // the NaN record

  const auto path = (std::filesystem::temp_directory_path() / "madkin_report_rt.json").string();
  rep.save(path);
  VerificationReport back = VerificationReport::load(path);
  ASSERT_EQ(back.records().size(), 3u);
  EXPECT_EQ(back.metadata["seed"], 42);
  for (std::size_t k = 0; k < 3; ++k) {
    const auto& a = rep.records()[k];
    const auto& b = back.records()[k];
    EXPECT_EQ(a.name, b.name);
    EXPECT_EQ(a.status, b.status);
    EXPECT_EQ(a.kind, b.kind);
    EXPECT_EQ(a.statistical, b.statistical);
    if (std::isfinite(a.value)) EXPECT_EQ(a.value, b.value);
    else EXPECT_TRUE(std::isnan(b.value));
  }
  back.reevaluate();
  for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(rep.records()[k].status, back.records()[k].status);
  EXPECT_EQ(rep.to_json().dump(), back.to_json().dump());

  // A hand-edited value flips the status on re-evaluation.
  auto j = rep.to_json();
  j["records"][0]["value"] = 1.0;
  auto edited = VerificationReport::from_json(j);
  EXPECT_EQ(edited.records()[0].status, "pass");
  edited.reevaluate();
  EXPECT_EQ(edited.records()[0].status, "fail");

  j["records"][0]["kind"] = "roughly";
  EXPECT_THROW(VerificationReport::from_json(j), UsageError);
  EXPECT_THROW(VerificationReport::load("/nonexistent/report.json"), UsageError);
  std::filesystem::remove(path);
}

TEST(Report, OnlyStatisticalFailuresAreSoft) {
  using K = CheckRecord::Kind;
  VerificationReport rep;
  rep.add(make_record("stat", "x", K::equal, 2.0, 1.0, 0.0, 0.1, true));
  EXPECT_TRUE(rep.any_failed());
  EXPECT_FALSE(rep.any_hard_failed());
  std::ostringstream os;
  rep.print_table(os);
  EXPECT_NE(os.str().find("fail*"), std::string::npos);
  EXPECT_NE(os.str().find("4 sigma"), std::string::npos);
}

TEST(Correspondence, FreshSamplePassesAndShiftIsDetected) {
  const auto psi = free_psi(0.0);
  const FluidState s = state_of(psi);
  auto e = sample_maxwellian(s, 200000, 21, kUnit);
  const auto ok = check_correspondence(s, e, kUnit, "free_gaussian");
  ASSERT_EQ(ok.size(), 3u);
  for (const auto& r : ok) EXPECT_TRUE(r.passed()) << r.name << " " << r.value << " tol " << r.effective_tolerance();

  const double c = 0.5;
  for (auto& v : e.v) v[0] += c;
  const auto bad = check_correspondence(s, e, kUnit, "free_gaussian");
  const auto& rv = find(bad, "correspondence.V_L1");
  EXPECT_TRUE(rv.failed());
  // f-weighted L1 of a uniform shift is c times the total mass.
  EXPECT_NEAR(rv.value, c, 0.01 * c + find(ok, "correspondence.V_L1").value);
  EXPECT_TRUE(find(bad, "correspondence.f_L1").passed());
  EXPECT_NEAR(find(bad, "correspondence.T1").value, find(ok, "correspondence.T1").value, 1e-12);
}

TEST(Correspondence, TimeMismatchRejected) {
  const FluidState s = state_of(free_psi(0.0));
  auto e = sample_maxwellian(s, 1000, 1, kUnit);
  e.time = 0.5;
  EXPECT_THROW(check_correspondence(s, e, kUnit, "x"), NumericalRejection);
  EXPECT_THROW(check_kinetic_heisenberg(s, e, free_psi(0.0), kUnit, "x"), NumericalRejection);
}

TEST(KineticHeisenberg, MinimumUncertaintyPacket) {
  const auto psi = free_psi(0.0);
  const FluidState s = state_of(psi);
  const auto e = sample_maxwellian(s, 400000, 5, kUnit);
  const auto rs = check_kinetic_heisenberg(s, e, psi, kUnit, "free_gaussian");
  for (const auto& r : rs) EXPECT_TRUE(r.passed()) << r.name << " " << r.value << " vs " << r.expected;
  const auto& prod = find(rs, "kinetic.uncertainty_product1");
  EXPECT_NEAR(prod.value, 0.25, 4.0 * prod.error_bar);
  EXPECT_LT(prod.error_bar / 0.25, 1e-2);
}

TEST(KineticHeisenberg, SpreadingPacketDoublesTheProduct) {
  // hbar t / (2 m sigma0^2) = 1 at t = 2.
  const auto psi = free_psi(2.0);
  const FluidState s = state_of(psi);
  const auto e = sample_maxwellian(s, 400000, 6, kUnit);
  const auto rs = check_kinetic_heisenberg(s, e, psi, kUnit, "free_gaussian");
  for (const auto& r : rs) EXPECT_TRUE(r.passed()) << r.name << " " << r.value << " vs " << r.expected;
  const auto& prod = find(rs, "kinetic.uncertainty_product1");
  EXPECT_NEAR(prod.value, 0.5, 4.0 * prod.error_bar);
  // Independent quadrature of the closed-form density for <dr^2>.
  oracle::FreeGaussian fg;
  const double var_r = oracle::simpson([&](double x) { return x * x * fg.density(x, 2.0); }, -20.0, 20.0);
  EXPECT_NEAR(var_r, 2.0, 1e-8);
  EXPECT_NEAR(find(rs, "kinetic.spectral_match1").expected * var_r, 0.5, 1e-6);
}

TEST(KineticHeisenberg, DegenerateEnsembleFlagsTemperature) {
  const auto psi = harmonic_psi();
  const FluidState s = state_of(psi, PotentialSpec::harmonic({1.0, 1.0, 1.0}));
  auto e = sample_maxwellian(s, 10000, 8, kUnit);
  for (auto& v : e.v) v = Vec{0.0, 0.0, 0.0};  // v = V exactly
  const auto rs = check_kinetic_heisenberg(s, e, psi, kUnit, "harmonic_ground");
  const auto& fluct = find(rs, "kinetic.momentum_fluctuation1");
  EXPECT_EQ(fluct.value, 0.0);
  EXPECT_EQ(fluct.expected, 0.0);
  EXPECT_TRUE(fluct.passed());
  EXPECT_TRUE(find(rs, "kinetic.temperature_positive1").failed());
  EXPECT_TRUE(find(rs, "kinetic.uncertainty_product1").failed());
}

TEST(Convergence, FitFloorAndMonotonicity) {
  const std::vector<double> h{0.04, 0.02, 0.01};
  auto second = convergence_record("c", "s", h, {1.6e-3, 4e-4, 1e-4});
  EXPECT_NEAR(second.value, 2.0, 1e-12);
  EXPECT_TRUE(second.passed());
  auto first = convergence_record("c", "s", h, {4e-2, 2e-2, 1e-2});
  EXPECT_TRUE(first.failed());
  auto floor = convergence_record("c", "s", h, {3e-15, 2e-15, 4e-15});
  EXPECT_EQ(floor.status, "inconclusive");
  auto wobble = convergence_record("c", "s", h, {1e-3, 2e-3, 1e-4});
  EXPECT_EQ(wobble.status, "inconclusive");
  EXPECT_THROW(fit_order({0.1, 0.05}, {1.0, 0.25}), UsageError);
}

TEST(Convergence, FirstOrderTimeStencilIsDetected) {
  // Free evolution is exact under split stepping, so only the time stencil
  // of the residual sets the error.
  std::vector<double> h, centred, backward;
  const auto psi0 = free_psi(0.0);
  for (double dt : {0.04, 0.02, 0.01}) {
    const int steps = static_cast<int>(std::lround((1.0 + dt) / dt));
    auto series = propagate_series(psi0, PotentialSpec::free(), kUnit, dt, steps, 1);
    const std::size_t n = series.size();
    const FluidState sm = state_of(series[n - 3]), s0 = state_of(series[n - 2]), sp = state_of(series[n - 1]);
    const auto sc = scales_from(s0, kUnit);
    h.push_back(dt);
    centred.push_back(hydro_residuals(sm, s0, sp, kUnit, sc).max_continuity);
    backward.push_back(hydro_residuals(sm, s0, sp, kUnit, sc, TimeStencil::backward1).max_continuity);
  }
  EXPECT_TRUE(convergence_record("continuity", "free_gaussian", h, centred).passed());
  const auto fit = fit_order(h, backward);
  EXPECT_NEAR(fit.order, 1.0, 0.3);
  EXPECT_TRUE(convergence_record("continuity", "free_gaussian", h, backward).failed());
}
