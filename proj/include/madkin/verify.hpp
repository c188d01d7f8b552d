#pragma once

// Verification records, the report they form, and the correspondence,
// Heisenberg and convergence diagnostics that fill it.
//
// Report JSON:
//   { "header": {...}, "metadata": {...},
//     "records": [ {name, scenario, kind, value, expected, tolerance,
//                   error_bar, statistical, inconclusive, status, note} ] }
// status is a pure function of the numeric fields (see evaluate()).

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "madkin/tracer.hpp"

namespace madkin {

inline constexpr double kSigmaBound = 4.0;

struct CheckRecord {
  enum class Kind { equal, at_most, at_least };

  std::string name;
  std::string scenario;
  Kind kind = Kind::equal;
  double value = 0.0;
  double expected = 0.0;
  double tolerance = 0.0;
  double error_bar = 0.0;
  bool statistical = false;
  bool inconclusive = false;  // set by the producer (floor rule, empty shell, ...)
  std::string status;         // pass / fail / inconclusive
  std::string note;

  /// Tolerance actually applied: statistical checks widen to 4 error bars.
  double effective_tolerance() const {
    return statistical ? std::max(tolerance, kSigmaBound * error_bar) : tolerance;
  }

  void evaluate() {
    if (inconclusive) {
      status = "inconclusive";
      return;
    }
    const double tol = effective_tolerance();
    bool ok = std::isfinite(value);
    switch (kind) {
      case Kind::equal:
        ok = ok && std::abs(value - expected) <= tol;
        break;
      case Kind::at_most:
        ok = ok && value <= expected + tol;
        break;
      case Kind::at_least:
        ok = ok && value >= expected - tol;
        break;
    }
    status = ok ? "pass" : "fail";
  }

  bool passed() const { return status == "pass"; }
  bool failed() const { return status == "fail"; }
};

inline const char* kind_name(CheckRecord::Kind k) {
  switch (k) {
    case CheckRecord::Kind::equal:
      return "equal";
    case CheckRecord::Kind::at_most:
      return "at_most";
    case CheckRecord::Kind::at_least:
      return "at_least";
  }
  return "?";
}

inline CheckRecord::Kind kind_from(const std::string& s) {
  if (s == "equal") return CheckRecord::Kind::equal;
  if (s == "at_most") return CheckRecord::Kind::at_most;
  if (s == "at_least") return CheckRecord::Kind::at_least;
  throw UsageError("report: unknown record kind '" + s + "'");
}

inline CheckRecord make_record(std::string name, std::string scenario, CheckRecord::Kind kind, double value,
                               double expected, double tolerance, double error_bar = 0.0, bool statistical = false,
                               std::string note = {}) {
  CheckRecord r;
  r.name = std::move(name);
  r.scenario = std::move(scenario);
  r.kind = kind;
  r.value = value;
  r.expected = expected;
  r.tolerance = tolerance;
  r.error_bar = error_bar;
  r.statistical = statistical;
  r.note = std::move(note);
  r.evaluate();
  return r;
}

class VerificationReport {
 public:
  nlohmann::json metadata = nlohmann::json::object();

  /// Appends (records are never replaced within a run).
  const CheckRecord& add(CheckRecord r) {
    r.evaluate();
    records_.push_back(std::move(r));
    return records_.back();
  }
  void add_all(std::vector<CheckRecord> rs) {
    for (auto& r : rs) add(std::move(r));
  }

  const std::vector<CheckRecord>& records() const { return records_; }
  std::size_t statistical_count() const {
    return static_cast<std::size_t>(
        std::count_if(records_.begin(), records_.end(), [](const CheckRecord& r) { return r.statistical; }));
  }
  /// Union bound on spurious statistical failures (two-sided 4 sigma each).
  double false_failure_bound() const { return static_cast<double>(statistical_count()) * 6.334e-5; }

  bool any_failed() const {
    return std::any_of(records_.begin(), records_.end(), [](const CheckRecord& r) { return r.failed(); });
  }
  bool any_hard_failed() const {
    return std::any_of(records_.begin(), records_.end(),
                       [](const CheckRecord& r) { return r.failed() && !r.statistical; });
  }

  /// Recomputes every status from the stored numbers.
  void reevaluate() {
    for (auto& r : records_) r.evaluate();
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["header"] = {{"format", "madkin-report-1"},
                   {"sigma_bound", kSigmaBound},
                   {"statistical_checks", statistical_count()},
                   {"false_failure_bound", false_failure_bound()}};
    j["metadata"] = metadata;
    j["records"] = nlohmann::json::array();
    for (const auto& r : records_)
      j["records"].push_back({{"name", r.name},
                              {"scenario", r.scenario},
                              {"kind", kind_name(r.kind)},
                              {"value", r.value},
                              {"expected", r.expected},
                              {"tolerance", r.tolerance},
                              {"error_bar", r.error_bar},
                              {"statistical", r.statistical},
                              {"inconclusive", r.inconclusive},
                              {"status", r.status},
                              {"note", r.note}});
    return j;
  }

  static VerificationReport from_json(const nlohmann::json& j) {
    VerificationReport rep;
    if (!j.is_object() || !j.contains("records")) throw UsageError("report: missing records");
    if (j.contains("metadata")) rep.metadata = j["metadata"];
    for (const auto& x : j["records"]) {
      CheckRecord r;
      r.name = x.at("name").get<std::string>();
      r.scenario = x.value("scenario", "");
      r.kind = kind_from(x.at("kind").get<std::string>());
      r.value = number(x.at("value"));
      r.expected = number(x.at("expected"));
      r.tolerance = number(x.at("tolerance"));
      r.error_bar = number(x.value("error_bar", nlohmann::json(0.0)));
      r.statistical = x.value("statistical", false);
      r.inconclusive = x.value("inconclusive", false);
      r.status = x.value("status", "");
      r.note = x.value("note", "");
      rep.records_.push_back(std::move(r));
    }
    return rep;
  }

  void save(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw UsageError("cannot write report: " + path);
    os << to_json().dump(2) << '\n';
  }

  static VerificationReport load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw UsageError("report not found: " + path);
    nlohmann::json j;
    try {
      is >> j;
    } catch (const nlohmann::json::exception& e) {
      throw UsageError(std::string("report: invalid JSON: ") + e.what());
    }
    return from_json(j);
  }

  void print_table(std::ostream& os) const {
    std::size_t w = 4;
    for (const auto& r : records_) w = std::max(w, r.name.size());
    os << std::left << std::setw(static_cast<int>(w)) << "check" << "  " << std::setw(12) << "status" << std::right
       << std::setw(14) << "value" << std::setw(14) << "expected" << std::setw(12) << "tolerance" << std::setw(12)
       << "error_bar" << '\n';
    for (const auto& r : records_) {
      os << std::left << std::setw(static_cast<int>(w)) << r.name << "  " << std::setw(12)
         << (r.status + (r.statistical ? "*" : "")) << std::right << std::scientific << std::setprecision(4)
         << std::setw(14) << r.value << std::setw(14) << r.expected << std::setw(12) << std::setprecision(2)
         << r.effective_tolerance() << std::setw(12) << r.error_bar << std::defaultfloat << '\n';
    }
    os << "(* statistical, " << kSigmaBound << " sigma; union bound on false failures "
       << std::setprecision(3) << false_failure_bound() << ")\n";
  }

 private:
  std::vector<CheckRecord> records_;

  // JSON has no inf/nan; they are written as null and read back as NaN.
  static double number(const nlohmann::json& x) {
    return x.is_null() ? std::numeric_limits<double>::quiet_NaN() : x.get<double>();
  }
};

// --- correspondence ------------------------------------------------------------

namespace detail {

inline void require_same_time(double a, double b, const char* what) {
  if (std::abs(a - b) > 1e-12 * std::max(1.0, std::abs(a)))
    throw NumericalRejection(std::string(what) + ": ensemble and fluid state are at different times");
}

}  // namespace detail

/// L1 errors of f-hat and V-hat (f-weighted) against the fluid state, and
/// T-hat_i against T_i, each with its Monte-Carlo bound. The L1 bounds sum
/// the per-cell relative error 1/sqrt(N_cell), N_cell = N f h^d.
inline std::vector<CheckRecord> check_correspondence(const FluidState& s, const ParticleEnsemble& e,
                                                     const PhysicalConstants& c, const std::string& scenario,
                                                     std::array<double, kMaxDim> bw = {}, double l1_factor = 5.0) {
  detail::require_same_time(s.time, e.time, "check_correspondence");
  const GridSpec& g = s.grid();
  const Deposit dep = deposit(e, g, c, bw);
  const double dv = g.cell_volume();
  const double N = static_cast<double>(dep.particles);
  const int d = g.dim;
  double l1f = 0.0, bf = 0.0, l1v = 0.0, bv = 0.0;
  for (std::size_t n = 0; n < g.size(); ++n) {
    const double f = s.f[n];
    const double ncell = std::max(1.0, N * f * dv);
    l1f += dv * std::abs(dep.f[n] - f);
    bf += dv * f / std::sqrt(ncell);
    if (!s.valid[n]) continue;
    double dV2 = 0.0, sT = 0.0;
    for (int k = 0; k < d; ++k) {
      dV2 += (dep.V[k][n] - s.V[k][n]) * (dep.V[k][n] - s.V[k][n]);
      sT += s.T[static_cast<std::size_t>(k)] / c.mass;
    }
    l1v += dv * f * std::sqrt(dV2);
    bv += dv * f * std::sqrt(sT) / std::sqrt(ncell);
  }
  std::vector<CheckRecord> out;
  CheckRecord rf = make_record("correspondence.f_L1", scenario, CheckRecord::Kind::at_most, l1f, 0.0,
                               l1_factor * bf, bf, true, "L1(f-hat - f) vs 5x MC bound");
  CheckRecord rv = make_record("correspondence.V_L1", scenario, CheckRecord::Kind::at_most, l1v, 0.0,
                               l1_factor * bv, bv, true, "f-weighted L1(V-hat - V) vs 5x MC bound");
  out.push_back(rf);
  out.push_back(rv);
  for (int k = 0; k < d; ++k) {
    out.push_back(make_record("correspondence.T" + std::to_string(k + 1), scenario, CheckRecord::Kind::equal,
                              dep.T[k], s.T[static_cast<std::size_t>(k)], 0.0, dep.T_se[k], true,
                              "T-hat within 4 standard errors"));
  }
  return out;
}

// --- Heisenberg ------------------------------------------------------------------

/// Spectral/kinetic decomposition identity and the uncertainty bounds of one
/// wavefunction snapshot (no particles).
inline std::vector<CheckRecord> check_heisenberg_fields(const ComplexField& psi, const PhysicalConstants& c,
                                                        const std::string& scenario, bool minimum_uncertainty) {
  std::vector<CheckRecord> out;
  const auto ax = heisenberg(psi, c);
  const double bound = c.hbar * c.hbar / 4.0;
  for (std::size_t k = 0; k < ax.size(); ++k) {
    const std::string sfx = std::to_string(k + 1) + "@t=" + [&] {
      std::ostringstream os;
      os << psi.time();
      return os.str();
    }();
    const double split = ax[k].thermal + ax[k].phase_part;
    out.push_back(make_record("heisenberg.decomposition" + sfx, scenario, CheckRecord::Kind::equal,
                              split / ax[k].var_p, 1.0, 1e-6, 0.0, false,
                              "(m T + phase part) / spectral <dp^2>"));
    out.push_back(make_record("heisenberg.lower_bound" + sfx, scenario, CheckRecord::Kind::at_least,
                              ax[k].product(), bound, 1e-9, 0.0, false, "<dr^2><dp^2> >= hbar^2/4"));
    if (minimum_uncertainty)
      out.push_back(make_record("heisenberg.saturation" + sfx, scenario, CheckRecord::Kind::equal,
                                ax[k].product() / bound, 1.0, 1e-3, 0.0, false, "minimum-uncertainty packet"));
  }
  return out;
}

/// Kinetic-representation checks from an ensemble: (a) m^2 <(v - V)^2> =
/// m T-hat_i, (b) the kinetic uncertainty product <dr^2>(m T-hat + <(d2 p)^2>)
/// >= hbar^2/4 with T-hat > 0, (c) spectral <dp^2> equals the kinetic
/// decomposition. Error bars come from 32 batch replicas.
inline std::vector<CheckRecord> check_kinetic_heisenberg(const FluidState& s, const ParticleEnsemble& e,
                                                         const ComplexField& psi, const PhysicalConstants& c,
                                                         const std::string& scenario) {
  detail::require_same_time(s.time, e.time, "check_kinetic_heisenberg");
  detail::require_same_time(s.time, psi.time(), "check_kinetic_heisenberg");
  const GridSpec& g = s.grid();
  const int d = g.dim;
  const Deposit dep = deposit(e, g, c);
  const auto ax = heisenberg(psi, c);
  const double m = c.mass;

  // Per-particle fluid velocity.
  std::vector<Vec> Vp(e.size(), Vec{0.0, 0.0, 0.0});
  std::vector<std::uint8_t> ok(e.size(), 0);
  for_chunks(e.size(), [&](std::size_t b, std::size_t en, std::size_t) {
    Stencil st;
    for (std::size_t p = b; p < en; ++p) {
      if (!e.alive[p] || !Stencil::build(g, e.r[p], st)) continue;
      for (int k = 0; k < d; ++k) Vp[p][k] = st.apply(s.V[k]);
      ok[p] = 1;
    }
  });

  struct Stats {
    Vec kin{}, var_r{}, var_mv{}, var_mV{};
  };
  auto stats = [&](std::size_t lo, std::size_t hi) {
    Stats st;
    double sw = 0.0;
    Vec mr{}, mv{}, mV{};
    for (std::size_t p = lo; p < hi; ++p) {
      if (!ok[p]) continue;
      const double w = e.weight[p];
      sw += w;
      for (int k = 0; k < d; ++k) {
        mr[k] += w * e.r[p][k];
        mv[k] += w * e.v[p][k];
        mV[k] += w * Vp[p][k];
      }
    }
    if (!(sw > 0.0)) return st;
    for (int k = 0; k < d; ++k) mr[k] /= sw, mv[k] /= sw, mV[k] /= sw;
    for (std::size_t p = lo; p < hi; ++p) {
      if (!ok[p]) continue;
      const double w = e.weight[p] / sw;
      for (int k = 0; k < d; ++k) {
        const double u = e.v[p][k] - Vp[p][k];
        st.kin[k] += w * m * m * u * u;
        st.var_r[k] += w * (e.r[p][k] - mr[k]) * (e.r[p][k] - mr[k]);
        st.var_mv[k] += w * m * m * (e.v[p][k] - mv[k]) * (e.v[p][k] - mv[k]);
        st.var_mV[k] += w * m * m * (Vp[p][k] - mV[k]) * (Vp[p][k] - mV[k]);
      }
    }
    return st;
  };
  const Stats all = stats(0, e.size());
  const int B = 32;
  std::vector<Stats> bs;
  if (e.size() >= static_cast<std::size_t>(2 * B))
    for (int b = 0; b < B; ++b)
      bs.push_back(stats(e.size() * static_cast<std::size_t>(b) / B, e.size() * static_cast<std::size_t>(b + 1) / B));
  auto batch_se = [&](auto get) {
    if (bs.size() < 2) return 0.0;
    double mean = 0.0, var = 0.0;
    for (const auto& x : bs) mean += get(x);
    mean /= static_cast<double>(bs.size());
    for (const auto& x : bs) var += (get(x) - mean) * (get(x) - mean);
    var /= static_cast<double>(bs.size() - 1);
    return std::sqrt(var / static_cast<double>(bs.size()));
  };

  std::vector<CheckRecord> out;
  const double bound = c.hbar * c.hbar / 4.0;
  for (int k = 0; k < d; ++k) {
    const std::string sfx = std::to_string(k + 1);
    const double mT = m * dep.T[k];
    const double se_a = std::max(batch_se([&](const Stats& x) { return x.kin[k]; }), m * dep.T_se[k]);
    out.push_back(make_record("kinetic.momentum_fluctuation" + sfx, scenario, CheckRecord::Kind::equal,
                              all.kin[k], mT, 1e-12 * std::max(1.0, mT), se_a, true,
                              "m^2 <(v-V)^2> = m T-hat"));
    out.push_back(make_record("kinetic.temperature_positive" + sfx, scenario, CheckRecord::Kind::at_least,
                              dep.T[k], std::numeric_limits<double>::min(), 0.0, 0.0, false, "T-hat > 0"));
    const double prod = all.var_r[k] * (mT + all.var_mV[k]);
    const double se_p =
        batch_se([&](const Stats& x) { return x.var_r[k] * (x.kin[k] + x.var_mV[k]); });
    out.push_back(make_record("kinetic.uncertainty_product" + sfx, scenario, CheckRecord::Kind::at_least, prod,
                              bound, 0.0, se_p, true, "<<dr^2>> (m T-hat + <(d2 p)^2>) >= hbar^2/4"));
    const double kinetic_var_p = all.var_mv[k];
    const double se_c = batch_se([&](const Stats& x) { return x.var_mv[k]; });
    out.push_back(make_record("kinetic.spectral_match" + sfx, scenario, CheckRecord::Kind::equal, kinetic_var_p,
                              ax[static_cast<std::size_t>(k)].var_p, 0.0, se_c, true,
                              "m^2 var(v) vs spectral <dp^2>"));
  }
  return out;
}

// --- convergence -------------------------------------------------------------------

struct ConvergenceFit {
  double order = 0.0;
  bool monotone = true;
  bool at_floor = false;
};

/// Least-squares slope of log(err) against log(h).
inline ConvergenceFit fit_order(const std::vector<double>& h, const std::vector<double>& err, double floor = 1e-13) {
  if (h.size() != err.size() || h.size() < 3) throw UsageError("convergence: need at least 3 levels");
  ConvergenceFit fit;
  fit.at_floor = std::all_of(err.begin(), err.end(), [&](double x) { return x <= floor; });
  for (std::size_t k = 1; k < err.size(); ++k)
    if (!(err[k] < err[k - 1])) fit.monotone = false;
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double n = static_cast<double>(h.size());
  for (std::size_t k = 0; k < h.size(); ++k) {
    const double x = std::log(h[k]), y = std::log(std::max(err[k], 1e-300));
    sx += x, sy += y, sxx += x * x, sxy += x * y;
  }
  fit.order = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  return fit;
}

/// Record for an order check: pass if within +-window of `expected`,
/// inconclusive for a non-monotone sequence or errors at the round-off floor.
inline CheckRecord convergence_record(const std::string& name, const std::string& scenario,
                                      const std::vector<double>& h, const std::vector<double>& err,
                                      double expected = 2.0, double window = 0.3, double floor = 1e-13) {
  const ConvergenceFit fit = fit_order(h, err, floor);
  CheckRecord r = make_record(name, scenario, CheckRecord::Kind::equal, fit.order, expected, window);
  if (fit.at_floor) {
    r.inconclusive = true;
    r.note = "errors at round-off floor; order check skipped";
  } else if (!fit.monotone) {
    r.inconclusive = true;
    r.note = "non-monotone error sequence";
  }
  r.evaluate();
  return r;
}

}  // namespace madkin
