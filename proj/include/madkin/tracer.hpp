#pragma once

// Characteristics of the inverse kinetic equation: ensemble sampling from
// g_M, RK4 transport with the Liouville exponent, bounce-back walls and
// kernel deposition of the fluid moments.

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "madkin/closure.hpp"
#include "madkin/rng.hpp"

namespace madkin {

// --- sampling -----------------------------------------------------------------

struct SampleOptions {
  /// Fraction of positions drawn uniformly over the box instead of from f
  /// (importance sampling for the tails; weights compensate). d = 1 only.
  double uniform_fraction = 0.0;
  /// Positional-temperature closure: velocities get variance k_i(r) T_i / m.
  const ClosureSpec* closure = nullptr;
};

namespace detail {

/// Piecewise-linear density through the grid nodes (constant over the half
/// cells next to walls), with its cumulative mass.
struct LinearDensity1D {
  std::vector<double> x, y, cum;
  double lo = 0.0, hi = 0.0;

  explicit LinearDensity1D(const ScalarField& f) {
    const GridSpec& g = f.grid();
    const int n = g.nodes(0);
    lo = g.lower[0];
    hi = g.upper[0];
    if (g.periodic[0]) {
      for (int i = 0; i < n; ++i) {
        x.push_back(g.coord(0, i));
        y.push_back(std::max(0.0, f[static_cast<std::size_t>(i)]));
      }
      x.push_back(hi);
      y.push_back(y.front());
    } else {
      x.push_back(lo);
      y.push_back(std::max(0.0, f[0]));
      for (int i = 0; i < n; ++i) {
        x.push_back(g.coord(0, i));
        y.push_back(std::max(0.0, f[static_cast<std::size_t>(i)]));
      }
      x.push_back(hi);
      y.push_back(y.back());
    }
    cum.assign(x.size(), 0.0);
    for (std::size_t k = 1; k < x.size(); ++k) cum[k] = cum[k - 1] + 0.5 * (y[k] + y[k - 1]) * (x[k] - x[k - 1]);
  }

  double mass() const { return cum.back(); }

  double value(double r) const {
    auto it = std::upper_bound(x.begin(), x.end(), r);
    std::size_t k = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>((it - x.begin()) - 1, 0,
                                                                        static_cast<std::ptrdiff_t>(x.size()) - 2));
    const double s = (r - x[k]) / (x[k + 1] - x[k]);
    return y[k] + s * (y[k + 1] - y[k]);
  }

  /// Inverse CDF for a uniform u in (0,1).
  double invert(double u) const {
    const double target = u * mass();
    auto it = std::upper_bound(cum.begin(), cum.end(), target);
    std::size_t k = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>((it - cum.begin()) - 1, 0,
                                                                        static_cast<std::ptrdiff_t>(x.size()) - 2));
    const double h = x[k + 1] - x[k], a = y[k], b = y[k + 1];
    const double need = target - cum[k];
    // Solve a s h + (b - a) s^2 h / 2 = need for s in [0,1].
    double s;
    const double slope = b - a;
    if (std::abs(slope) < 1e-14 * std::max(a, b)) {
      s = a > 0.0 ? need / (a * h) : 0.5;
    } else {
      const double disc = std::max(0.0, a * a + 2.0 * slope * need / h);
      s = (std::sqrt(disc) - a) / slope;
      // Stable form when the two roots nearly cancel.
      if (a > 0.0) s = 2.0 * need / h / (a + std::sqrt(disc));
    }
    return x[k] + std::clamp(s, 0.0, 1.0) * h;
  }
};

inline Point wrap_periodic(const GridSpec& g, Point r) {
  for (int k = 0; k < g.dim; ++k) {
    if (!g.periodic[k]) continue;
    const double L = g.length(k);
    r[k] = g.lower[k] + std::fmod(std::fmod(r[k] - g.lower[k], L) + L, L);
  }
  return r;
}

}  // namespace detail

/// Draws n particles from g_M of the state: positions from f (inverse CDF of
/// the piecewise-linear density in d = 1, rejection against the interpolated
/// density for d >= 2), velocities normal about V(r) with variance T_i/m.
/// Every draw depends only on (seed, particle index).
inline ParticleEnsemble sample_maxwellian(const FluidState& s, std::size_t n, std::uint64_t seed,
                                          const PhysicalConstants& c, const SampleOptions& opt = {}) {
  const GridSpec& g = s.grid();
  const int d = s.dim();
  require_positive_temperatures(s.T, "sample_maxwellian");
  if (opt.uniform_fraction < 0.0 || opt.uniform_fraction >= 1.0)
    throw UsageError("sample_maxwellian: uniform_fraction must lie in [0, 1)");
  if (opt.uniform_fraction > 0.0 && d != 1) throw UsageError("sample_maxwellian: uniform_fraction needs d = 1");
  if (opt.closure && opt.closure->kind == ClosureSpec::Kind::positional_temperature && !opt.closure->prepared())
    throw UsageError("sample_maxwellian: positional closure not prepared");
  const double total = integrate(s.f);
  if (!std::isfinite(total) || !(total > 0.0)) throw NumericalRejection("sample_maxwellian: f is not normalizable on the grid");

  ParticleEnsemble e;
  e.dim = d;
  e.time = s.time;
  e.seed = seed;
  e.resize(n);
  if (n == 0) return e;

  std::optional<detail::LinearDensity1D> lin;
  if (d == 1) lin.emplace(s.f);
  const double fmax = max_abs(s.f);
  const double alpha = opt.uniform_fraction;
  const ClosureSpec* prof =
      opt.closure && opt.closure->kind == ClosureSpec::Kind::positional_temperature ? opt.closure : nullptr;

  for_chunks(n, [&](std::size_t b, std::size_t en, std::size_t) {
    for (std::size_t p = b; p < en; ++p) {
      CounterRng rng(seed, p, 0);
      Point r{0.0, 0.0, 0.0};
      double w = 1.0 / static_cast<double>(n);
      if (d == 1) {
        const double L = g.length(0);
        if (alpha > 0.0 && rng.uniform() < alpha) {
          r[0] = g.lower[0] + rng.uniform() * L;
        } else {
          r[0] = lin->invert(rng.uniform());
        }
        if (alpha > 0.0) {
          const double target = lin->value(r[0]) / lin->mass();
          w *= target / ((1.0 - alpha) * target + alpha / L);
        }
      } else {
        // Rejection against 1.05 max f with a uniform proposal over the box.
        bool accepted = false;
        for (int attempt = 0; attempt < 1000000 && !accepted; ++attempt) {
          for (int k = 0; k < d; ++k) r[k] = g.lower[k] + rng.uniform() * g.length(k);
          Stencil st;
          if (!Stencil::build(g, r, st)) continue;
          const double fr = std::max(0.0, st.apply(s.f));
          accepted = rng.uniform() * 1.05 * fmax < fr;
        }
        if (!accepted) {
          e.alive[p] = 0;
          continue;
        }
      }
      r = detail::wrap_periodic(g, r);
      e.r[p] = r;
      e.weight[p] = w;
      LocalFields Lf;
      if (!local_fields(s, r, Lf, prof)) {
        e.alive[p] = 0;
        continue;
      }
      CounterRng vr(seed, p, 1);
      for (int k = 0; k < d; ++k) e.v[p][k] = Lf.V[k] + std::sqrt(Lf.Tloc(k) / c.mass) * vr.normal();
    }
  });
  return e;
}

// --- walls --------------------------------------------------------------------

struct AxisBoundary {
  bool wall = false;
  Vec V_w{0.0, 0.0, 0.0};  // wall velocity
  double f_w = 0.0;        // prescribed boundary density
};

struct BoundaryGeometry {
  std::array<AxisBoundary, kMaxDim> axis{};

  /// Walls with velocity V_w on every bounded axis of the grid.
  static BoundaryGeometry from_grid(const GridSpec& g, Vec V_w = {0.0, 0.0, 0.0}, double f_w = 0.0) {
    BoundaryGeometry b;
    for (int k = 0; k < g.dim; ++k)
      if (!g.periodic[k]) b.axis[k] = AxisBoundary{true, V_w, f_w};
    return b;
  }

  void validate(const GridSpec& g) const {
    for (int k = 0; k < g.dim; ++k) {
      if (axis[k].wall && g.periodic[k]) throw UsageError("geometry: walls are only allowed on bounded axes");
      if (!axis[k].wall && !g.periodic[k]) throw UsageError("geometry: bounded axis " + std::to_string(k) + " needs a wall");
    }
  }

  bool any_wall() const { return axis[0].wall || axis[1].wall || axis[2].wall; }
};

/// Reflects particles that crossed a wall: position mirrored about the wall,
/// v' = 2 V_w - v, weight and logJ unchanged. A particle at the wall with
/// zero relative speed is left in place and flagged.
inline std::size_t bounce_back(ParticleEnsemble& e, const GridSpec& g, const BoundaryGeometry& geo) {
  geo.validate(g);
  std::vector<std::uint8_t> stuck(e.size(), 0);
  for_chunks(e.size(), [&](std::size_t b, std::size_t en, std::size_t) {
    for (std::size_t p = b; p < en; ++p) {
      if (!e.alive[p]) continue;
      for (int k = 0; k < g.dim; ++k) {
        if (!geo.axis[k].wall) continue;
        const double lo = g.lower[k], hi = g.upper[k];
        double& x = e.r[p][k];
        if (x >= lo && x <= hi) continue;
        const Vec& Vw = geo.axis[k].V_w;
        double rel = 0.0;
        for (int j = 0; j < g.dim; ++j) rel += (e.v[p][j] - Vw[j]) * (e.v[p][j] - Vw[j]);
        if (rel == 0.0) {
          x = std::clamp(x, lo, hi);
          e.flags[p] |= ParticleEnsemble::kStuckAtWall;
          stuck[p] = 1;
          continue;
        }
        x = x < lo ? 2.0 * lo - x : 2.0 * hi - x;
        x = std::clamp(x, lo, hi);
        for (int j = 0; j < g.dim; ++j) e.v[p][j] = 2.0 * Vw[j] - e.v[p][j];
      }
    }
  });
  return static_cast<std::size_t>(std::count(stuck.begin(), stuck.end(), std::uint8_t{1}));
}

// --- transport ------------------------------------------------------------------

struct AdvanceOptions {
  const BoundaryGeometry* geometry = nullptr;
  std::vector<std::size_t> record;     // particle indices whose trajectories are kept
  std::vector<Trajectory>* trajectories = nullptr;
  bool check_stability = true;
};

struct AdvanceReport {
  int steps = 0;
  double dt = 0.0;
  std::size_t dead = 0;      // total not alive after the run
  std::size_t newly_dead = 0;
  std::size_t stuck = 0;     // wall contacts with zero relative speed
  double stability = 0.0;    // dt max |dK/dv| / m
};

/// dt max |dK/dv|/m over the snapshots (Maxwellian part of the closure).
inline double stability_number(const FieldSeries& fs, double dt) {
  double worst = 0.0;
  for (std::size_t k = 0; k < fs.states.size(); ++k) {
    const FluidState& s = fs.states[k];
    const int d = s.dim();
    for (std::size_t n = 0; n < s.f.size(); ++n) {
      if (!s.valid[n]) continue;
      for (int i = 0; i < d; ++i) {
        double row = 0.5 * std::abs(fs.dlnT_dt[k][i]);
        for (int j = 0; j < d; ++j) row += std::abs(s.dV(i, j)[n]);
        worst = std::max(worst, row);
      }
    }
  }
  return dt * worst;
}

namespace detail {

inline Point eval_point(const GridSpec& g, const BoundaryGeometry* geo, const Point& r) {
  return geo ? clamp_to_box(g, r) : r;
}

}  // namespace detail

/// RK4 on (r, v, logJ) with dr/dt = v, dv/dt = K/m, dlogJ/dt = (d/dv).(K/m).
/// The stage weights make the logJ update a Simpson rule along the step.
/// Particles whose field stencil touches a node are frozen and marked dead.
inline AdvanceReport advance(ParticleEnsemble& e, const FieldSeries& fs, const ClosureEval& ce, double dt, int steps,
                             const AdvanceOptions& opt = {}) {
  AdvanceReport rep;
  rep.steps = steps;
  rep.dt = dt;
  if (steps < 0) throw UsageError("advance: steps must be non-negative");
  if (steps > 0 && !(dt > 0.0)) throw UsageError("advance: dt must be positive");
  if (e.dim != fs.grid().dim) throw UsageError("advance: ensemble and fields differ in dimension");
  if (ce.kind() == ClosureSpec::Kind::raw_moments && (!ce.moments || ce.moments->size() != fs.states.size()))
    throw UsageError("advance: raw closure needs one moment set per snapshot");
  if (ce.kind() == ClosureSpec::Kind::positional_temperature && !ce.spec->prepared())
    throw UsageError("advance: positional closure not prepared");
  const GridSpec& g = fs.grid();
  if (opt.geometry) opt.geometry->validate(g);
  else if (!g.all_periodic()) throw UsageError("advance: bounded grid needs a BoundaryGeometry");
  const std::size_t dead0 = e.size() - e.alive_count();
  if (opt.trajectories) {
    opt.trajectories->clear();
    for (std::size_t idx : opt.record) {
      if (idx >= e.size()) throw UsageError("advance: recorded particle index out of range");
      Trajectory t;
      t.particle = idx;
      t.push(e.time, e.r[idx], e.v[idx], e.logJ[idx]);
      t.alive = e.alive[idx];
      opt.trajectories->push_back(std::move(t));
    }
  }
  if (steps == 0) {
    rep.dead = dead0;
    return rep;
  }
  const double t_start = e.time;
  const double t_final = t_start + steps * dt;
  const double tol = 1e-9 * std::max(1.0, std::abs(t_final));
  if (e.time < fs.t_begin() - tol || t_final > fs.t_end() + tol)
    throw UsageError("advance: field series does not cover [t, t + steps dt]");
  rep.stability = stability_number(fs, dt);
  if (opt.check_stability && rep.stability >= 0.1)
    throw NumericalRejection("advance: dt violates the stability bound dt max|dK/dv|/m < 0.1 (got " +
                             std::to_string(rep.stability) + ")");

  const int d = e.dim;
  const double t_lo = fs.t_begin(), t_hi = fs.t_end();
  auto clamp_t = [&](double t) { return std::clamp(t, t_lo, t_hi); };
  // One RK4 step of length h from (r, v) at time t0; logJ gains the Simpson
  // increment. False if a stage touches a node.
  auto rk4 = [&](Point& r, Vec& v, double& lj, double t0, double h) {
    Vec a1{}, a2{}, a3{}, a4{};
    double j1 = 0, j2 = 0, j3 = 0, j4 = 0;
    Point r2 = r, r3 = r, r4 = r;
    Vec v2 = v, v3 = v, v4 = v;
    if (!closure_rhs(fs, ce, clamp_t(t0), detail::eval_point(g, opt.geometry, r), v, a1, j1)) return false;
    for (int k = 0; k < d; ++k) {
      r2[k] = r[k] + 0.5 * h * v[k];
      v2[k] = v[k] + 0.5 * h * a1[k];
    }
    if (!closure_rhs(fs, ce, clamp_t(t0 + 0.5 * h), detail::eval_point(g, opt.geometry, r2), v2, a2, j2)) return false;
    for (int k = 0; k < d; ++k) {
      r3[k] = r[k] + 0.5 * h * v2[k];
      v3[k] = v[k] + 0.5 * h * a2[k];
    }
    if (!closure_rhs(fs, ce, clamp_t(t0 + 0.5 * h), detail::eval_point(g, opt.geometry, r3), v3, a3, j3)) return false;
    for (int k = 0; k < d; ++k) {
      r4[k] = r[k] + h * v3[k];
      v4[k] = v[k] + h * a3[k];
    }
    if (!closure_rhs(fs, ce, clamp_t(t0 + h), detail::eval_point(g, opt.geometry, r4), v4, a4, j4)) return false;
    for (int k = 0; k < d; ++k) {
      r[k] += h / 6.0 * (v[k] + 2.0 * v2[k] + 2.0 * v3[k] + v4[k]);
      v[k] += h / 6.0 * (a1[k] + 2.0 * a2[k] + 2.0 * a3[k] + a4[k]);
    }
    lj += h / 6.0 * (j1 + 2.0 * j2 + 2.0 * j3 + j4);
    return true;
  };
  const bool walls = opt.geometry && opt.geometry->any_wall();
  auto outside = [&](const Point& r) {
    for (int k = 0; k < d; ++k)
      if (opt.geometry->axis[k].wall && (r[k] < g.lower[k] || r[k] > g.upper[k])) return true;
    return false;
  };

  for (int s = 0; s < steps; ++s) {
    const double t0 = t_start + s * dt;
    for_chunks(e.size(), [&](std::size_t b, std::size_t en, std::size_t) {
      for (std::size_t p = b; p < en; ++p) {
        if (!e.alive[p]) continue;
        Point r = e.r[p];
        Vec v = e.v[p];
        double lj = e.logJ[p];
        bool ok = rk4(r, v, lj, t0, dt);
        if (ok && walls && outside(r)) {
          // Split the step at the first wall contact (bisection on the
          // sub-step length), reflect there and finish the step. A second
          // crossing, a stage on a node or zero relative speed at the wall
          // leave the full step to bounce_back.
          double lo = 0.0, hi = dt;
          bool split = true;
          for (int it = 0; it < 60 && split; ++it) {
            const double mid = 0.5 * (lo + hi);
            Point rm = e.r[p];
            Vec vm = e.v[p];
            double jm = e.logJ[p];
            split = rk4(rm, vm, jm, t0, mid);
            (!outside(rm) ? lo : hi) = mid;
          }
          Point rh = e.r[p];
          Vec vh = e.v[p];
          double jh = e.logJ[p];
          if (split) split = rk4(rh, vh, jh, t0, hi);
          bool moving = false;
          if (split) {
            // rh sits just past the wall (by ~dt 2^-60); put it on the wall.
            int axis = 0;
            for (int k = 0; k < d; ++k)
              if (opt.geometry->axis[k].wall && (rh[k] < g.lower[k] || rh[k] > g.upper[k])) {
                axis = k;
                rh[k] = std::clamp(rh[k], g.lower[k], g.upper[k]);
              }
            const Vec& Vw = opt.geometry->axis[axis].V_w;
            for (int j = 0; j < d; ++j) moving = moving || vh[j] != Vw[j];
            if (moving) {
              for (int j = 0; j < d; ++j) vh[j] = 2.0 * Vw[j] - vh[j];
              split = rk4(rh, vh, jh, t0 + hi, dt - hi);
            }
          }
          if (split && moving) {
            r = rh;
            v = vh;
            lj = jh;
          }
        }
        if (!ok) {
          e.alive[p] = 0;
          continue;
        }
        e.r[p] = detail::wrap_periodic(g, r);
        e.v[p] = v;
        e.logJ[p] = lj;
      }
    });
    if (opt.geometry && opt.geometry->any_wall()) rep.stuck += bounce_back(e, g, *opt.geometry);
    e.time = s + 1 == steps ? t_final : t_start + (s + 1) * dt;
    if (opt.trajectories)
      for (auto& tr : *opt.trajectories) {
        const std::size_t p = tr.particle;
        if (!tr.alive) continue;
        tr.alive = e.alive[p];
        if (tr.alive) tr.push(e.time, e.r[p], e.v[p], e.logJ[p]);
      }
  }
  rep.dead = e.size() - e.alive_count();
  rep.newly_dead = rep.dead - dead0;
  return rep;
}

// --- deposition -----------------------------------------------------------------

struct Deposit {
  ScalarField f;                  // f-hat
  VectorField V;                  // V-hat
  VectorField V_se;               // per-node standard error of V-hat
  ScalarField n_eff;              // effective particles per node
  std::array<double, kMaxDim> T{0.0, 0.0, 0.0};
  std::array<double, kMaxDim> T_se{0.0, 0.0, 0.0};
  std::array<double, kMaxDim> bandwidth{0.0, 0.0, 0.0};
  double mass = 0.0;              // sum of alive weights
  std::size_t particles = 0;
};

/// Kernel estimates of f, V and the (global) directional temperatures
/// T_i = m sum w (v_i - V-hat_i(r))^2 / sum w.
inline Deposit deposit(const ParticleEnsemble& e, const GridSpec& g, const PhysicalConstants& c,
                       std::array<double, kMaxDim> bw = {}, std::size_t n_min = 1) {
  if (e.size() == 0) throw NumericalRejection("deposit: empty ensemble");
  if (e.dim != g.dim) throw UsageError("deposit: dimension mismatch");
  const std::size_t alive = e.alive_count();
  if (alive < std::max<std::size_t>(n_min, 1)) throw NumericalRejection("deposit: fewer alive particles than N_min");
  if (bw[0] == 0.0) {
    if (alive < 2) {
      for (int k = 0; k < g.dim; ++k) bw[k] = g.spacing(k);
    } else {
      bw = silverman_bandwidth(e);
      for (int k = 0; k < g.dim; ++k)
        if (!(bw[k] > 0.0)) bw[k] = g.spacing(k);
    }
  }
  const int d = g.dim;
  auto acc = kde_accumulate(
      e, g, bw, 1 + 2 * d,
      [&](std::size_t p, std::vector<double>& vals) {
        vals[0] = 1.0;
        for (int k = 0; k < d; ++k) {
          vals[static_cast<std::size_t>(1 + k)] = e.v[p][k];
          vals[static_cast<std::size_t>(1 + d + k)] = e.v[p][k] * e.v[p][k];
        }
        return true;
      },
      true);
  const int C = 1 + 2 * d;
  Deposit out;
  out.bandwidth = bw;
  out.f = ScalarField(g, e.time);
  out.n_eff = ScalarField(g, e.time);
  out.V = VectorField(g, e.time);
  out.V_se = VectorField(g, e.time);
  for (std::size_t n = 0; n < g.size(); ++n) {
    const double s0 = acc[0][n];
    out.f[n] = s0;
    const double ss = acc[static_cast<std::size_t>(C)][n];
    out.n_eff[n] = ss > 0.0 ? s0 * s0 / ss : 0.0;
    if (!(s0 > 0.0)) continue;
    for (int k = 0; k < d; ++k) {
      const double m = acc[static_cast<std::size_t>(1 + k)][n] / s0;
      out.V[k][n] = m;
      // sum (wK)^2 (v - m)^2 / (sum wK)^2
      const double q2 = acc[static_cast<std::size_t>(C + 1 + 1 + d + k)][n];
      const double q1 = acc[static_cast<std::size_t>(C + 1 + 1 + k)][n];
      const double var = std::max(0.0, q2 - 2.0 * m * q1 + m * m * ss);
      out.V_se[k][n] = std::sqrt(var) / s0;
    }
  }
  // Global temperatures against V-hat at the particle positions.
  std::array<std::vector<double>, kMaxDim> u2;
  for (int k = 0; k < d; ++k) u2[k].assign(e.size(), 0.0);
  std::vector<double> wts(e.size(), 0.0);
  for_chunks(e.size(), [&](std::size_t b, std::size_t en, std::size_t) {
    Stencil st;
    for (std::size_t p = b; p < en; ++p) {
      if (!e.alive[p] || !Stencil::build(g, e.r[p], st)) continue;
      wts[p] = e.weight[p];
      for (int k = 0; k < d; ++k) {
        const double u = e.v[p][k] - st.apply(out.V[k]);
        u2[k][p] = c.mass * u * u;
      }
    }
  });
  const double sw = chunked_sum(e.size(), [&](std::size_t p) { return wts[p]; });
  const double sw2 = chunked_sum(e.size(), [&](std::size_t p) { return wts[p] * wts[p]; });
  if (!(sw > 0.0)) throw NumericalRejection("deposit: no alive weight inside the grid");
  out.mass = sw;
  out.particles = alive;
  for (int k = 0; k < d; ++k) {
    const double T = chunked_sum(e.size(), [&](std::size_t p) { return wts[p] * u2[k][p]; }) / sw;
    const double var = chunked_sum(e.size(), [&](std::size_t p) {
      const double x = u2[k][p] - T;
      return wts[p] * wts[p] * x * x;
    });
    out.T[k] = T;
    out.T_se[k] = sw2 > 0.0 ? std::sqrt(var) / sw : 0.0;
  }
  return out;
}

// --- wall diagnostics -------------------------------------------------------------

struct WallCheck {
  enum class Status { pass, fail, inconclusive };
  Status status = Status::inconclusive;
  std::size_t count = 0;             // particles in the shells
  Vec mean_velocity{0.0, 0.0, 0.0};  // weighted shell mean minus V_w
  Vec velocity_se{0.0, 0.0, 0.0};
  double density_deviation = 0.0;    // mean deposited f over shell nodes minus f_w
  double density_se = 0.0;
  double sigmas = 4.0;
  std::string note;
};

inline const char* wall_status_name(WallCheck::Status s) {
  switch (s) {
    case WallCheck::Status::pass:
      return "pass";
    case WallCheck::Status::fail:
      return "fail";
    case WallCheck::Status::inconclusive:
      return "inconclusive";
  }
  return "?";
}

/// Mean particle velocity (relative to V_w) in the shells of `shell_cells`
/// cells next to every wall, with its standard error, and the deposited
/// density there against f_w.
inline WallCheck wall_consistency_check(const ParticleEnsemble& e, const GridSpec& g, const BoundaryGeometry& geo,
                                        const PhysicalConstants& c, int shell_cells = 3, std::size_t min_count = 30,
                                        double sigmas = 4.0) {
  geo.validate(g);
  WallCheck out;
  out.sigmas = sigmas;
  if (!geo.any_wall()) throw UsageError("wall_consistency_check: no wall axes");
  auto in_shell = [&](const Point& r, int& axis) {
    for (int k = 0; k < g.dim; ++k) {
      if (!geo.axis[k].wall) continue;
      const double w = shell_cells * g.spacing(k);
      if (r[k] - g.lower[k] <= w || g.upper[k] - r[k] <= w) {
        axis = k;
        return true;
      }
    }
    return false;
  };
  double sw = 0.0, sw2 = 0.0;
  Vec sv{};
  std::vector<std::size_t> members;
  std::vector<int> axes;
  for (std::size_t p = 0; p < e.size(); ++p) {
    int axis = -1;
    if (!e.alive[p] || !in_shell(e.r[p], axis)) continue;
    members.push_back(p);
    axes.push_back(axis);
    sw += e.weight[p];
    sw2 += e.weight[p] * e.weight[p];
    for (int k = 0; k < g.dim; ++k) sv[k] += e.weight[p] * (e.v[p][k] - geo.axis[axis].V_w[k]);
  }
  out.count = members.size();
  if (out.count < min_count || !(sw > 0.0)) {
    out.note = "wall shell holds " + std::to_string(out.count) + " particles (< " + std::to_string(min_count) + ")";
    return out;
  }
  for (int k = 0; k < g.dim; ++k) out.mean_velocity[k] = sv[k] / sw;
  Vec var{};
  for (std::size_t m = 0; m < members.size(); ++m) {
    const std::size_t p = members[m];
    for (int k = 0; k < g.dim; ++k) {
      const double x = e.v[p][k] - geo.axis[axes[m]].V_w[k] - out.mean_velocity[k];
      var[k] += e.weight[p] * e.weight[p] * x * x;
    }
  }
  bool ok = true;
  for (int k = 0; k < g.dim; ++k) {
    out.velocity_se[k] = std::sqrt(var[k]) / sw;
    if (std::abs(out.mean_velocity[k]) > sigmas * out.velocity_se[k]) ok = false;
  }
  // Density against f_w on the shell nodes.
  const Deposit dep = deposit(e, g, c);
  double fsum = 0.0, fw = 0.0, se2 = 0.0;
  std::size_t nodes = 0;
  for (std::size_t n = 0; n < g.size(); ++n) {
    const Point r = g.position(n);
    int axis = -1;
    if (!in_shell(r, axis)) continue;
    fsum += dep.f[n];
    fw += geo.axis[axis].f_w;
    if (dep.n_eff[n] > 0.0) se2 += dep.f[n] * dep.f[n] / dep.n_eff[n];
    ++nodes;
  }
  if (nodes > 0) {
    out.density_deviation = (fsum - fw) / static_cast<double>(nodes);
    out.density_se = std::sqrt(se2) / static_cast<double>(nodes);
  }
  out.status = ok ? WallCheck::Status::pass : WallCheck::Status::fail;
  return out;
}

// --- helpers ----------------------------------------------------------------------

/// CSV with columns t, r, v, logJ (per-axis suffixes when d > 1).
inline void write_trajectory_csv(std::ostream& os, const Trajectory& tr, int d) {
  os << "t";
  if (d == 1) {
    os << ",r,v";
  } else {
    for (int k = 0; k < d; ++k) os << ",r" << k + 1;
    for (int k = 0; k < d; ++k) os << ",v" << k + 1;
  }
  os << ",logJ\n";
  os << std::setprecision(17);
  for (std::size_t i = 0; i < tr.size(); ++i) {
    os << tr.t[i];
    for (int k = 0; k < d; ++k) os << ',' << tr.r[i][k];
    for (int k = 0; k < d; ++k) os << ',' << tr.v[i][k];
    os << ',' << tr.logJ[i] << '\n';
  }
}

inline void save_trajectory_csv(const std::string& path, const Trajectory& tr, int d) {
  std::ofstream os(path);
  if (!os) throw UsageError("cannot write trajectory file: " + path);
  write_trajectory_csv(os, tr, d);
}

/// Copies a block of nodes [first, first + count) per axis of a periodic state
/// onto a bounded, cell-centred grid whose nodes coincide with the originals.
inline FluidState restrict_state(const FluidState& s, std::array<int, kMaxDim> first, std::array<int, kMaxDim> count) {
  const GridSpec& g = s.grid();
  GridSpec b = g;
  for (int k = 0; k < g.dim; ++k) {
    if (count[k] < 4 || first[k] < 0 || first[k] + count[k] > g.nodes(k))
      throw UsageError("restrict_state: block outside the grid or thinner than 4 nodes");
    const double h = g.spacing(k);
    b.periodic[k] = false;
    b.n[k] = count[k];
    b.lower[k] = g.coord(k, first[k]) - 0.5 * h;
    b.upper[k] = b.lower[k] + count[k] * h;
  }
  b.validate();
  auto cut = [&](const ScalarField& f) {
    ScalarField out(b, f.time());
    for (std::size_t n = 0; n < b.size(); ++n) {
      auto ijk = b.unflatten(n);
      for (int k = 0; k < g.dim; ++k) ijk[k] += first[k];
      out[n] = f[g.flatten(ijk)];
    }
    return out;
  };
  FluidState o;
  o.time = s.time;
  o.f = cut(s.f);
  o.lnf = cut(s.lnf);
  if (s.S.size()) o.S = cut(s.S);
  if (s.U.size()) o.U = cut(s.U);
  if (s.U_qm.size()) o.U_qm = cut(s.U_qm);
  o.T = s.T;
  o.f_floor = s.f_floor;
  o.V = VectorField(b, s.time);
  o.F = VectorField(b, s.time);
  o.grad_lnf = VectorField(b, s.time);
  for (int k = 0; k < g.dim; ++k) {
    o.V[k] = cut(s.V[k]);
    o.F[k] = cut(s.F[k]);
    o.grad_lnf[k] = cut(s.grad_lnf[k]);
  }
  for (const auto& c : s.grad_V) o.grad_V.push_back(cut(c));
  o.valid.resize(b.size());
  for (std::size_t n = 0; n < b.size(); ++n) {
    auto ijk = b.unflatten(n);
    for (int k = 0; k < g.dim; ++k) ijk[k] += first[k];
    o.valid[n] = s.valid[g.flatten(ijk)];
  }
  return o;
}

}  // namespace madkin
