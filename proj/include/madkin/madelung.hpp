#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "madkin/operators.hpp"
#include "madkin/schrodinger.hpp"

namespace madkin {

inline constexpr double kDefaultFloor = 1e-10;

/// Quantum fluid fields of one snapshot plus the spatial-derivative channels
/// the closure and tracer need. Derivative channels are evaluated from
/// spectral derivatives of psi, never by differentiating f, ln f or V.
struct FluidState {
  double time = 0.0;
  ScalarField f;
  ScalarField lnf;  // ln f on valid nodes, ln(f_floor) elsewhere
  ScalarField S;
  VectorField V;
  ScalarField U;     // external potential U(r)
  ScalarField U_qm;  // includes U
  VectorField F;
  std::vector<double> T;

  VectorField grad_lnf;
  std::vector<ScalarField> grad_V;  // grad_V[i*d + j] = dV_i/dx_j
  std::vector<std::uint8_t> valid;  // f >= f_floor
  double f_floor = 0.0;

  const GridSpec& grid() const { return f.grid(); }
  int dim() const { return f.grid().dim; }
  const ScalarField& dV(int i, int j) const { return grad_V[static_cast<std::size_t>(i * dim() + j)]; }
  ScalarField& dV(int i, int j) { return grad_V[static_cast<std::size_t>(i * dim() + j)]; }
};

/// Tabulated gauge function z(t), linearly interpolated.
struct GaugeSpec {
  std::vector<double> times;
  std::vector<double> values;

  static GaugeSpec constant(double z, double t0, double t1) { return {{t0, t1}, {z, z}}; }

  void validate() const {
    if (times.size() != values.size() || times.empty()) throw UsageError("gauge: times/values mismatch");
    for (std::size_t i = 0; i < times.size(); ++i) {
      if (!std::isfinite(times[i]) || !std::isfinite(values[i])) throw UsageError("gauge: non-finite entry");
      if (i && !(times[i] > times[i - 1])) throw UsageError("gauge: times must increase");
    }
  }

  double value(double t) const {
    if (times.size() == 1 || t <= times.front()) return values.front();
    if (t >= times.back()) return values.back();
    auto it = std::upper_bound(times.begin(), times.end(), t);
    const std::size_t i = static_cast<std::size_t>(it - times.begin());
    const double w = (t - times[i - 1]) / (times[i] - times[i - 1]);
    return (1.0 - w) * values[i - 1] + w * values[i];
  }

  /// Exact integral of the piecewise-linear z from a to b.
  double integral(double a, double b) const {
    if (a == b) return 0.0;
    if (b < a) return -integral(b, a);
    std::vector<double> knots{a};
    for (double t : times)
      if (t > a && t < b) knots.push_back(t);
    knots.push_back(b);
    double s = 0.0;
    for (std::size_t i = 1; i < knots.size(); ++i)
      s += 0.5 * (value(knots[i - 1]) + value(knots[i])) * (knots[i] - knots[i - 1]);
    return s;
  }
};

// --- pointwise extraction -------------------------------------------------

inline ScalarField extract_density(const ComplexField& psi) {
  ScalarField f(psi.grid(), psi.time());
  for (std::size_t i = 0; i < psi.size(); ++i) f[i] = std::norm(psi[i]);
  return f;
}

namespace detail {

inline std::vector<std::uint8_t> floor_mask(const ScalarField& f, double rel_floor, double* abs_floor = nullptr) {
  const double fl = rel_floor * max_abs(f);
  if (abs_floor) *abs_floor = fl;
  std::vector<std::uint8_t> m(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) m[i] = (f[i] >= fl && f[i] > 0.0) ? 1 : 0;
  return m;
}

/// Replace masked entries by the nearest valid value along axis 0 lines
/// (constant extrapolation); lines without valid nodes become zero.
inline void extend_constant(ScalarField& v, const std::vector<std::uint8_t>& mask) {
  const GridSpec& g = v.grid();
  const int len = g.nodes(0);
  for_each_line(g, 0, [&](std::size_t start, std::size_t stride) {
    int first = -1, last = -1;
    for (int i = 0; i < len; ++i)
      if (mask[start + i * stride]) {
        if (first < 0) first = i;
        last = i;
      }
    if (first < 0) {
      for (int i = 0; i < len; ++i) v[start + i * stride] = 0.0;
      return;
    }
    for (int i = 0; i < first; ++i) v[start + i * stride] = v[start + first * stride];
    for (int i = last + 1; i < len; ++i) v[start + i * stride] = v[start + last * stride];
    double prev = v[start + first * stride];
    for (int i = first; i <= last; ++i) {
      if (mask[start + i * stride])
        prev = v[start + i * stride];
      else
        v[start + i * stride] = prev;
    }
  });
}

inline ScalarField log_density(const ScalarField& f, const std::vector<std::uint8_t>& mask, double floor) {
  ScalarField out(f.grid(), f.time());
  const double lf = std::log(floor > 0.0 ? floor : 1e-300);
  for (std::size_t i = 0; i < f.size(); ++i) out[i] = mask[i] ? std::log(f[i]) : lf;
  return out;
}

inline void zero_masked(ScalarField& v, const std::vector<std::uint8_t>& mask) {
  for (std::size_t i = 0; i < v.size(); ++i)
    if (!mask[i]) v[i] = 0.0;
}

}  // namespace detail

/// V = hbar Im(psi* grad psi) / (m |psi|^2) where f >= floor*max f,
/// constant extrapolation elsewhere.
inline VectorField extract_velocity(const ComplexField& psi, const PhysicalConstants& c,
                                    double rel_floor = kDefaultFloor) {
  if (!(rel_floor > 0.0)) throw UsageError("extract_velocity: floor must be positive");
  const ScalarField f = extract_density(psi);
  const auto mask = detail::floor_mask(f, rel_floor);
  if (std::none_of(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; }))
    throw NumericalRejection("extract_velocity: density everywhere below floor");
  VectorField V(psi.grid(), psi.time());
  for (int k = 0; k < psi.grid().dim; ++k) {
    const ComplexField dpsi = derivative(psi, k, 1);
    for (std::size_t i = 0; i < psi.size(); ++i)
      V[k][i] = mask[i] ? c.hbar * std::imag(std::conj(psi[i]) * dpsi[i]) / (c.mass * f[i]) : 0.0;
    detail::extend_constant(V[k], mask);
  }
  return V;
}

/// S = hbar * unwrapped arg(psi). Unwraps along axis 0 from the origin line,
/// then along each further axis.
inline ScalarField extract_phase(const ComplexField& psi, const PhysicalConstants& c,
                                 double rel_floor = kDefaultFloor) {
  const GridSpec& g = psi.grid();
  const ScalarField f = extract_density(psi);
  const auto mask = detail::floor_mask(f, rel_floor);
  const VectorField V = extract_velocity(psi, c, rel_floor);
  ScalarField S(g, psi.time());
  std::vector<std::uint8_t> done(g.size(), 0);

  auto unwrap_axis = [&](int axis) {
    const int len = g.nodes(axis);
    const double h = g.spacing(axis);
    detail::for_each_line(g, axis, [&](std::size_t start, std::size_t stride) {
      if (!done[start]) return;
      for (int i = 1; i < len; ++i) {
        const std::size_t a = start + (i - 1) * stride;
        const std::size_t b = start + i * stride;
        if (done[b]) continue;
        const double jump = std::arg(psi[b] * std::conj(psi[a]));
        if (mask[a] && mask[b]) {
          const double expected = 0.5 * h * c.mass * (V[axis][a] + V[axis][b]) / c.hbar;
          if (std::abs(expected) >= M_PI || std::abs(jump - expected) > 0.5 * M_PI)
            throw NumericalRejection("extract_phase: phase increment per cell too large to unwrap (phase too coarse)");
        }
        S[b] = S[a] + c.hbar * jump;
        done[b] = 1;
      }
    });
  };
  S[0] = c.hbar * std::arg(psi[0]);
  done[0] = 1;
  for (int axis = 0; axis < g.dim; ++axis) unwrap_axis(axis);
  return S;
}

/// U_qm = -(hbar^2/2m)(1/2 lap ln f + 1/4 |grad ln f|^2) + U, evaluated in
/// the equivalent form -(hbar^2/2m) lap(sqrt f)/sqrt f + U. Nodes below the
/// floor are set to zero and counted in `masked`.
inline ScalarField quantum_potential(const ScalarField& f, const ScalarField& U, const PhysicalConstants& c,
                                     double rel_floor = kDefaultFloor, std::size_t* masked = nullptr) {
  require_finite(f, "quantum_potential");
  ScalarField a(f.grid(), f.time());
  for (std::size_t i = 0; i < f.size(); ++i) a[i] = std::sqrt(std::max(f[i], 0.0));
  const ScalarField lap_a = laplacian(a);
  const auto mask = detail::floor_mask(f, rel_floor);
  ScalarField q(f.grid(), f.time());
  std::size_t nm = 0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (mask[i]) {
      q[i] = -c.hbar * c.hbar / (2.0 * c.mass) * lap_a[i] / a[i] + U[i];
    } else {
      ++nm;
    }
  }
  if (masked) *masked = nm;
  return q;
}

/// F = -grad U_qm. Only meaningful for fields compatible with the grid's
/// boundary treatment; Madelung states get F from build_fluid_state.
inline VectorField quantum_force(const ScalarField& U_qm) {
  VectorField F = gradient(U_qm);
  for (auto& comp : F.comp) comp *= -1.0;
  return F;
}

/// T_i = (hbar^2/4m) int f (d_i ln f)^2 = (hbar^2/m) int (d_i sqrt f)^2.
inline std::vector<double> directional_temperatures(const ScalarField& f, const PhysicalConstants& c) {
  require_finite(f, "directional_temperatures");
  ScalarField a(f.grid(), f.time());
  for (std::size_t i = 0; i < f.size(); ++i) a[i] = std::sqrt(std::max(f[i], 0.0));
  std::vector<double> T(static_cast<std::size_t>(f.grid().dim));
  for (int k = 0; k < f.grid().dim; ++k) {
    const ScalarField da = derivative(a, k, 1);
    T[static_cast<std::size_t>(k)] = c.hbar * c.hbar / c.mass * integrate_product(da, da);
  }
  return T;
}

/// True if every T_i is strictly positive (the kinetic closure needs it).
inline bool temperatures_positive(const std::vector<double>& T) {
  return std::all_of(T.begin(), T.end(), [](double t) { return t > 0.0; });
}

/// Full fluid state from psi: f, S (d=1 or unwrappable), V, U_qm, F, T and
/// the derivative channels.
inline FluidState build_fluid_state(const ComplexField& psi, const PotentialSpec& potential,
                                    const PhysicalConstants& c, double rel_floor = kDefaultFloor,
                                    bool with_phase = true) {
  const GridSpec& g = psi.grid();
  const int d = g.dim;
  FluidState s;
  s.time = psi.time();
  s.f = extract_density(psi);
  s.valid = detail::floor_mask(s.f, rel_floor, &s.f_floor);
  s.lnf = detail::log_density(s.f, s.valid, s.f_floor);
  if (std::none_of(s.valid.begin(), s.valid.end(), [](std::uint8_t m) { return m != 0; }))
    throw NumericalRejection("fluid state: density everywhere below floor");
  s.V = extract_velocity(psi, c, rel_floor);
  if (with_phase) s.S = extract_phase(psi, c, rel_floor);
  s.U = potential.sample(g, c.mass);
  s.T = directional_temperatures(s.f, c);

  // First, second and third spectral derivatives of psi.
  std::vector<ComplexField> d1, d2(static_cast<std::size_t>(d * d));
  for (int j = 0; j < d; ++j) d1.push_back(derivative(psi, j, 1));
  for (int j = 0; j < d; ++j)
    for (int k = 0; k < d; ++k)
      d2[static_cast<std::size_t>(j * d + k)] = (j == k) ? derivative(psi, j, 2) : derivative(d1[j], k, 1);
  ComplexField lap(g, s.time);
  for (int j = 0; j < d; ++j) lap += d2[static_cast<std::size_t>(j * d + j)];
  std::vector<ComplexField> dlap;
  for (int k = 0; k < d; ++k) dlap.push_back(derivative(lap, k, 1));

  s.grad_lnf = VectorField(g, s.time);
  s.grad_V.assign(static_cast<std::size_t>(d * d), ScalarField(g, s.time));
  s.U_qm = ScalarField(g, s.time);
  s.F = VectorField(g, s.time);
  const VectorField gradU = potential.gradient(g, c.mass);
  const double q = -c.hbar * c.hbar / (2.0 * c.mass);

  std::vector<std::complex<double>> w(static_cast<std::size_t>(d));
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!s.valid[i]) continue;
    const std::complex<double> p = psi[i];
    for (int j = 0; j < d; ++j) w[j] = d1[j][i] / p;  // grad ln psi
    const std::complex<double> L = lap[i] / p;
    double lap_a_over_a = L.real();
    for (int j = 0; j < d; ++j) lap_a_over_a += w[j].imag() * w[j].imag();
    s.U_qm[i] = q * lap_a_over_a + s.U[i];
    for (int j = 0; j < d; ++j) s.grad_lnf[j][i] = 2.0 * w[j].real();
    for (int a = 0; a < d; ++a)
      for (int b = 0; b < d; ++b) {
        // d_b (d_a psi / psi)
        const std::complex<double> dw = d2[static_cast<std::size_t>(a * d + b)][i] / p - w[a] * w[b];
        s.dV(a, b)[i] = c.hbar / c.mass * dw.imag();
      }
    for (int k = 0; k < d; ++k) {
      // d_k (lap a / a) = d_k Re(lap psi/psi) + 2 sum_j Im(w_j) d_k Im(w_j)
      const std::complex<double> dL = dlap[k][i] / p - L * w[k];
      double g_k = dL.real();
      for (int j = 0; j < d; ++j) {
        const std::complex<double> dwj = d2[static_cast<std::size_t>(j * d + k)][i] / p - w[j] * w[k];
        g_k += 2.0 * w[j].imag() * dwj.imag();
      }
      s.F[k][i] = -(q * g_k + gradU[k][i]);
    }
  }
  s.U_qm.set_time(s.time);
  return s;
}

/// Fluid state assembled from given f, V and F fields (no wavefunction):
/// derivative channels come from the grid operators. Used for synthetic
/// states and for states rebuilt from deposited moments.
inline FluidState make_fluid_state(const ScalarField& f, const VectorField& V, const VectorField& F,
                                   const std::vector<double>& T, double rel_floor = kDefaultFloor) {
  const GridSpec& g = f.grid();
  const int d = g.dim;
  if (V.dim() != d || F.dim() != d || static_cast<int>(T.size()) != d)
    throw UsageError("fluid state: component count does not match grid dimension");
  FluidState s;
  s.time = f.time();
  s.f = f;
  s.V = V;
  s.F = F;
  s.T = T;
  s.U = ScalarField(g, s.time);
  s.U_qm = ScalarField(g, s.time);
  s.valid = detail::floor_mask(f, rel_floor, &s.f_floor);
  s.lnf = detail::log_density(f, s.valid, s.f_floor);
  s.grad_lnf = gradient(f);
  for (int k = 0; k < d; ++k)
    for (std::size_t i = 0; i < g.size(); ++i) s.grad_lnf[k][i] = s.valid[i] ? s.grad_lnf[k][i] / f[i] : 0.0;
  s.grad_V.resize(static_cast<std::size_t>(d * d));
  for (int a = 0; a < d; ++a)
    for (int b = 0; b < d; ++b) s.dV(a, b) = derivative(V[a], b, 1);
  return s;
}

/// Gauge transformation: S' = S - int_{t0}^{t} z, U' = U + z(t), U_qm' =
/// U_qm + z(t); f, V, F and derivative channels are untouched.
inline std::pair<FluidState, ScalarField> apply_gauge(const FluidState& state, const ScalarField& U,
                                                      const GaugeSpec& gauge, double t0) {
  gauge.validate();
  FluidState out = state;
  const double shift = gauge.integral(t0, state.time);
  const double z = gauge.value(state.time);
  if (out.S.size()) {
    for (auto& v : out.S.values()) v -= shift;
  }
  for (std::size_t i = 0; i < out.U_qm.size(); ++i)
    if (out.valid.empty() || out.valid[i]) out.U_qm[i] += z;
  ScalarField U2 = U;
  for (auto& v : U2.values()) v += z;
  out.U = U2;
  return {std::move(out), std::move(U2)};
}

// --- hydrodynamic residuals -----------------------------------------------

/// Characteristic length and time used to report residuals in scaled units.
struct ResidualScales {
  double length = 1.0;
  double time = 1.0;
};

/// Length = min_i sqrt(<dr_i^2>), time = 2 m length^2 / hbar.
ResidualScales scales_from(const FluidState& s, const PhysicalConstants& c);

enum class TimeStencil { centered2, backward1 };

struct HydroResiduals {
  ScalarField continuity;  // Df/Dt + f div V
  VectorField newton;      // DV/Dt - F/m
  std::vector<std::uint8_t> mask;
  double max_continuity = 0.0;  // scaled: * time / max f
  double max_newton = 0.0;      // scaled: * time^2 / length
};

inline double time_derivative(double fm, double f0, double fp, double tm, double t0, double tp, TimeStencil st) {
  if (st == TimeStencil::backward1) return (f0 - fm) / (t0 - tm);
  const double a = t0 - tm, b = tp - t0;
  return (-b * b * fm + (b * b - a * a) * f0 + a * a * fp) / (a * b * (a + b));
}

/// Residuals of the continuity and quantum Newton equations on the middle of
/// three consecutive snapshots.
inline HydroResiduals hydro_residuals(const FluidState& sm, const FluidState& s0, const FluidState& sp,
                                      const PhysicalConstants& c, const ResidualScales& sc,
                                      TimeStencil stencil = TimeStencil::centered2) {
  const GridSpec& g = s0.grid();
  require_same_grid(sm.grid(), g, "hydro_residuals");
  require_same_grid(sp.grid(), g, "hydro_residuals");
  if (!(sm.time < s0.time && s0.time < sp.time)) throw NumericalRejection("hydro_residuals: snapshot times must increase");
  const int d = g.dim;
  HydroResiduals r;
  r.continuity = ScalarField(g, s0.time);
  r.newton = VectorField(g, s0.time);
  r.mask.assign(g.size(), 0);
  const double fmax = max_abs(s0.f);
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!(sm.valid[i] && s0.valid[i] && sp.valid[i])) continue;
    r.mask[i] = 1;
    const double dfdt = time_derivative(sm.f[i], s0.f[i], sp.f[i], sm.time, s0.time, sp.time, stencil);
    double divV = 0.0, vgl = 0.0;
    for (int j = 0; j < d; ++j) {
      divV += s0.dV(j, j)[i];
      vgl += s0.V[j][i] * s0.grad_lnf[j][i];
    }
    r.continuity[i] = dfdt + s0.f[i] * (vgl + divV);
    for (int a = 0; a < d; ++a) {
      const double dVdt = time_derivative(sm.V[a][i], s0.V[a][i], sp.V[a][i], sm.time, s0.time, sp.time, stencil);
      double conv = 0.0;
      for (int b = 0; b < d; ++b) conv += s0.V[b][i] * s0.dV(a, b)[i];
      r.newton[a][i] = dVdt + conv - s0.F[a][i] / c.mass;
    }
    r.max_continuity = std::max(r.max_continuity, std::abs(r.continuity[i]) * sc.time / fmax);
    for (int a = 0; a < d; ++a)
      r.max_newton = std::max(r.max_newton, std::abs(r.newton[a][i]) * sc.time * sc.time / sc.length);
  }
  return r;
}

/// Curl of V: one component for d=2, three for d=3.
inline VectorField vorticity_from_gradient(const std::vector<ScalarField>& gradV, int d) {
  if (d < 2) throw UsageError("vorticity: requires d >= 2");
  auto dv = [&](int i, int j) -> const ScalarField& { return gradV[static_cast<std::size_t>(i * d + j)]; };
  VectorField w;
  if (d == 2) {
    w.comp.push_back(dv(1, 0) - dv(0, 1));
  } else {
    w.comp.push_back(dv(2, 1) - dv(1, 2));
    w.comp.push_back(dv(0, 2) - dv(2, 0));
    w.comp.push_back(dv(1, 0) - dv(0, 1));
  }
  return w;
}

inline VectorField vorticity(const VectorField& V) {
  const int d = V.dim();
  if (d < 2) throw UsageError("vorticity: requires d >= 2");
  std::vector<ScalarField> g(static_cast<std::size_t>(d * d));
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) g[static_cast<std::size_t>(i * d + j)] = derivative(V[i], j, 1);
  return vorticity_from_gradient(g, d);
}

inline VectorField vorticity(const FluidState& s) { return vorticity_from_gradient(s.grad_V, s.dim()); }

// --- Heisenberg diagnostics -----------------------------------------------

struct HeisenbergAxis {
  double var_r = 0.0;       // <(dr_i)^2>
  double var_p = 0.0;       // <(dp_i)^2>, spectral from psi
  double thermal = 0.0;     // m T_i = <(d1 p_i)^2>
  double phase_part = 0.0;  // <(d_i S)^2> - <d_i S>^2 = <(d2 p_i)^2>
  double product() const { return var_r * var_p; }
  double modified_product() const { return var_r * (thermal + phase_part); }
};

inline std::vector<double> position_mean(const ScalarField& f) {
  const GridSpec& g = f.grid();
  std::vector<double> mean(static_cast<std::size_t>(g.dim), 0.0);
  double mass = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto r = g.position(i);
    mass += f[i];
    for (int k = 0; k < g.dim; ++k) mean[k] += f[i] * r[k];
  }
  for (auto& m : mean) m /= mass;
  return mean;
}

/// Density-weighted per-axis position variance. On periodic axes the
/// density is assumed to be well inside the box.
inline std::vector<double> position_variance(const ScalarField& f) {
  const GridSpec& g = f.grid();
  const auto mean = position_mean(f);
  std::vector<double> var(static_cast<std::size_t>(g.dim), 0.0);
  double mass = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto r = g.position(i);
    mass += f[i];
    for (int k = 0; k < g.dim; ++k) var[k] += f[i] * (r[k] - mean[k]) * (r[k] - mean[k]);
  }
  for (auto& v : var) v /= mass;
  return var;
}

inline ResidualScales scales_from(const FluidState& s, const PhysicalConstants& c) {
  const auto var = position_variance(s.f);
  const double len = std::sqrt(*std::min_element(var.begin(), var.end()));
  return {len, 2.0 * c.mass * len * len / c.hbar};
}

/// Spectral <(dp_i)^2> from psi, the thermal (density) part m T_i and the
/// phase part, per axis.
inline std::vector<HeisenbergAxis> heisenberg(const ComplexField& psi, const PhysicalConstants& c) {
  const GridSpec& g = psi.grid();
  const int d = g.dim;
  std::vector<HeisenbergAxis> out(static_cast<std::size_t>(d));
  const ScalarField f = extract_density(psi);
  const double nrm = integrate(f);
  const auto var = position_variance(f);
  const auto T = directional_temperatures(f, c);

  ComplexField spec = psi;
  detail::fft_nd(spec, true);
  double total = 0.0;
  for (const auto& v : spec.values()) total += std::norm(v);

  for (int k = 0; k < d; ++k) {
    double m1 = 0.0, m2 = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const auto ijk = g.unflatten(i);
      const double kk = detail::wavenumber(ijk[k], g.nodes(k), g.length(k));
      m1 += kk * std::norm(spec[i]);
      m2 += kk * kk * std::norm(spec[i]);
    }
    m1 /= total;
    m2 /= total;
    auto& ax = out[static_cast<std::size_t>(k)];
    ax.var_r = var[k];
    ax.var_p = c.hbar * c.hbar * (m2 - m1 * m1);
    ax.thermal = c.mass * T[k] / nrm;

    // d_k S weighted by f: hbar Im(psi* d_k psi).
    const ComplexField dpsi = derivative(psi, k, 1);
    double s1 = 0.0, s2 = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double j = c.hbar * std::imag(std::conj(psi[i]) * dpsi[i]);  // f * d_k S
      s1 += j;
      if (f[i] > 0.0) s2 += j * j / f[i];
    }
    const double w = quadrature_weight(g) / nrm;
    s1 *= w;
    s2 *= w;
    ax.phase_part = s2 - s1 * s1;
  }
  return out;
}

}  // namespace madkin
