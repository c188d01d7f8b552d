#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "madkin/ensemble.hpp"
#include "madkin/gauss_hermite.hpp"
#include "madkin/madelung.hpp"

namespace madkin {

// --- closure selection ------------------------------------------------------

struct ClosureSpec {
  enum class Kind { maxwellian, raw_moments, positional_temperature };

  Kind kind = Kind::maxwellian;
  std::vector<ScalarField> k_profile;  // per axis, positional case only

  // Derived by prepare(): ln k_i and d_j ln k_i.
  std::vector<ScalarField> lnk;
  std::vector<ScalarField> grad_lnk;  // grad_lnk[i*d + j]

  static ClosureSpec maxwellian() { return {}; }
  static ClosureSpec raw() {
    ClosureSpec c;
    c.kind = Kind::raw_moments;
    return c;
  }
  static ClosureSpec positional(std::vector<ScalarField> k) {
    ClosureSpec c;
    c.kind = Kind::positional_temperature;
    c.k_profile = std::move(k);
    return c;
  }

  /// Checks the profile against a density snapshot and builds the derived
  /// channels. Required before any positional evaluation.
  void prepare(const FluidState& s, double tol = 1e-6) {
    if (kind != Kind::positional_temperature) return;
    const int d = s.dim();
    if (static_cast<int>(k_profile.size()) != d) throw UsageError("closure: k_profile needs one field per axis");
    lnk.clear();
    grad_lnk.assign(static_cast<std::size_t>(d * d), ScalarField());
    for (int i = 0; i < d; ++i) {
      const ScalarField& k = k_profile[static_cast<std::size_t>(i)];
      if (!(k.grid() == s.grid())) throw UsageError("closure: k_profile grid does not match the fluid grid");
      if (!k.all_finite()) throw UsageError("closure: k_profile must be finite");
      for (std::size_t n = 0; n < k.size(); ++n)
        if (s.valid[n] && !(k[n] > 0.0))
          throw UsageError("closure: k_profile must be positive wherever f >= f_floor");
      const double mean = integrate_product(s.f, k) / integrate(s.f);
      if (std::abs(mean - 1.0) > tol)
        throw UsageError("closure: k_profile violates <k> = 1 on axis " + std::to_string(i) + " (got " +
                         std::to_string(mean) + ")");
      ScalarField l(k.grid(), k.time());
      for (std::size_t n = 0; n < k.size(); ++n) l[n] = std::log(std::max(k[n], 1e-300));
      lnk.push_back(l);
      // Derivatives of k itself (smooth), divided by k.
      for (int j = 0; j < d; ++j) {
        ScalarField dk = derivative(k, j, 1);
        for (std::size_t n = 0; n < k.size(); ++n) dk[n] = k[n] > 0.0 ? dk[n] / k[n] : 0.0;
        grad_lnk[static_cast<std::size_t>(i * d + j)] = std::move(dk);
      }
    }
  }

  bool prepared() const { return kind != Kind::positional_temperature || !lnk.empty(); }
};

inline const char* closure_name(ClosureSpec::Kind k) {
  switch (k) {
    case ClosureSpec::Kind::maxwellian:
      return "maxwellian";
    case ClosureSpec::Kind::raw_moments:
      return "raw";
    case ClosureSpec::Kind::positional_temperature:
      return "positional";
  }
  return "?";
}

// --- time series of fluid states --------------------------------------------

/// Weights of the derivative at t[k] of the polynomial through the points
/// t[a..a+n).
inline std::vector<double> lagrange_derivative_weights(const std::vector<double>& t, std::size_t a, std::size_t n,
                                                       std::size_t k) {
  std::vector<double> w(n, 0.0);
  const double tk = t[k];
  for (std::size_t j = a; j < a + n; ++j) {
    if (j == k) {
      double s = 0.0;
      for (std::size_t m = a; m < a + n; ++m)
        if (m != k) s += 1.0 / (tk - t[m]);
      w[j - a] = s;
    } else {
      double num = 1.0, den = 1.0;
      for (std::size_t m = a; m < a + n; ++m) {
        if (m == j) continue;
        den *= t[j] - t[m];
        if (m != k) num *= tk - t[m];
      }
      w[j - a] = num / den;
    }
  }
  return w;
}

/// d ln T_i/dt at every snapshot: derivative of the polynomial through the
/// five nearest snapshots (fewer if the series is shorter).
inline std::vector<Vec> temperature_rates(const std::vector<FluidState>& st) {
  std::vector<Vec> out(st.size(), Vec{0.0, 0.0, 0.0});
  if (st.size() < 2) return out;
  const int d = st[0].dim();
  std::vector<double> t;
  for (const auto& s : st) t.push_back(s.time);
  const std::size_t n = std::min<std::size_t>(5, st.size());
  for (std::size_t k = 0; k < st.size(); ++k) {
    const std::size_t a = std::min(k >= n / 2 ? k - n / 2 : 0, st.size() - n);
    const auto w = lagrange_derivative_weights(t, a, n, k);
    for (int i = 0; i < d; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += w[j] * std::log(st[a + j].T[static_cast<std::size_t>(i)]);
      out[k][i] = s;
    }
  }
  return out;
}

/// Snapshots contributing to a time and their interpolation weights.
struct TimeWeights {
  int n = 0;
  std::array<std::size_t, 4> idx{};
  std::array<double, 4> w{};
};

/// Snapshots on a common grid with increasing times; fields are interpolated
/// in time by the cubic through the four nearest snapshots (linear for two
/// or three snapshots).
struct FieldSeries {
  std::vector<FluidState> states;
  std::vector<Vec> dlnT_dt;
  // Node-major copies of the channels the characteristics read
  // (ln f, V, grad ln f, F, grad V), so one stencil pass gathers all of them.
  int channels = 0;
  std::vector<std::vector<double>> packed;
  double spacing = 0.0;  // uniform snapshot spacing, 0 if irregular

  FieldSeries() = default;
  explicit FieldSeries(std::vector<FluidState> st) : states(std::move(st)) {
    if (states.empty()) throw UsageError("field series: no snapshots");
    for (std::size_t k = 1; k < states.size(); ++k) {
      require_same_grid(states[k].grid(), states[0].grid(), "field series");
      if (!(states[k].time > states[k - 1].time)) throw NumericalRejection("field series: snapshot times must increase");
    }
    for (const auto& s : states)
      if (!temperatures_positive(s.T)) throw NumericalRejection("field series: T_i must be positive (T_QM > 0)");
    dlnT_dt = temperature_rates(states);
    if (states.size() > 1) {
      spacing = (states.back().time - states.front().time) / static_cast<double>(states.size() - 1);
      for (std::size_t k = 1; k < states.size(); ++k)
        if (std::abs(states[k].time - (states.front().time + k * spacing)) > 1e-9 * spacing) spacing = 0.0;
    }
    const int d = states[0].dim();
    channels = 1 + 3 * d + d * d;
    for (const auto& s : states) {
      std::vector<double> p(s.f.size() * static_cast<std::size_t>(channels));
      for (std::size_t n = 0; n < s.f.size(); ++n) {
        double* q = p.data() + n * static_cast<std::size_t>(channels);
        *q++ = s.lnf[n];
        for (int i = 0; i < d; ++i) *q++ = s.V[i][n];
        for (int i = 0; i < d; ++i) *q++ = s.grad_lnf[i][n];
        for (int i = 0; i < d; ++i) *q++ = s.F[i][n];
        for (int i = 0; i < d; ++i)
          for (int j = 0; j < d; ++j) *q++ = s.dV(i, j)[n];
      }
      packed.push_back(std::move(p));
    }
  }

  const GridSpec& grid() const { return states.front().grid(); }
  double t_begin() const { return states.front().time; }
  double t_end() const { return states.back().time; }

  /// Bracketing snapshot k and weight w of snapshot k+1 (w in [0,1]).
  std::pair<std::size_t, double> locate(double t) const {
    const double eps = 1e-9 * std::max(1.0, std::abs(t_end() - t_begin()));
    if (t < t_begin() - eps || t > t_end() + eps) throw NumericalRejection("field series: time outside the stored range");
    if (states.size() == 1) return {0, 0.0};
    if (spacing > 0.0) {
      const double x = (t - t_begin()) / spacing;
      std::size_t k = static_cast<std::size_t>(std::clamp(std::floor(x), 0.0, static_cast<double>(states.size() - 2)));
      // The stored times are authoritative; step once if rounding put t across a boundary.
      if (k + 2 < states.size() && t >= states[k + 1].time) ++k;
      if (k > 0 && t < states[k].time) --k;
      const double w = (t - states[k].time) / (states[k + 1].time - states[k].time);
      return {k, std::clamp(w, 0.0, 1.0)};
    }
    auto it = std::upper_bound(states.begin(), states.end(), t, [](double x, const FluidState& s) { return x < s.time; });
    std::size_t k = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, (it - states.begin()) - 1));
    k = std::min(k, states.size() - 2);
    const double w = (t - states[k].time) / (states[k + 1].time - states[k].time);
    return {k, std::clamp(w, 0.0, 1.0)};
  }

  TimeWeights time_weights(double t) const {
    TimeWeights tw;
    const auto [k, w] = locate(t);
    if (states.size() == 1) {
      tw.n = 1;
      tw.idx[0] = 0;
      tw.w[0] = 1.0;
      return tw;
    }
    if (states.size() < 4) {
      tw.n = 2;
      tw.idx = {k, k + 1, 0, 0};
      tw.w = {1.0 - w, w, 0.0, 0.0};
      return tw;
    }
    const std::size_t a = std::min(k > 0 ? k - 1 : 0, states.size() - 4);
    for (std::size_t j = 0; j < 4; ++j) {
      double p = 1.0;
      for (std::size_t m = 0; m < 4; ++m)
        if (m != j) p *= (t - states[a + m].time) / (states[a + j].time - states[a + m].time);
      tw.idx[tw.n] = a + j;
      tw.w[tw.n] = p;
      if (p != 0.0) ++tw.n;
    }
    return tw;
  }

  std::size_t index_of(double t) const {
    for (std::size_t k = 0; k < states.size(); ++k)
      if (std::abs(states[k].time - t) <= 1e-12 * std::max(1.0, std::abs(t))) return k;
    throw NumericalRejection("field series: no snapshot at t = " + std::to_string(t));
  }
};

// --- local field evaluation -------------------------------------------------

/// Fluid fields at one phase-space position, as seen by the closures.
struct LocalFields {
  int d = 1;
  double lnf = 0.0;
  Vec V{}, grad_lnf{}, F{};
  std::array<Vec, kMaxDim> gradV{};  // gradV[i][j] = d_j V_i
  Vec T{1.0, 1.0, 1.0};              // <T_i>(t)
  Vec dlnT_dt{};
  Vec k{1.0, 1.0, 1.0};              // positional profile at r
  std::array<Vec, kMaxDim> grad_lnk{};

  double f() const { return std::exp(lnf); }
  /// Local temperature k_i(r) <T_i>.
  double Tloc(int i) const { return k[i] * T[i]; }
};

namespace detail {

inline bool stencil_valid(const Stencil& s, const GridSpec& g, const std::vector<std::uint8_t>& valid) {
  const int n1 = g.dim > 1 ? 4 : 1, n2 = g.dim > 2 ? 4 : 1;
  const std::size_t s0 = g.stride(0), s1 = g.dim > 1 ? g.stride(1) : 0;
  for (int a = 0; a < 4; ++a)
    for (int b = 0; b < n1; ++b)
      for (int c = 0; c < n2; ++c) {
        const std::size_t i = static_cast<std::size_t>(s.idx[0][a]) * s0 +
                              static_cast<std::size_t>(s.idx[1][b]) * s1 + static_cast<std::size_t>(s.idx[2][c]);
        if (!valid[i]) return false;
      }
  return true;
}

/// Clamp r into the closed box on bounded axes (field evaluation only).
inline Point clamp_to_box(const GridSpec& g, Point r) {
  for (int k = 0; k < g.dim; ++k)
    if (!g.periodic[k]) r[k] = std::clamp(r[k], g.lower[k], g.upper[k]);
  return r;
}

inline void accumulate_local(const FluidState& s, const Stencil& st, double w, LocalFields& L) {
  const int d = s.dim();
  L.lnf += w * st.apply(s.lnf);
  for (int i = 0; i < d; ++i) {
    L.V[i] += w * st.apply(s.V[i]);
    L.grad_lnf[i] += w * st.apply(s.grad_lnf[i]);
    L.F[i] += w * st.apply(s.F[i]);
    for (int j = 0; j < d; ++j) L.gradV[i][j] += w * st.apply(s.dV(i, j));
  }
}

/// Static temperature profile of the positional closure at the stencil point.
inline void apply_profile(const ClosureSpec* cl, const Stencil& st, LocalFields& L) {
  if (!cl || cl->kind != ClosureSpec::Kind::positional_temperature) return;
  const int d = L.d;
  for (int i = 0; i < d; ++i) {
    L.k[i] = std::exp(st.apply(cl->lnk[static_cast<std::size_t>(i)]));
    for (int j = 0; j < d; ++j) L.grad_lnk[i][j] = st.apply(cl->grad_lnk[static_cast<std::size_t>(i * d + j)]);
  }
}

}  // namespace detail

/// Fields of one snapshot at r. Returns false at a node (any stencil node
/// below the density floor) or outside a bounded axis.
inline bool local_fields(const FluidState& s, const Point& r, LocalFields& L, const ClosureSpec* cl = nullptr,
                         const Vec& dlnT_dt = {0.0, 0.0, 0.0}) {
  Stencil st;
  if (!Stencil::build(s.grid(), r, st)) return false;
  if (!detail::stencil_valid(st, s.grid(), s.valid)) return false;
  L = LocalFields{};
  L.d = s.dim();
  for (int i = 0; i < L.d; ++i) {
    L.T[i] = s.T[static_cast<std::size_t>(i)];
    L.dlnT_dt[i] = dlnT_dt[i];
  }
  detail::accumulate_local(s, st, 1.0, L);
  detail::apply_profile(cl, st, L);
  return true;
}

/// Fields of a series at (r, t), interpolated in time.
inline bool local_fields(const FieldSeries& fs, const Point& r, double t, LocalFields& L,
                         const ClosureSpec* cl = nullptr) {
  const TimeWeights tw = fs.time_weights(t);
  const GridSpec& g = fs.grid();
  Stencil st;
  if (!Stencil::build(g, r, st)) return false;
  const int d = g.dim;
  const std::size_t C = static_cast<std::size_t>(fs.channels);
  std::array<double, 1 + 3 * kMaxDim + kMaxDim * kMaxDim> acc{};
  const int n1 = d > 1 ? 4 : 1, n2 = d > 2 ? 4 : 1;
  const std::size_t s0 = g.stride(0), s1 = d > 1 ? g.stride(1) : 0;
  for (int a = 0; a < 4; ++a)
    for (int b = 0; b < n1; ++b)
      for (int c = 0; c < n2; ++c) {
        const std::size_t idx = static_cast<std::size_t>(st.idx[0][a]) * s0 +
                                static_cast<std::size_t>(st.idx[1][b]) * s1 + static_cast<std::size_t>(st.idx[2][c]);
        const double wt = st.w[0][a] * st.w[1][b] * st.w[2][c];
        for (int q = 0; q < tw.n; ++q) {
          if (!fs.states[tw.idx[q]].valid[idx]) return false;
          const double* p = fs.packed[tw.idx[q]].data() + idx * C;
          const double wq = wt * tw.w[q];
          for (std::size_t ch = 0; ch < C; ++ch) acc[ch] += wq * p[ch];
        }
      }
  L = LocalFields{};
  L.d = d;
  std::size_t q = 0;
  L.lnf = acc[q++];
  for (int i = 0; i < d; ++i) L.V[i] = acc[q++];
  for (int i = 0; i < d; ++i) L.grad_lnf[i] = acc[q++];
  for (int i = 0; i < d; ++i) L.F[i] = acc[q++];
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) L.gradV[i][j] = acc[q++];
  for (int i = 0; i < d; ++i) {
    const std::size_t ii = static_cast<std::size_t>(i);
    L.T[i] = 0.0;
    L.dlnT_dt[i] = 0.0;
    for (int k = 0; k < tw.n; ++k) {
      L.T[i] += tw.w[k] * fs.states[tw.idx[k]].T[ii];
      L.dlnT_dt[i] += tw.w[k] * fs.dlnT_dt[tw.idx[k]][i];
    }
  }
  detail::apply_profile(cl, st, L);
  return true;
}

// --- generalized Maxwellian -------------------------------------------------

/// ln g_M at (r, v) with local temperatures k_i <T_i>.
inline double log_maxwellian(const LocalFields& L, const Vec& v, double mass) {
  double s = L.lnf - 0.5 * L.d * std::log(M_PI);
  for (int i = 0; i < L.d; ++i) {
    const double vth2 = 2.0 * L.Tloc(i) / mass;
    const double u = v[i] - L.V[i];
    s -= 0.5 * std::log(vth2) + u * u / vth2;
  }
  return s;
}

inline void require_positive_temperatures(const std::vector<double>& T, const char* what) {
  if (!temperatures_positive(T)) throw NumericalRejection(std::string(what) + ": T_i must be positive");
}

inline LocalFields require_local(const FluidState& s, const Point& r, const char* what,
                                 const ClosureSpec* cl = nullptr, const Vec& dlnT_dt = {0.0, 0.0, 0.0}) {
  require_positive_temperatures(s.T, what);
  LocalFields L;
  if (!local_fields(s, r, L, cl, dlnT_dt))
    throw NumericalRejection(std::string(what) + ": position is at a node (f < f_floor) or outside the domain");
  return L;
}

/// g_M = f / (pi^{d/2} prod v_thi) exp(-sum u_i^2 / v_thi^2), v_thi = sqrt(2 T_i/m).
inline double maxwellian_value(const FluidState& s, const Point& r, const Vec& v, const PhysicalConstants& c) {
  const LocalFields L = require_local(s, r, "maxwellian_value");
  return std::exp(log_maxwellian(L, v, c.mass));
}

/// Gauss-Hermite velocity moments of g_M at one position: returns
/// {int g, int v g, int m u_i^2 g} (per axis for the last two).
struct VelocityMoments {
  double zeroth = 0.0;
  Vec first{};
  Vec second{};
};

inline VelocityMoments maxwellian_moments(const LocalFields& L, double mass, const GaussHermite& gh = GaussHermite(32)) {
  VelocityMoments m;
  const double f = L.f();
  Vec vth{};
  for (int i = 0; i < L.d; ++i) vth[i] = std::sqrt(2.0 * L.Tloc(i) / mass);
  const double norm = f / std::pow(M_PI, 0.5 * L.d);
  for_each_hermite_node(gh, L.d, [&](const std::array<double, 3>& z, double w) {
    const double gw = norm * w;
    m.zeroth += gw;
    for (int i = 0; i < L.d; ++i) {
      const double u = vth[i] * z[i];
      m.first[i] += gw * (L.V[i] + u);
      m.second[i] += gw * mass * u * u;
    }
  });
  return m;
}

// --- mean-field forces ------------------------------------------------------

/// K = K0 + K1 for the Maxwellian closure:
///   K0 = F + sum_i T_i (d_i ln f) e_i
///   K1 = m (u.grad) V + (m/2) sum_i u_i dlnT_i/dt e_i
inline Vec force_maxwellian(const LocalFields& L, const Vec& v, double mass) {
  Vec K{};
  for (int i = 0; i < L.d; ++i) {
    double conv = 0.0;
    for (int j = 0; j < L.d; ++j) conv += (v[j] - L.V[j]) * L.gradV[i][j];
    K[i] = L.F[i] + L.T[i] * L.grad_lnf[i] + mass * conv + 0.5 * mass * (v[i] - L.V[i]) * L.dlnT_dt[i];
  }
  return K;
}

/// (d/dv).(K/m) of the Maxwellian closure: tr grad V + 1/2 sum dlnT_i/dt.
inline double divergence_maxwellian(const LocalFields& L) {
  double s = 0.0;
  for (int i = 0; i < L.d; ++i) s += L.gradV[i][i] + 0.5 * L.dlnT_dt[i];
  return s;
}

/// Position-dependent temperatures T_i(r) = k_i(r) <T_i>: K0 uses the local
/// T_i, and K1 gains D lnT_i/Dt = dln<T_i>/dt + V.grad ln k_i plus
/// T_i [sum_j d_i lnT_j (x_j^2 - 1/2) + d_i lnT_i] e_i with x_j = u_j/v_thj.
inline Vec force_positional(const LocalFields& L, const Vec& v, double mass) {
  Vec K{};
  Vec x2{};
  for (int j = 0; j < L.d; ++j) {
    const double u = v[j] - L.V[j];
    x2[j] = mass * u * u / (2.0 * L.Tloc(j));
  }
  for (int i = 0; i < L.d; ++i) {
    const double u = v[i] - L.V[i];
    double conv = 0.0, adv = 0.0;
    for (int j = 0; j < L.d; ++j) {
      conv += (v[j] - L.V[j]) * L.gradV[i][j];
      adv += L.V[j] * L.grad_lnk[i][j];
    }
    const double DlnT = L.dlnT_dt[i] + adv;
    double extra = L.grad_lnk[i][i];
    for (int j = 0; j < L.d; ++j) extra += L.grad_lnk[j][i] * (x2[j] - 0.5);
    const double Ti = L.Tloc(i);
    K[i] = L.F[i] + Ti * L.grad_lnf[i] + mass * conv + 0.5 * mass * u * DlnT + Ti * extra;
  }
  return K;
}

inline double divergence_positional(const LocalFields& L, const Vec& v) {
  double s = 0.0;
  for (int i = 0; i < L.d; ++i) {
    double adv = 0.0;
    for (int j = 0; j < L.d; ++j) adv += L.V[j] * L.grad_lnk[i][j];
    s += L.gradV[i][i] + 0.5 * (L.dlnT_dt[i] + adv) + (v[i] - L.V[i]) * L.grad_lnk[i][i];
  }
  return s;
}

inline Vec mean_field_force_maxwellian(const FluidState& s, const Point& r, const Vec& v, const Vec& dlnT_dt,
                                       const PhysicalConstants& c) {
  const LocalFields L = require_local(s, r, "mean_field_force_maxwellian", nullptr, dlnT_dt);
  return force_maxwellian(L, v, c.mass);
}

inline Vec mean_field_force_positional(const FluidState& s, const ClosureSpec& cl, const Point& r, const Vec& v,
                                       const Vec& dlnT_dt, const PhysicalConstants& c) {
  if (cl.kind != ClosureSpec::Kind::positional_temperature)
    throw UsageError("mean_field_force_positional: closure kind must be positional_temperature");
  if (!cl.prepared() || cl.k_profile.empty()) throw UsageError("mean_field_force_positional: k_profile missing or not prepared");
  const LocalFields L = require_local(s, r, "mean_field_force_positional", &cl, dlnT_dt);
  return force_positional(L, v, c.mass);
}

// --- raw moments --------------------------------------------------------------

/// Pi = m int u u g dv and Q_i = (m/3) int u u_i^2 g dv, stored both as given
/// and per unit density (P = Pi/f, q = Q/f). The closure evaluates
/// (1/f) div Pi = P.grad ln f + div P (and likewise for Q), which keeps the
/// 1/f out of the derivative.
struct RawMoments {
  int d = 1;
  std::vector<ScalarField> Pi, Q;  // [i*d + j]; Q[i*d + j] = component j of Q_i
  std::vector<ScalarField> P, q;
  std::vector<ScalarField> divP;   // (div P)_i = sum_j d_j P_ji
  std::vector<ScalarField> divq;   // div q_i
  std::vector<std::uint8_t> mask;  // node has a usable estimate
  std::size_t masked = 0;

  static RawMoments from_per_density(const ScalarField& f, std::vector<ScalarField> P, std::vector<ScalarField> q,
                                     std::vector<std::uint8_t> mask) {
    const GridSpec& g = f.grid();
    RawMoments m;
    m.d = g.dim;
    const std::size_t dd = static_cast<std::size_t>(m.d * m.d);
    if (P.size() != dd || q.size() != dd) throw UsageError("raw moments: expected d*d components");
    m.mask = std::move(mask);
    m.masked = static_cast<std::size_t>(std::count(m.mask.begin(), m.mask.end(), std::uint8_t{0}));
    for (auto& c : P) detail::extend_constant(c, m.mask);
    for (auto& c : q) detail::extend_constant(c, m.mask);
    m.P = std::move(P);
    m.q = std::move(q);
    for (std::size_t c = 0; c < dd; ++c) {
      ScalarField a(g, f.time()), b(g, f.time());
      for (std::size_t n = 0; n < g.size(); ++n) {
        a[n] = f[n] * m.P[c][n];
        b[n] = f[n] * m.q[c][n];
      }
      m.Pi.push_back(std::move(a));
      m.Q.push_back(std::move(b));
    }
    for (int i = 0; i < m.d; ++i) {
      ScalarField dp(g, f.time()), dq(g, f.time());
      for (int j = 0; j < m.d; ++j) {
        dp += derivative(m.P[static_cast<std::size_t>(j * m.d + i)], j, 1);
        dq += derivative(m.q[static_cast<std::size_t>(i * m.d + j)], j, 1);
      }
      m.divP.push_back(std::move(dp));
      m.divq.push_back(std::move(dq));
    }
    return m;
  }

  /// Moments of g_M itself: P = diag(T), q = 0.
  static RawMoments of_maxwellian(const FluidState& s) {
    const GridSpec& g = s.grid();
    const int d = s.dim();
    std::vector<ScalarField> P, q;
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) {
        P.emplace_back(g, s.time, i == j ? s.T[static_cast<std::size_t>(i)] : 0.0);
        q.emplace_back(g, s.time, 0.0);
      }
    return from_per_density(s.f, std::move(P), std::move(q), s.valid);
  }

  /// P symmetric positive semidefinite on every usable node.
  bool pressure_psd(double tol = 1e-12) const {
    const std::size_t n = P[0].size();
    for (std::size_t k = 0; k < n; ++k) {
      if (!mask[k]) continue;
      double M[3][3] = {};
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) M[i][j] = P[static_cast<std::size_t>(i * d + j)][k];
      for (int i = 0; i < d; ++i) {
        if (M[i][i] < -tol) return false;
        for (int j = 0; j < i; ++j)
          if (std::abs(M[i][j] - M[j][i]) > tol * (1.0 + std::abs(M[i][j]))) return false;
      }
      if (d >= 2) {
        if (M[0][0] * M[1][1] - M[0][1] * M[1][0] < -tol) return false;
      }
      if (d == 3) {
        const double det = M[0][0] * (M[1][1] * M[2][2] - M[1][2] * M[2][1]) -
                           M[0][1] * (M[1][0] * M[2][2] - M[1][2] * M[2][0]) +
                           M[0][2] * (M[1][0] * M[2][1] - M[1][1] * M[2][0]);
        if (det < -tol) return false;
      }
    }
    return true;
  }
};

/// Raw moments at one position.
struct LocalRaw {
  std::array<Vec, kMaxDim> P{};
  std::array<Vec, kMaxDim> q{};  // q[i][j]
  Vec divP{}, divq{};
};

inline bool local_raw(const RawMoments& m, const GridSpec& g, const Point& r, LocalRaw& R, double w = 1.0,
                      bool reset = true) {
  Stencil st;
  if (!Stencil::build(g, r, st)) return false;
  if (reset) R = LocalRaw{};
  for (int i = 0; i < m.d; ++i) {
    for (int j = 0; j < m.d; ++j) {
      R.P[i][j] += w * st.apply(m.P[static_cast<std::size_t>(i * m.d + j)]);
      R.q[i][j] += w * st.apply(m.q[static_cast<std::size_t>(i * m.d + j)]);
    }
    R.divP[i] += w * st.apply(m.divP[static_cast<std::size_t>(i)]);
    R.divq[i] += w * st.apply(m.divq[static_cast<std::size_t>(i)]);
  }
  return true;
}

/// Raw moments of a series at (r, t), interpolated in time like the fields.
inline bool local_raw(const FieldSeries& fs, const std::vector<RawMoments>& m, const Point& r, double t,
                      LocalRaw& R) {
  const TimeWeights tw = fs.time_weights(t);
  for (int q = 0; q < tw.n; ++q)
    if (!local_raw(m[tw.idx[q]], fs.grid(), r, R, tw.w[q], q == 0)) return false;
  return true;
}

/// (1/(f T_i)) div Q_i.
inline double heat_flux_term(const LocalFields& L, const LocalRaw& R, int i) {
  double s = R.divq[i];
  for (int j = 0; j < L.d; ++j) s += R.q[i][j] * L.grad_lnf[j];
  return s / L.T[i];
}

/// K0 = F + (1/f) div Pi,
/// K1 = m (u.grad) V + (m/2) sum_i u_i [dlnT_i/dt + (3/(f T_i)) div Q_i] e_i.
inline Vec force_raw(const LocalFields& L, const LocalRaw& R, const Vec& v, double mass) {
  Vec K{};
  for (int i = 0; i < L.d; ++i) {
    double pres = R.divP[i];
    for (int j = 0; j < L.d; ++j) pres += R.P[j][i] * L.grad_lnf[j];
    double conv = 0.0;
    for (int j = 0; j < L.d; ++j) conv += (v[j] - L.V[j]) * L.gradV[i][j];
    const double u = v[i] - L.V[i];
    K[i] = L.F[i] + pres + mass * conv + 0.5 * mass * u * (L.dlnT_dt[i] + 3.0 * heat_flux_term(L, R, i));
  }
  return K;
}

inline double divergence_raw(const LocalFields& L, const LocalRaw& R) {
  double s = divergence_maxwellian(L);
  for (int i = 0; i < L.d; ++i) s += 1.5 * heat_flux_term(L, R, i);
  return s;
}

inline Vec mean_field_force_raw(const FluidState& s, const RawMoments& m, const Point& r, const Vec& v,
                                const Vec& dlnT_dt, const PhysicalConstants& c) {
  const LocalFields L = require_local(s, r, "mean_field_force_raw", nullptr, dlnT_dt);
  LocalRaw R;
  if (!local_raw(m, s.grid(), r, R)) throw NumericalRejection("mean_field_force_raw: position outside the domain");
  for (int i = 0; i < L.d; ++i) {
    if (!std::isfinite(R.divP[i]) || !std::isfinite(R.divq[i]))
      throw NumericalRejection("mean_field_force_raw: non-finite moment divergence");
  }
  return force_raw(L, R, v, c.mass);
}

/// Estimated moments plus batch replicas for error propagation.
struct RawMomentsEstimate {
  RawMoments mean;
  std::vector<RawMoments> batches;
  std::size_t min_count = 0;
};

/// KDE estimates of P and q (per unit density) with u = v - V(r_p) taken
/// against the fluid state. Nodes whose effective particle count is below
/// `n_min` are masked. `batches` > 1 also returns independent replicas built
/// from disjoint index blocks, from which errors of any derived quantity can
/// be estimated.
inline RawMomentsEstimate raw_moments_from_ensemble(const ParticleEnsemble& e, const FluidState& s,
                                                    const PhysicalConstants& c, std::array<double, kMaxDim> bw = {},
                                                    double n_min = 30.0, int batches = 0) {
  if (e.size() == 0) throw NumericalRejection("raw_moments_from_ensemble: empty ensemble");
  if (e.dim != s.dim()) throw UsageError("raw_moments_from_ensemble: dimension mismatch");
  if (std::abs(e.time - s.time) > 1e-12 * std::max(1.0, std::abs(s.time)))
    throw NumericalRejection("raw_moments_from_ensemble: ensemble and fluid state are at different times");
  if (bw[0] == 0.0) bw = silverman_bandwidth(e);
  const GridSpec& g = s.grid();
  const int d = s.dim();
  const int dd = d * d;
  const int channels = 1 + 2 * dd;

  // Relative velocities against V at the particle positions.
  std::vector<Vec> u(e.size());
  std::vector<std::uint8_t> ok(e.size(), 0);
  for_chunks(e.size(), [&](std::size_t b, std::size_t en, std::size_t) {
    Stencil st;
    for (std::size_t p = b; p < en; ++p) {
      if (!e.alive[p] || !Stencil::build(g, e.r[p], st)) continue;
      for (int i = 0; i < d; ++i) u[p][i] = e.v[p][i] - st.apply(s.V[i]);
      ok[p] = 1;
    }
  });

  auto estimate = [&](std::size_t lo, std::size_t hi) {
    auto acc = kde_accumulate(e, g, bw, channels, [&](std::size_t p, std::vector<double>& vals) {
      if (p < lo || p >= hi || !ok[p]) return false;
      vals[0] = 1.0;
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) {
          vals[static_cast<std::size_t>(1 + i * d + j)] = c.mass * u[p][i] * u[p][j];
          vals[static_cast<std::size_t>(1 + dd + i * d + j)] = c.mass / 3.0 * u[p][j] * u[p][i] * u[p][i];
        }
      return true;
    });
    std::vector<ScalarField> P, q;
    std::vector<std::uint8_t> mask(g.size(), 0);
    for (std::size_t n = 0; n < g.size(); ++n) {
      const double s0 = acc[0][n], ss = acc[static_cast<std::size_t>(channels)][n];
      const double neff = ss > 0.0 ? s0 * s0 / ss : 0.0;
      mask[n] = (neff >= n_min && s.valid[n]) ? 1 : 0;
    }
    for (int k = 0; k < dd; ++k) {
      ScalarField a(g, s.time), b(g, s.time);
      for (std::size_t n = 0; n < g.size(); ++n) {
        const double s0 = acc[0][n];
        if (s0 > 0.0) {
          a[n] = acc[static_cast<std::size_t>(1 + k)][n] / s0;
          b[n] = acc[static_cast<std::size_t>(1 + dd + k)][n] / s0;
        }
      }
      P.push_back(std::move(a));
      q.push_back(std::move(b));
    }
    std::size_t cnt = 0;
    for (auto m : mask) cnt += m;
    if (cnt == 0) throw NumericalRejection("raw_moments_from_ensemble: every cell is under-populated");
    return RawMoments::from_per_density(s.f, std::move(P), std::move(q), std::move(mask));
  };

  RawMomentsEstimate out;
  out.mean = estimate(0, e.size());
  for (int b = 0; b < batches; ++b) {
    const std::size_t lo = e.size() * static_cast<std::size_t>(b) / static_cast<std::size_t>(batches);
    const std::size_t hi = e.size() * static_cast<std::size_t>(b + 1) / static_cast<std::size_t>(batches);
    out.batches.push_back(estimate(lo, hi));
  }
  return out;
}

// --- closure dispatch ---------------------------------------------------------

/// Everything the characteristics need to evaluate K: the closure and, for
/// the raw-moment closure, one moment set per snapshot of the series.
struct ClosureEval {
  const ClosureSpec* spec = nullptr;
  const std::vector<RawMoments>* moments = nullptr;
  double mass = 1.0;

  ClosureSpec::Kind kind() const { return spec ? spec->kind : ClosureSpec::Kind::maxwellian; }
};

/// K/m and (d/dv).(K/m) at (r, v, t). Returns false inside the nodes.
inline bool closure_rhs(const FieldSeries& fs, const ClosureEval& ce, double t, const Point& r, const Vec& v,
                        Vec& accel, double& div) {
  const ClosureSpec* prof =
      ce.kind() == ClosureSpec::Kind::positional_temperature ? ce.spec : nullptr;
  LocalFields L;
  if (!local_fields(fs, r, t, L, prof)) return false;
  Vec K{};
  switch (ce.kind()) {
    case ClosureSpec::Kind::maxwellian:
      K = force_maxwellian(L, v, ce.mass);
      div = divergence_maxwellian(L);
      break;
    case ClosureSpec::Kind::positional_temperature:
      K = force_positional(L, v, ce.mass);
      div = divergence_positional(L, v);
      break;
    case ClosureSpec::Kind::raw_moments: {
      LocalRaw R;
      if (!local_raw(fs, *ce.moments, r, t, R)) return false;
      K = force_raw(L, R, v, ce.mass);
      div = divergence_raw(L, R);
      break;
    }
  }
  for (int i = 0; i < L.d; ++i) accel[i] = K[i] / ce.mass;
  return true;
}

// --- Jacobians ----------------------------------------------------------------

/// Theta = prod_i T_i^{1/2}.
inline double theta(const std::vector<double>& T) {
  double p = 1.0;
  for (double t : T) p *= t;
  return std::sqrt(p);
}

/// x^2 = sum_i u_i^2 / v_thi^2.
inline double scaled_speed2(const LocalFields& L, const Vec& v, double mass) {
  double s = 0.0;
  for (int i = 0; i < L.d; ++i) {
    const double u = v[i] - L.V[i];
    s += mass * u * u / (2.0 * L.Tloc(i));
  }
  return s;
}

struct PhasePoint {
  Point r{};
  Vec v{};
};

/// J = Theta(t) f(r0,t0) e^{-x0^2} / (Theta(t0) f(r_t,t) e^{-x_t^2}), the
/// reading under which J g_M(x_t,t) = g_M(x0,t0).
inline double jacobian_closed_form_maxwellian(const FluidState& s0, const FluidState& st, const PhasePoint& x0,
                                              const PhasePoint& xt, const PhysicalConstants& c) {
  const LocalFields L0 = require_local(s0, x0.r, "jacobian_closed_form_maxwellian");
  const LocalFields Lt = require_local(st, xt.r, "jacobian_closed_form_maxwellian");
  const double logJ = std::log(theta(st.T) / theta(s0.T)) + L0.lnf - Lt.lnf - scaled_speed2(L0, x0.v, c.mass) +
                      scaled_speed2(Lt, xt.v, c.mass);
  return std::exp(logJ);
}

/// Densely sampled trajectory.
struct Trajectory {
  std::size_t particle = 0;
  std::vector<double> t;
  std::vector<Point> r;
  std::vector<Vec> v;
  std::vector<double> logJ;
  bool alive = true;

  std::size_t size() const { return t.size(); }
  void push(double tt, const Point& rr, const Vec& vv, double lj) {
    t.push_back(tt);
    r.push_back(rr);
    v.push_back(vv);
    logJ.push_back(lj);
  }
};

struct RawJacobianResult {
  double J = 1.0;
  double log_prefactor = 0.0;
  double integral_G = 0.0;
  double richardson_gap = 0.0;  // |I(full) - I(every other sample)|
  bool converged = true;
};

namespace detail {

/// Composite Simpson for odd sample counts on a uniform mesh, trapezoid
/// otherwise.
inline double integrate_samples(const std::vector<double>& t, const std::vector<double>& y) {
  const std::size_t n = t.size();
  if (n < 2) return 0.0;
  bool uniform = true;
  const double h = t[1] - t[0];
  for (std::size_t k = 1; k < n; ++k)
    if (std::abs((t[k] - t[k - 1]) - h) > 1e-9 * std::abs(h)) uniform = false;
  if (uniform && n % 2 == 1 && n >= 3) {
    double s = y.front() + y.back();
    for (std::size_t k = 1; k + 1 < n; ++k) s += y[k] * ((k % 2) ? 4.0 : 2.0);
    return s * h / 3.0;
  }
  double s = 0.0;
  for (std::size_t k = 1; k < n; ++k) s += 0.5 * (y[k] + y[k - 1]) * (t[k] - t[k - 1]);
  return s;
}

}  // namespace detail

/// J = [Theta(t) f(r0,t0) / (Theta(t0) f(r_t,t))] exp(int G dt') with
/// G = u.grad ln f + (3/2) sum_i div Q_i / (f T_i), evaluated along the
/// sampled trajectory with moments interpolated in time like the fields.
inline RawJacobianResult jacobian_closed_form_raw(const FieldSeries& fs, const std::vector<RawMoments>& moments,
                                                  const Trajectory& tr, const PhysicalConstants& /*c*/,
                                                  double richardson_tol = 1e-7) {
  RawJacobianResult res;
  if (tr.size() < 2) return res;
  if (moments.size() != fs.states.size()) throw UsageError("jacobian_closed_form_raw: one moment set per snapshot required");
  std::vector<double> G(tr.size());
  LocalFields L0, Lt;
  for (std::size_t k = 0; k < tr.size(); ++k) {
    LocalFields L;
    if (!local_fields(fs, tr.r[k], tr.t[k], L))
      throw NumericalRejection("jacobian_closed_form_raw: trajectory crosses a node");
    LocalRaw R;
    local_raw(fs, moments, tr.r[k], tr.t[k], R);
    double g = 0.0;
    for (int i = 0; i < L.d; ++i) g += (tr.v[k][i] - L.V[i]) * L.grad_lnf[i] + 1.5 * heat_flux_term(L, R, i);
    G[k] = g;
    if (k == 0) L0 = L;
    if (k + 1 == tr.size()) Lt = L;
  }
  double th0 = 1.0, tht = 1.0;
  for (int i = 0; i < L0.d; ++i) {
    th0 *= L0.T[i];
    tht *= Lt.T[i];
  }
  res.log_prefactor = 0.5 * std::log(tht / th0) + L0.lnf - Lt.lnf;
  res.integral_G = detail::integrate_samples(tr.t, G);
  if (tr.size() >= 5) {
    std::vector<double> t2, G2;
    for (std::size_t k = 0; k < tr.size(); k += 2) {
      t2.push_back(tr.t[k]);
      G2.push_back(G[k]);
    }
    if ((tr.size() - 1) % 2 == 0) {
      res.richardson_gap = std::abs(detail::integrate_samples(t2, G2) - res.integral_G);
      res.converged = res.richardson_gap <= richardson_tol * std::max(1.0, std::abs(res.integral_G));
    }
  }
  res.J = std::exp(res.log_prefactor + res.integral_G);
  return res;
}

// --- kinetic-equation residual ------------------------------------------------

/// Residual of the conservative Vlasov operator applied to g_M,
///   dg/dt + v.grad_r g + grad_v.(K g / m),
/// at one phase point of the middle snapshot. The time derivative is a
/// three-point difference over the snapshots; spatial derivatives come from
/// the stored derivative channels.
struct KineticResidual {
  double residual = 0.0;
  double g = 0.0;
  bool valid = false;
};

inline KineticResidual kinetic_residual(const FluidState& sm, const FluidState& s0, const FluidState& sp,
                                        const Vec& dlnT_dt, const ClosureSpec& cl, const Point& r, const Vec& v,
                                        const PhysicalConstants& c, const RawMoments* moments = nullptr,
                                        TimeStencil stencil = TimeStencil::centered2) {
  KineticResidual out;
  const ClosureSpec* clp = cl.kind == ClosureSpec::Kind::positional_temperature ? &cl : nullptr;
  LocalFields Lm, L0, Lp;
  if (!local_fields(sm, r, Lm, clp) || !local_fields(s0, r, L0, clp, dlnT_dt) || !local_fields(sp, r, Lp, clp))
    return out;
  const int d = L0.d;
  const double m = c.mass;
  const double lg0 = log_maxwellian(L0, v, m);
  const double dt_lng = time_derivative(log_maxwellian(Lm, v, m), lg0, log_maxwellian(Lp, v, m), sm.time, s0.time,
                                        sp.time, stencil);
  // grad_r ln g and grad_v ln g.
  Vec grad_r{}, grad_v{};
  for (int j = 0; j < d; ++j) {
    double s = L0.grad_lnf[j];
    for (int i = 0; i < d; ++i) {
      const double Ti = L0.Tloc(i);
      const double u = v[i] - L0.V[i];
      s += -0.5 * L0.grad_lnk[i][j] + m * u * L0.gradV[i][j] / Ti + m * u * u / (2.0 * Ti) * L0.grad_lnk[i][j];
    }
    grad_r[j] = s;
    grad_v[j] = -m * (v[j] - L0.V[j]) / L0.Tloc(j);
  }
  Vec K{};
  double divK = 0.0;
  switch (cl.kind) {
    case ClosureSpec::Kind::maxwellian:
      K = force_maxwellian(L0, v, m);
      divK = divergence_maxwellian(L0);
      break;
    case ClosureSpec::Kind::positional_temperature:
      K = force_positional(L0, v, m);
      divK = divergence_positional(L0, v);
      break;
    case ClosureSpec::Kind::raw_moments: {
      if (!moments) throw UsageError("kinetic_residual: raw closure needs moments");
      LocalRaw R;
      local_raw(*moments, s0.grid(), r, R);
      K = force_raw(L0, R, v, m);
      divK = divergence_raw(L0, R);
      break;
    }
  }
  double lg = dt_lng + divK;
  for (int j = 0; j < d; ++j) lg += v[j] * grad_r[j] + K[j] / m * grad_v[j];
  out.g = std::exp(lg0);
  out.residual = out.g * lg;
  out.valid = true;
  return out;
}

// --- uniqueness falsifier -----------------------------------------------------

/// A candidate force perturbation dK(r, v; local fields, g). `g` is passed so
/// that explicit dependence on the distribution can be detected.
using ForcePerturbation = std::function<Vec(const Point& r, const Vec& v, const LocalFields& L, double g)>;

struct FalsifierReport {
  bool depends_on_g = false;        // violates "K depends only on fluid fields"
  double max_g_sensitivity = 0.0;   // max |dK(2g) - dK(g)| over probes
  double max_continuity = 0.0;      // max |int (dK/m).grad_v g dv|
  double max_momentum = 0.0;        // max |int v (dK/m).grad_v g dv|
  double max_energy = 0.0;          // max |int m u_i^2 (dK/m).grad_v g dv|
  double min_f = 0.0;
  std::size_t probes = 0;
  double tolerance = 0.0;

  bool moments_broken() const { return max_continuity > tolerance || max_momentum > tolerance || max_energy > tolerance; }
  /// The candidate is ruled out (either inadmissible or inconsistent).
  bool falsified() const { return depends_on_g || moments_broken(); }
};

/// Evaluates the moment residuals that a perturbation dK adds to the kinetic
/// equation for g_M, by Gauss-Hermite quadrature at each probe position, and
/// tests whether dK depends on g explicitly (by rescaling its g argument).
inline FalsifierReport uniqueness_falsifier(const FluidState& s, const ForcePerturbation& dK,
                                            const std::vector<Point>& probes, const PhysicalConstants& c,
                                            double tolerance, const GaussHermite& gh = GaussHermite(32)) {
  FalsifierReport rep;
  rep.tolerance = tolerance;
  rep.min_f = std::numeric_limits<double>::infinity();
  const double m = c.mass;
  for (const Point& r : probes) {
    LocalFields L;
    if (!local_fields(s, r, L)) continue;
    ++rep.probes;
    const int d = L.d;
    Vec vth{};
    for (int i = 0; i < d; ++i) vth[i] = std::sqrt(2.0 * L.Tloc(i) / m);
    const double norm = L.f() / std::pow(M_PI, 0.5 * d);
    rep.min_f = std::min(rep.min_f, L.f());
    double r0 = 0.0;
    Vec r1{}, r2{};
    for_each_hermite_node(gh, d, [&](const std::array<double, 3>& z, double w) {
      Vec v{};
      Vec u{};
      for (int i = 0; i < d; ++i) {
        u[i] = vth[i] * z[i];
        v[i] = L.V[i] + u[i];
      }
      const double g = std::exp(log_maxwellian(L, v, m));
      const Vec k1 = dK(r, v, L, g);
      const Vec k2 = dK(r, v, L, 2.0 * g);
      for (int i = 0; i < d; ++i) rep.max_g_sensitivity = std::max(rep.max_g_sensitivity, std::abs(k2[i] - k1[i]));
      // (dK/m).grad_v g = -g sum_i dK_i u_i / T_i; quadrature weight carries g/norm.
      double dot = 0.0;
      for (int i = 0; i < d; ++i) dot += -k1[i] / m * m * u[i] / L.Tloc(i);
      const double q = norm * w * dot;
      r0 += q;
      for (int i = 0; i < d; ++i) {
        r1[i] += q * v[i];
        r2[i] += q * m * u[i] * u[i];
      }
    });
    rep.max_continuity = std::max(rep.max_continuity, std::abs(r0));
    for (int i = 0; i < d; ++i) {
      rep.max_momentum = std::max(rep.max_momentum, std::abs(r1[i]));
      rep.max_energy = std::max(rep.max_energy, std::abs(r2[i]));
    }
  }
  if (rep.probes == 0) throw NumericalRejection("uniqueness_falsifier: no probe point off the nodes");
  rep.depends_on_g = rep.max_g_sensitivity > 0.0;
  return rep;
}

}  // namespace madkin
