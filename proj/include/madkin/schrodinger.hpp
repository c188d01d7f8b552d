#pragma once

#include <cmath>
#include <complex>
#include <optional>
#include <string>
#include <vector>

#include "madkin/fft.hpp"
#include "madkin/operators.hpp"

namespace madkin {

struct PhysicalConstants {
  double hbar = 1.0;
  double mass = 1.0;

  void validate() const {
    if (!(hbar > 0.0) || !(mass > 0.0)) throw UsageError("constants: hbar and mass must be positive");
  }
};

/// External potential U(r). Tabulated potentials are sampled once and must
/// live on the solver grid.
struct PotentialSpec {
  enum class Kind { free, harmonic, tabulated };

  Kind kind = Kind::free;
  std::array<double, kMaxDim> omega{0.0, 0.0, 0.0};
  Point center{0.0, 0.0, 0.0};
  std::optional<ScalarField> table;

  static PotentialSpec free() { return {}; }
  static PotentialSpec harmonic(std::array<double, kMaxDim> w, Point c = {0.0, 0.0, 0.0}) {
    PotentialSpec p;
    p.kind = Kind::harmonic;
    p.omega = w;
    p.center = c;
    return p;
  }
  static PotentialSpec tabulated(ScalarField u) {
    if (!u.all_finite()) throw UsageError("potential: tabulated values must be finite");
    PotentialSpec p;
    p.kind = Kind::tabulated;
    p.table = std::move(u);
    return p;
  }

  void validate(const GridSpec& g) const {
    if (kind == Kind::harmonic) {
      for (int k = 0; k < g.dim; ++k)
        if (!(omega[k] > 0.0)) throw UsageError("potential: harmonic frequencies must be positive");
    }
    if (kind == Kind::tabulated) {
      if (!table || !(table->grid() == g)) throw UsageError("potential: tabulated potential must match the grid");
      if (!table->all_finite()) throw UsageError("potential: tabulated values must be finite");
    }
  }

  ScalarField sample(const GridSpec& g, double mass) const {
    switch (kind) {
      case Kind::free:
        return ScalarField(g);
      case Kind::harmonic:
        return ScalarField::from_function(g, [&](const Point& r) {
          double u = 0.0;
          for (int k = 0; k < g.dim; ++k) {
            const double d = r[k] - center[k];
            u += 0.5 * mass * omega[k] * omega[k] * d * d;
          }
          return u;
        });
      case Kind::tabulated:
        return *table;
    }
    return ScalarField(g);
  }

  /// grad U. Analytic for the harmonic well; grid derivative for tables.
  VectorField gradient(const GridSpec& g, double mass) const {
    VectorField out(g);
    if (kind == Kind::harmonic) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        const auto r = g.position(i);
        for (int k = 0; k < g.dim; ++k) out[k][i] = mass * omega[k] * omega[k] * (r[k] - center[k]);
      }
    } else if (kind == Kind::tabulated) {
      out = madkin::gradient(*table);
    }
    return out;
  }
};

/// Initial wavefunction recipes.
struct InitialState {
  enum class Kind { gaussian_packet, harmonic_ground, harmonic_coherent };

  Kind kind = Kind::gaussian_packet;
  Point center{0.0, 0.0, 0.0};
  std::array<double, kMaxDim> sigma0{1.0, 1.0, 1.0};
  std::array<double, kMaxDim> k0{0.0, 0.0, 0.0};
  std::array<double, kMaxDim> omega{1.0, 1.0, 1.0};
  std::array<double, kMaxDim> displacement{0.0, 0.0, 0.0};
};

namespace detail {

/// In-place d-dimensional FFT built from 1-D line transforms.
inline void fft_nd(ComplexField& psi, bool forward) {
  const GridSpec& g = psi.grid();
  for (int axis = 0; axis < g.dim; ++axis) {
    const int len = g.nodes(axis);
    std::vector<std::complex<double>> a(static_cast<std::size_t>(len)), b(static_cast<std::size_t>(len));
    for_each_line(g, axis, [&](std::size_t start, std::size_t stride) {
      for (int i = 0; i < len; ++i) a[i] = psi[start + i * stride];
      if (forward)
        fft_forward(a, b);
      else
        fft_backward(a, b);
      for (int i = 0; i < len; ++i) psi[start + i * stride] = b[i];
    });
  }
}

/// |k|^2 for every node of the d-dimensional spectrum.
inline std::vector<double> k_squared(const GridSpec& g) {
  std::vector<double> k2(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto ijk = g.unflatten(i);
    double s = 0.0;
    for (int k = 0; k < g.dim; ++k) {
      const double kk = wavenumber(ijk[k], g.nodes(k), g.length(k));
      s += kk * kk;
    }
    k2[i] = s;
  }
  return k2;
}

inline void normalise(ComplexField& psi) {
  double norm = 0.0;
  for (const auto& v : psi.values()) norm += std::norm(v);
  norm *= psi.grid().cell_volume();
  const double s = 1.0 / std::sqrt(norm);
  for (auto& v : psi.values()) v *= s;
}

}  // namespace detail

/// Norm integral of |psi|^2.
inline double norm(const ComplexField& psi) {
  double s = 0.0;
  for (const auto& v : psi.values()) s += std::norm(v);
  return s * quadrature_weight(psi.grid());
}

/// Normalised initial wavefunction psi0 on the grid.
inline ComplexField init_scenario(const InitialState& init, const GridSpec& grid, const PhysicalConstants& c) {
  grid.validate();
  c.validate();
  std::array<double, kMaxDim> sigma = init.sigma0;
  Point center = init.center;
  std::array<double, kMaxDim> k0 = init.k0;
  if (init.kind != InitialState::Kind::gaussian_packet) {
    for (int k = 0; k < grid.dim; ++k) {
      if (!(init.omega[k] > 0.0)) throw UsageError("scenario: harmonic omega must be positive");
      sigma[k] = std::sqrt(c.hbar / (2.0 * c.mass * init.omega[k]));
      k0[k] = 0.0;
      if (init.kind == InitialState::Kind::harmonic_coherent) center[k] += init.displacement[k];
    }
  }
  for (int k = 0; k < grid.dim; ++k) {
    if (!(sigma[k] > 0.0)) throw UsageError("scenario: width must be positive");
    if (sigma[k] < 4.0 * grid.spacing(k))
      throw NumericalRejection("scenario: packet width below 4 grid cells on axis " + std::to_string(k) +
                               " (under-resolved)");
  }
  ComplexField psi = ComplexField::from_function(grid, [&](const Point& r) {
    double amp = 1.0;
    double phase = 0.0;
    for (int k = 0; k < grid.dim; ++k) {
      const double d = r[k] - center[k];
      amp *= std::pow(2.0 * M_PI * sigma[k] * sigma[k], -0.25) * std::exp(-d * d / (4.0 * sigma[k] * sigma[k]));
      phase += k0[k] * d;
    }
    return std::polar(amp, phase);
  });
  detail::normalise(psi);
  return psi;
}

/// Diagnostics collected by propagate().
struct PropagationReport {
  std::vector<std::string> warnings;
};

/// Strang split-step: half kick in U, full free drift in Fourier space,
/// half kick. Periodic grids only.
class SplitStepPropagator {
 public:
  SplitStepPropagator(const GridSpec& grid, const PotentialSpec& potential, const PhysicalConstants& c, double dt)
      : grid_(grid), c_(c), dt_(dt) {
    if (!grid.all_periodic()) throw NumericalRejection("propagate: split-step solver requires a periodic grid");
    c.validate();
    potential.validate(grid);
    const ScalarField u = potential.sample(grid, c.mass);
    kick_.resize(grid.size());
    double umax = 0.0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
      kick_[i] = std::polar(1.0, -0.5 * u[i] * dt / c.hbar);
      umax = std::max(umax, std::abs(u[i]));
    }
    if (std::abs(dt) * umax / c.hbar > 0.5)
      report_.warnings.push_back("propagate: dt*max|U|/hbar = " + std::to_string(std::abs(dt) * umax / c.hbar) +
                                 " exceeds 0.5; accuracy degraded");
    const auto k2 = detail::k_squared(grid);
    drift_.resize(grid.size());
    for (std::size_t i = 0; i < grid.size(); ++i) drift_[i] = std::polar(1.0, -c.hbar * k2[i] * dt / (2.0 * c.mass));
  }

  void step(ComplexField& psi) const {
    for (std::size_t i = 0; i < psi.size(); ++i) psi[i] *= kick_[i];
    detail::fft_nd(psi, true);
    for (std::size_t i = 0; i < psi.size(); ++i) psi[i] *= drift_[i];
    detail::fft_nd(psi, false);
    for (std::size_t i = 0; i < psi.size(); ++i) psi[i] *= kick_[i];
    psi.set_time(psi.time() + dt_);
  }

  const PropagationReport& report() const { return report_; }
  double dt() const { return dt_; }

 private:
  GridSpec grid_;
  PhysicalConstants c_;
  double dt_;
  std::vector<std::complex<double>> kick_;
  std::vector<std::complex<double>> drift_;
  PropagationReport report_;
};

inline ComplexField propagate(const ComplexField& psi, const PotentialSpec& potential, const PhysicalConstants& c,
                              double dt, int steps, PropagationReport* report = nullptr) {
  if (steps < 0) throw UsageError("propagate: steps must be non-negative");
  if (!psi.all_finite()) throw NumericalRejection("propagate: non-finite wavefunction");
  if (steps == 0) return psi;
  SplitStepPropagator prop(psi.grid(), potential, c, dt);
  if (report) *report = prop.report();
  ComplexField out = psi;
  for (int s = 0; s < steps; ++s) prop.step(out);
  return out;
}

/// Propagates and keeps every `stride`-th state, starting with psi0.
inline std::vector<ComplexField> propagate_series(const ComplexField& psi0, const PotentialSpec& potential,
                                                  const PhysicalConstants& c, double dt, int steps, int stride,
                                                  PropagationReport* report = nullptr) {
  if (stride < 1) throw UsageError("propagate: snapshot stride must be >= 1");
  std::vector<ComplexField> out{psi0};
  if (steps == 0) return out;
  SplitStepPropagator prop(psi0.grid(), potential, c, dt);
  if (report) *report = prop.report();
  ComplexField psi = psi0;
  for (int s = 1; s <= steps; ++s) {
    prop.step(psi);
    psi.set_time(psi0.time() + s * dt);
    if (s % stride == 0) out.push_back(psi);
  }
  return out;
}

/// <psi|H|psi> with the kinetic part evaluated spectrally.
inline double energy(const ComplexField& psi, const PotentialSpec& potential, const PhysicalConstants& c) {
  const GridSpec& g = psi.grid();
  ComplexField spec = psi;
  detail::fft_nd(spec, true);
  const auto k2 = detail::k_squared(g);
  double kin = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) kin += k2[i] * std::norm(spec[i]);
  // Parseval: sum |psi|^2 = sum |psi_hat|^2 / N.
  kin *= c.hbar * c.hbar / (2.0 * c.mass) * g.cell_volume() / static_cast<double>(g.size());
  const ScalarField u = potential.sample(g, c.mass);
  double pot = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) pot += u[i] * std::norm(psi[i]);
  return kin + pot * g.cell_volume();
}

/// <phi|psi>.
inline std::complex<double> overlap(const ComplexField& phi, const ComplexField& psi) {
  std::complex<double> s{};
  for (std::size_t i = 0; i < psi.size(); ++i) s += std::conj(phi[i]) * psi[i];
  return s * quadrature_weight(psi.grid());
}

}  // namespace madkin
