#pragma once

// Closed-form references used by the tests. Nothing here calls the library's
// differential operators or quadrature.

#include <cmath>
#include <complex>
#include <functional>

namespace oracle {

/// Free Gaussian packet centred at x0 with zero mean momentum.
struct FreeGaussian {
  double hbar = 1.0, mass = 1.0, sigma0 = 1.0, x0 = 0.0;

  double tau(double t) const { return hbar * t / (2.0 * mass * sigma0 * sigma0); }
  double sigma2(double t) const { return sigma0 * sigma0 * (1.0 + tau(t) * tau(t)); }
  double sigma(double t) const { return std::sqrt(sigma2(t)); }
  // sigma'/sigma
  double rate(double t) const {
    const double tt = tau(t);
    return tt / (1.0 + tt * tt) * hbar / (2.0 * mass * sigma0 * sigma0);
  }

  std::complex<double> psi(double x, double t) const {
    const std::complex<double> a(1.0, tau(t));
    const double d = x - x0;
    return std::pow(2.0 * M_PI * sigma0 * sigma0, -0.25) / std::sqrt(a) *
           std::exp(-d * d / (4.0 * sigma0 * sigma0 * a));
  }
  double density(double x, double t) const {
    const double s2 = sigma2(t), d = x - x0;
    return std::exp(-d * d / (2.0 * s2)) / std::sqrt(2.0 * M_PI * s2);
  }
  double velocity(double x, double t) const { return (x - x0) * rate(t); }
  double temperature(double t) const { return hbar * hbar / (4.0 * mass * sigma2(t)); }
  double dlnT_dt(double t) const { return -2.0 * rate(t); }
  // U_qm for U = 0.
  double quantum_potential(double x, double t) const {
    const double s2 = sigma2(t), d = x - x0;
    return hbar * hbar / (4.0 * mass * s2) - hbar * hbar * d * d / (8.0 * mass * s2 * s2);
  }
  double force(double x, double t) const {
    const double s2 = sigma2(t);
    return hbar * hbar * (x - x0) / (4.0 * mass * s2 * s2);
  }
};

/// Composite Simpson rule on [a,b] with an even number of panels.
inline double simpson(const std::function<double(double)>& fn, double a, double b, int panels = 20000) {
  if (panels % 2) ++panels;
  const double h = (b - a) / panels;
  double s = fn(a) + fn(b);
  for (int i = 1; i < panels; ++i) s += fn(a + i * h) * ((i % 2) ? 4.0 : 2.0);
  return s * h / 3.0;
}

/// Generalized Maxwellian of the free Gaussian and its mean-field force,
/// written out directly from the closed-form fluid fields.
struct FreeMaxwellian {
  FreeGaussian fg;

  double g(double x, double v, double t) const {
    const double T = fg.temperature(t), m = fg.mass;
    const double vth2 = 2.0 * T / m;
    const double u = v - fg.velocity(x, t);
    return fg.density(x, t) / std::sqrt(M_PI * vth2) * std::exp(-u * u / vth2);
  }
  double force(double x, double v, double t) const {
    const double m = fg.mass, T = fg.temperature(t);
    const double u = v - fg.velocity(x, t);
    const double dlnf = -(x - fg.x0) / fg.sigma2(t);
    return fg.force(x, t) + T * dlnf + m * u * fg.rate(t) + 0.5 * m * u * fg.dlnT_dt(t);
  }
  /// dg/dt + v dg/dx + d/dv (K g / m) by central differences.
  double vlasov_residual(double x, double v, double t, double h = 1e-4) const {
    const double m = fg.mass;
    auto Kg = [&](double vv) { return force(x, vv, t) * g(x, vv, t) / m; };
    return (g(x, v, t + h) - g(x, v, t - h)) / (2 * h) + v * (g(x + h, v, t) - g(x - h, v, t)) / (2 * h) +
           (Kg(v + h) - Kg(v - h)) / (2 * h);
  }
};

}  // namespace oracle
