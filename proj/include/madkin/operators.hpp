#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <string>
#include <vector>

#include "madkin/fft.hpp"
#include "madkin/grid.hpp"

namespace madkin {

namespace detail {

template <class T>
void require_finite_any(const Field<T>& f, const char* what) {
  if (!f.all_finite()) throw NumericalRejection(std::string(what) + ": non-finite input field");
}

/// Visit every 1-D line of the grid along `axis`, handing the callback the
/// flat index of the line's first node and the stride between nodes.
template <class Fn>
void for_each_line(const GridSpec& g, int axis, Fn&& fn) {
  const std::size_t stride = g.stride(axis);
  const std::size_t len = static_cast<std::size_t>(g.nodes(axis));
  const std::size_t total = g.size();
  const std::size_t block = stride * len;
  for (std::size_t outer = 0; outer < total; outer += block)
    for (std::size_t inner = 0; inner < stride; ++inner) fn(outer + inner, stride);
}

template <class T>
void spectral_line(std::vector<std::complex<double>>& buf, std::vector<std::complex<double>>& spec, int order,
                   double length) {
  const int n = static_cast<int>(buf.size());
  fft_forward(buf, spec);
  const std::complex<double> I(0.0, 1.0);
  for (int j = 0; j < n; ++j) {
    const double k = wavenumber(j, n, length);
    if (order == 1) {
      spec[static_cast<std::size_t>(j)] *= (2 * j == n) ? std::complex<double>(0.0) : I * k;
    } else {
      spec[static_cast<std::size_t>(j)] *= -k * k;
    }
  }
  fft_backward(spec, buf);
}

/// Fourth-order central stencils with one-sided closures on the two nodes
/// nearest each end.
template <class T>
void fd4_line(const std::vector<T>& in, std::vector<T>& out, int order, double h) {
  const int n = static_cast<int>(in.size());
  auto f = [&](int i) { return in[static_cast<std::size_t>(i)]; };
  if (order == 1) {
    const double c = 1.0 / (12.0 * h);
    for (int i = 2; i < n - 2; ++i) out[i] = c * (-f(i + 2) + 8.0 * f(i + 1) - 8.0 * f(i - 1) + f(i - 2));
    out[0] = c * (-25.0 * f(0) + 48.0 * f(1) - 36.0 * f(2) + 16.0 * f(3) - 3.0 * f(4));
    out[1] = c * (-3.0 * f(0) - 10.0 * f(1) + 18.0 * f(2) - 6.0 * f(3) + f(4));
    out[n - 1] = -c * (-25.0 * f(n - 1) + 48.0 * f(n - 2) - 36.0 * f(n - 3) + 16.0 * f(n - 4) - 3.0 * f(n - 5));
    out[n - 2] = -c * (-3.0 * f(n - 1) - 10.0 * f(n - 2) + 18.0 * f(n - 3) - 6.0 * f(n - 4) + f(n - 5));
  } else {
    const double c = 1.0 / (12.0 * h * h);
    for (int i = 2; i < n - 2; ++i)
      out[i] = c * (-f(i + 2) + 16.0 * f(i + 1) - 30.0 * f(i) + 16.0 * f(i - 1) - f(i - 2));
    out[0] = c * (45.0 * f(0) - 154.0 * f(1) + 214.0 * f(2) - 156.0 * f(3) + 61.0 * f(4) - 10.0 * f(5));
    out[1] = c * (10.0 * f(0) - 15.0 * f(1) - 4.0 * f(2) + 14.0 * f(3) - 6.0 * f(4) + f(5));
    out[n - 1] =
        c * (45.0 * f(n - 1) - 154.0 * f(n - 2) + 214.0 * f(n - 3) - 156.0 * f(n - 4) + 61.0 * f(n - 5) - 10.0 * f(n - 6));
    out[n - 2] = c * (10.0 * f(n - 1) - 15.0 * f(n - 2) - 4.0 * f(n - 3) + 14.0 * f(n - 4) - 6.0 * f(n - 5) + f(n - 6));
  }
}

inline double real_part(double v) { return v; }
inline double real_part(std::complex<double> v) { return v.real(); }

}  // namespace detail

/// d/dx_axis (order 1) or d^2/dx_axis^2 (order 2). Spectral on periodic axes,
/// fourth-order finite differences on bounded ones.
template <class T>
Field<T> derivative(const Field<T>& field, int axis, int order = 1) {
  const GridSpec& g = field.grid();
  if (axis < 0 || axis >= g.dim) throw UsageError("derivative: axis out of range");
  if (order != 1 && order != 2) throw UsageError("derivative: order must be 1 or 2");
  detail::require_finite_any(field, "derivative");

  Field<T> out(g, field.time());
  const int len = g.nodes(axis);
  if (g.periodic[axis]) {
    std::vector<std::complex<double>> buf(static_cast<std::size_t>(len)), spec(static_cast<std::size_t>(len));
    // Real and imaginary parts go through separate transforms so that a
    // purely real input yields an exactly real derivative.
    detail::for_each_line(g, axis, [&](std::size_t start, std::size_t stride) {
      for (int i = 0; i < len; ++i) buf[i] = detail::real_part(field[start + i * stride]);
      detail::spectral_line<T>(buf, spec, order, g.length(axis));
      for (int i = 0; i < len; ++i) out[start + i * stride] = buf[i].real();
      if constexpr (!std::is_same_v<T, double>) {
        bool any_imag = false;
        for (int i = 0; i < len; ++i) {
          buf[i] = field[start + i * stride].imag();
          any_imag = any_imag || buf[i].real() != 0.0;
        }
        if (any_imag) {
          detail::spectral_line<T>(buf, spec, order, g.length(axis));
          for (int i = 0; i < len; ++i) out[start + i * stride] += std::complex<double>(0.0, buf[i].real());
        }
      }
    });
  } else {
    std::vector<T> in(static_cast<std::size_t>(len)), res(static_cast<std::size_t>(len));
    detail::for_each_line(g, axis, [&](std::size_t start, std::size_t stride) {
      for (int i = 0; i < len; ++i) in[i] = field[start + i * stride];
      detail::fd4_line(in, res, order, g.spacing(axis));
      for (int i = 0; i < len; ++i) out[start + i * stride] = res[i];
    });
  }
  if (!out.all_finite()) throw NumericalRejection("derivative: produced non-finite values");
  return out;
}

inline VectorField gradient(const ScalarField& field) {
  require_finite(field, "gradient");
  VectorField g;
  g.comp.reserve(static_cast<std::size_t>(field.grid().dim));
  for (int k = 0; k < field.grid().dim; ++k) g.comp.push_back(derivative(field, k, 1));
  return g;
}

inline ScalarField laplacian(const ScalarField& field) {
  require_finite(field, "laplacian");
  ScalarField out(field.grid(), field.time());
  for (int k = 0; k < field.grid().dim; ++k) out += derivative(field, k, 2);
  return out;
}

inline ScalarField divergence(const VectorField& v) {
  ScalarField out(v.grid(), v.time());
  for (int k = 0; k < v.dim(); ++k) out += derivative(v[k], k, 1);
  return out;
}

/// Quadrature weight of a node: rectangle rule on periodic axes, midpoint
/// rule on bounded (cell-centred) axes; both are h per node.
inline double quadrature_weight(const GridSpec& g) { return g.cell_volume(); }

template <class T>
T integrate(const Field<T>& field) {
  detail::require_finite_any(field, "integrate");
  T sum{};
  for (const auto& v : field.values()) sum += v;
  return sum * quadrature_weight(field.grid());
}

/// Integrate a pointwise product without materialising it.
inline double integrate_product(const ScalarField& a, const ScalarField& b) {
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sum += a[i] * b[i];
  return sum * quadrature_weight(a.grid());
}

inline double max_abs(const ScalarField& f) {
  double m = 0.0;
  for (double v : f.values()) m = std::max(m, std::abs(v));
  return m;
}

/// Four-point Lagrange stencil per axis for evaluating a grid field at an
/// arbitrary position (fourth-order accurate).
struct Stencil {
  int dim = 1;
  std::array<std::array<int, 4>, kMaxDim> idx{};
  std::array<std::array<double, 4>, kMaxDim> w{};

  /// Returns false if the point lies outside a bounded axis.
  static bool build(const GridSpec& g, const Point& r, Stencil& s) {
    s.dim = g.dim;
    for (int k = 0; k < g.dim; ++k) {
      const double h = g.spacing(k);
      const int n = g.nodes(k);
      double xi = (r[k] - g.lower[k]) / h;
      if (!g.periodic[k]) {
        xi -= 0.5;
        if (xi < -0.5 || xi > n - 0.5) return false;
      }
      int base = static_cast<int>(std::floor(xi)) - 1;
      if (!g.periodic[k]) base = std::clamp(base, 0, n - 4);
      const double t = xi - base;  // in local coordinates nodes sit at 0,1,2,3
      const double t0 = t, t1 = t - 1.0, t2 = t - 2.0, t3 = t - 3.0;
      s.w[k] = {-t1 * t2 * t3 / 6.0, t0 * t2 * t3 / 2.0, -t0 * t1 * t3 / 2.0, t0 * t1 * t2 / 6.0};
      for (int j = 0; j < 4; ++j) {
        int ii = base + j;
        if (g.periodic[k] && (ii < 0 || ii >= n)) ii = ((ii % n) + n) % n;
        s.idx[k][j] = ii;
      }
    }
    for (int k = g.dim; k < kMaxDim; ++k) {
      s.idx[k] = {0, 0, 0, 0};
      s.w[k] = {1.0, 0.0, 0.0, 0.0};
    }
    return true;
  }

  template <class T>
  T apply(const Field<T>& f) const {
    const GridSpec& g = f.grid();
    const int n1 = dim > 1 ? 4 : 1;
    const int n2 = dim > 2 ? 4 : 1;
    const std::size_t s0 = g.stride(0);
    const std::size_t s1 = dim > 1 ? g.stride(1) : 0;
    T acc{};
    for (int a = 0; a < 4; ++a) {
      const std::size_t ia = static_cast<std::size_t>(idx[0][a]) * s0;
      for (int b = 0; b < n1; ++b) {
        const std::size_t ib = ia + static_cast<std::size_t>(idx[1][b]) * s1;
        const double wab = w[0][a] * w[1][b];
        for (int c = 0; c < n2; ++c) acc += wab * w[2][c] * f[ib + static_cast<std::size_t>(idx[2][c])];
      }
    }
    return acc;
  }
};

/// Fourth-order interpolation of a field at r. Throws if r is outside a
/// bounded axis.
template <class T>
T interpolate(const Field<T>& f, const Point& r) {
  Stencil s;
  if (!Stencil::build(f.grid(), r, s)) throw NumericalRejection("interpolate: point outside the grid");
  return s.apply(f);
}

}  // namespace madkin
