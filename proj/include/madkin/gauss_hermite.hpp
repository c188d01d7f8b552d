#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace madkin {

/// Nodes and weights for int e^{-x^2} h(x) dx (physicists' Hermite), from
/// Newton iteration on the orthonormal three-term recurrence.
struct GaussHermite {
  std::vector<double> x, w;

  explicit GaussHermite(int n = 32) {
    if (n < 1 || n > 200) throw std::invalid_argument("gauss-hermite: order out of range");
    x.resize(static_cast<std::size_t>(n));
    w.resize(static_cast<std::size_t>(n));
    const double pim4 = std::pow(M_PI, -0.25);
    const int m = (n + 1) / 2;
    double z = 0.0;
    for (int i = 0; i < m; ++i) {
      if (i == 0)
        z = std::sqrt(2.0 * n + 1) - 1.85575 * std::pow(2.0 * n + 1, -0.16667);
      else if (i == 1)
        z -= 1.14 * std::pow(static_cast<double>(n), 0.426) / z;
      else if (i == 2)
        z = 1.86 * z - 0.86 * x[0];
      else if (i == 3)
        z = 1.91 * z - 0.91 * x[1];
      else
        z = 2.0 * z - x[static_cast<std::size_t>(i - 2)];
      double pp = 0.0;
      for (int it = 0; it < 100; ++it) {
        double p1 = pim4, p2 = 0.0;
        for (int j = 0; j < n; ++j) {
          const double p3 = p2;
          p2 = p1;
          p1 = z * std::sqrt(2.0 / (j + 1)) * p2 - std::sqrt(static_cast<double>(j) / (j + 1)) * p3;
        }
        pp = std::sqrt(2.0 * n) * p2;
        const double dz = p1 / pp;
        z -= dz;
        if (std::abs(dz) < 1e-15 * std::max(1.0, std::abs(z))) break;
      }
      x[static_cast<std::size_t>(i)] = z;
      x[static_cast<std::size_t>(n - 1 - i)] = -z;
      w[static_cast<std::size_t>(i)] = 2.0 / (pp * pp);
      w[static_cast<std::size_t>(n - 1 - i)] = w[static_cast<std::size_t>(i)];
    }
  }

  int size() const { return static_cast<int>(x.size()); }
};

/// Tensor-product rule in d <= 3 dimensions: calls fn(node, weight) with
/// node = standardised coordinates.
template <class Fn>
void for_each_hermite_node(const GaussHermite& gh, int d, Fn&& fn) {
  const int n = gh.size();
  const int n1 = d > 1 ? n : 1, n2 = d > 2 ? n : 1;
  std::array<double, 3> z{0.0, 0.0, 0.0};
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n1; ++b)
      for (int c = 0; c < n2; ++c) {
        z[0] = gh.x[a];
        double w = gh.w[a];
        if (d > 1) {
          z[1] = gh.x[b];
          w *= gh.w[b];
        }
        if (d > 2) {
          z[2] = gh.x[c];
          w *= gh.w[c];
        }
        fn(z, w);
      }
}

}  // namespace madkin
