#pragma once

#include <array>
#include <cmath>
#include <complex>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "madkin/error.hpp"

namespace madkin {

inline constexpr int kMaxDim = 3;

/// Rectangular grid with n[k] nodes per axis and spacing h = (upper-lower)/n.
/// Periodic axes put node i at lower + i*h (node n wraps to node 0); bounded
/// axes put it at the cell centre lower + (i+1/2)*h.
struct GridSpec {
  int dim = 1;
  std::array<double, kMaxDim> lower{0.0, 0.0, 0.0};
  std::array<double, kMaxDim> upper{1.0, 1.0, 1.0};
  std::array<int, kMaxDim> n{8, 1, 1};
  std::array<bool, kMaxDim> periodic{true, true, true};

  static GridSpec periodic_box(int dim, double lo, double hi, int cells) {
    GridSpec g;
    g.dim = dim;
    for (int k = 0; k < dim; ++k) {
      g.lower[k] = lo;
      g.upper[k] = hi;
      g.n[k] = cells;
      g.periodic[k] = true;
    }
    g.validate();
    return g;
  }

  static GridSpec bounded_box(int dim, double lo, double hi, int cells) {
    GridSpec g = periodic_box(dim, lo, hi, cells);
    for (int k = 0; k < dim; ++k) g.periodic[k] = false;
    return g;
  }

  void validate() const {
    if (dim < 1 || dim > kMaxDim) throw UsageError("grid: dim must be 1, 2 or 3");
    for (int k = 0; k < dim; ++k) {
      if (n[k] < 8) throw UsageError("grid: n[" + std::to_string(k) + "] must be >= 8");
      if (!(upper[k] > lower[k])) throw UsageError("grid: upper must exceed lower on axis " + std::to_string(k));
    }
  }

  double spacing(int axis) const { return (upper[axis] - lower[axis]) / n[axis]; }
  double length(int axis) const { return upper[axis] - lower[axis]; }

  /// Number of stored nodes along an axis.
  int nodes(int axis) const {
    if (axis >= dim) return 1;
    return n[axis];
  }

  std::size_t size() const {
    std::size_t s = 1;
    for (int k = 0; k < dim; ++k) s *= static_cast<std::size_t>(nodes(k));
    return s;
  }

  double coord(int axis, int i) const {
    return lower[axis] + (periodic[axis] ? i : i + 0.5) * spacing(axis);
  }

  /// Row-major, axis 0 slowest.
  std::size_t stride(int axis) const {
    std::size_t s = 1;
    for (int k = dim - 1; k > axis; --k) s *= static_cast<std::size_t>(nodes(k));
    return s;
  }

  std::array<int, kMaxDim> unflatten(std::size_t idx) const {
    std::array<int, kMaxDim> ijk{0, 0, 0};
    for (int k = dim - 1; k >= 0; --k) {
      ijk[k] = static_cast<int>(idx % nodes(k));
      idx /= nodes(k);
    }
    return ijk;
  }

  std::size_t flatten(const std::array<int, kMaxDim>& ijk) const {
    std::size_t idx = 0;
    for (int k = 0; k < dim; ++k) idx = idx * nodes(k) + ijk[k];
    return idx;
  }

  std::array<double, kMaxDim> position(std::size_t idx) const {
    auto ijk = unflatten(idx);
    std::array<double, kMaxDim> r{0.0, 0.0, 0.0};
    for (int k = 0; k < dim; ++k) r[k] = coord(k, ijk[k]);
    return r;
  }

  double cell_volume() const {
    double v = 1.0;
    for (int k = 0; k < dim; ++k) v *= spacing(k);
    return v;
  }

  double volume() const {
    double v = 1.0;
    for (int k = 0; k < dim; ++k) v *= length(k);
    return v;
  }

  bool any_periodic() const {
    for (int k = 0; k < dim; ++k)
      if (periodic[k]) return true;
    return false;
  }

  bool all_periodic() const {
    for (int k = 0; k < dim; ++k)
      if (!periodic[k]) return false;
    return true;
  }

  friend bool operator==(const GridSpec& a, const GridSpec& b) {
    if (a.dim != b.dim) return false;
    for (int k = 0; k < a.dim; ++k) {
      if (a.lower[k] != b.lower[k] || a.upper[k] != b.upper[k] || a.n[k] != b.n[k] ||
          a.periodic[k] != b.periodic[k])
        return false;
    }
    return true;
  }
};

using Point = std::array<double, kMaxDim>;

/// A sampled field on a GridSpec at one time instant.
template <class T>
class Field {
 public:
  using value_type = T;

  Field() = default;
  explicit Field(GridSpec grid, double time = 0.0, T fill = T{})
      : grid_(grid), values_(grid.size(), fill), time_(time) {}
  Field(GridSpec grid, std::vector<T> values, double time)
      : grid_(grid), values_(std::move(values)), time_(time) {
    if (values_.size() != grid_.size()) throw UsageError("field: value count does not match grid");
  }

  template <class Fn>
  static Field from_function(const GridSpec& grid, Fn&& fn, double time = 0.0) {
    Field out(grid, time);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fn(grid.position(i));
    return out;
  }

  const GridSpec& grid() const { return grid_; }
  double time() const { return time_; }
  void set_time(double t) { time_ = t; }
  std::size_t size() const { return values_.size(); }

  T& operator[](std::size_t i) { return values_[i]; }
  const T& operator[](std::size_t i) const { return values_[i]; }
  std::vector<T>& values() { return values_; }
  const std::vector<T>& values() const { return values_; }

  bool all_finite() const {
    for (const auto& v : values_) {
      if constexpr (std::is_same_v<T, std::complex<double>>) {
        if (!std::isfinite(v.real()) || !std::isfinite(v.imag())) return false;
      } else {
        if (!std::isfinite(v)) return false;
      }
    }
    return true;
  }

  Field& operator+=(const Field& o) {
    for (std::size_t i = 0; i < size(); ++i) values_[i] += o.values_[i];
    return *this;
  }
  Field& operator-=(const Field& o) {
    for (std::size_t i = 0; i < size(); ++i) values_[i] -= o.values_[i];
    return *this;
  }
  Field& operator*=(double s) {
    for (auto& v : values_) v *= s;
    return *this;
  }
  friend Field operator+(Field a, const Field& b) { return a += b; }
  friend Field operator-(Field a, const Field& b) { return a -= b; }
  friend Field operator*(double s, Field a) { return a *= s; }

 private:
  GridSpec grid_{};
  std::vector<T> values_;
  double time_ = 0.0;
};

using ScalarField = Field<double>;
using ComplexField = Field<std::complex<double>>;

/// d real components on a common grid.
struct VectorField {
  std::vector<ScalarField> comp;

  VectorField() = default;
  explicit VectorField(const GridSpec& grid, double time = 0.0)
      : comp(static_cast<std::size_t>(grid.dim), ScalarField(grid, time)) {}

  int dim() const { return static_cast<int>(comp.size()); }
  const GridSpec& grid() const { return comp.at(0).grid(); }
  double time() const { return comp.at(0).time(); }
  ScalarField& operator[](int k) { return comp[static_cast<std::size_t>(k)]; }
  const ScalarField& operator[](int k) const { return comp[static_cast<std::size_t>(k)]; }

  bool all_finite() const {
    for (const auto& c : comp)
      if (!c.all_finite()) return false;
    return true;
  }
};

inline void require_finite(const ScalarField& f, const char* what) {
  if (!f.all_finite()) throw NumericalRejection(std::string(what) + ": non-finite input field");
}

inline void require_same_grid(const GridSpec& a, const GridSpec& b, const char* what) {
  if (!(a == b)) throw NumericalRejection(std::string(what) + ": grids do not match");
}

}  // namespace madkin
