#pragma once

// Field snapshot file (little-endian):
//   char[6]  "MKFLD1"
//   int32    dim
//   int32    n[dim]
//   float64  lower[dim], upper[dim]
//   uint8    periodic[dim]
//   float64  time
//   int32    component count C
//   then C blocks of prod(n) float64 values, each block row-major with
//   axis 0 slowest. Complex fields are stored as two components (re, im).
//
// An optional channel-name table follows the data when written through
// write_channels(): int32 count, then per channel int32 length + bytes.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "madkin/grid.hpp"

namespace madkin::io {

static_assert(std::endian::native == std::endian::little, "snapshot I/O assumes a little-endian host");

inline constexpr char kFieldMagic[6] = {'M', 'K', 'F', 'L', 'D', '1'};

struct FieldBundle {
  GridSpec grid;
  double time = 0.0;
  std::vector<std::string> names;
  std::vector<std::vector<double>> channels;
};

namespace detail {
template <class T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw UsageError("snapshot: truncated file");
  return v;
}
}  // namespace detail

inline void write_bundle(std::ostream& os, const FieldBundle& b) {
  using detail::put;
  os.write(kFieldMagic, 6);
  const GridSpec& g = b.grid;
  put<std::int32_t>(os, g.dim);
  for (int k = 0; k < g.dim; ++k) put<std::int32_t>(os, g.n[k]);
  for (int k = 0; k < g.dim; ++k) put<double>(os, g.lower[k]);
  for (int k = 0; k < g.dim; ++k) put<double>(os, g.upper[k]);
  for (int k = 0; k < g.dim; ++k) put<std::uint8_t>(os, g.periodic[k] ? 1 : 0);
  put<double>(os, b.time);
  put<std::int32_t>(os, static_cast<std::int32_t>(b.channels.size()));
  for (const auto& c : b.channels) {
    if (c.size() != g.size()) throw UsageError("snapshot: channel size does not match grid");
    os.write(reinterpret_cast<const char*>(c.data()), static_cast<std::streamsize>(c.size() * sizeof(double)));
  }
  put<std::int32_t>(os, static_cast<std::int32_t>(b.names.size()));
  for (const auto& nm : b.names) {
    put<std::int32_t>(os, static_cast<std::int32_t>(nm.size()));
    os.write(nm.data(), static_cast<std::streamsize>(nm.size()));
  }
}

inline FieldBundle read_bundle(std::istream& is) {
  using detail::get;
  char magic[6];
  is.read(magic, 6);
  if (!is || std::memcmp(magic, kFieldMagic, 6) != 0) throw UsageError("snapshot: bad magic (expected MKFLD1)");
  FieldBundle b;
  GridSpec& g = b.grid;
  g.dim = get<std::int32_t>(is);
  if (g.dim < 1 || g.dim > kMaxDim) throw UsageError("snapshot: bad dimension");
  for (int k = 0; k < g.dim; ++k) g.n[k] = get<std::int32_t>(is);
  for (int k = 0; k < g.dim; ++k) g.lower[k] = get<double>(is);
  for (int k = 0; k < g.dim; ++k) g.upper[k] = get<double>(is);
  for (int k = 0; k < g.dim; ++k) g.periodic[k] = get<std::uint8_t>(is) != 0;
  g.validate();
  b.time = get<double>(is);
  const auto count = get<std::int32_t>(is);
  if (count < 0 || count > 4096) throw UsageError("snapshot: bad component count");
  b.channels.assign(static_cast<std::size_t>(count), std::vector<double>(g.size()));
  for (auto& c : b.channels) {
    is.read(reinterpret_cast<char*>(c.data()), static_cast<std::streamsize>(c.size() * sizeof(double)));
    if (!is) throw UsageError("snapshot: truncated data");
  }
  // Name table is optional.
  std::int32_t nnames = 0;
  if (is.peek() != std::char_traits<char>::eof()) nnames = get<std::int32_t>(is);
  for (std::int32_t i = 0; i < nnames; ++i) {
    const auto len = get<std::int32_t>(is);
    std::string nm(static_cast<std::size_t>(len), '\0');
    is.read(nm.data(), len);
    b.names.push_back(std::move(nm));
  }
  return b;
}

inline void save_bundle(const std::string& path, const FieldBundle& b) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw UsageError("cannot open " + path + " for writing");
  write_bundle(os, b);
}

inline FieldBundle load_bundle(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw UsageError("snapshot not found: " + path);
  return read_bundle(is);
}

inline FieldBundle bundle_of(const ScalarField& f, const std::string& name = "value") {
  return FieldBundle{f.grid(), f.time(), {name}, {f.values()}};
}

inline FieldBundle bundle_of(const ComplexField& psi) {
  FieldBundle b{psi.grid(), psi.time(), {"re", "im"}, {}};
  std::vector<double> re(psi.size()), im(psi.size());
  for (std::size_t i = 0; i < psi.size(); ++i) {
    re[i] = psi[i].real();
    im[i] = psi[i].imag();
  }
  b.channels = {std::move(re), std::move(im)};
  return b;
}

inline ScalarField scalar_from(const FieldBundle& b, std::size_t channel = 0) {
  if (channel >= b.channels.size()) throw UsageError("snapshot: missing channel");
  return ScalarField(b.grid, b.channels[channel], b.time);
}

inline ComplexField complex_from(const FieldBundle& b) {
  if (b.channels.size() != 2) throw UsageError("snapshot: complex field needs exactly 2 components");
  ComplexField psi(b.grid, b.time);
  for (std::size_t i = 0; i < psi.size(); ++i) psi[i] = {b.channels[0][i], b.channels[1][i]};
  return psi;
}

/// CSV with columns x1..xd followed by one column per channel.
inline void write_csv(std::ostream& os, const FieldBundle& b) {
  const GridSpec& g = b.grid;
  for (int k = 0; k < g.dim; ++k) os << (k ? "," : "") << 'x' << (k + 1);
  for (std::size_t c = 0; c < b.channels.size(); ++c)
    os << ',' << (c < b.names.size() ? b.names[c] : "value" + std::to_string(c + 1));
  os << '\n' << std::setprecision(17);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto r = g.position(i);
    for (int k = 0; k < g.dim; ++k) os << (k ? "," : "") << r[k];
    for (const auto& c : b.channels) os << ',' << c[i];
    os << '\n';
  }
}

}  // namespace madkin::io
