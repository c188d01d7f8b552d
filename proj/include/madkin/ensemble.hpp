#pragma once

// Weighted phase-space samples and the kernel-density machinery shared by
// moment estimation and deposition.
//
// Checkpoint file (little-endian):
//   char[6] "MKENS1", uint64 N, int32 d, float64 time, uint64 seed,
//   then N records of: float64 r[d], float64 v[d], float64 weight,
//   float64 logJ, uint8 alive, uint8 flags.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "madkin/grid.hpp"
#include "madkin/parallel.hpp"

namespace madkin {

using Vec = std::array<double, kMaxDim>;

struct ParticleEnsemble {
  int dim = 1;
  double time = 0.0;
  std::uint64_t seed = 0;
  std::vector<Point> r;
  std::vector<Vec> v;
  std::vector<double> weight;
  std::vector<double> logJ;
  std::vector<std::uint8_t> alive;
  std::vector<std::uint8_t> flags;  // bit 0: left in place at a wall with zero relative speed

  static constexpr std::uint8_t kStuckAtWall = 1;

  std::size_t size() const { return r.size(); }

  void resize(std::size_t n) {
    r.assign(n, Point{0.0, 0.0, 0.0});
    v.assign(n, Vec{0.0, 0.0, 0.0});
    weight.assign(n, 0.0);
    logJ.assign(n, 0.0);
    alive.assign(n, 1);
    flags.assign(n, 0);
  }

  std::size_t alive_count() const {
    return static_cast<std::size_t>(std::count(alive.begin(), alive.end(), std::uint8_t{1}));
  }

  double alive_mass() const {
    return chunked_sum(size(), [&](std::size_t i) { return alive[i] ? weight[i] : 0.0; });
  }

  friend bool operator==(const ParticleEnsemble&, const ParticleEnsemble&) = default;
};

namespace io {

inline constexpr char kEnsembleMagic[6] = {'M', 'K', 'E', 'N', 'S', '1'};

inline void write_ensemble(std::ostream& os, const ParticleEnsemble& e) {
  auto put = [&](const auto& x) { os.write(reinterpret_cast<const char*>(&x), sizeof(x)); };
  os.write(kEnsembleMagic, 6);
  put(static_cast<std::uint64_t>(e.size()));
  put(static_cast<std::int32_t>(e.dim));
  put(e.time);
  put(e.seed);
  for (std::size_t i = 0; i < e.size(); ++i) {
    for (int k = 0; k < e.dim; ++k) put(e.r[i][k]);
    for (int k = 0; k < e.dim; ++k) put(e.v[i][k]);
    put(e.weight[i]);
    put(e.logJ[i]);
    put(e.alive[i]);
    put(e.flags[i]);
  }
}

inline ParticleEnsemble read_ensemble(std::istream& is) {
  auto get = [&](auto& x) {
    is.read(reinterpret_cast<char*>(&x), sizeof(x));
    if (!is) throw UsageError("ensemble checkpoint: truncated file");
  };
  char magic[6];
  is.read(magic, 6);
  if (!is || std::memcmp(magic, kEnsembleMagic, 6) != 0) throw UsageError("ensemble checkpoint: bad magic (expected MKENS1)");
  std::uint64_t n = 0;
  std::int32_t d = 0;
  ParticleEnsemble e;
  get(n);
  get(d);
  if (d < 1 || d > kMaxDim) throw UsageError("ensemble checkpoint: bad dimension");
  e.dim = d;
  get(e.time);
  get(e.seed);
  e.resize(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < e.size(); ++i) {
    for (int k = 0; k < d; ++k) get(e.r[i][k]);
    for (int k = 0; k < d; ++k) get(e.v[i][k]);
    get(e.weight[i]);
    get(e.logJ[i]);
    get(e.alive[i]);
    get(e.flags[i]);
  }
  return e;
}

inline void save_ensemble(const std::string& path, const ParticleEnsemble& e) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw UsageError("cannot open " + path + " for writing");
  write_ensemble(os, e);
}

inline ParticleEnsemble load_ensemble(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw UsageError("ensemble checkpoint not found: " + path);
  return read_ensemble(is);
}

}  // namespace io

// --- kernel density estimation ----------------------------------------------

/// Per-axis Silverman bandwidth from the weighted position spread of alive
/// particles.
inline std::array<double, kMaxDim> silverman_bandwidth(const ParticleEnsemble& e) {
  std::array<double, kMaxDim> bw{0.0, 0.0, 0.0};
  double sw = 0.0, sw2 = 0.0;
  Point mean{0.0, 0.0, 0.0};
  for (std::size_t i = 0; i < e.size(); ++i) {
    if (!e.alive[i]) continue;
    sw += e.weight[i];
    sw2 += e.weight[i] * e.weight[i];
    for (int k = 0; k < e.dim; ++k) mean[k] += e.weight[i] * e.r[i][k];
  }
  if (!(sw > 0.0)) throw NumericalRejection("bandwidth: no alive particles with positive weight");
  for (int k = 0; k < e.dim; ++k) mean[k] /= sw;
  std::array<double, kMaxDim> var{0.0, 0.0, 0.0};
  for (std::size_t i = 0; i < e.size(); ++i) {
    if (!e.alive[i]) continue;
    for (int k = 0; k < e.dim; ++k) var[k] += e.weight[i] * (e.r[i][k] - mean[k]) * (e.r[i][k] - mean[k]);
  }
  const double neff = sw * sw / sw2;
  const double d = e.dim;
  const double factor = std::pow(4.0 / ((d + 2.0) * neff), 1.0 / (d + 4.0));
  for (int k = 0; k < e.dim; ++k) bw[k] = std::sqrt(var[k] / sw) * factor;
  return bw;
}

/// Discrete Gaussian kernel weights of one particle on the grid, normalised
/// so that sum(weights) * cell_volume = 1. Truncated at 6 bandwidths.
class KernelFootprint {
 public:
  KernelFootprint(const GridSpec& g, const std::array<double, kMaxDim>& bw) : g_(g), bw_(bw) {
    for (int k = 0; k < g.dim; ++k)
      if (!(bw[k] > 0.0)) throw UsageError("kernel: bandwidth must be positive");
  }

  /// Fills idx/w with the flat node indices and weights (already divided by
  /// the cell volume). Returns false if the particle has no support on the grid.
  bool build(const Point& r, std::vector<std::size_t>& idx, std::vector<double>& w) const {
    idx.clear();
    w.clear();
    std::array<std::vector<int>, kMaxDim> ai;
    std::array<std::vector<double>, kMaxDim> aw;
    for (int k = 0; k < g_.dim; ++k) {
      const double h = g_.spacing(k);
      const int n = g_.nodes(k);
      const double reach = 6.0 * bw_[k];
      const double off = g_.periodic[k] ? 0.0 : 0.5;
      const int lo = static_cast<int>(std::floor((r[k] - reach - g_.lower[k]) / h - off));
      const int hi = static_cast<int>(std::ceil((r[k] + reach - g_.lower[k]) / h - off));
      double sum = 0.0;
      for (int j = lo; j <= hi; ++j) {
        int jj = j;
        if (g_.periodic[k]) {
          if (hi - lo + 1 > n) throw UsageError("kernel: bandwidth wider than the periodic box");
          jj = ((j % n) + n) % n;
        } else if (j < 0 || j >= n) {
          continue;
        }
        const double x = g_.lower[k] + (j + off) * h;
        const double z = (x - r[k]) / bw_[k];
        const double wk = std::exp(-0.5 * z * z);
        if (wk == 0.0) continue;
        ai[k].push_back(jj);
        aw[k].push_back(wk);
        sum += wk;
      }
      if (!(sum > 0.0)) return false;
      for (auto& x : aw[k]) x /= sum * h;
    }
    for (int k = g_.dim; k < kMaxDim; ++k) {
      ai[k] = {0};
      aw[k] = {1.0};
    }
    const std::size_t s0 = g_.stride(0), s1 = g_.dim > 1 ? g_.stride(1) : 0;
    for (std::size_t a = 0; a < ai[0].size(); ++a)
      for (std::size_t b = 0; b < ai[1].size(); ++b)
        for (std::size_t c = 0; c < ai[2].size(); ++c) {
          idx.push_back(static_cast<std::size_t>(ai[0][a]) * s0 + static_cast<std::size_t>(ai[1][b]) * s1 +
                        static_cast<std::size_t>(ai[2][c]));
          w.push_back(aw[0][a] * aw[1][b] * aw[2][c]);
        }
    return true;
  }

 private:
  GridSpec g_;
  std::array<double, kMaxDim> bw_;
};

/// Fixed number of accumulation partitions; results do not depend on the
/// thread count.
inline constexpr std::size_t kDepositPartitions = 16;

/// Deposits `channels` per-particle values on the grid with the kernel:
/// out[c][node] = sum_p weight_p * K(node - r_p) * value(p, c). Also returns
/// the sum of squared kernel weights (for effective counts) in out[channels],
/// and with `squares` also sum (weight_p K)^2 value(p, c) in out[channels+1+c].
/// `value(p, vals)` fills vals[0..channels) and returns false to skip p.
template <class ValueFn>
std::vector<std::vector<double>> kde_accumulate(const ParticleEnsemble& e, const GridSpec& g,
                                                const std::array<double, kMaxDim>& bw, int channels,
                                                ValueFn&& value, bool squares = false) {
  const KernelFootprint kern(g, bw);
  const std::size_t n = e.size();
  const std::size_t P = kDepositPartitions;
  std::vector<std::vector<std::vector<double>>> part(
      P, std::vector<std::vector<double>>(static_cast<std::size_t>(squares ? 2 * channels + 1 : channels + 1),
                                          std::vector<double>(g.size(), 0.0)));
#pragma omp parallel for schedule(static, 1) num_threads(thread_cap())
  for (std::size_t p = 0; p < P; ++p) {
    const std::size_t b = n * p / P, en = n * (p + 1) / P;
    std::vector<std::size_t> idx;
    std::vector<double> w;
    std::vector<double> vals(static_cast<std::size_t>(channels));
    auto& acc = part[p];
    for (std::size_t i = b; i < en; ++i) {
      if (!e.alive[i] || e.weight[i] == 0.0) continue;
      if (!value(i, vals)) continue;
      if (!kern.build(e.r[i], idx, w)) continue;
      for (std::size_t j = 0; j < idx.size(); ++j) {
        const double kw = e.weight[i] * w[j];
        for (int c = 0; c < channels; ++c) acc[static_cast<std::size_t>(c)][idx[j]] += kw * vals[static_cast<std::size_t>(c)];
        acc[static_cast<std::size_t>(channels)][idx[j]] += kw * kw;
        if (squares)
          for (int c = 0; c < channels; ++c)
            acc[static_cast<std::size_t>(channels + 1 + c)][idx[j]] += kw * kw * vals[static_cast<std::size_t>(c)];
      }
    }
  }
  auto out = std::move(part[0]);
  for (std::size_t p = 1; p < P; ++p)
    for (std::size_t c = 0; c < out.size(); ++c)
      for (std::size_t i = 0; i < g.size(); ++i) out[c][i] += part[p][c][i];
  return out;
}

}  // namespace madkin
