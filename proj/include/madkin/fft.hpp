#pragma once

#include <fftw3.h>

#include <complex>
#include <map>
#include <memory>
#include <mutex>
#include <vector>

namespace madkin::detail {

/// Cached 1-D complex FFTW plans keyed by length. Plans are created with
/// FFTW_UNALIGNED so they can run on any std::complex<double> buffer, and
/// FFTW's planner is only entered under a mutex.
class LinePlans {
 public:
  struct Pair {
    fftw_plan fwd = nullptr;
    fftw_plan bwd = nullptr;
    ~Pair() {
      if (fwd) fftw_destroy_plan(fwd);
      if (bwd) fftw_destroy_plan(bwd);
    }
  };

  static const Pair& get(int n) {
    static LinePlans inst;
    std::lock_guard lock(inst.mu_);
    auto it = inst.plans_.find(n);
    if (it != inst.plans_.end()) return *it->second;
    auto p = std::make_unique<Pair>();
    std::vector<std::complex<double>> a(static_cast<std::size_t>(n)), b(static_cast<std::size_t>(n));
    auto* in = reinterpret_cast<fftw_complex*>(a.data());
    auto* out = reinterpret_cast<fftw_complex*>(b.data());
    p->fwd = fftw_plan_dft_1d(n, in, out, FFTW_FORWARD, FFTW_ESTIMATE | FFTW_UNALIGNED);
    p->bwd = fftw_plan_dft_1d(n, in, out, FFTW_BACKWARD, FFTW_ESTIMATE | FFTW_UNALIGNED);
    auto& ref = *p;
    inst.plans_.emplace(n, std::move(p));
    return ref;
  }

 private:
  std::mutex mu_;
  std::map<int, std::unique_ptr<Pair>> plans_;
};

/// Unnormalised forward transform, in -> out (may alias).
inline void fft_forward(std::vector<std::complex<double>>& in, std::vector<std::complex<double>>& out) {
  const auto& p = LinePlans::get(static_cast<int>(in.size()));
  fftw_execute_dft(p.fwd, reinterpret_cast<fftw_complex*>(in.data()), reinterpret_cast<fftw_complex*>(out.data()));
}

/// Inverse transform including the 1/n normalisation.
inline void fft_backward(std::vector<std::complex<double>>& in, std::vector<std::complex<double>>& out) {
  const auto& p = LinePlans::get(static_cast<int>(in.size()));
  fftw_execute_dft(p.bwd, reinterpret_cast<fftw_complex*>(in.data()), reinterpret_cast<fftw_complex*>(out.data()));
  const double s = 1.0 / static_cast<double>(in.size());
  for (auto& v : out) v *= s;
}

/// Angular wavenumber of FFT bin j for a periodic axis of length L.
inline double wavenumber(int j, int n, double length) {
  const double two_pi = 6.283185307179586476925286766559;
  const int jj = (j <= n / 2) ? j : j - n;
  return two_pi * jj / length;
}

}  // namespace madkin::detail
