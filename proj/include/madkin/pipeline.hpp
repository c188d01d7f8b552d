#pragma once

// Scenario runner: solve -> extract -> close -> trace -> verify.
//
// Output directory layout:
//   config.conf                 fully resolved configuration (re-runnable)
//   fields/index.json           snapshot list {file, time}
//   fields/snap_NNNNN.mkfld     psi (re, im) in MKFLD1
//   fields/snap_NNNNN.json      sidecar {time, T, norms, heisenberg}
//   fields_t0.csv, fields_final.csv   x, f, V, F, U_qm of the first/last snapshot
//   ensemble_t0.mkens, ensemble_final.mkens
//   trajectories/traj_<index>.csv
//   report.json
// "bin" in output.formats controls the .mkfld/.mkens files, "csv" the CSV
// exports and "json" the report; sidecars and the index travel with "bin".

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "madkin/config.hpp"
#include "madkin/field_io.hpp"
#include "madkin/verify.hpp"

namespace madkin {

// --- scenario configuration ------------------------------------------------------

struct ScenarioConfig {
  PhysicalConstants constants;
  GridSpec grid;
  std::string scenario = "free_gaussian";
  InitialState init;
  PotentialSpec potential;

  double t_end = 0.0;
  double dt_field = 0.0;
  double dt_particle = 0.0;
  int field_steps = 0;
  int particle_steps = 0;
  int snapshot_stride = 1;
  double floor = kDefaultFloor;

  std::string closure = "maxwellian";
  std::string k_profile_file;
  double k_amplitude = 0.1;
  int k_mode = 5;
  std::string gauge_z_file;

  std::size_t particles = 0;
  std::uint64_t seed = 0;
  double bandwidth = 0.0;
  double uniform_fraction = 0.0;
  int trajectories = 0;

  bool walls = false;
  double wall_threshold = 1e-8;
  double V_w = 0.0;
  double f_w = 0.0;
  int shell_cells = 3;

  std::string directory = "out";
  std::set<std::string> formats;

  bool writes(const std::string& fmt) const { return formats.count(fmt) != 0; }
  std::array<double, kMaxDim> kernel_bandwidth() const {
    std::array<double, kMaxDim> b{0.0, 0.0, 0.0};
    for (int k = 0; k < grid.dim; ++k) b[k] = bandwidth;
    return b;
  }
  double snapshot_dt() const { return dt_field * snapshot_stride; }

  static const std::vector<std::string>& closure_names() {
    static const std::vector<std::string> v = {"maxwellian", "raw", "positional"};
    return v;
  }
  static const std::vector<std::string>& scenario_names() {
    static const std::vector<std::string> v = {"free_gaussian", "harmonic_ground", "harmonic_coherent"};
    return v;
  }

  /// Typed, validated view of a configuration. An empty ensemble.seed is
  /// replaced by an entropy draw written back into `cfg`, so the echo and the
  /// report record it.
  static ScenarioConfig from(Config& cfg) {
    if (cfg.get("ensemble.seed").empty()) {
      std::random_device rd;
      const std::uint64_t s = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
      cfg.set("ensemble.seed", std::to_string(s));
    }
    ScenarioConfig sc;
    sc.constants = {cfg.number("constants.hbar"), cfg.number("constants.mass")};
    sc.constants.validate();

    const long long dim = cfg.integer("grid.dim");
    if (dim < 1 || dim > 3) throw UsageError("config: grid.dim must be 1, 2 or 3");
    const long long n = cfg.integer("grid.n");
    if (n < 8 || n > (1 << 20)) throw UsageError("config: grid.n must lie in [8, 2^20]");
    sc.grid = GridSpec::periodic_box(static_cast<int>(dim), cfg.number("grid.lower"), cfg.number("grid.upper"),
                                     static_cast<int>(n));

    sc.scenario = cfg.get("scenario.kind");
    const double sigma0 = cfg.number("scenario.sigma0"), k0 = cfg.number("scenario.k0");
    const double center = cfg.number("scenario.center"), omega = cfg.number("scenario.omega");
    const double disp = cfg.number("scenario.displacement");
    for (int k = 0; k < kMaxDim; ++k) {
      sc.init.center[k] = center;
      sc.init.sigma0[k] = sigma0;
      sc.init.k0[k] = k == 0 ? k0 : 0.0;
      sc.init.omega[k] = omega;
      sc.init.displacement[k] = k == 0 ? disp : 0.0;
    }
    if (sc.scenario == "free_gaussian") {
      if (!(sigma0 > 0.0)) throw UsageError("config: scenario.sigma0 must be positive");
      sc.init.kind = InitialState::Kind::gaussian_packet;
      sc.potential = PotentialSpec::free();
    } else if (sc.scenario == "harmonic_ground" || sc.scenario == "harmonic_coherent") {
      if (!(omega > 0.0)) throw UsageError("config: scenario.omega must be positive");
      sc.init.kind = sc.scenario == "harmonic_ground" ? InitialState::Kind::harmonic_ground
                                                      : InitialState::Kind::harmonic_coherent;
      sc.potential = PotentialSpec::harmonic({omega, omega, omega}, {center, center, center});
    } else {
      throw UsageError("config: unknown scenario.kind '" + sc.scenario + "' (valid: " + join(scenario_names()) + ")");
    }

    sc.t_end = cfg.number("run.t_end");
    sc.dt_field = cfg.number("run.dt_field");
    sc.dt_particle = cfg.number("run.dt_particle");
    if (!(sc.t_end >= 0.0)) throw UsageError("config: run.t_end must be non-negative");
    if (!(sc.dt_field > 0.0) || !(sc.dt_particle > 0.0)) throw UsageError("config: time steps must be positive");
    if (sc.dt_particle > sc.dt_field * (1.0 + 1e-12)) throw UsageError("config: run.dt_particle must not exceed run.dt_field");
    sc.field_steps = whole_steps(sc.t_end, sc.dt_field, "run.dt_field");
    sc.particle_steps = whole_steps(sc.t_end, sc.dt_particle, "run.dt_particle");
    const long long stride = cfg.integer("run.snapshot_stride");
    if (stride < 1) throw UsageError("config: run.snapshot_stride must be >= 1");
    sc.snapshot_stride = static_cast<int>(stride);
    if (sc.field_steps % sc.snapshot_stride != 0)
      throw UsageError("config: run.snapshot_stride must divide the number of field steps (" +
                       std::to_string(sc.field_steps) + ")");
    sc.floor = cfg.number("run.floor");
    if (!(sc.floor > 0.0 && sc.floor < 1.0)) throw UsageError("config: run.floor must lie in (0, 1)");

    sc.closure = cfg.get("closure.kind");
    if (std::find(closure_names().begin(), closure_names().end(), sc.closure) == closure_names().end())
      throw UsageError("unknown closure '" + sc.closure + "' (valid: " + join(closure_names()) + ")");
    sc.k_profile_file = cfg.get("closure.k_profile_file");
    sc.k_amplitude = cfg.number("closure.k_amplitude");
    if (!(std::abs(sc.k_amplitude) < 1.0)) throw UsageError("config: closure.k_amplitude must satisfy |a| < 1");
    sc.k_mode = static_cast<int>(cfg.integer("closure.k_mode"));
    if (sc.k_mode < 1) throw UsageError("config: closure.k_mode must be >= 1");
    sc.gauge_z_file = cfg.get("closure.gauge_z_file");
    for (const std::string& f : {sc.k_profile_file, sc.gauge_z_file})
      if (!f.empty() && !std::filesystem::exists(f)) throw UsageError("config: referenced file not found: " + f);

    const long long N = cfg.integer("ensemble.N");
    if (N < 0) throw UsageError("config: ensemble.N must be non-negative");
    sc.particles = static_cast<std::size_t>(N);
    sc.seed = parse_seed(cfg.get("ensemble.seed"));
    sc.bandwidth = cfg.number("ensemble.bandwidth");
    if (sc.bandwidth < 0.0) throw UsageError("config: ensemble.bandwidth must be >= 0");
    sc.uniform_fraction = cfg.number("ensemble.uniform_fraction");
    if (sc.uniform_fraction < 0.0 || sc.uniform_fraction >= 1.0)
      throw UsageError("config: ensemble.uniform_fraction must lie in [0, 1)");
    if (sc.uniform_fraction > 0.0 && dim != 1) throw UsageError("config: ensemble.uniform_fraction needs grid.dim = 1");
    const long long ntr = cfg.integer("ensemble.trajectories");
    if (ntr < 0) throw UsageError("config: ensemble.trajectories must be >= 0");
    sc.trajectories = static_cast<int>(ntr);

    const std::string bk = cfg.get("boundary.kind");
    if (bk != "periodic" && bk != "wall") throw UsageError("config: boundary.kind must be periodic or wall");
    sc.walls = bk == "wall";
    sc.wall_threshold = cfg.number("boundary.wall_threshold");
    if (!(sc.wall_threshold > 0.0 && sc.wall_threshold < 1.0))
      throw UsageError("config: boundary.wall_threshold must lie in (0, 1)");
    if (sc.walls && sc.wall_threshold < sc.floor)
      throw UsageError("config: boundary.wall_threshold must not be below run.floor");
    sc.V_w = cfg.number("boundary.V_w");
    sc.f_w = cfg.number("boundary.f_w");
    if (sc.f_w < 0.0) throw UsageError("config: boundary.f_w must be >= 0");
    const long long shell = cfg.integer("boundary.shell_cells");
    if (shell < 1) throw UsageError("config: boundary.shell_cells must be >= 1");
    sc.shell_cells = static_cast<int>(shell);

    sc.directory = cfg.get("output.directory");
    if (sc.directory.empty()) throw UsageError("config: output.directory must not be empty");
    std::stringstream fs(cfg.get("output.formats"));
    std::string item;
    while (std::getline(fs, item, ',')) {
      item = trim(item);
      if (item.empty()) continue;
      if (item != "bin" && item != "csv" && item != "json")
        throw UsageError("config: output.formats entries must be bin, csv or json (got '" + item + "')");
      sc.formats.insert(item);
    }
    return sc;
  }

  static std::string join(const std::vector<std::string>& v) {
    std::string s;
    for (const auto& x : v) s += (s.empty() ? "" : ", ") + x;
    return s;
  }

 private:
  static int whole_steps(double t_end, double dt, const char* key) {
    const double x = t_end / dt;
    const double r = std::round(x);
    if (std::abs(x - r) > 1e-9 * std::max(1.0, x))
      throw UsageError(std::string("config: ") + key + " must divide run.t_end into whole steps");
    if (r > 1e8) throw UsageError(std::string("config: ") + key + " gives too many steps");
    return static_cast<int>(r);
  }

  static std::uint64_t parse_seed(const std::string& s) {
    try {
      std::size_t pos = 0;
      if (!s.empty() && s[0] == '-') throw std::invalid_argument("negative");
      const unsigned long long v = std::stoull(s, &pos, 0);
      if (trim(s.substr(pos)).empty()) return static_cast<std::uint64_t>(v);
    } catch (const std::exception&) {
    }
    throw UsageError("config: ensemble.seed = '" + s + "' is not an unsigned 64-bit integer");
  }
};

// --- solve ------------------------------------------------------------------------

/// psi at t = 0, snapshot_dt, ..., t_end.
inline std::vector<ComplexField> solve_fields(const ScenarioConfig& sc, PropagationReport* rep = nullptr) {
  const ComplexField psi0 = init_scenario(sc.init, sc.grid, sc.constants);
  return propagate_series(psi0, sc.potential, sc.constants, sc.dt_field, sc.field_steps, sc.snapshot_stride, rep);
}

inline nlohmann::json snapshot_sidecar(const ComplexField& psi, const ScenarioConfig& sc) {
  const auto ax = heisenberg(psi, sc.constants);
  const auto T = directional_temperatures(extract_density(psi), sc.constants);
  nlohmann::json h = nlohmann::json::array();
  for (const auto& a : ax)
    h.push_back({{"var_r", a.var_r},
                 {"var_p", a.var_p},
                 {"thermal", a.thermal},
                 {"phase_part", a.phase_part},
                 {"product", a.product()}});
  return {{"time", psi.time()},
          {"T", T},
          {"norms", {{"l2", norm(psi)}, {"energy", energy(psi, sc.potential, sc.constants)}}},
          {"heisenberg", h}};
}

inline std::string snapshot_name(std::size_t k) {
  std::ostringstream os;
  os << "snap_" << std::setw(5) << std::setfill('0') << k;
  return os.str();
}

inline void save_snapshots(const std::string& dir, const std::vector<ComplexField>& psis, const ScenarioConfig& sc) {
  namespace fs = std::filesystem;
  const fs::path d = fs::path(dir) / "fields";
  fs::create_directories(d);
  nlohmann::json index = nlohmann::json::array();
  for (std::size_t k = 0; k < psis.size(); ++k) {
    const std::string base = snapshot_name(k);
    io::save_bundle((d / (base + ".mkfld")).string(), io::bundle_of(psis[k]));
    std::ofstream side(d / (base + ".json"));
    side << std::setprecision(17) << snapshot_sidecar(psis[k], sc).dump(2) << '\n';
    index.push_back({{"file", base + ".mkfld"}, {"time", psis[k].time()}});
  }
  std::ofstream os(d / "index.json");
  os << index.dump(2) << '\n';
}

inline std::vector<ComplexField> load_snapshots(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path d = fs::path(dir) / "fields";
  std::ifstream is(d / "index.json");
  if (!is) throw UsageError("snapshots not found: " + (d / "index.json").string());
  nlohmann::json index;
  try {
    is >> index;
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("snapshot index: invalid JSON: ") + e.what());
  }
  std::vector<ComplexField> out;
  for (const auto& x : index) out.push_back(io::complex_from(io::load_bundle((d / x.at("file").get<std::string>()).string())));
  if (out.empty()) throw UsageError("snapshot index lists no snapshots");
  return out;
}

/// The stored snapshots must be the ones this configuration would produce.
inline void require_matching_snapshots(const std::vector<ComplexField>& psis, const ScenarioConfig& sc) {
  if (!(psis.front().grid() == sc.grid)) throw UsageError("trace: snapshot grid does not match the configuration");
  const std::size_t expect = static_cast<std::size_t>(sc.field_steps / sc.snapshot_stride) + 1;
  if (psis.size() != expect)
    throw UsageError("trace: found " + std::to_string(psis.size()) + " snapshots, configuration implies " +
                     std::to_string(expect));
  for (std::size_t k = 0; k < psis.size(); ++k) {
    const double t = static_cast<double>(k * static_cast<std::size_t>(sc.snapshot_stride)) * sc.dt_field;
    if (std::abs(psis[k].time() - t) > 1e-9 * std::max(1.0, sc.t_end))
      throw UsageError("trace: snapshot times do not match run.dt_field / run.snapshot_stride");
  }
}

inline void write_fields_csv(const std::string& path, const FluidState& s) {
  io::FieldBundle b{s.grid(), s.time, {"f"}, {s.f.values()}};
  for (int k = 0; k < s.dim(); ++k) {
    b.names.push_back("V" + std::to_string(k + 1));
    b.channels.push_back(s.V[k].values());
  }
  for (int k = 0; k < s.dim(); ++k) {
    b.names.push_back("F" + std::to_string(k + 1));
    b.channels.push_back(s.F[k].values());
  }
  b.names.push_back("U_qm");
  b.channels.push_back(s.U_qm.values());
  std::ofstream os(path);
  if (!os) throw UsageError("cannot write " + path);
  io::write_csv(os, b);
}

// --- fluid states, walls and closures -------------------------------------------------

inline GaugeSpec load_gauge(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("gauge file not found: " + path);
  GaugeSpec g;
  std::string line;
  while (std::getline(is, line)) {
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    std::istringstream ls(line);
    double t, z;
    if (!(ls >> t >> z)) throw UsageError("gauge file: expected 't z' per line in " + path);
    g.times.push_back(t);
    g.values.push_back(z);
  }
  g.validate();
  return g;
}

inline std::vector<FluidState> fluid_states(const std::vector<ComplexField>& psis, const ScenarioConfig& sc) {
  std::vector<FluidState> out;
  std::optional<GaugeSpec> gauge;
  if (!sc.gauge_z_file.empty()) gauge = load_gauge(sc.gauge_z_file);
  for (const auto& psi : psis) {
    FluidState s = build_fluid_state(psi, sc.potential, sc.constants, sc.floor, gauge.has_value());
    if (gauge) s = apply_gauge(s, s.U, *gauge, psis.front().time()).first;
    out.push_back(std::move(s));
  }
  return out;
}

/// Node block holding f >= threshold max f at t0, widened by one node per
/// side; walls sit on its outer cell faces.
struct WallBlock {
  std::array<int, kMaxDim> first{0, 0, 0};
  std::array<int, kMaxDim> count{1, 1, 1};
};

inline WallBlock wall_block(const FluidState& s, double threshold) {
  const GridSpec& g = s.grid();
  const double cut = threshold * max_abs(s.f);
  std::array<int, kMaxDim> lo{0, 0, 0}, hi{-1, -1, -1};
  for (int k = 0; k < g.dim; ++k) lo[k] = g.nodes(k);
  for (std::size_t n = 0; n < g.size(); ++n) {
    if (!(s.f[n] >= cut)) continue;
    const auto ijk = g.unflatten(n);
    for (int k = 0; k < g.dim; ++k) {
      lo[k] = std::min(lo[k], ijk[k]);
      hi[k] = std::max(hi[k], ijk[k]);
    }
  }
  WallBlock b;
  for (int k = 0; k < g.dim; ++k) {
    b.first[k] = std::max(0, lo[k] - 1);
    const int last = std::min(g.nodes(k) - 1, hi[k] + 1);
    b.count[k] = last - b.first[k] + 1;
    if (b.first[k] == 0 || last == g.nodes(k) - 1)
      throw UsageError("walls: f >= boundary.wall_threshold * max f reaches the box edge; enlarge the grid");
  }
  return b;
}

/// k_i = 1 + a c_i with c_i a sine mode shifted to zero f-mean and scaled
/// to |c_i| <= 1.
inline std::vector<ScalarField> builtin_k_profile(const FluidState& s, double amplitude, int mode) {
  const GridSpec& g = s.grid();
  std::vector<ScalarField> out;
  for (int i = 0; i < g.dim; ++i) {
    ScalarField c = ScalarField::from_function(
        g, [&](const Point& r) { return std::sin(2.0 * M_PI * mode * (r[i] - g.lower[i]) / g.length(i)); }, s.time);
    const double mu = integrate_product(s.f, c) / integrate(s.f);
    ScalarField k(g, s.time);
    for (std::size_t n = 0; n < g.size(); ++n) k[n] = 1.0 + amplitude * (c[n] - mu) / (1.0 + std::abs(mu));
    out.push_back(std::move(k));
  }
  return out;
}

inline std::vector<ScalarField> load_k_profile(const std::string& path, const GridSpec& g) {
  const io::FieldBundle b = io::load_bundle(path);
  if (!(b.grid == g)) throw UsageError("closure: k_profile_file grid does not match the solver grid");
  if (static_cast<int>(b.channels.size()) != g.dim) throw UsageError("closure: k_profile_file needs one channel per axis");
  std::vector<ScalarField> out;
  for (int i = 0; i < g.dim; ++i) out.push_back(io::scalar_from(b, static_cast<std::size_t>(i)));
  return out;
}

/// Restricts a profile defined on the solver grid to a wall block.
inline std::vector<ScalarField> restrict_profile(const std::vector<ScalarField>& k, const FluidState& full,
                                                 const WallBlock& b) {
  std::vector<ScalarField> out;
  for (const auto& ki : k) {
    FluidState tmp = full;
    tmp.f = ki;
    out.push_back(restrict_state(tmp, b.first, b.count).f);
  }
  return out;
}

// --- trace ---------------------------------------------------------------------

struct TraceResult {
  FieldSeries series;              // states the particles saw (restricted under walls)
  ClosureSpec closure;
  std::vector<RawMoments> moments;
  std::optional<BoundaryGeometry> geometry;
  ParticleEnsemble e0, e1;
  std::vector<Trajectory> trajectories;
  AdvanceReport advance;
};

inline std::vector<std::size_t> trajectory_indices(std::size_t n, int count) {
  std::vector<std::size_t> out;
  if (n == 0) return out;
  const std::size_t m = std::min<std::size_t>(n, static_cast<std::size_t>(count));
  for (std::size_t k = 0; k < m; ++k) out.push_back(k * n / m);
  return out;
}

inline TraceResult trace_particles(const std::vector<ComplexField>& psis, const ScenarioConfig& sc) {
  TraceResult tr;
  std::vector<FluidState> states = fluid_states(psis, sc);
  std::vector<ScalarField> kprof;
  if (sc.closure == "positional")
    kprof = sc.k_profile_file.empty() ? builtin_k_profile(states.front(), sc.k_amplitude, sc.k_mode)
                                      : load_k_profile(sc.k_profile_file, sc.grid);
  if (sc.walls) {
    const WallBlock b = wall_block(states.front(), sc.wall_threshold);
    if (!kprof.empty()) kprof = restrict_profile(kprof, states.front(), b);
    for (auto& s : states) s = restrict_state(s, b.first, b.count);
    tr.geometry = BoundaryGeometry::from_grid(states.front().grid(), Vec{sc.V_w, sc.V_w, sc.V_w}, sc.f_w);
  }
  if (sc.closure == "positional") {
    tr.closure = ClosureSpec::positional(kprof);
    tr.closure.prepare(states.front());
    for (const auto& s : states) {
      for (int i = 0; i < s.dim(); ++i) {
        const double mean = integrate_product(s.f, kprof[static_cast<std::size_t>(i)]) / integrate(s.f);
        if (std::abs(mean - 1.0) > 1e-6)
          throw UsageError("closure: k_profile violates <k> = 1 at t = " + std::to_string(s.time));
      }
    }
  } else if (sc.closure == "raw") {
    tr.closure = ClosureSpec::raw();
    for (const auto& s : states) tr.moments.push_back(RawMoments::of_maxwellian(s));
  }
  tr.series = FieldSeries(std::move(states));

  SampleOptions so;
  so.uniform_fraction = sc.uniform_fraction;
  so.closure = sc.closure == "positional" ? &tr.closure : nullptr;
  tr.e0 = sample_maxwellian(tr.series.states.front(), sc.particles, sc.seed, sc.constants, so);
  tr.e1 = tr.e0;
  ClosureEval ce{&tr.closure, sc.closure == "raw" ? &tr.moments : nullptr, sc.constants.mass};
  AdvanceOptions ao;
  if (tr.geometry) ao.geometry = &*tr.geometry;
  ao.record = trajectory_indices(tr.e0.size(), sc.trajectories);
  ao.trajectories = &tr.trajectories;
  if (sc.particles > 0) tr.advance = advance(tr.e1, tr.series, ce, sc.dt_particle, sc.particle_steps, ao);
  return tr;
}

// --- verification ------------------------------------------------------------------

namespace detail {

inline void suffix_names(std::vector<CheckRecord>& rs, const std::string& sfx) {
  for (auto& r : rs) r.name += sfx;
}

}  // namespace detail

inline void add_solver_checks(VerificationReport& rep, const std::vector<ComplexField>& psis, const ScenarioConfig& sc) {
  const std::string& scn = sc.scenario;
  const double n0 = norm(psis.front());
  const double e0 = energy(psis.front(), sc.potential, sc.constants);
  double dn = 0.0, de = 0.0;
  for (const auto& p : psis) {
    dn = std::max(dn, std::abs(norm(p) - n0));
    de = std::max(de, std::abs(energy(p, sc.potential, sc.constants) - e0) / std::max(std::abs(e0), 1e-300));
  }
  rep.add(make_record("solver.norm_drift", scn, CheckRecord::Kind::at_most, dn, 0.0, 1e-10));
  rep.add(make_record("solver.energy_drift", scn, CheckRecord::Kind::at_most, de, 0.0, 1e-6, 0.0, false,
                      "max relative |E(t) - E(0)|"));

  // Spreading-packet temperature hbar^2 / (4 m sigma(t)^2).
  if (sc.scenario == "free_gaussian") {
    const double h = sc.constants.hbar, m = sc.constants.mass;
    double worst = 0.0;
    for (const auto& p : psis) {
      const auto T = directional_temperatures(extract_density(p), sc.constants);
      for (int k = 0; k < sc.grid.dim; ++k) {
        const double s0 = sc.init.sigma0[k];
        const double tau = h * p.time() / (2.0 * m * s0 * s0);
        const double ref = h * h / (4.0 * m * s0 * s0 * (1.0 + tau * tau));
        worst = std::max(worst, std::abs(T[static_cast<std::size_t>(k)] / ref - 1.0));
      }
    }
    rep.add(make_record("temperature.spreading_packet", scn, CheckRecord::Kind::at_most, worst, 0.0, 1e-3, 0.0, false,
                        "max relative error of T_i against hbar^2/(4 m sigma(t)^2)"));
  }

  // Heisenberg suite over every snapshot.
  const double bound = sc.constants.hbar * sc.constants.hbar / 4.0;
  double dec = 0.0, low = std::numeric_limits<double>::infinity(), sat0 = 0.0;
  for (std::size_t k = 0; k < psis.size(); ++k) {
    const auto ax = heisenberg(psis[k], sc.constants);
    for (const auto& a : ax) {
      dec = std::max(dec, std::abs((a.thermal + a.phase_part) / a.var_p - 1.0));
      low = std::min(low, a.product());
      if (k == 0) sat0 = std::max(sat0, std::abs(a.product() / bound - 1.0));
    }
  }
  rep.add(make_record("heisenberg.decomposition", scn, CheckRecord::Kind::at_most, dec, 0.0, 1e-6, 0.0, false,
                      "max |(m T + phase part) / spectral <dp^2> - 1| over snapshots"));
  rep.add(make_record("heisenberg.lower_bound", scn, CheckRecord::Kind::at_least, low, bound, 1e-9, 0.0, false,
                      "min <dr^2><dp^2> over snapshots"));
  rep.add(make_record("heisenberg.saturation_t0", scn, CheckRecord::Kind::at_most, sat0, 0.0, 1e-3, 0.0, false,
                      "|product / (hbar^2/4) - 1| at t0 (minimum-uncertainty packet)"));
}

/// Relative Liouville error |exp(logJ) g(x_t, t) / g(x0, t0) - 1| per alive
/// particle (NaN where the endpoint fields are unavailable).
inline std::vector<double> liouville_errors(const TraceResult& tr, const PhysicalConstants& c) {
  const FluidState& s0 = tr.series.states.front();
  const FluidState& s1 = tr.series.states.back();
  const Vec& r0 = tr.series.dlnT_dt.front();
  const Vec& r1 = tr.series.dlnT_dt.back();
  const ClosureSpec* prof = tr.closure.kind == ClosureSpec::Kind::positional_temperature ? &tr.closure : nullptr;
  std::vector<double> err(tr.e1.size(), std::numeric_limits<double>::quiet_NaN());
  for_chunks(tr.e1.size(), [&](std::size_t b, std::size_t en, std::size_t) {
    LocalFields L0, L1;
    for (std::size_t p = b; p < en; ++p) {
      if (!tr.e1.alive[p]) continue;
      if (!local_fields(s0, tr.e0.r[p], L0, prof, r0) || !local_fields(s1, tr.e1.r[p], L1, prof, r1)) continue;
      const double lg = tr.e1.logJ[p] + log_maxwellian(L1, tr.e1.v[p], c.mass) - log_maxwellian(L0, tr.e0.v[p], c.mass);
      err[p] = std::abs(std::expm1(lg));
    }
  });
  return err;
}

inline void add_tracer_checks(VerificationReport& rep, const TraceResult& tr, const std::vector<ComplexField>& psis,
                              const ScenarioConfig& sc) {
  const std::string& scn = sc.scenario;
  const PhysicalConstants& c = sc.constants;
  const std::size_t N = tr.e0.size();
  if (N == 0) return;
  const double dead = static_cast<double>(N - tr.e1.alive_count()) / static_cast<double>(N);
  rep.add(make_record("tracer.dead_fraction", scn, CheckRecord::Kind::at_most, dead, 0.0, 1e-3, 0.0, false,
                      "particles frozen at nodes or lost"));

  const auto err = liouville_errors(tr, c);
  std::size_t ok = 0, alive = 0;
  double worst = 0.0;
  for (std::size_t p = 0; p < N; ++p) {
    if (!tr.e1.alive[p]) continue;
    ++alive;
    if (err[p] <= 1e-5) ++ok;
    if (std::isfinite(err[p])) worst = std::max(worst, err[p]);
  }
  std::ostringstream note;
  note << "share of alive particles with |J g(x_t)/g(x0) - 1| <= 1e-5; max " << std::setprecision(3) << worst;
  rep.add(make_record("tracer.liouville_fraction", scn, CheckRecord::Kind::at_least,
                      alive ? static_cast<double>(ok) / static_cast<double>(alive) : 0.0, 0.999, 0.0, 0.0, false,
                      note.str()));

  // Closed-form Jacobians on the recorded trajectories.
  if (tr.closure.kind != ClosureSpec::Kind::positional_temperature && !tr.trajectories.empty()) {
    double wm = 0.0, wr = 0.0;
    std::size_t used = 0;
    const FluidState& s0 = tr.series.states.front();
    const FluidState& s1 = tr.series.states.back();
    const std::vector<RawMoments> mx = [&] {
      if (!tr.moments.empty()) return tr.moments;
      std::vector<RawMoments> m;
      for (const auto& s : tr.series.states) m.push_back(RawMoments::of_maxwellian(s));
      return m;
    }();
    for (const auto& t : tr.trajectories) {
      if (!t.alive || t.size() < 2) continue;
      ++used;
      const double J = std::exp(t.logJ.back() - t.logJ.front());
      const double Jm = jacobian_closed_form_maxwellian(s0, s1, {t.r.front(), t.v.front()}, {t.r.back(), t.v.back()}, c);
      wm = std::max(wm, std::abs(Jm / J - 1.0));
      if (tr.closure.kind == ClosureSpec::Kind::raw_moments) {
        const auto jr = jacobian_closed_form_raw(tr.series, mx, t, c);
        wr = std::max(wr, std::abs(jr.J / J - 1.0));
      }
    }
    if (used) {
      rep.add(make_record("jacobian.closed_form_maxwellian", scn, CheckRecord::Kind::at_most, wm, 0.0, 1e-6, 0.0,
                          false, "max relative gap to exp(logJ) over " + std::to_string(used) + " trajectories"));
      if (tr.closure.kind == ClosureSpec::Kind::raw_moments)
        rep.add(make_record("jacobian.closed_form_raw", scn, CheckRecord::Kind::at_most, wr, 0.0, 1e-6, 0.0, false,
                            "max relative gap to exp(logJ) over " + std::to_string(used) + " trajectories"));
    }
  }

  const auto bw = sc.kernel_bandwidth();
  for (const auto* pair : {&tr.e0, &tr.e1}) {
    const bool first = pair == &tr.e0;
    const FluidState& s = first ? tr.series.states.front() : tr.series.states.back();
    const ComplexField& psi = first ? psis.front() : psis.back();
    const std::string sfx = first ? "@t0" : "@final";
    auto cr = check_correspondence(s, *pair, c, scn, bw);
    detail::suffix_names(cr, sfx);
    rep.add_all(std::move(cr));
    auto kh = check_kinetic_heisenberg(s, *pair, psi, c, scn);
    detail::suffix_names(kh, sfx);
    rep.add_all(std::move(kh));
  }

  if (tr.geometry) {
    const GridSpec& g = tr.series.grid();
    const WallCheck w = wall_consistency_check(tr.e1, g, *tr.geometry, c, sc.shell_cells);
    for (int k = 0; k < g.dim; ++k) {
      CheckRecord r = make_record("wall.shell_velocity" + std::to_string(k + 1), scn, CheckRecord::Kind::equal,
                                  w.mean_velocity[k], 0.0, 0.0, w.velocity_se[k], true,
                                  "shell mean of v - V_w over " + std::to_string(w.count) + " particles");
      if (w.status == WallCheck::Status::inconclusive) {
        r.inconclusive = true;
        r.note = w.note;
      }
      rep.add(std::move(r));
    }
    const double m0 = tr.e0.alive_mass(), m1 = tr.e1.alive_mass();
    rep.add(make_record("wall.mass_drift", scn, CheckRecord::Kind::at_most, std::abs(m1 - m0) / m0, 0.0, 1e-3, 0.0,
                        false, "relative change of alive particle mass"));
  }
}

/// The embedded config omits output.directory so the report does not depend
/// on where it is written.
inline nlohmann::json run_metadata(const ScenarioConfig& sc, const Config& cfg) {
  Config portable = cfg;
  portable.explicit_values.erase("output.directory");
  nlohmann::json g;
  g["dim"] = sc.grid.dim;
  g["n"] = sc.grid.n[0];
  g["lower"] = sc.grid.lower[0];
  g["upper"] = sc.grid.upper[0];
  return {{"scenario", sc.scenario},
          {"closure", sc.closure},
          {"seed", sc.seed},
          {"grid", g},
          {"dt_field", sc.dt_field},
          {"dt_particle", sc.dt_particle},
          {"t_end", sc.t_end},
          {"particles", sc.particles},
          {"walls", sc.walls},
          {"config", portable.echo()}};
}

inline VerificationReport verify_run(const std::vector<ComplexField>& psis, const TraceResult* tr,
                                     const ScenarioConfig& sc, const Config& cfg) {
  VerificationReport rep;
  rep.metadata = run_metadata(sc, cfg);
  add_solver_checks(rep, psis, sc);
  if (tr) {
    nlohmann::json a = {{"steps", tr->advance.steps},
                        {"dead", tr->advance.dead},
                        {"stuck", tr->advance.stuck},
                        {"stability", tr->advance.stability}};
    rep.metadata["advance"] = a;
    add_tracer_checks(rep, *tr, psis, sc);
  }
  return rep;
}

// --- artifacts -------------------------------------------------------------------------

inline void write_config_echo(const std::string& dir, const Config& cfg) {
  std::filesystem::create_directories(dir);
  std::ofstream os(std::filesystem::path(dir) / "config.conf");
  if (!os) throw UsageError("cannot write to output directory " + dir);
  os << cfg.echo();
}

inline void write_trace_outputs(const std::string& dir, const TraceResult& tr, const ScenarioConfig& sc) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  if (sc.writes("bin")) {
    io::save_ensemble((fs::path(dir) / "ensemble_t0.mkens").string(), tr.e0);
    io::save_ensemble((fs::path(dir) / "ensemble_final.mkens").string(), tr.e1);
  }
  if (sc.writes("csv")) {
    write_fields_csv((fs::path(dir) / "fields_t0.csv").string(), tr.series.states.front());
    write_fields_csv((fs::path(dir) / "fields_final.csv").string(), tr.series.states.back());
    if (!tr.trajectories.empty()) {
      fs::create_directories(fs::path(dir) / "trajectories");
      for (const auto& t : tr.trajectories)
        save_trajectory_csv((fs::path(dir) / "trajectories" / ("traj_" + std::to_string(t.particle) + ".csv")).string(),
                            t, sc.grid.dim);
    }
  }
}

inline void write_report(const std::string& dir, const VerificationReport& rep, const ScenarioConfig& sc) {
  if (sc.writes("json")) rep.save((std::filesystem::path(dir) / "report.json").string());
}

}  // namespace madkin
