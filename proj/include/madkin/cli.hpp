#pragma once

// Command-line front end: run, solve, trace, verify, sample.
// Exit codes: 0 pass, 1 verification failure, 2 usage/config error,
// 3 numerical rejection.

#include <CLI11.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "madkin/pipeline.hpp"

namespace madkin::cli {

inline constexpr int kExitPass = 0;
inline constexpr int kExitFail = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitRejected = 3;

struct Options {
  std::string config;
  std::optional<std::string> scenario, closure, out, seed, report;
  std::optional<long long> grid_n, particles, snapshots;
  std::optional<double> dt;
};

/// Inline flags as config keys.
inline std::vector<std::pair<std::string, std::string>> flag_overrides(const Options& o) {
  std::vector<std::pair<std::string, std::string>> kv;
  auto num = [](double x) {
    std::ostringstream os;
    os << std::setprecision(17) << x;
    return os.str();
  };
  if (o.scenario) kv.emplace_back("scenario.kind", *o.scenario);
  if (o.closure) kv.emplace_back("closure.kind", *o.closure);
  if (o.out) kv.emplace_back("output.directory", *o.out);
  if (o.seed) kv.emplace_back("ensemble.seed", *o.seed);
  if (o.grid_n) kv.emplace_back("grid.n", std::to_string(*o.grid_n));
  if (o.particles) kv.emplace_back("ensemble.N", std::to_string(*o.particles));
  if (o.snapshots) kv.emplace_back("run.snapshot_stride", std::to_string(*o.snapshots));
  if (o.dt) {
    kv.emplace_back("run.dt_field", num(*o.dt));
    kv.emplace_back("run.dt_particle", num(*o.dt));
  }
  return kv;
}

/// Config file (if any) overlaid with inline flags; inline wins with a warning.
inline Config build_config(const Options& o, std::ostream& err) {
  Config cfg = o.config.empty() ? Config{} : Config::load(o.config);
  for (const auto& [key, value] : flag_overrides(o)) {
    if (key == "closure.kind") {
      const auto& v = ScenarioConfig::closure_names();
      if (std::find(v.begin(), v.end(), value) == v.end())
        throw UsageError("unknown closure '" + value + "' (valid: " + ScenarioConfig::join(v) + ")");
    }
    auto it = cfg.explicit_values.find(key);
    if (it != cfg.explicit_values.end() && it->second != value)
      err << "warning: inline flag overrides " << key << " = " << it->second << " from " << o.config << " with "
          << value << '\n';
    cfg.set(key, value);
  }
  return cfg;
}

inline int report_exit(const VerificationReport& rep) { return rep.any_hard_failed() ? kExitFail : kExitPass; }

inline int cmd_run(const Options& o, std::ostream& out, std::ostream& err, bool from_snapshots) {
  Config cfg = build_config(o, err);
  const ScenarioConfig sc = ScenarioConfig::from(cfg);
  std::vector<ComplexField> psis;
  if (from_snapshots) {
    psis = load_snapshots(sc.directory);
    require_matching_snapshots(psis, sc);
  } else {
    PropagationReport pr;
    psis = solve_fields(sc, &pr);
    for (const auto& w : pr.warnings) err << "warning: " << w << '\n';
  }
  write_config_echo(sc.directory, cfg);
  if (!from_snapshots && sc.writes("bin")) save_snapshots(sc.directory, psis, sc);
  const TraceResult tr = trace_particles(psis, sc);
  write_trace_outputs(sc.directory, tr, sc);
  const VerificationReport rep = verify_run(psis, &tr, sc, cfg);
  write_report(sc.directory, rep, sc);
  out << "scenario " << sc.scenario << ", closure " << sc.closure << ", seed " << sc.seed << ", N " << sc.particles
      << '\n';
  rep.print_table(out);
  return report_exit(rep);
}

inline int cmd_solve(const Options& o, std::ostream& out, std::ostream& err) {
  Config cfg = build_config(o, err);
  const ScenarioConfig sc = ScenarioConfig::from(cfg);
  PropagationReport pr;
  const auto psis = solve_fields(sc, &pr);
  for (const auto& w : pr.warnings) err << "warning: " << w << '\n';
  write_config_echo(sc.directory, cfg);
  save_snapshots(sc.directory, psis, sc);
  const VerificationReport rep = verify_run(psis, nullptr, sc, cfg);
  out << "solved " << sc.scenario << ": " << psis.size() << " snapshots in " << sc.directory << "/fields\n";
  rep.print_table(out);
  return report_exit(rep);
}

inline int cmd_sample(const Options& o, std::ostream& out, std::ostream& err) {
  Config cfg = build_config(o, err);
  ScenarioConfig sc = ScenarioConfig::from(cfg);
  sc.t_end = 0.0;
  sc.field_steps = sc.particle_steps = 0;
  const std::vector<ComplexField> psis{init_scenario(sc.init, sc.grid, sc.constants)};
  sc.particles = static_cast<std::size_t>(cfg.integer("ensemble.N"));
  const TraceResult tr = trace_particles(psis, sc);
  write_config_echo(sc.directory, cfg);
  const auto path = std::filesystem::path(sc.directory) / "ensemble_t0.mkens";
  io::save_ensemble(path.string(), tr.e0);
  out << "sampled " << tr.e0.size() << " particles (seed " << sc.seed << ") to " << path.string() << '\n';
  return kExitPass;
}

inline int cmd_verify(const Options& o, std::ostream& out, std::ostream& err) {
  std::string path;
  if (o.report) {
    path = *o.report;
  } else {
    Config cfg = build_config(o, err);
    path = (std::filesystem::path(cfg.get("output.directory")) / "report.json").string();
  }
  VerificationReport rep = VerificationReport::load(path);
  std::vector<std::string> before;
  for (const auto& r : rep.records()) before.push_back(r.status);
  rep.reevaluate();
  bool changed = false;
  for (std::size_t k = 0; k < before.size(); ++k)
    if (before[k] != rep.records()[k].status) {
      err << "status changed on re-evaluation: " << rep.records()[k].name << " (" << before[k] << " -> "
          << rep.records()[k].status << ")\n";
      changed = true;
    }
  rep.print_table(out);
  return changed ? kExitFail : report_exit(rep);
}

/// Entry point shared by the binary and the tests.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"madkin: quantum hydrodynamics, inverse kinetic closures and particle verification"};
  app.require_subcommand(1);
  Options o;
  std::string which;
  auto common = [&](CLI::App* s, bool with_report) {
    s->add_option("--config", o.config, "flat-sectioned key = value configuration file");
    s->add_option("--scenario", o.scenario, "free_gaussian | harmonic_ground | harmonic_coherent");
    s->add_option("--grid-n", o.grid_n, "nodes per axis");
    s->add_option("--dt", o.dt, "field and particle time step");
    s->add_option("--particles", o.particles, "ensemble size");
    s->add_option("--seed", o.seed, "64-bit seed (omitted: drawn from entropy and recorded)");
    s->add_option("--closure", o.closure, "maxwellian | raw | positional");
    s->add_option("--out", o.out, "output directory");
    s->add_option("--snapshots", o.snapshots, "keep every K-th field step as a snapshot");
    if (with_report) s->add_option("--report", o.report, "report JSON to re-evaluate");
  };
  struct Sub {
    const char* name;
    const char* help;
  };
  for (const Sub& s : {Sub{"run", "full pipeline: solve, trace, verify, report"},
                       Sub{"solve", "reference fields only"},
                       Sub{"trace", "particles against saved fields, then verify"},
                       Sub{"verify", "re-check a saved report"},
                       Sub{"sample", "emit the initial ensemble only"}}) {
    CLI::App* sub = app.add_subcommand(s.name, s.help);
    common(sub, std::string(s.name) == "verify");
    sub->callback([&which, name = std::string(s.name)] { which = name; });
  }
  app.footer("Configuration keys and defaults:\n" + defaults_documentation() +
             "Environment: MK_THREADS caps parallelism.\n"
             "Exit codes: 0 pass, 1 verification failure, 2 usage/config error, 3 numerical rejection.");
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitPass;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitPass;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  try {
    if (which == "run") return cmd_run(o, out, err, false);
    if (which == "trace") return cmd_run(o, out, err, true);
    if (which == "solve") return cmd_solve(o, out, err);
    if (which == "sample") return cmd_sample(o, out, err);
    if (which == "verify") return cmd_verify(o, out, err);
    err << "error: no subcommand\n";
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const NumericalRejection& e) {
    err << "rejected: " << e.what() << '\n';
    return kExitRejected;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
}

}  // namespace madkin::cli
