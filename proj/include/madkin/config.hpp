#pragma once

// Scenario configuration: flat-sectioned key = value text.
//
//   # comment
//   [grid]
//   n = 1024
//
// Every accepted key and its default lives in default_table(); anything else
// is rejected. Values are kept as strings and typed on access.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "madkin/error.hpp"

namespace madkin {

struct ConfigEntry {
  const char* key;           // section.name
  const char* value;         // default (free_gaussian and any scenario without an override)
  const char* harmonic;      // override for the harmonic scenarios, or nullptr
  const char* doc;
};

/// The single defaults table.
inline const std::vector<ConfigEntry>& default_table() {
  static const std::vector<ConfigEntry> t = {
      {"constants.hbar", "1", nullptr, "reduced Planck constant"},
      {"constants.mass", "1", nullptr, "particle mass"},
      {"grid.dim", "1", nullptr, "spatial dimension (1..3)"},
      {"grid.lower", "-20", "-8", "lower box bound (all axes)"},
      {"grid.upper", "20", "8", "upper box bound (all axes)"},
      {"grid.n", "1024", "256", "nodes per axis"},
      {"scenario.kind", "free_gaussian", nullptr, "free_gaussian | harmonic_ground | harmonic_coherent"},
      {"scenario.sigma0", "1", nullptr, "initial packet width (free_gaussian)"},
      {"scenario.k0", "0", nullptr, "initial wavenumber (free_gaussian)"},
      {"scenario.center", "0", nullptr, "packet centre / well centre"},
      {"scenario.omega", "1", nullptr, "harmonic frequency"},
      {"scenario.displacement", "0", "1", "coherent-state displacement from the well centre"},
      {"run.t_end", "4", "6.283185307179586", "end time (default: one classical period for harmonic)"},
      {"run.dt_field", "0.01", "0.0031415926535897933", "Schrodinger step"},
      {"run.dt_particle", "0.01", "0.0031415926535897933", "tracer step (<= dt_field)"},
      {"run.snapshot_stride", "1", nullptr, "keep every k-th field step as a snapshot"},
      {"run.floor", "1e-10", nullptr, "relative density floor f_floor / max f"},
      {"closure.kind", "maxwellian", nullptr, "maxwellian | raw | positional"},
      {"closure.k_profile_file", "", nullptr, "MKFLD1 file with one k_i channel per axis (positional)"},
      {"closure.k_amplitude", "0.1", nullptr, "built-in profile k = 1 + a sin(2 pi m (x-lower)/L) if no file"},
      {"closure.k_mode", "5", nullptr, "mode number m of the built-in profile"},
      {"closure.gauge_z_file", "", nullptr, "two-column text file t z(t) for the gauge shift"},
      {"ensemble.N", "100000", nullptr, "particle count"},
      {"ensemble.seed", "", nullptr, "64-bit seed (empty: drawn from entropy and recorded)"},
      {"ensemble.bandwidth", "0", nullptr, "kernel bandwidth (0: Silverman)"},
      {"ensemble.uniform_fraction", "0", nullptr, "share of positions drawn uniformly (tail sampling)"},
      {"ensemble.trajectories", "10", nullptr, "number of particles whose trajectories are exported"},
      {"boundary.kind", "periodic", nullptr, "periodic | wall"},
      {"boundary.wall_threshold", "1e-8", nullptr, "walls sit where f < threshold * max f"},
      {"boundary.V_w", "0", nullptr, "wall velocity"},
      {"boundary.f_w", "0", nullptr, "prescribed wall density"},
      {"boundary.shell_cells", "3", nullptr, "wall shell width in cells"},
      {"output.directory", "out", nullptr, "output directory"},
      {"output.formats", "bin,csv,json", nullptr, "subset of bin,csv,json"},
  };
  return t;
}

inline bool is_harmonic_scenario(const std::string& kind) { return kind.rfind("harmonic", 0) == 0; }

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

class Config {
 public:
  /// Explicitly set keys (file or flags); defaults fill the rest on resolve().
  std::map<std::string, std::string> explicit_values;

  static bool known(const std::string& key) {
    const auto& t = default_table();
    return std::any_of(t.begin(), t.end(), [&](const ConfigEntry& e) { return key == e.key; });
  }

  void set(const std::string& key, const std::string& value) {
    if (!known(key)) throw UsageError("config: unknown key '" + key + "'");
    explicit_values[key] = value;
  }

  static Config parse(std::istream& is, const std::string& origin = "config") {
    Config c;
    std::string line, section;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      line = trim(line);
      if (line.empty()) continue;
      const std::string where = origin + ":" + std::to_string(lineno);
      if (line.front() == '[') {
        if (line.back() != ']') throw UsageError(where + ": malformed section header");
        section = trim(line.substr(1, line.size() - 2));
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw UsageError(where + ": expected key = value");
      if (section.empty()) throw UsageError(where + ": key outside of a section");
      const std::string key = section + "." + trim(line.substr(0, eq));
      if (!known(key)) throw UsageError(where + ": unknown key '" + key + "'");
      if (c.explicit_values.count(key)) throw UsageError(where + ": duplicate key '" + key + "'");
      c.explicit_values[key] = trim(line.substr(eq + 1));
    }
    return c;
  }

  static Config load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw UsageError("config not found: " + path);
    return parse(is, path);
  }

  /// Every key with its effective value (explicit, else scenario default).
  std::map<std::string, std::string> resolved() const {
    std::map<std::string, std::string> out;
    auto it = explicit_values.find("scenario.kind");
    const std::string kind = it != explicit_values.end() ? it->second : "free_gaussian";
    for (const auto& e : default_table()) {
      auto x = explicit_values.find(e.key);
      if (x != explicit_values.end())
        out[e.key] = x->second;
      else
        out[e.key] = (is_harmonic_scenario(kind) && e.harmonic) ? e.harmonic : e.value;
    }
    return out;
  }

  std::string get(const std::string& key) const {
    if (!known(key)) throw UsageError("config: unknown key '" + key + "'");
    return resolved().at(key);
  }

  double number(const std::string& key) const { return to_number(key, get(key)); }

  long long integer(const std::string& key) const {
    const double v = number(key);
    if (v != std::floor(v)) throw UsageError("config: " + key + " must be an integer");
    return static_cast<long long>(v);
  }

  /// Echo in the input format; parsing the echo reproduces the configuration.
  std::string echo() const {
    std::ostringstream os;
    std::string section;
    for (const auto& [key, value] : resolved()) {
      const auto dot = key.find('.');
      const std::string sec = key.substr(0, dot);
      if (sec != section) {
        os << (section.empty() ? "" : "\n") << '[' << sec << "]\n";
        section = sec;
      }
      os << key.substr(dot + 1) << " = " << value << '\n';
    }
    return os.str();
  }

  static double to_number(const std::string& key, const std::string& s) {
    try {
      std::size_t pos = 0;
      const double v = std::stod(s, &pos);
      if (trim(s.substr(pos)).empty() && std::isfinite(v)) return v;
    } catch (const std::exception&) {
    }
    throw UsageError("config: " + key + " = '" + s + "' is not a number");
  }
};

/// Table of every key, default and description (for --help and the README).
inline std::string defaults_documentation() {
  std::ostringstream os;
  for (const auto& e : default_table()) {
    os << e.key << " = " << (*e.value ? e.value : "\"\"");
    if (e.harmonic) os << "  (harmonic: " << e.harmonic << ")";
    os << "    # " << e.doc << '\n';
  }
  return os.str();
}

}  // namespace madkin
