#pragma once

// Design-spec documents, the scripted wizard, CSV tables and report bundles.
//
// Spec document (JSON). Required: strategy, objective, conditions.
//   {
//     "strategy": "TPS",                  SPS|DPS|EPS1|EPS2|TPS|HYBRID
//     "objective": "current_stress",      current_stress|conduction_loss|zvs_count
//     "conditions": {"P_r": 1000, "P_a": 600, "V_1r": 200, "V_2r": 200, "V_2a": 160},
//     "algorithm": "PSO",                 default PSO
//     "backend": "oracle",                default oracle
//     "checkpoint": "",                   required for backend=surrogate
//     "circuit": {"L": 30e-6, ...},       partial overrides
//     "seed": 1, "budget": 3000, "population": 30, "penalty_weight": 0
//   }
// Unknown keys are rejected at every level.

#include <cctype>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "modkit/dataset.hpp"
#include "modkit/design.hpp"
#include "modkit/error.hpp"

namespace modkit {

// ------------------------------------------------------------- spec files

namespace detail {

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<std::string_view> keys,
                           const std::string& where) {
  for (const auto& [k, _] : j.items()) {
    bool known = false;
    for (auto key : keys) known = known || k == key;
    if (!known) throw ValidationError(where + k, "unknown key");
  }
}

inline const nlohmann::json& require(const nlohmann::json& j, const std::string& key,
                                     const std::string& where = "") {
  if (!j.contains(key)) throw ValidationError(where + key, "missing required key");
  return j[key];
}

inline double number(const nlohmann::json& v, const std::string& field) {
  if (!v.is_number()) throw ValidationError(field, "must be a number");
  return v.get<double>();
}

inline std::string text(const nlohmann::json& v, const std::string& field) {
  if (!v.is_string()) throw ValidationError(field, "must be a string");
  return v.get<std::string>();
}

inline long integer(const nlohmann::json& v, const std::string& field) {
  if (!v.is_number_integer() && !v.is_number_unsigned()) {
    throw ValidationError(field, "must be an integer");
  }
  return v.get<long>();
}

inline std::size_t line_of(std::string_view text, std::size_t byte) {
  // `byte` is 1-based: the offending character is text[byte - 1].
  const std::size_t end = std::min(byte > 0 ? byte - 1 : 0, text.size());
  std::size_t line = 1;
  for (std::size_t i = 0; i < end; ++i) line += text[i] == '\n';
  return line;
}

}  // namespace detail

inline DesignSpec spec_from_json(const nlohmann::json& j) {
  using namespace detail;
  if (!j.is_object()) throw ValidationError("spec", "must be an object");
  reject_unknown(j, {"strategy", "objective", "conditions", "algorithm", "backend", "checkpoint",
                     "circuit", "seed", "budget", "population", "penalty_weight"},
                 "");
  DesignSpec s;
  {
    const auto name = text(require(j, "strategy"), "strategy");
    const auto v = strategy_from_name(name);
    if (!v) throw ValidationError("strategy", "unknown strategy '" + name + "'");
    s.strategy = *v;
  }
  {
    const auto name = text(require(j, "objective"), "objective");
    const auto v = objective_from_name(name);
    if (!v) throw ValidationError("objective", "unknown objective '" + name + "'");
    s.objective = *v;
  }
  {
    const auto& c = require(j, "conditions");
    if (!c.is_object()) throw ValidationError("conditions", "must be an object");
    reject_unknown(c, {"P_r", "P_a", "V_1r", "V_2r", "V_2a"}, "conditions.");
    auto& o = s.conditions;
    o.P_r = number(require(c, "P_r", "conditions."), "conditions.P_r");
    o.P_a = number(require(c, "P_a", "conditions."), "conditions.P_a");
    o.V_1r = number(require(c, "V_1r", "conditions."), "conditions.V_1r");
    o.V_2r = number(require(c, "V_2r", "conditions."), "conditions.V_2r");
    o.V_2a = number(require(c, "V_2a", "conditions."), "conditions.V_2a");
  }
  if (j.contains("algorithm")) {
    const auto name = text(j["algorithm"], "algorithm");
    const auto v = algorithm_from_name(name);
    if (!v) throw ValidationError("algorithm", "unknown algorithm '" + name + "'");
    s.algorithm = *v;
  }
  if (j.contains("backend")) {
    const auto name = text(j["backend"], "backend");
    const auto v = backend_from_name(name);
    if (!v) throw ValidationError("backend", "unknown backend '" + name + "'");
    s.backend = *v;
  }
  if (j.contains("checkpoint")) s.checkpoint = text(j["checkpoint"], "checkpoint");
  if (j.contains("circuit")) {
    const auto& c = j["circuit"];
    if (!c.is_object()) throw ValidationError("circuit", "must be an object");
    reject_unknown(c, {"L", "R_L", "n", "C1", "C2", "f_s", "R_on"}, "circuit.");
    auto set = [&](const char* key, double& dst) {
      if (c.contains(key)) dst = number(c[key], std::string("circuit.") + key);
    };
    set("L", s.circuit.L);
    set("R_L", s.circuit.R_L);
    set("n", s.circuit.n);
    set("C1", s.circuit.C1);
    set("C2", s.circuit.C2);
    set("f_s", s.circuit.f_s);
    set("R_on", s.circuit.R_on);
    try {
      s.circuit.validate();
    } catch (const Error& e) {
      throw ValidationError("circuit", e.what());
    }
  }
  if (j.contains("seed")) {
    const long v = integer(j["seed"], "seed");
    if (v < 0) throw ValidationError("seed", "must be >= 0");
    s.seed = static_cast<std::uint64_t>(v);
  }
  if (j.contains("budget")) s.budget = static_cast<int>(integer(j["budget"], "budget"));
  if (j.contains("population")) {
    s.population = static_cast<int>(integer(j["population"], "population"));
  }
  if (j.contains("penalty_weight")) {
    s.penalty_weight = number(j["penalty_weight"], "penalty_weight");
  }
  try {
    s.validate();
  } catch (const ValidationError&) {
    throw;
  } catch (const Error& e) {
    throw ValidationError("spec", e.what());
  }
  return s;
}

inline nlohmann::ordered_json spec_json(const DesignSpec& s) {
  const auto& c = s.conditions;
  nlohmann::ordered_json j;
  j["strategy"] = strategy_name(s.strategy);
  j["objective"] = objective_name(s.objective);
  j["conditions"] = {{"P_r", c.P_r}, {"P_a", c.P_a}, {"V_1r", c.V_1r}, {"V_2r", c.V_2r},
                     {"V_2a", c.V_2a}};
  j["algorithm"] = algorithm_name(s.algorithm);
  j["backend"] = backend_name(s.backend);
  j["checkpoint"] = s.checkpoint;
  j["circuit"] = detail::circuit_json(s.circuit);
  j["seed"] = s.seed;
  j["budget"] = s.budget;
  j["population"] = s.population;
  j["penalty_weight"] = s.penalty_weight;
  return j;
}

inline DesignSpec parse_design_spec_text(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text.begin(), text.end());
  } catch (const nlohmann::json::parse_error& e) {
    std::string msg = e.what();
    if (const auto p = msg.find("parse error"); p != std::string::npos) msg = msg.substr(p);
    throw ParseError(msg, detail::line_of(text, e.byte));
  }
  return spec_from_json(j);
}

inline DesignSpec parse_design_spec(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error(ErrorKind::Io, "no such file " + path.string());
  return parse_design_spec_text(detail::read_text(path));
}

// ----------------------------------------------------------------- wizard

namespace detail {

inline std::string trim(std::string_view s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return std::string(s.substr(a, b - a));
}

}  // namespace detail

// Five fixed stages; every answer is turned into the same JSON document a
// spec file would hold, so validation has a single source.
inline DesignSpec wizard(std::istream& in, std::ostream& out) {
  struct Stage {
    const char* question;
    const char* options;
    std::function<bool(const std::string&, nlohmann::json&)> accept;
  };
  nlohmann::json doc = nlohmann::json::object();

  const std::vector<Stage> stages = {
      {"Which modulation strategy should be designed?", "SPS, DPS, EPS1, EPS2, TPS, HYBRID",
       [](const std::string& a, nlohmann::json& d) {
         const auto s = strategy_from_name(a);
         if (s) d["strategy"] = strategy_name(*s);
         return s.has_value();
       }},
      {"Which performance objective should be prioritized?",
       "current stress, conduction loss, zvs count",
       [](const std::string& a, nlohmann::json& d) {
         const auto o = objective_from_name(a);
         if (o) d["objective"] = objective_name(*o);
         return o.has_value();
       }},
      {"Operating conditions: rated power, rated input voltage, rated output voltage, "
       "operating power, operating output voltage?",
       "five positive numbers 'P_r V_1r V_2r P_a V_2a' in W and V",
       [](const std::string& a, nlohmann::json& d) {
         std::istringstream ss(a);
         OperatingConditions c;
         if (!(ss >> c.P_r >> c.V_1r >> c.V_2r >> c.P_a >> c.V_2a)) return false;
         std::string extra;
         if (ss >> extra) return false;
         try {
           c.validate();
         } catch (const ValidationError&) {
           return false;
         }
         d["conditions"] = {{"P_r", c.P_r}, {"P_a", c.P_a}, {"V_1r", c.V_1r},
                            {"V_2r", c.V_2r}, {"V_2a", c.V_2a}};
         return true;
       }},
      {"Which optimization algorithm?", "PSO, DE, GA",
       [](const std::string& a, nlohmann::json& d) {
         const auto g = algorithm_from_name(a);
         if (g) d["algorithm"] = algorithm_name(*g);
         return g.has_value();
       }},
  };

  auto ask = [&](const char* question, const char* options,
                 const std::function<bool(const std::string&)>& accept) {
    out << question << " [" << options << "]\n> " << std::flush;
    for (int bad = 0;;) {
      std::string line;
      if (!std::getline(in, line)) throw Error(ErrorKind::Aborted, "input closed during the dialog");
      if (accept(detail::trim(line))) return;
      if (++bad >= 3) throw Error(ErrorKind::Aborted, "three consecutive invalid answers");
      out << "Invalid answer '" << detail::trim(line) << "'. Valid options: " << options
          << "\n> " << std::flush;
    }
  };

  for (;;) {
    for (const auto& st : stages) {
      ask(st.question, st.options, [&](const std::string& a) { return st.accept(a, doc); });
    }
    const auto spec = spec_from_json(doc);
    bool confirmed = false;
    out << "Collected: strategy " << doc["strategy"].get<std::string>() << ", objective "
        << doc["objective"].get<std::string>() << ", algorithm "
        << doc["algorithm"].get<std::string>() << ".\n";
    ask("Proceed with this design specification?", "yes, no", [&](const std::string& a) {
      const auto u = upper_ascii(a);
      if (u == "YES" || u == "Y") return confirmed = true;
      if (u == "NO" || u == "N") return !(confirmed = false);
      return false;
    });
    if (confirmed) return spec;
    doc = nlohmann::json::object();
  }
}

// -------------------------------------------------------------------- CSV

// Numeric table; an empty optional is an empty field (infeasible/failed).
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::optional<double>>> rows;

  bool operator==(const CsvTable&) const = default;
};

inline std::string to_csv(const CsvTable& t) {
  std::string out;
  for (std::size_t i = 0; i < t.header.size(); ++i) out += (i ? "," : "") + t.header[i];
  out += "\n";
  for (const auto& row : t.rows) {
    if (row.size() != t.header.size()) throw Error(ErrorKind::Dimension, "row width != header width");
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out += ",";
      if (row[i]) out += format_double(*row[i]);
    }
    out += "\n";
  }
  return out;
}

inline CsvTable parse_csv(std::string_view text) {
  auto split = [](std::string_view line) {
    std::vector<std::string_view> f;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i) {
      if (i == line.size() || line[i] == ',') {
        f.push_back(line.substr(start, i - start));
        start = i + 1;
      }
    }
    return f;
  };
  CsvTable t;
  std::size_t line_no = 0, pos = 0;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    auto line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line_no == 1) {
      for (auto f : split(line)) t.header.emplace_back(f);
      continue;
    }
    if (line.empty()) throw ParseError("empty row", line_no);
    const auto fields = split(line);
    if (fields.size() != t.header.size()) throw ParseError("field count != header", line_no);
    auto& row = t.rows.emplace_back();
    for (auto f : fields) {
      if (f.empty()) {
        row.emplace_back();
        continue;
      }
      const std::string s(f);
      char* endp = nullptr;
      const double v = std::strtod(s.c_str(), &endp);
      if (endp != s.c_str() + s.size()) throw ParseError("bad number '" + s + "'", line_no);
      row.emplace_back(v);
    }
  }
  if (line_no == 0) throw ParseError("missing header", 1);
  return t;
}

// ---------------------------------------------------------------- reports

inline const std::vector<std::string> kStressGridHeader = {"d1", "d2", "stress"};
inline const std::vector<std::string> kStressVsPowerHeader = {"power_w", "stress_opt", "stress_sps"};
inline const std::vector<std::string> kParamsVsPowerHeader = {"power_w", "d1", "do", "d2"};
inline constexpr int kStressGridSize = 41;

struct ReportBundle {
  nlohmann::ordered_json summary;
  CsvTable stress_grid;
  CsvTable stress_vs_power;
  CsvTable params_vs_power;
};

inline nlohmann::ordered_json report_json(const PerformanceReport& r) {
  nlohmann::ordered_json j;
  j["current_stress"] = r.current_stress;
  j["conduction_loss"] = r.conduction_loss;
  j["resistive_loss"] = r.resistive_loss;
  j["average_power"] = r.average_power;
  j["efficiency_proxy"] = r.efficiency_proxy;
  j["hard_switching_count"] = r.hard_switching_count();
  auto& z = j["zvs"] = nlohmann::ordered_json::array();
  static const char* legs = "ABCD";
  for (const auto& e : r.zvs) {
    z.push_back({{"leg", std::string(1, legs[e.commutation.leg])},
                 {"rising", e.commutation.rising},
                 {"time", e.commutation.time},
                 {"current", e.current},
                 {"zvs", e.zvs}});
  }
  return j;
}

inline nlohmann::ordered_json outcome_json(const DesignOutcome& o) {
  nlohmann::ordered_json j;
  j["success"] = o.success;
  j["best_params"] = detail::params_json(o.best_params);
  j["resolved_strategy"] = strategy_name(o.resolved_strategy);
  j["tuple"] = {{"d13", o.tuple.d13}, {"d15", o.tuple.d15}, {"d57", o.tuple.d57}};
  j["report"] = report_json(o.report);
  j["power_error"] = o.power_error;
  j["objective"] = o.objective;
  j["convergence_trace"] = o.convergence_trace;
  j["evaluations"] = o.evaluations;
  if (o.surrogate_report) j["surrogate_report"] = report_json(*o.surrogate_report);
  return j;
}

inline nlohmann::ordered_json sweep_json(const std::vector<SweepPoint>& pts) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& p : pts) {
    nlohmann::ordered_json j;
    j["power_w"] = p.power;
    j["success"] = p.outcome && p.outcome->success;
    if (p.outcome) {
      j["tuple"] = {p.outcome->tuple.d13, p.outcome->tuple.d15, p.outcome->tuple.d57};
      j["stress_opt"] = p.outcome->report.current_stress;
      j["power_error"] = p.outcome->power_error;
    } else {
      j["error"] = p.error;
    }
    if (p.sps_do) {
      j["sps_do"] = *p.sps_do;
      j["stress_sps"] = *p.sps_stress;
    }
    arr.push_back(std::move(j));
  }
  return arr;
}

inline CsvTable stress_grid_table(const std::vector<StressCell>& cells) {
  CsvTable t{kStressGridHeader, {}};
  for (const auto& c : cells) t.rows.push_back({c.d1, c.d2, c.stress});
  return t;
}

namespace detail {

inline std::optional<double> opt_number(const nlohmann::json& j, const char* key) {
  if (j.contains(key) && j[key].is_number()) return j[key].get<double>();
  return std::nullopt;
}

}  // namespace detail

// Sweep tables derived from the summary document, so `report` can rebuild
// them from disk.
inline void sweep_tables_from_summary(const nlohmann::json& summary, CsvTable& stress,
                                      CsvTable& params) {
  stress = {kStressVsPowerHeader, {}};
  params = {kParamsVsPowerHeader, {}};
  for (const auto& p : summary.at("sweep")) {
    const double w = p.at("power_w").get<double>();
    stress.rows.push_back({w, detail::opt_number(p, "stress_opt"), detail::opt_number(p, "stress_sps")});
    if (p.contains("tuple")) {
      const auto t = p["tuple"].get<std::vector<double>>();
      params.rows.push_back({w, t.at(0), t.at(1), t.at(2)});
    } else {
      params.rows.push_back({w, std::nullopt, std::nullopt, std::nullopt});
    }
  }
}

inline ReportBundle build_report(const DesignSpec& spec, const std::optional<DesignOutcome>& main,
                                 const std::string& main_error,
                                 const std::vector<SweepPoint>& sweep,
                                 const std::vector<StressCell>& grid) {
  ReportBundle b;
  auto& s = b.summary;
  s["format"] = "modkit-report";
  s["version"] = 1;
  s["spec"] = spec_json(spec);
  if (main) {
    s["outcome"] = outcome_json(*main);
  } else {
    s["outcome"] = nullptr;
    s["error"] = main_error;
  }
  s["sweep"] = sweep_json(sweep);
  long evals = main ? main->evaluations : 0;
  int ok = 0;
  for (const auto& p : sweep) {
    if (p.outcome) evals += p.outcome->evaluations;
    ok += p.outcome && p.outcome->success;
  }
  s["sweep_successes"] = ok;
  int feasible = 0;
  for (const auto& c : grid) feasible += c.stress.has_value();
  s["stress_grid"] = {{"size", kStressGridSize}, {"power_w", spec.conditions.P_a},
                      {"feasible_cells", feasible}};
  // Deterministic work counters rather than wall-clock time.
  s["timings"] = {{"objective_evaluations", evals}, {"generations", spec.generations()}};
  b.stress_grid = stress_grid_table(grid);
  sweep_tables_from_summary(s, b.stress_vs_power, b.params_vs_power);
  return b;
}

// Full pipeline for one spec: design at P_a, power sweep, stress grid.
inline ReportBundle run_design_report(const DesignSpec& spec, const SurrogatePair* pair = nullptr,
                                      const std::vector<double>& powers = {}) {
  std::optional<DesignOutcome> main;
  std::string err;
  try {
    main = design(spec, pair);
  } catch (const InfeasibleDesignError& e) {
    err = std::string(error_prefix(e.kind())) + ": " + e.what();
  }
  const auto grid_powers = powers.empty() ? default_power_grid(spec.conditions.P_r) : powers;
  const auto sweep = sweep_power(spec, grid_powers, pair);
  const auto& c = spec.conditions;
  const auto grid = stress_grid(spec.circuit, c.V_1r, c.V_2a, c.P_a, kStressGridSize);
  return build_report(spec, main, err, sweep, grid);
}

// Writes into a sibling temporary directory and renames it into place, so a
// failure never leaves a partial bundle.
inline void publish_directory(const std::filesystem::path& dir,
                              const std::function<void(const std::filesystem::path&)>& fill) {
  namespace fs = std::filesystem;
  const fs::path target = fs::absolute(dir).lexically_normal();
  const fs::path tmp = target.parent_path() / (target.filename().string() + ".partial");
  std::error_code ec;
  fs::remove_all(tmp, ec);
  try {
    fs::create_directories(tmp);
    fill(tmp);
    fs::remove_all(target, ec);
    fs::rename(tmp, target);
  } catch (const fs::filesystem_error& e) {
    fs::remove_all(tmp, ec);
    throw Error(ErrorKind::Io, e.what());
  } catch (...) {
    fs::remove_all(tmp, ec);
    throw;
  }
}

inline void write_bundle_files(const ReportBundle& b, const std::filesystem::path& dir) {
  detail::write_text(dir / "summary.json", b.summary.dump(2) + "\n");
  detail::write_text(dir / "stress_grid.csv", to_csv(b.stress_grid));
  detail::write_text(dir / "stress_vs_power.csv", to_csv(b.stress_vs_power));
  detail::write_text(dir / "params_vs_power.csv", to_csv(b.params_vs_power));
}

inline void emit_report(const ReportBundle& b, const std::filesystem::path& dir) {
  publish_directory(dir, [&](const std::filesystem::path& tmp) { write_bundle_files(b, tmp); });
}

inline ReportBundle read_bundle(const std::filesystem::path& dir) {
  ReportBundle b;
  try {
    b.summary = nlohmann::ordered_json::parse(detail::read_text(dir / "summary.json"));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(e.what(), 1);
  }
  b.stress_grid = parse_csv(detail::read_text(dir / "stress_grid.csv"));
  b.stress_vs_power = parse_csv(detail::read_text(dir / "stress_vs_power.csv"));
  b.params_vs_power = parse_csv(detail::read_text(dir / "params_vs_power.csv"));
  return b;
}

// Rebuilds every table from summary.json: sweep tables from the stored sweep
// section, the stress grid from the stored spec on the oracle.
inline ReportBundle regenerate_report(const std::filesystem::path& dir) {
  ReportBundle b;
  try {
    b.summary = nlohmann::ordered_json::parse(detail::read_text(dir / "summary.json"));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(e.what(), 1);
  }
  if (b.summary.value("format", "") != "modkit-report") {
    throw ValidationError("format", "not a modkit report summary");
  }
  const auto spec = spec_from_json(b.summary.at("spec"));
  const auto& c = spec.conditions;
  b.stress_grid = stress_grid_table(stress_grid(spec.circuit, c.V_1r, c.V_2a, c.P_a, kStressGridSize));
  sweep_tables_from_summary(b.summary, b.stress_vs_power, b.params_vs_power);
  return b;
}

}  // namespace modkit
