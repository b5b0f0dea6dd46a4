#pragma once

// Simulator-generated waveform datasets and their on-disk format.
//
// Layout of a dataset directory:
//   meta.json     circuit, load, strategy, seed, split fractions, grid,
//                 ringing and per-sequence modulation metadata
//   seq_<idx>.csv header `t,v_p,v_s,i_L`, one row per sample
//   splits.json   {"train": [...], "validation": [...], "test": [...]}

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "modkit/converter.hpp"
#include "modkit/error.hpp"
#include "modkit/parallel.hpp"
#include "modkit/random.hpp"
#include "modkit/simulator.hpp"

namespace modkit {

struct DatasetConfig {
  CircuitParams circuit;
  LoadModel load;  // source_voltage is the primary dc link
  double secondary_voltage = 160.0;
  Strategy strategy = Strategy::TPS;
  int sample_count = 200;
  std::uint64_t seed = 7;
  RingingConfig ringing;
  std::array<double, 3> splits{0.05, 0.10, 0.85};
  Grid grid;
};

struct Sequence {
  int index = 0;
  ModulationParams params;
  PhaseShiftTuple tuple;
  SampledTrace v_p, v_s, i_L;
};

enum class SplitName { Train, Validation, Test };

inline std::string_view split_label(SplitName s) {
  switch (s) {
    case SplitName::Train: return "train";
    case SplitName::Validation: return "validation";
    case SplitName::Test: return "test";
  }
  return "";
}

inline SplitName split_from_label(std::string_view s) {
  if (s == "train") return SplitName::Train;
  if (s == "validation" || s == "val") return SplitName::Validation;
  if (s == "test") return SplitName::Test;
  throw Error(ErrorKind::InvalidParams, "unknown split: " + std::string(s));
}

struct Dataset {
  DatasetConfig config;
  std::vector<Sequence> sequences;       // ordered by index
  std::array<std::vector<int>, 3> splits;  // indices into `sequences`
  std::vector<int> skipped;              // generation indices that failed

  const std::vector<int>& split(SplitName s) const {
    return splits[static_cast<std::size_t>(s)];
  }
  std::vector<const Sequence*> select(SplitName s) const {
    std::vector<const Sequence*> out;
    for (int i : split(s)) out.push_back(&sequences[static_cast<std::size_t>(i)]);
    return out;
  }
};

// Modulation parameters for low-discrepancy point `u` in the unit box.
inline ModulationParams params_from_unit(Strategy strategy, const std::vector<double>& u,
                                         std::size_t index) {
  ModulationParams p;
  p.strategy = strategy;
  p.values.assign(u.begin(), u.begin() + strategy_dof(strategy));
  if (strategy == Strategy::HYBRID) p.variant = kHybridVariants[index % 3];
  return p;
}

// Bridge voltages (with optional ringing) and the periodic inductor current
// for one operating point, with stiff dc links.
inline Sequence simulate_sequence(const DatasetConfig& cfg, int index,
                                  const ModulationParams& params) {
  Sequence s;
  s.index = index;
  s.params = params;
  s.tuple = to_phase_shift_tuple(params);
  auto v = ideal_bridge_voltages(s.tuple, cfg.load.source_voltage,
                                 cfg.secondary_voltage, cfg.grid);
  if (cfg.ringing.enabled) {
    const auto ep = detect_edges(v.v_p);
    const auto es = detect_edges(v.v_s);
    v.v_p = inject_nonideality(v.v_p, ep, cfg.ringing);
    v.v_s = inject_nonideality(v.v_s, es, cfg.ringing);
  }
  s.i_L = steady_state_current(cfg.circuit, v.v_p, v.v_s);
  s.v_p = std::move(v.v_p);
  s.v_s = std::move(v.v_s);
  return s;
}

inline std::array<std::vector<int>, 3> assign_splits(int count,
                                                     const std::array<double, 3>& fr,
                                                     std::uint64_t seed) {
  std::vector<int> order(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) order[static_cast<std::size_t>(i)] = i;
  auto rng = make_stream(seed, 0x5b1);
  shuffle(order, rng);
  const auto n_train = static_cast<std::size_t>(std::llround(fr[0] * count));
  const auto n_val = std::min(order.size() - n_train,
                              static_cast<std::size_t>(std::llround(fr[1] * count)));
  std::array<std::vector<int>, 3> out;
  out[0].assign(order.begin(), order.begin() + static_cast<long>(n_train));
  out[1].assign(order.begin() + static_cast<long>(n_train),
                order.begin() + static_cast<long>(n_train + n_val));
  out[2].assign(order.begin() + static_cast<long>(n_train + n_val), order.end());
  for (auto& v : out) std::sort(v.begin(), v.end());
  return out;
}

inline void validate_splits(const std::array<double, 3>& fr) {
  double sum = 0.0;
  for (double f : fr) {
    if (!(f >= 0.0) || f > 1.0) {
      throw Error(ErrorKind::InvalidParams, "split fractions must lie in [0, 1]");
    }
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw Error(ErrorKind::InvalidParams, "split fractions must sum to 1");
  }
}

inline Dataset generate_dataset(const DatasetConfig& cfg) {
  if (cfg.sample_count < 10) {
    throw Error(ErrorKind::InvalidParams, "sample_count must be >= 10");
  }
  validate_splits(cfg.splits);
  cfg.circuit.validate();
  cfg.load.validate();
  if (cfg.ringing.enabled) cfg.ringing.validate();
  if (!(cfg.secondary_voltage > 0.0)) {
    throw Error(ErrorKind::Domain, "secondary voltage must be positive");
  }
  if (std::abs(cfg.grid.period * cfg.circuit.f_s - 1.0) > 1e-12) {
    throw Error(ErrorKind::InvalidParams, "grid period must equal 1 / f_s");
  }

  const auto n = static_cast<std::size_t>(cfg.sample_count);
  const auto points = halton_points(n, 3, cfg.seed);
  std::vector<std::optional<Sequence>> slots(n);
  parallel_for(n, [&](std::size_t i) {
    try {
      slots[i] = simulate_sequence(cfg, static_cast<int>(i),
                                   params_from_unit(cfg.strategy, points[i], i));
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Domain && e.kind() != ErrorKind::Convergence) throw;
    }
  });

  Dataset ds;
  ds.config = cfg;
  for (std::size_t i = 0; i < n; ++i) {
    if (slots[i]) {
      ds.sequences.push_back(std::move(*slots[i]));
    } else {
      ds.skipped.push_back(static_cast<int>(i));
      std::cerr << "modkit: skipped sequence " << i << "\n";
    }
  }
  if (ds.skipped.size() * 20 > n) {
    throw Error(ErrorKind::Dataset, "more than 5% of sequences failed to simulate");
  }
  ds.splits = assign_splits(static_cast<int>(ds.sequences.size()), cfg.splits, cfg.seed);
  return ds;
}

// ---------------------------------------------------------------- on disk

inline std::string format_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

namespace detail {

inline nlohmann::ordered_json circuit_json(const CircuitParams& c) {
  return {{"L", c.L}, {"R_L", c.R_L}, {"n", c.n}, {"C1", c.C1},
          {"C2", c.C2}, {"f_s", c.f_s}, {"R_on", c.R_on}};
}

inline CircuitParams circuit_from_json(const nlohmann::json& j) {
  CircuitParams c;
  c.L = j.at("L");
  c.R_L = j.at("R_L");
  c.n = j.at("n");
  c.C1 = j.at("C1");
  c.C2 = j.at("C2");
  c.f_s = j.at("f_s");
  c.R_on = j.at("R_on");
  return c;
}

inline nlohmann::ordered_json params_json(const ModulationParams& p) {
  nlohmann::ordered_json j{{"strategy", strategy_name(p.strategy)}, {"values", p.values}};
  if (p.variant) j["variant"] = strategy_name(*p.variant);
  return j;
}

inline ModulationParams params_from_json(const nlohmann::json& j) {
  ModulationParams p;
  const auto s = strategy_from_name(j.at("strategy").get<std::string>());
  if (!s) throw Error(ErrorKind::Dataset, "unknown strategy in metadata");
  p.strategy = *s;
  p.values = j.at("values").get<std::vector<double>>();
  if (j.contains("variant")) p.variant = strategy_from_name(j["variant"].get<std::string>());
  return p;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) throw Error(ErrorKind::Io, "cannot write " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::Io, "cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace detail

inline std::string sequence_csv(const Sequence& s) {
  std::string out = "t,v_p,v_s,i_L\n";
  const Grid& g = s.i_L.grid;
  for (int k = 0; k < g.size(); ++k) {
    const auto ku = static_cast<std::size_t>(k);
    out += format_double(g.time(k)) + "," + format_double(s.v_p[ku]) + "," +
           format_double(s.v_s[ku]) + "," + format_double(s.i_L[ku]) + "\n";
  }
  return out;
}

inline void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const auto& c = ds.config;
  nlohmann::ordered_json meta;
  meta["format"] = "modkit-dataset";
  meta["version"] = 1;
  meta["circuit"] = detail::circuit_json(c.circuit);
  meta["load"] = {{"source_voltage", c.load.source_voltage},
                  {"source_resistance", c.load.source_resistance},
                  {"load_resistance", c.load.load_resistance}};
  meta["secondary_voltage"] = c.secondary_voltage;
  meta["strategy"] = strategy_name(c.strategy);
  meta["seed"] = c.seed;
  meta["sample_count"] = c.sample_count;
  meta["splits"] = c.splits;
  meta["grid"] = {{"samples_per_period", c.grid.samples_per_period},
                  {"period", c.grid.period}};
  meta["ringing"] = {{"enabled", c.ringing.enabled},
                     {"amplitude_ratio", c.ringing.amplitude_ratio},
                     {"frequency", c.ringing.frequency},
                     {"damping_tau", c.ringing.damping_tau}};
  meta["skipped"] = ds.skipped;
  auto& seqs = meta["sequences"] = nlohmann::ordered_json::array();
  for (const auto& s : ds.sequences) {
    seqs.push_back({{"index", s.index},
                    {"params", detail::params_json(s.params)},
                    {"tuple", {s.tuple.d13, s.tuple.d15, s.tuple.d57}}});
    detail::write_text(dir / ("seq_" + std::to_string(s.index) + ".csv"), sequence_csv(s));
  }
  detail::write_text(dir / "meta.json", meta.dump(2) + "\n");

  nlohmann::ordered_json sp;
  for (auto name : {SplitName::Train, SplitName::Validation, SplitName::Test}) {
    std::vector<int> idx;
    for (int i : ds.split(name)) idx.push_back(ds.sequences[static_cast<std::size_t>(i)].index);
    sp[std::string(split_label(name))] = idx;
  }
  detail::write_text(dir / "splits.json", sp.dump(2) + "\n");
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
  nlohmann::json meta, sp;
  try {
    meta = nlohmann::json::parse(detail::read_text(dir / "meta.json"));
    sp = nlohmann::json::parse(detail::read_text(dir / "splits.json"));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Dataset, std::string("bad dataset metadata: ") + e.what());
  }
  Dataset ds;
  try {
    auto& c = ds.config;
    c.circuit = detail::circuit_from_json(meta.at("circuit"));
    c.load.source_voltage = meta.at("load").at("source_voltage");
    c.load.source_resistance = meta.at("load").at("source_resistance");
    c.load.load_resistance = meta.at("load").at("load_resistance");
    c.secondary_voltage = meta.at("secondary_voltage");
    c.strategy = *strategy_from_name(meta.at("strategy").get<std::string>());
    c.seed = meta.at("seed");
    c.sample_count = meta.at("sample_count");
    c.splits = meta.at("splits").get<std::array<double, 3>>();
    c.grid = Grid::make(meta.at("grid").at("samples_per_period"),
                        meta.at("grid").at("period"));
    const auto& r = meta.at("ringing");
    c.ringing = {r.at("amplitude_ratio"), r.at("frequency"), r.at("damping_tau"),
                 r.at("enabled")};
    ds.skipped = meta.at("skipped").get<std::vector<int>>();

    std::map<int, int> position;
    for (const auto& js : meta.at("sequences")) {
      Sequence s;
      s.index = js.at("index");
      s.params = detail::params_from_json(js.at("params"));
      const auto t = js.at("tuple").get<std::array<double, 3>>();
      s.tuple = {t[0], t[1], t[2]};
      const int n = c.grid.size();
      s.v_p = SampledTrace(c.grid);
      s.v_s = SampledTrace(c.grid);
      s.i_L = SampledTrace(c.grid);
      std::istringstream in(detail::read_text(dir / ("seq_" + std::to_string(s.index) + ".csv")));
      std::string line;
      std::getline(in, line);
      if (line != "t,v_p,v_s,i_L") throw Error(ErrorKind::Dataset, "bad csv header");
      int k = 0;
      for (; k < n && std::getline(in, line); ++k) {
        double row[4];
        const char* p = line.c_str();
        for (double& x : row) {
          char* end = nullptr;
          x = std::strtod(p, &end);
          if (end == p) throw Error(ErrorKind::Dataset, "bad csv row");
          p = *end == ',' ? end + 1 : end;
        }
        const auto ku = static_cast<std::size_t>(k);
        s.v_p[ku] = row[1];
        s.v_s[ku] = row[2];
        s.i_L[ku] = row[3];
      }
      if (k != n) throw Error(ErrorKind::Dataset, "sequence length does not match grid");
      position[s.index] = static_cast<int>(ds.sequences.size());
      ds.sequences.push_back(std::move(s));
    }
    for (auto name : {SplitName::Train, SplitName::Validation, SplitName::Test}) {
      for (int idx : sp.at(std::string(split_label(name)))) {
        auto it = position.find(idx);
        if (it == position.end()) throw Error(ErrorKind::Dataset, "split references unknown sequence");
        ds.splits[static_cast<std::size_t>(name)].push_back(it->second);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Dataset, std::string("bad dataset metadata: ") + e.what());
  }
  return ds;
}

}  // namespace modkit
