// modkit command-line pipeline.
//
//   modkit simulate  --strategy TPS --values 0.1,0.3,0.05 --out DIR
//   modkit gen-data  --count 200 --splits 0.05,0.10,0.85 --seed 7 --out DIR
//   modkit train     --data DIR --out DIR [--epochs N] [--cirnet-only]
//   modkit eval      --data DIR --checkpoint FILE --out DIR
//   modkit design    --spec FILE --out DIR [--backend surrogate --checkpoint FILE]
//   modkit sweep     --spec FILE --out DIR [--powers 100,200,...]
//   modkit report    --out DIR
//   modkit wizard    [--out FILE]
//
// Failures print one line `modkit: <prefix>: <message>` and exit nonzero.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "modkit/modkit.hpp"

namespace fs = std::filesystem;
using namespace modkit;

namespace {

std::vector<double> parse_list(const std::string& text, const char* field) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    char* end = nullptr;
    const double v = std::strtod(item.c_str(), &end);
    if (item.empty() || end != item.c_str() + item.size()) {
      throw ValidationError(field, "expected comma-separated numbers");
    }
    out.push_back(v);
  }
  return out;
}

// Single file written through a temporary sibling.
void publish_file(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".partial";
  try {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    detail::write_text(tmp, text);
    fs::rename(tmp, path);
  } catch (...) {
    std::error_code ec;
    fs::remove(tmp, ec);
    throw;
  }
}

std::string trace_csv(const StateTrace& st) {
  std::string out = "t,i_L,v_C1,v_C2,v_p,v_s\n";
  const Grid& g = st.grid();
  for (int k = 0; k < g.size(); ++k) {
    const auto u = static_cast<std::size_t>(k);
    out += format_double(g.time(k)) + "," + format_double(st.i_L[u]) + "," +
           format_double(st.v_C1[u]) + "," + format_double(st.v_C2[u]) + "," +
           format_double(st.v_p[u]) + "," + format_double(st.v_s[u]) + "\n";
  }
  return out;
}

std::string opt_text(double v) { return std::isnan(v) ? "" : format_double(v); }

struct Options {
  std::string spec, out, checkpoint, backend, data, splits = "0.05,0.10,0.85", powers;
  std::optional<std::uint64_t> seed;
  std::optional<int> budget;
  int count = 200;
  // simulate
  std::string strategy = "SPS", values = "0.25", variant, mode = "full";
  double v1 = 200.0, v2 = 160.0, load_resistance = 25.0;
  // gen-data
  bool ringing = false;
  std::string data_strategy = "TPS";
  // train
  int epochs = 2000, modnet_epochs = 2000, batch = 0;
  double lr = 1e-3, lambda_p = 1.0;
  std::string init = "random";
  bool cirnet_only = false;
};

DesignSpec load_spec(const Options& o) {
  if (o.spec.empty()) throw ValidationError("spec", "--spec is required");
  DesignSpec s = parse_design_spec(o.spec);
  if (o.seed) s.seed = *o.seed;
  if (o.budget) s.budget = *o.budget;
  if (!o.backend.empty()) {
    const auto b = backend_from_name(o.backend);
    if (!b) throw ValidationError("backend", "expected oracle or surrogate");
    s.backend = *b;
  }
  if (!o.checkpoint.empty()) s.checkpoint = o.checkpoint;
  s.validate();
  return s;
}

std::optional<SurrogatePair> load_pair(const DesignSpec& s) {
  if (s.backend != BackendKind::Surrogate) return std::nullopt;
  return load_checkpoint(s.checkpoint);
}

void require_out(const Options& o) {
  if (o.out.empty()) throw ValidationError("out", "--out is required");
}

int run_simulate(const Options& o) {
  require_out(o);
  const auto st = strategy_from_name(o.strategy);
  if (!st) throw ValidationError("strategy", "unknown strategy '" + o.strategy + "'");
  ModulationParams p{*st, parse_list(o.values, "values"), std::nullopt};
  if (!o.variant.empty()) p.variant = strategy_from_name(o.variant);
  const auto tuple = to_phase_shift_tuple(p);
  CircuitParams c;
  const Grid g = Grid::make(200, c.period());
  StateTrace trace;
  if (o.mode == "oracle") {
    trace = oracle_state(c, o.v1, o.v2, tuple, g);
  } else if (o.mode == "full") {
    LoadModel load;
    load.source_voltage = o.v1;
    load.load_resistance = o.load_resistance;
    trace = simulate_full(c, load, tuple, g, 200000, 1e-9);
  } else {
    throw ValidationError("mode", "expected full or oracle");
  }
  publish_directory(o.out, [&](const fs::path& dir) {
    detail::write_text(dir / "trace.csv", trace_csv(trace));
  });
  return 0;
}

int run_gen_data(const Options& o) {
  require_out(o);
  DatasetConfig cfg;
  cfg.sample_count = o.count;
  if (o.seed) cfg.seed = *o.seed;
  const auto fr = parse_list(o.splits, "splits");
  if (fr.size() != 3) throw ValidationError("splits", "expected three fractions");
  cfg.splits = {fr[0], fr[1], fr[2]};
  cfg.ringing.enabled = o.ringing;
  const auto st = strategy_from_name(o.data_strategy);
  if (!st) throw ValidationError("strategy", "unknown strategy '" + o.data_strategy + "'");
  cfg.strategy = *st;
  const auto ds = generate_dataset(cfg);
  publish_directory(o.out, [&](const fs::path& dir) { write_dataset(ds, dir); });
  return 0;
}

int run_train(const Options& o) {
  require_out(o);
  if (o.data.empty()) throw ValidationError("data", "--data is required");
  const auto ds = read_dataset(o.data);
  TrainConfig cfg;
  cfg.epochs = o.epochs;
  cfg.modnet_epochs = o.modnet_epochs;
  cfg.learning_rate = o.lr;
  cfg.lambda_p = o.lambda_p;
  cfg.batch_size = o.batch;
  if (o.seed) cfg.seed = *o.seed;
  cfg.validate();
  InitMode init;
  if (o.init == "random") {
    init = InitMode::Random;
  } else if (o.init == "zero") {
    init = InitMode::Zero;
  } else {
    throw ValidationError("init", "expected random or zero");
  }
  auto pair = make_surrogate(ds, init, cfg.seed,
                             o.cirnet_only ? VoltageSource::Ideal : VoltageSource::ModNet);
  const auto res = train(pair, ds, cfg);
  std::string hist = "stage,epoch,loss,l_d,l_p,val_mae\n";
  for (const auto& e : res.history) {
    hist += e.stage + "," + std::to_string(e.epoch) + "," + format_double(e.loss) + "," +
            format_double(e.l_d) + "," + format_double(e.l_p) + "," + opt_text(e.val_mae) + "\n";
  }
  publish_directory(o.out, [&](const fs::path& dir) {
    save_checkpoint(res.pair, dir / "checkpoint.json");
    detail::write_text(dir / "history.csv", hist);
  });
  return 0;
}

int run_eval(const Options& o) {
  require_out(o);
  if (o.data.empty()) throw ValidationError("data", "--data is required");
  if (o.checkpoint.empty()) throw ValidationError("checkpoint", "--checkpoint is required");
  const auto ds = read_dataset(o.data);
  const auto pair = load_checkpoint(o.checkpoint);
  const auto m = evaluate_mae_all(pair, ds);
  std::string label = pair.source == VoltageSource::Ideal ? "cirnet_only" : "modnet_cirnet";
  if (pair.train_config.lambda_p == 0.0) label += "_data_only";
  const std::string csv = "model,train_mae,validation_mae,test_mae\n" + label + "," +
                          opt_text(m.train) + "," + opt_text(m.validation) + "," +
                          opt_text(m.test) + "\n";
  publish_directory(o.out, [&](const fs::path& dir) { detail::write_text(dir / "mae.csv", csv); });
  return 0;
}

int run_design(const Options& o, bool sweep) {
  require_out(o);
  const auto spec = load_spec(o);
  const auto pair = load_pair(spec);
  std::vector<double> powers;
  if (sweep && !o.powers.empty()) powers = parse_list(o.powers, "powers");
  const auto bundle = run_design_report(spec, pair ? &*pair : nullptr, powers);
  emit_report(bundle, o.out);
  if (!sweep && bundle.summary["outcome"].is_null()) {
    throw Error(ErrorKind::Infeasible, bundle.summary["error"].get<std::string>());
  }
  return 0;
}

int run_report(const Options& o) {
  require_out(o);
  const auto b = regenerate_report(o.out);
  emit_report(b, o.out);
  return 0;
}

int run_wizard(const Options& o) {
  const auto spec = wizard(std::cin, std::cerr);
  const auto text = spec_json(spec).dump(2) + "\n";
  if (o.out.empty()) {
    std::cout << text;
  } else {
    publish_file(o.out, text);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"modulation design toolkit"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* c) {
    c->add_option("--out", o.out, "output directory");
    c->add_option("--seed", o.seed, "random seed");
  };

  auto* sim = app.add_subcommand("simulate", "steady-state waveforms of one modulation point");
  common(sim);
  sim->add_option("--strategy", o.strategy, "SPS|DPS|EPS1|EPS2|TPS|HYBRID");
  sim->add_option("--values", o.values, "comma-separated ratios");
  sim->add_option("--variant", o.variant, "HYBRID sub-pattern");
  sim->add_option("--mode", o.mode, "full (RK4 with capacitors) or oracle (stiff links)");
  sim->add_option("--v1", o.v1, "primary source voltage");
  sim->add_option("--v2", o.v2, "secondary link voltage (oracle mode)");
  sim->add_option("--load", o.load_resistance, "load resistance (full mode)");

  auto* gen = app.add_subcommand("gen-data", "simulate a training dataset");
  common(gen);
  gen->add_option("--count", o.count, "number of sequences");
  gen->add_option("--splits", o.splits, "train,validation,test fractions");
  gen->add_option("--strategy", o.data_strategy, "modulation family sampled");
  gen->add_flag("--ringing", o.ringing, "inject edge ringing into v_p, v_s");

  auto* tr = app.add_subcommand("train", "train ModNet and CirNet");
  common(tr);
  tr->add_option("--data", o.data, "dataset directory");
  tr->add_option("--epochs", o.epochs, "CirNet epochs");
  tr->add_option("--modnet-epochs", o.modnet_epochs, "ModNet epochs");
  tr->add_option("--lr", o.lr, "learning rate");
  tr->add_option("--lambda-p", o.lambda_p, "physics loss weight (0 = data only)");
  tr->add_option("--batch", o.batch, "minibatch size (0 = full batch)");
  tr->add_option("--init", o.init, "random or zero");
  tr->add_flag("--cirnet-only", o.cirnet_only, "feed CirNet ideal voltages, skip ModNet");

  auto* ev = app.add_subcommand("eval", "free-running MAE per split");
  common(ev);
  ev->add_option("--data", o.data, "dataset directory");
  ev->add_option("--checkpoint", o.checkpoint, "checkpoint file");

  for (auto* c : {app.add_subcommand("design", "optimize one operating point and emit a report"),
                  app.add_subcommand("sweep", "optimize across a power grid and emit a report")}) {
    common(c);
    c->add_option("--spec", o.spec, "design spec file");
    c->add_option("--backend", o.backend, "oracle|surrogate");
    c->add_option("--checkpoint", o.checkpoint, "checkpoint for the surrogate backend");
    c->add_option("--budget", o.budget, "objective evaluations");
    if (c->get_name() == "sweep") c->add_option("--powers", o.powers, "comma-separated watts");
  }

  auto* rep = app.add_subcommand("report", "rebuild report tables from summary.json in --out");
  rep->add_option("--out", o.out, "report directory");

  auto* wiz = app.add_subcommand("wizard", "interactive design spec (prompts on stderr)");
  wiz->add_option("--out", o.out, "spec file to write (stdout when absent)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "modkit: usage-error: %s\n", e.what());
    return 2;
  }

  try {
    const auto* cmd = app.get_subcommands().front();
    const auto& name = cmd->get_name();
    if (name == "simulate") return run_simulate(o);
    if (name == "gen-data") return run_gen_data(o);
    if (name == "train") return run_train(o);
    if (name == "eval") return run_eval(o);
    if (name == "design") return run_design(o, false);
    if (name == "sweep") return run_design(o, true);
    if (name == "report") return run_report(o);
    if (name == "wizard") return run_wizard(o);
  } catch (const Error& e) {
    std::fprintf(stderr, "modkit: %s: %s\n", std::string(error_prefix(e.kind())).c_str(), e.what());
    return 1;
  } catch (const nlohmann::json::exception& e) {
    std::fprintf(stderr, "modkit: parse-error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "modkit: internal-error: %s\n", e.what());
    return 1;
  }
  return 1;
}
