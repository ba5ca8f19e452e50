#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hawkes/causality.hpp"
#include "hawkes/checkpoint.hpp"
#include "hawkes/eventseq.hpp"
#include "hawkes/hexp.hpp"
#include "hawkes/isahp.hpp"
#include "hawkes/metrics.hpp"
#include "hawkes/simulate.hpp"
#include "hawkes/trainer.hpp"

namespace hawkes::cli {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config handling. One JSON file per run; unknown keys are rejected so typos
// fail loudly; relative paths resolve against the config file's directory.

inline void check_keys(const json& j, std::initializer_list<const char*> allowed,
                       const std::string& where) {
  if (!j.is_object()) throw ConfigError("config: '" + where + "' must be an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) {
        ok = true;
        break;
      }
    if (!ok) throw ConfigError("config: unknown key '" + key + "' in " + where);
  }
}

struct RunContext {
  json config;
  fs::path config_dir;
  fs::path run_dir;
  std::uint64_t seed = 0;
  std::string fingerprint;

  fs::path resolve(const std::string& p) const {
    fs::path path(p);
    return path.is_absolute() ? path : config_dir / path;
  }

  fs::path output(const std::string& name) const { return run_dir / name; }
};

inline RunContext make_run_context(const std::string& config_path,
                                   const std::optional<std::string>& out_override,
                                   const std::optional<std::uint64_t>& seed_override) {
  std::ifstream in(config_path);
  if (!in) throw ConfigError("cannot open config '" + config_path + "'");
  RunContext ctx;
  try {
    in >> ctx.config;
  } catch (const json::exception& e) {
    throw ConfigError("config '" + config_path + "': " + e.what());
  }
  check_keys(ctx.config,
             {"seed", "paths", "sim", "model", "split", "train", "eval", "attribute",
              "report"},
             "top level");

  ctx.config_dir = fs::absolute(fs::path(config_path)).parent_path();
  ctx.seed = seed_override.value_or(ctx.config.value("seed", 0ull));
  ctx.config["seed"] = ctx.seed;  // effective config: the snapshot reproduces the run

  const json paths = ctx.config.value("paths", json::object());
  check_keys(paths, {"run_dir", "dataset"}, "paths");
  std::string run_dir = out_override.value_or(paths.value("run_dir", "run"));
  ctx.run_dir = fs::path(run_dir).is_absolute() ? fs::path(run_dir)
                                                : ctx.config_dir / run_dir;
  fs::create_directories(ctx.run_dir);

  ctx.fingerprint = fnv1a64_hex(ctx.config.dump());
  detail::write_json_file(ctx.config, (ctx.run_dir / "config_snapshot.json").string());
  return ctx;
}

inline fs::path dataset_path(const RunContext& ctx, bool require_exists = false) {
  const json paths = ctx.config.value("paths", json::object());
  if (!paths.contains("dataset"))
    throw ConfigError("config: paths.dataset is required for this command");
  fs::path p = ctx.resolve(paths.at("dataset").get<std::string>());
  if (require_exists && !fs::exists(p))
    throw ConfigError("missing dataset: " + p.string());
  return p;
}

// ---------------------------------------------------------------------------
// Section parsers.

inline MHPParams parse_mhp(const json& j) {
  check_keys(j, {"mu", "alpha", "gamma"}, "sim.mhp");
  MHPParams p;
  p.mu = j.at("mu").get<std::vector<double>>();
  p.alpha = hawkes::detail::matrix_from_json(j.at("alpha"));
  p.gamma = hawkes::detail::matrix_from_json(j.at("gamma"));
  p.validate();
  return p;
}

inline PgemSpec parse_pgem(const json& j) {
  check_keys(j, {"K", "default_rate", "rules"}, "sim.pgem");
  PgemSpec spec;
  spec.K = j.at("K").get<int>();
  spec.default_rate = j.value("default_rate", 0.0);
  for (const auto& rj : j.value("rules", json::array())) {
    check_keys(rj, {"target", "parents", "window", "rate_active", "rate_base"},
               "sim.pgem.rules[]");
    PgemRule r;
    r.target = rj.at("target").get<int>();
    r.parents = rj.at("parents").get<std::vector<int>>();
    r.window = rj.at("window").get<double>();
    r.rate_active = rj.at("rate_active").get<double>();
    r.rate_base = rj.at("rate_base").get<double>();
    spec.rules.push_back(std::move(r));
  }
  spec.validate();
  return spec;
}

inline IsahpConfig parse_isahp_config(const json& model, int K) {
  IsahpConfig cfg;
  cfg.K = K;
  if (model.contains("isahp")) {
    const json& j = model.at("isahp");
    check_keys(j,
               {"embed_dim", "value_dim", "heads", "hidden", "omega1", "omega2",
                "compensator_mode", "gamma_floor"},
               "model.isahp");
    cfg.embed_dim = j.value("embed_dim", cfg.embed_dim);
    cfg.value_dim = j.value("value_dim", cfg.value_dim);
    cfg.heads = j.value("heads", cfg.heads);
    cfg.hidden = j.value("hidden", cfg.hidden);
    cfg.omega1 = j.value("omega1", cfg.omega1);
    cfg.omega2 = j.value("omega2", cfg.omega2);
    cfg.gamma_floor = j.value("gamma_floor", cfg.gamma_floor);
    const std::string mode = j.value("compensator_mode", "all-types");
    if (mode == "all-types")
      cfg.compensator_mode = IsahpConfig::CompensatorMode::AllTypes;
    else if (mode == "observed-type")
      cfg.compensator_mode = IsahpConfig::CompensatorMode::ObservedType;
    else
      throw ConfigError("config: unknown compensator_mode '" + mode + "'");
  }
  cfg.validate();
  return cfg;
}

inline HexpConfig parse_hexp_config(const json& model) {
  HexpConfig cfg;
  if (model.contains("hexp")) {
    const json& j = model.at("hexp");
    check_keys(j, {"freeze_gamma", "gamma_init"}, "model.hexp");
    cfg.freeze_gamma = j.value("freeze_gamma", cfg.freeze_gamma);
    cfg.gamma_init = j.value("gamma_init", cfg.gamma_init);
  }
  cfg.validate();
  return cfg;
}

inline TrainConfig parse_train_config(const RunContext& ctx) {
  TrainConfig tc;
  tc.seed = ctx.seed;
  tc.verbose = true;
  if (ctx.config.contains("train")) {
    const json& j = ctx.config.at("train");
    check_keys(j,
               {"learning_rate", "batch_size", "max_epochs", "patience", "grad_clip",
                "beta1", "beta2", "adam_eps", "verbose"},
               "train");
    tc.learning_rate = j.value("learning_rate", tc.learning_rate);
    tc.batch_size = j.value("batch_size", tc.batch_size);
    tc.max_epochs = j.value("max_epochs", tc.max_epochs);
    tc.patience = j.value("patience", tc.patience);
    tc.grad_clip = j.value("grad_clip", tc.grad_clip);
    tc.beta1 = j.value("beta1", tc.beta1);
    tc.beta2 = j.value("beta2", tc.beta2);
    tc.adam_eps = j.value("adam_eps", tc.adam_eps);
    tc.verbose = j.value("verbose", tc.verbose);
  }
  tc.validate();
  return tc;
}

inline Split parse_split(const RunContext& ctx, const Dataset& ds) {
  double f1 = 0.8, f2 = 0.1, f3 = 0.1;
  std::uint64_t seed = ctx.seed;
  if (ctx.config.contains("split")) {
    const json& j = ctx.config.at("split");
    check_keys(j, {"fractions", "seed"}, "split");
    if (j.contains("fractions")) {
      const auto f = j.at("fractions").get<std::vector<double>>();
      if (f.size() != 3) throw ConfigError("config: split.fractions needs 3 entries");
      f1 = f[0];
      f2 = f[1];
      f3 = f[2];
    }
    seed = j.value("seed", seed);
  }
  return split(ds, f1, f2, f3, seed);
}

inline std::string model_type(const RunContext& ctx) {
  if (!ctx.config.contains("model"))
    throw ConfigError("config: model section is required for this command");
  const json& model = ctx.config.at("model");
  check_keys(model, {"type", "isahp", "hexp"}, "model");
  const std::string type = model.value("type", "");
  if (type != "isahp" && type != "hexp")
    throw ConfigError("config: model.type must be 'isahp' or 'hexp'");
  return type;
}

// ---------------------------------------------------------------------------
// Model views used by evaluation.

inline CausalModelView isahp_view(const IsahpParams& P) {
  CausalModelView view;
  view.causality = [&P](const Dataset& ds, std::span<const std::size_t> subset) {
    AttributionResult ar = attribute(P, ds, subset);
    AggregateResult agg = aggregate(ar, ds.K());
    return agg.mean;  // absent entries stay 0 for ranking purposes
  };
  view.predict = [&P](const EventSequence& seq, std::size_t i) {
    SequenceForward f = isahp_forward(P, seq);
    return isahp_predict_type(f, i);
  };
  return view;
}

inline CausalModelView hexp_view(const HexpModel& m) {
  CausalModelView view;
  view.causality = [&m](const Dataset&, std::span<const std::size_t>) {
    return hexp_causality(m);
  };
  const MHPParams decoded = m.decoded();
  view.predict = [decoded](const EventSequence& seq, std::size_t i) {
    return hexp_predict_type(decoded, seq, i);
  };
  return view;
}

// ---------------------------------------------------------------------------
// Commands. Each writes its artifacts under the run directory and prints a
// short summary; they throw on failure and the dispatcher maps exit codes.

inline int run_simulate(RunContext& ctx) {
  if (!ctx.config.contains("sim"))
    throw ConfigError("config: sim section is required for 'simulate'");
  const json& sim = ctx.config.at("sim");
  check_keys(sim, {"kind", "S", "t_end", "mhp", "pgem"}, "sim");
  const std::string kind = sim.value("kind", "");

  SimConfig sc;
  sc.seed = ctx.seed;
  Dataset ds;
  if (kind == "mhp") {
    if (!sim.contains("mhp")) throw ConfigError("config: sim.mhp section missing");
    sc.S = sim.value("S", 100ull);
    sc.t_end = sim.value("t_end", 100.0);
    ds = simulate_mhp(parse_mhp(sim.at("mhp")), sc);
  } else if (kind == "pgem") {
    PgemSpec spec = sim.contains("pgem") ? parse_pgem(sim.at("pgem"))
                                         : PgemSpec::synergy_default();
    sc.S = sim.value("S", PgemSpec::kSynergyDefaultSequences);
    sc.t_end = sim.value("t_end", PgemSpec::kSynergyDefaultHorizon);
    ds = simulate_pgem(spec, sc);
  } else {
    throw ConfigError("config: sim.kind must be 'mhp' or 'pgem'");
  }

  const fs::path out = dataset_path(ctx);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_jsonl(ds, out.string());
  std::cout << "simulate: S=" << ds.size() << " K=" << ds.K()
            << " total_events=" << ds.total_events() << " -> " << out.string() << "\n";
  return 0;
}

inline int run_train(RunContext& ctx) {
  const Dataset ds = load_jsonl(dataset_path(ctx, true).string());
  const Split sp = parse_split(ctx, ds);
  const TrainConfig tc = parse_train_config(ctx);
  const std::string type = model_type(ctx);

  TrainReport report;
  const std::string checkpoint = ctx.output("checkpoint.json").string();
  if (type == "isahp") {
    auto fit = fit_isahp(ds, sp, parse_isahp_config(ctx.config.at("model"), ds.K()), tc);
    report = std::move(fit.report);
    save_checkpoint(fit.params, checkpoint);
  } else {
    auto fit = fit_hexp(ds, sp, tc, parse_hexp_config(ctx.config.at("model")));
    report = std::move(fit.report);
    save_checkpoint(fit.model, checkpoint);
  }
  report.checkpoint_path = checkpoint;

  json rj;
  rj["train_loss"] = report.train_loss;
  rj["val_loss"] = report.val_loss;
  rj["stop_epoch"] = report.stop_epoch;
  rj["best_epoch"] = report.best_epoch;
  rj["best_val_loss"] = report.best_val_loss;
  rj["smoothed_violations"] = report.smoothed_violations;
  rj["checkpoint"] = "checkpoint.json";
  detail::write_json_file(rj, ctx.output("train_report.json").string());

  std::cout << "train: model=" << type << " epochs=" << report.stop_epoch
            << " best_epoch=" << report.best_epoch << " best_val=" << report.best_val_loss
            << " wall=" << report.wall_seconds << "s -> " << checkpoint << "\n";
  return 0;
}

inline fs::path checkpoint_path(const RunContext& ctx, const char* section) {
  std::string p = "checkpoint.json";
  bool from_config = false;
  if (ctx.config.contains(section) && ctx.config.at(section).contains("checkpoint")) {
    p = ctx.config.at(section).at("checkpoint").get<std::string>();
    from_config = true;
  }
  fs::path path = from_config ? ctx.resolve(p) : ctx.output(p);
  if (!fs::exists(path))
    throw ConfigError(std::string("missing checkpoint for '") + section + "': " +
                      path.string());
  return path;
}

inline int run_eval(RunContext& ctx) {
  const Dataset ds = load_jsonl(dataset_path(ctx, true).string());
  if (!ds.ground_truth())
    throw ConfigError("eval: dataset has no ground-truth sidecar");
  const Split sp = parse_split(ctx, ds);

  EvalOptions opts;
  json patterns = json::array();
  if (ctx.config.contains("eval")) {
    const json& j = ctx.config.at("eval");
    check_keys(j, {"checkpoint", "include_diagonal", "patterns"}, "eval");
    opts.include_diagonal = j.value("include_diagonal", true);
    patterns = j.value("patterns", json::array());
  }

  const fs::path ckpt = checkpoint_path(ctx, "eval");
  const std::string kind = checkpoint_model_kind(ckpt.string());

  // Keep the loaded model alive for the view's lifetime.
  std::optional<IsahpParams> isahp_params;
  std::optional<HexpModel> hexp_model;
  CausalModelView view;
  if (kind == "isahp") {
    isahp_params = load_checkpoint_isahp(ckpt.string());
    view = isahp_view(*isahp_params);
  } else {
    hexp_model = load_checkpoint_hexp(ckpt.string());
    view = hexp_view(*hexp_model);
  }

  EvalReport report = evaluate(view, ds, sp.test, *ds.ground_truth(), ctx.fingerprint, opts);
  json out = report.to_json();
  out["model"] = kind;

  // Causality matrix in the ground-truth schema, for external comparison.
  const Matrix scores = view.causality(ds, sp.test);
  detail::write_json_file(
      json{{"K", ds.K()}, {"matrix", hawkes::detail::matrix_to_json(scores)}},
      ctx.output("causality_matrix.json").string());

  // Synergy-ratio analysis over the configured wildcard patterns, computed on
  // the whole dataset (pattern matches are sparse).
  if (!patterns.empty()) {
    AttributionResult ar;
    if (kind == "isahp")
      ar = attribute(*isahp_params, ds);
    else
      ar = hexp_attribution(*hexp_model, ds);
    json ratios = json::array();
    for (const auto& pj : patterns) {
      check_keys(pj, {"pattern", "synergy_type", "source_type", "target_type"},
                 "eval.patterns[]");
      const std::string pattern = pj.at("pattern").get<std::string>();
      SynergyRatio r = synergy_ratio(ar, ds, pattern, pj.value("synergy_type", 1),
                                     pj.value("source_type", 0), pj.value("target_type", 3));
      json rj = {{"pattern", pattern},
                 {"defined", r.defined},
                 {"n_synergistic", r.n_synergistic},
                 {"n_other", r.n_other}};
      rj["ratio"] = r.defined ? json(r.ratio) : json();
      ratios.push_back(std::move(rj));
    }
    out["synergy_ratios"] = std::move(ratios);
  }

  detail::write_json_file(out, ctx.output("eval_report.json").string());
  std::cout << "eval: model=" << kind
            << " auc=" << (report.auc ? std::to_string(*report.auc) : "undefined")
            << " tau=" << (report.kendall_tau ? std::to_string(*report.kendall_tau)
                                              : "undefined")
            << " accuracy=" << report.accuracy << " -> "
            << ctx.output("eval_report.json").string() << "\n";
  return 0;
}

inline int run_attribute(RunContext& ctx) {
  const Dataset ds = load_jsonl(dataset_path(ctx, true).string());
  std::string subset = "all";
  if (ctx.config.contains("attribute")) {
    const json& j = ctx.config.at("attribute");
    check_keys(j, {"checkpoint", "subset"}, "attribute");
    subset = j.value("subset", subset);
  }
  std::vector<std::size_t> indices;
  if (subset == "test")
    indices = parse_split(ctx, ds).test;
  else if (subset != "all")
    throw ConfigError("config: attribute.subset must be 'all' or 'test'");

  const fs::path ckpt = checkpoint_path(ctx, "attribute");
  const std::string kind = checkpoint_model_kind(ckpt.string());
  AttributionResult ar;
  if (kind == "isahp") {
    const IsahpParams P = load_checkpoint_isahp(ckpt.string());
    ar = attribute(P, ds, indices);
  } else {
    const HexpModel m = load_checkpoint_hexp(ckpt.string());
    ar = hexp_attribution(m, ds, indices);
  }
  detail::write_json_file(attribution_to_json(ar), ctx.output("attribution.json").string());
  std::size_t pairs = 0;
  for (const auto& s : ar.sequences) pairs += s.pairs.size();
  std::cout << "attribute: model=" << kind << " sequences=" << ar.sequences.size()
            << " pairs=" << pairs << " -> " << ctx.output("attribution.json").string()
            << "\n";
  return 0;
}

inline int run_report(RunContext& ctx) {
  if (!ctx.config.contains("report"))
    throw ConfigError("config: report section is required for 'report'");
  const json& rep = ctx.config.at("report");
  check_keys(rep, {"rows", "ablation"}, "report");

  auto load_eval = [&](const std::string& rel) {
    const fs::path p = ctx.resolve(rel);
    if (!fs::exists(p)) throw ConfigError("missing eval report: " + p.string());
    std::ifstream in(p);
    json j;
    in >> j;
    return j;
  };

  struct Row {
    std::string name;
    json eval;
  };
  std::vector<Row> rows;
  for (const auto& rj : rep.value("rows", json::array())) {
    check_keys(rj, {"name", "eval"}, "report.rows[]");
    rows.push_back({rj.at("name").get<std::string>(),
                    load_eval(rj.at("eval").get<std::string>())});
  }
  if (rep.contains("ablation")) {
    const json& ab = rep.at("ablation");
    check_keys(ab, {"label", "with", "without"}, "report.ablation");
    const std::string label = ab.value("label", "tlr");
    rows.push_back({label + "-on", load_eval(ab.at("with").get<std::string>())});
    rows.push_back({label + "-off", load_eval(ab.at("without").get<std::string>())});
  }
  if (rows.empty()) throw ConfigError("config: report has no rows");

  auto fmt = [](const json& v) {
    if (v.is_null()) return std::string("undefined");
    std::ostringstream os;
    os << std::fixed << std::setprecision(4) << v.get<double>();
    return os.str();
  };

  std::ostringstream table;
  table << std::left << std::setw(16) << "model" << std::setw(12) << "auc"
        << std::setw(14) << "kendall_tau" << std::setw(10) << "accuracy" << "\n";
  json jrows = json::array();
  for (const auto& row : rows) {
    table << std::left << std::setw(16) << row.name << std::setw(12)
          << fmt(row.eval.value("auc", json())) << std::setw(14)
          << fmt(row.eval.value("kendall_tau", json())) << std::setw(10)
          << fmt(row.eval.value("accuracy", json())) << "\n";
    jrows.push_back({{"name", row.name},
                     {"auc", row.eval.value("auc", json())},
                     {"kendall_tau", row.eval.value("kendall_tau", json())},
                     {"accuracy", row.eval.value("accuracy", json())}});
  }

  std::ofstream txt(ctx.output("report.txt"));
  if (!txt) throw IoError("cannot write report.txt");
  txt << table.str();
  detail::write_json_file(json{{"rows", jrows}}, ctx.output("report.json").string());
  std::cout << table.str();
  std::cout << "report -> " << ctx.output("report.txt").string() << "\n";
  return 0;
}

// Exit codes: 0 success, 1 usage/config error, 2 runtime/numerical error.
inline int dispatch(const std::string& command, const std::string& config_path,
                    const std::optional<std::string>& out_override,
                    const std::optional<std::uint64_t>& seed_override) {
  try {
    RunContext ctx = make_run_context(config_path, out_override, seed_override);
    if (command == "simulate") return run_simulate(ctx);
    if (command == "train") return run_train(ctx);
    if (command == "eval") return run_eval(ctx);
    if (command == "attribute") return run_attribute(ctx);
    if (command == "report") return run_report(ctx);
    throw ConfigError("unknown command '" + command + "'");
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace hawkes::cli
