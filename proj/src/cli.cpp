#include "ecoate/cli.hpp"

#include <fcntl.h>
#include <spawn.h>
#include <sys/wait.h>

#include <algorithm>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "ecoate/error.hpp"
#include "ecoate/estimators.hpp"
#include "ecoate/simlab.hpp"

extern char** environ;

namespace ecoate::cli {

namespace fs = std::filesystem;
using nlohmann::json;

#ifndef ECOATE_BUILD_ID
#define ECOATE_BUILD_ID "unknown"
#endif

const char* build_id() { return ECOATE_BUILD_ID; }

namespace {

const char* kFusion[] = {"equal", "size-weighted"};

std::string fusion_name(federation::Fusion f) { return kFusion[f == federation::Fusion::kEqual ? 0 : 1]; }

struct OptionText {
  std::string fusion, matrix_form, centering;
};

void add_common(CLI::App* sub, RunConfig& cfg, OptionText& text, std::string& config_path) {
  sub->add_option("--config", config_path, "JSON file with option values; flags take precedence");
  sub->add_option("--sieve-degree", cfg.options.sieve_degree, "polynomial degree of the sieve basis");
  sub->add_option("--sieve-pairwise", cfg.options.sieve_pairwise, "include pairwise covariate products (true/false)");
  sub->add_option("--ridge", cfg.options.ridge, "ridge penalty of sieve fits");
  sub->add_option("--clamp", cfg.options.clamp, "propensity clamp in (0, 0.5)");
  sub->add_option("--fusion", text.fusion, "equal | size-weighted");
  sub->add_option("--matrix-form", text.matrix_form, "tilt-adjusted | untilted");
  sub->add_option("--centering", text.centering, "model | kernel");
  sub->add_option("--bandwidth-scale", cfg.options.bandwidth_scale, "multiplier of the Silverman bandwidth");
  sub->add_option("--newton-tol", cfg.options.newton.tol, "moment-equation tolerance");
  sub->add_option("--newton-max-iter", cfg.options.newton.max_iter, "Newton iteration limit");
  sub->add_option("--timeout", cfg.options.timeout_seconds, "seconds to wait for each message");
  sub->add_option("--verbosity", cfg.verbosity, "0 silences the log");
}

void apply_config_file(CLI::App* sub, const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config file " + path + " must hold an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    std::string key = it.key();
    if (key == "command") continue;
    std::string flag = key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    if (flag == "config") throw ConfigError("config files cannot nest: key 'config'");
    CLI::Option* opt = sub->get_option_no_throw("--" + flag);
    if (!opt) throw ConfigError("unknown config key '" + key + "' for " + sub->get_name());
    if (opt->count() > 0) continue;
    auto text = [&](const json& v) -> std::string {
      if (v.is_string()) return v.get<std::string>();
      if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
      if (v.is_number()) return v.dump();
      throw ConfigError("config key '" + key + "' has an unsupported value");
    };
    try {
      if (it->is_array()) {
        for (const auto& v : *it) opt->add_result(text(v));
      } else {
        opt->add_result(text(*it));
      }
      opt->run_callback();
    } catch (const CLI::ParseError& e) {
      throw ConfigError("config key '" + key + "': " + e.what());
    }
  }
}

void finish_options(RunConfig& cfg, const OptionText& text) {
  json j = json::object();
  if (!text.fusion.empty()) j["fusion"] = text.fusion;
  if (!text.matrix_form.empty()) j["matrix_form"] = text.matrix_form;
  if (!text.centering.empty()) j["centering"] = text.centering;
  cfg.options = federation::options_from_json(j, cfg.options);
  if (!(cfg.options.timeout_seconds >= 0.0)) throw ConfigError("timeout must be non-negative");
  if (cfg.options.newton.max_iter < 1) throw ConfigError("newton_max_iter must be at least 1");
}

void require(bool ok, const std::string& what) {
  if (!ok) throw UsageError(what);
}

std::vector<std::string> option_flags(const federation::EcoOptions& o) {
  auto num = [](double v) { return expr::format_number(v); };
  return {"--sieve-degree",    std::to_string(o.sieve_degree),
          "--sieve-pairwise",  o.sieve_pairwise ? "true" : "false",
          "--ridge",           num(o.ridge),
          "--clamp",           num(o.clamp),
          "--fusion",          fusion_name(o.fusion),
          "--matrix-form",     o.matrix_form == gradient::MatrixForm::kTiltAdjusted ? "tilt-adjusted" : "untilted",
          "--centering",       o.centering == gradient::Centering::kModelImplied ? "model" : "kernel",
          "--bandwidth-scale", num(o.bandwidth_scale),
          "--newton-tol",      num(o.newton.tol),
          "--newton-max-iter", std::to_string(o.newton.max_iter),
          "--timeout",         num(o.timeout_seconds)};
}

expr::BasisVector parse_basis(const std::string& text, int dim) {
  auto items = expr::split_list(text);
  if (items.empty()) return {};
  return expr::BasisVector::parse(items, dim);
}

std::vector<expr::BasisVector> source_bases(const RunConfig& cfg, int dim) {
  const std::size_t k = cfg.source_paths.size();
  std::vector<expr::BasisVector> out;
  if (cfg.xi.size() != k && !(cfg.xi.size() == 1 && k > 1))
    throw UsageError("give one --xi per --source (or a single --xi for all sources)");
  for (std::size_t s = 0; s < k; ++s) out.push_back(parse_basis(cfg.xi.size() == 1 ? cfg.xi[0] : cfg.xi[s], dim));
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("cannot write " + path.string());
}

int run_simulate(const RunConfig& cfg, std::ostream& out, std::ostream& log) {
  simlab::Scenario scn;
  scn.epsilons = cfg.epsilons;
  scn.n = cfg.n;
  scn.sources = cfg.sources;
  scn.seed = cfg.seed;
  if (!cfg.estimators.empty()) scn.estimators = cfg.estimators;
  scn.options = cfg.options;
  scn.validate();
  if (!cfg.sites_dir.empty()) {
    require(cfg.epsilons.size() == 1, "--sites-dir takes exactly one --epsilon");
    require(cfg.out.empty() && cfg.svg.empty(), "--sites-dir cannot be combined with --out or --svg");
    fs::create_directories(cfg.sites_dir);
    for (const auto& d : simlab::sample_scenario(scn, cfg.epsilons[0], 0)) {
      const fs::path path = fs::path(cfg.sites_dir) / ("site_" + std::to_string(d.site_id) + ".csv");
      write_csv(d, path);
      out << path.string();
      if (d.site_id > 0) {
        auto terms = simlab::true_basis(d.site_id).to_strings();
        out << "  xi: ";
        for (std::size_t j = 0; j < terms.size(); ++j) out << (j ? "," : "") << terms[j];
      }
      out << "\n";
    }
    return 0;
  }
  require(cfg.reps >= 1, "--reps must be at least 1");
  require(cfg.workers >= 1, "--workers must be at least 1");
  auto rows = simlab::run_monte_carlo(scn, cfg.reps, cfg.workers);
  int failed = 0;
  for (const auto& r : rows) failed += r.failed;
  if (cfg.verbosity > 0) log << "simulate: " << rows.size() << " rows, " << failed << " failed\n";
  if (!cfg.out.empty()) simlab::write_results(rows, cfg.out);
  auto metrics = simlab::summarize_metrics(rows, simlab::true_values(0.0).ate);
  out << simlab::render_table(metrics);
  if (!cfg.svg.empty()) write_text(cfg.svg, simlab::render_svg(metrics));
  return 0;
}

int run_estimate(const RunConfig& cfg, std::ostream& out, std::ostream& log) {
  require(!cfg.target.empty(), "estimate needs --target");
  if (cfg.estimator == "naive" || cfg.estimator == "target-only")
    require(cfg.xi.empty(), "--xi has no effect with --estimator " + cfg.estimator);
  SiteDataset target = read_csv(cfg.target, 0);
  std::vector<SiteDataset> sources;
  for (std::size_t s = 0; s < cfg.source_paths.size(); ++s)
    sources.push_back(read_csv(cfg.source_paths[s], static_cast<int>(s) + 1));
  EstimateReport rep;
  auto opt = cfg.options;
  if (cfg.estimator == "target-only") {
    rep = estimators::aipw_target_only(target, opt);
  } else if (cfg.estimator == "naive") {
    rep = estimators::naive_fusion(target, sources, opt);
  } else if (cfg.estimator == "eco" || cfg.estimator == "oracle") {
    auto bases = sources.empty() ? std::vector<expr::BasisVector>{} : source_bases(cfg, target.dim());
    if (cfg.estimator == "eco") rep = estimators::eco_ate(target, sources, bases, opt);
    else rep = estimators::oracle_pooled(target, sources, bases, opt);
  } else {
    throw ConfigError("estimator must be eco, naive, oracle or target-only, got '" + cfg.estimator + "'");
  }
  const std::string text = dump_report(rep);
  out << text;
  if (!cfg.out.empty()) write_text(cfg.out, text);
  for (const auto& w : rep.warnings)
    if (cfg.verbosity > 0) log << "warning: " << w << "\n";
  return 0;
}

int spawn_and_wait(const std::string& exe, const std::vector<std::vector<std::string>>& jobs, std::ostream& log) {
  std::vector<pid_t> pids;
  posix_spawn_file_actions_t actions;
  posix_spawn_file_actions_init(&actions);
  posix_spawn_file_actions_addopen(&actions, 1, "/dev/null", O_WRONLY, 0);
  for (const auto& args : jobs) {
    std::vector<char*> argv;
    argv.push_back(const_cast<char*>(exe.c_str()));
    for (const auto& a : args) argv.push_back(const_cast<char*>(a.c_str()));
    argv.push_back(nullptr);
    pid_t pid = 0;
    if (posix_spawn(&pid, exe.c_str(), &actions, nullptr, argv.data(), environ) != 0) {
      posix_spawn_file_actions_destroy(&actions);
      throw IoError("cannot start " + exe);
    }
    pids.push_back(pid);
  }
  posix_spawn_file_actions_destroy(&actions);
  int worst = 0;
  for (std::size_t i = 0; i < pids.size(); ++i) {
    int status = 0;
    waitpid(pids[i], &status, 0);
    const int code = WIFEXITED(status) ? WEXITSTATUS(status) : 1;
    if (code != 0) log << "site process " << i << " exited with " << code << "\n";
    worst = std::max(worst, code);
  }
  return worst;
}

int run_fed(const RunConfig& cfg, std::ostream& out, std::ostream& log, const std::string& self_exe) {
  require(!cfg.dir.empty(), "fed-run needs --dir");
  const double timeout = cfg.options.timeout_seconds;
  if (cfg.role != "all")
    require(cfg.target.empty() && cfg.source_paths.empty(), "--target and --source belong to --role all; use --data");
  else
    require(cfg.data.empty() && cfg.site_id < 0 && cfg.expect.empty(), "--role all takes --target and --source only");
  if (cfg.role == "target") {
    require(!cfg.data.empty(), "fed-run --role target needs --data");
    require(!cfg.expect.empty(), "fed-run --role target needs --expect with the source ids");
    const int id = cfg.site_id < 0 ? cfg.target_id : cfg.site_id;
    federation::FileTransport transport(cfg.dir);
    federation::TargetNode node(read_csv(cfg.data, id), cfg.options);
    auto rep = federation::run_target_role(transport, node, cfg.expect, timeout);
    out << dump_report(rep);
    return 0;
  }
  if (cfg.role == "source") {
    require(!cfg.data.empty(), "fed-run --role source needs --data");
    require(cfg.site_id >= 0 && cfg.site_id != cfg.target_id, "fed-run --role source needs a --site-id distinct from the target");
    require(cfg.xi.size() <= 1, "a source takes a single --xi list");
    SiteDataset data = read_csv(cfg.data, cfg.site_id);
    federation::FileTransport transport(cfg.dir);
    federation::SourceNode node(data, parse_basis(cfg.xi.empty() ? "" : cfg.xi[0], data.dim()));
    federation::run_source_role(transport, node, cfg.target_id, timeout);
    if (cfg.verbosity > 0) log << "source " << cfg.site_id << " done\n";
    return 0;
  }
  if (cfg.role == "all") {
    require(!cfg.target.empty() && !cfg.source_paths.empty(), "fed-run --role all needs --target and --source");
    require(!self_exe.empty(), "fed-run --role all cannot locate its own executable");
    std::vector<std::vector<std::string>> jobs;
    std::string expect;
    auto common = option_flags(cfg.options);
    common.insert(common.end(), {"--verbosity", "0", "--dir", cfg.dir, "--target-id", std::to_string(cfg.target_id)});
    std::vector<std::string> xs = cfg.xi;
    if (xs.size() == 1) xs.assign(cfg.source_paths.size(), cfg.xi[0]);
    if (!xs.empty() && xs.size() != cfg.source_paths.size())
      throw UsageError("give one --xi per --source (or a single --xi for all sources)");
    for (std::size_t s = 0; s < cfg.source_paths.size(); ++s) {
      const int id = cfg.target_id + 1 + static_cast<int>(s);
      std::vector<std::string> args{"fed-run", "--role", "source", "--data", cfg.source_paths[s], "--site-id",
                                    std::to_string(id)};
      if (!xs.empty()) args.insert(args.end(), {"--xi", xs[s]});
      args.insert(args.end(), common.begin(), common.end());
      jobs.push_back(args);
      expect += (s ? "," : "") + std::to_string(id);
    }
    std::vector<std::string> targ{"fed-run", "--role", "target", "--data", cfg.target, "--expect", expect};
    targ.insert(targ.end(), common.begin(), common.end());
    jobs.insert(jobs.begin(), targ);
    if (fs::exists(cfg.dir) && !fs::is_empty(cfg.dir))
      throw UsageError("fed-run --role all needs an empty --dir; " + cfg.dir + " already holds files");
    const int code = spawn_and_wait(self_exe, jobs, log);
    if (code != 0) return 1;
    std::ifstream f(fs::path(cfg.dir) / "report.json", std::ios::binary);
    if (!f) throw IoError("target process left no report in " + cfg.dir);
    out << f.rdbuf();
    return 0;
  }
  throw UsageError("--role must be target, source or all");
}

int run_report(const RunConfig& cfg, std::ostream& out) {
  require(!cfg.results.empty(), "report needs a results table");
  auto rows = simlab::read_results(cfg.results);
  auto metrics = simlab::summarize_metrics(rows, cfg.truth);
  const std::string table = simlab::render_table(metrics);
  out << table;
  fs::path svg = cfg.svg.empty() ? fs::path(cfg.results).replace_extension(".svg") : fs::path(cfg.svg);
  write_text(svg, simlab::render_svg(metrics));
  if (!cfg.table.empty()) write_text(cfg.table, table);
  return 0;
}

}  // namespace

json to_json(const RunConfig& c) {
  json j = {{"command", c.command}, {"options", federation::options_to_json(c.options)}, {"verbosity", c.verbosity}};
  if (c.command == "simulate") {
    j.update({{"epsilon", c.epsilons}, {"n", c.n},         {"reps", c.reps},   {"seed", c.seed},
              {"sources", c.sources},  {"workers", c.workers}, {"out", c.out}, {"svg", c.svg}});
    j["sites_dir"] = c.sites_dir;
    j["estimators"] = c.estimators.empty() ? simlab::Scenario{}.estimators : c.estimators;
  } else if (c.command == "estimate") {
    j.update({{"target", c.target}, {"source", c.source_paths}, {"xi", c.xi}, {"estimator", c.estimator}, {"out", c.out}});
  } else if (c.command == "fed-run") {
    j.update({{"role", c.role},      {"dir", c.dir},           {"data", c.data},           {"site_id", c.site_id},
              {"target_id", c.target_id}, {"expect", c.expect}, {"target", c.target},      {"source", c.source_paths},
              {"xi", c.xi}});
  } else if (c.command == "report") {
    j.update({{"results", c.results}, {"truth", c.truth}, {"svg", c.svg}, {"table", c.table}});
  }
  return j;
}

bool parse_config(const std::vector<std::string>& args, RunConfig& cfg, std::ostream& out) {
  CLI::App app{"Federated efficient estimation of the average treatment effect", "ecoate"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(build_id()));
  OptionText text;
  std::string config_path;

  auto* sim = app.add_subcommand("simulate", "Monte Carlo study of the built-in scenario");
  sim->add_option("--epsilon", cfg.epsilons, "alignment strengths (comma separated)")->delimiter(',');
  sim->add_option("--n", cfg.n, "records per site");
  sim->add_option("--reps", cfg.reps, "replications per epsilon");
  sim->add_option("--seed", cfg.seed, "base seed");
  sim->add_option("--sources", cfg.sources, "number of sources (1-3)");
  sim->add_option("--estimators", cfg.estimators, "estimators to run (comma separated)")->delimiter(',');
  sim->add_option("--workers", cfg.workers, "worker threads");
  sim->add_option("--out", cfg.out, "results table to write");
  sim->add_option("--svg", cfg.svg, "figure to write");
  sim->add_option("--sites-dir", cfg.sites_dir, "write site_<id>.csv for replicate 0 of one epsilon and exit");
  add_common(sim, cfg, text, config_path);

  auto* est = app.add_subcommand("estimate", "Estimate the target ATE from one table per site");
  est->add_option("--target", cfg.target, "target site table (y, a, x1..xd)");
  est->add_option("--source", cfg.source_paths, "source site table; repeat per source");
  est->add_option("--xi", cfg.xi, "tilt basis of the matching source, e.g. \"a*log(y)\"; repeat per source");
  est->add_option("--estimator", cfg.estimator, "eco | naive | oracle | target-only");
  est->add_option("--out", cfg.out, "report file to write");
  add_common(est, cfg, text, config_path);

  auto* fed = app.add_subcommand("fed-run", "Run one site of the two-round protocol over a shared directory");
  fed->add_option("--role", cfg.role, "target | source | all (spawns one process per site)");
  fed->add_option("--dir", cfg.dir, "shared message directory");
  fed->add_option("--data", cfg.data, "this site's table");
  fed->add_option("--xi", cfg.xi, "tilt basis of this source (role all: repeat per source)");
  fed->add_option("--site-id", cfg.site_id, "this site's id");
  fed->add_option("--target-id", cfg.target_id, "the target site's id");
  fed->add_option("--expect", cfg.expect, "source ids the target waits for (comma separated)")->delimiter(',');
  fed->add_option("--target", cfg.target, "role all: target table");
  fed->add_option("--source", cfg.source_paths, "role all: source table; repeat per source");
  add_common(fed, cfg, text, config_path);

  auto* rep = app.add_subcommand("report", "Summarize a results table");
  rep->add_option("results", cfg.results, "results table from simulate");
  rep->add_option("--truth", cfg.truth, "true ATE");
  rep->add_option("--svg", cfg.svg, "figure to write (default: results path with .svg)");
  rep->add_option("--table", cfg.table, "plain-text table to write");
  add_common(rep, cfg, text, config_path);

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return false;
  } catch (const CLI::CallForVersion&) {
    out << build_id() << "\n";
    return false;
  } catch (const CLI::ParseError& e) {
    std::string usage = app.help();
    for (auto* sub : app.get_subcommands()) usage = sub->help();
    throw UsageError(std::string(e.what()) + "\n\n" + usage);
  }
  CLI::App* sub = app.get_subcommands().front();
  cfg.command = sub->get_name();
  if (!config_path.empty()) apply_config_file(sub, config_path);
  finish_options(cfg, text);
  return true;
}

int dispatch(const RunConfig& cfg, std::ostream& out, std::ostream& log, const std::string& self_exe) {
  if (cfg.verbosity > 0) {
    log << "ecoate " << build_id() << "\n";
    log << "config " << to_json(cfg).dump() << "\n";
  }
  if (cfg.command == "simulate") return run_simulate(cfg, out, log);
  if (cfg.command == "estimate") return run_estimate(cfg, out, log);
  if (cfg.command == "fed-run") return run_fed(cfg, out, log, self_exe);
  if (cfg.command == "report") return run_report(cfg, out);
  throw UsageError("unknown command '" + cfg.command + "'");
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& log, const std::string& self_exe) {
  RunConfig cfg;
  try {
    if (!parse_config(args, cfg, out)) return 0;
  } catch (const UsageError& e) {
    log << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    log << "config error: " << e.what() << "\n";
    return 2;
  }
  try {
    return dispatch(cfg, out, log, self_exe);
  } catch (const UsageError& e) {
    log << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    log << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace ecoate::cli
