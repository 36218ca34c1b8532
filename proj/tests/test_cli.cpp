#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "ecoate/cli.hpp"
#include "ecoate/error.hpp"
#include "ecoate/simlab.hpp"

using namespace ecoate;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("ecoate_cli_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

struct Outcome {
  int code;
  std::string out, log;
};

Outcome run(const std::vector<std::string>& args) {
  std::ostringstream out, log;
  int code = cli::run(args, out, log, ECOATE_CLI_EXE);
  return {code, out.str(), log.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Writes replicate 0 of the scenario and returns the estimate arguments.
std::vector<std::string> write_sites(const fs::path& dir, double eps, int n, std::uint64_t seed) {
  simlab::Scenario scn;
  scn.n = n;
  scn.seed = seed;
  std::vector<std::string> args{"--target"};
  std::vector<std::string> sources{"--source"}, xi{"--xi"};
  for (const auto& d : simlab::sample_scenario(scn, eps, 0)) {
    const fs::path p = dir / ("site_" + std::to_string(d.site_id) + ".csv");
    write_csv(d, p);
    if (d.site_id == 0) {
      args.push_back(p.string());
      continue;
    }
    sources.push_back(p.string());
    std::string list;
    for (const auto& t : simlab::true_basis(d.site_id).to_strings()) list += (list.empty() ? "" : ",") + t;
    xi.push_back(list);
  }
  args.insert(args.end(), sources.begin(), sources.end());
  args.insert(args.end(), xi.begin(), xi.end());
  return args;
}

}  // namespace

TEST_CASE("simulate flags fill the run config") {
  cli::RunConfig cfg;
  std::ostringstream help;
  REQUIRE(cli::parse_config({"simulate", "--epsilon", "1.0", "--n", "500", "--reps", "200", "--seed", "7"}, cfg, help));
  CHECK(cfg.command == "simulate");
  CHECK(cfg.epsilons == std::vector<double>{1.0});
  CHECK(cfg.n == 500);
  CHECK(cfg.reps == 200);
  CHECK(cfg.seed == 7);

  cli::RunConfig list;
  REQUIRE(cli::parse_config({"simulate", "--epsilon", "0,0.5", "--estimators", "naive,eco-all", "--fusion",
                             "size-weighted", "--sieve-degree", "2"},
                            list, help));
  CHECK(list.epsilons == std::vector<double>{0.0, 0.5});
  CHECK(list.estimators == std::vector<std::string>{"naive", "eco-all"});
  CHECK(list.options.fusion == federation::Fusion::kSizeWeighted);
  CHECK(list.options.sieve_degree == 2);
}

TEST_CASE("usage errors exit with 2") {
  cli::RunConfig cfg;
  std::ostringstream help;
  CHECK_THROWS_AS(cli::parse_config({"simulate", "--bogus"}, cfg, help), UsageError);
  auto r = run({"simulate", "--bogus"});
  CHECK(r.code == 2);
  CHECK(r.log.find("--bogus") != std::string::npos);
  CHECK(r.log.find("Usage:") != std::string::npos);
  CHECK(run({}).code == 2);
  CHECK(run({"frobnicate"}).code == 2);
  CHECK(run({"simulate", "--n", "ten"}).code == 2);
  CHECK(run({"simulate", "--fusion", "loud"}).code == 2);
  CHECK(run({"fed-run", "--role", "judge", "--dir", "x"}).code == 2);
  CHECK(run({"estimate", "--target", "t.csv", "--estimator", "naive", "--xi", "a"}).code == 2);
}

TEST_CASE("help documents every flag and exits 0") {
  auto r = run({"estimate", "--help"});
  CHECK(r.code == 0);
  for (const char* flag : {"--target", "--source", "--xi", "--estimator", "--config", "--sieve-degree",
                           "--bandwidth-scale", "--fusion", "--verbosity"})
    CHECK(r.out.find(flag) != std::string::npos);
  CHECK(run({"--help"}).out.find("fed-run") != std::string::npos);
}

TEST_CASE("flags override the config file") {
  TempDir tmp("config");
  const fs::path file = tmp.path / "c.json";
  std::ofstream(file) << R"({"n": 2000, "seed": 9, "epsilon": [0, 1], "bandwidth_scale": 0.5})";
  cli::RunConfig cfg;
  std::ostringstream help;
  REQUIRE(cli::parse_config({"simulate", "--config", file.string(), "--n", "500"}, cfg, help));
  CHECK(cfg.n == 500);
  CHECK(cfg.seed == 9);
  CHECK(cfg.epsilons == std::vector<double>{0.0, 1.0});
  CHECK(cfg.options.bandwidth_scale == 0.5);

  std::ofstream(file) << R"({"n": 2000, "nn": 3})";
  try {
    cli::RunConfig bad;
    cli::parse_config({"simulate", "--config", file.string()}, bad, help);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("'nn'") != std::string::npos);
  }
  CHECK(run({"simulate", "--config", file.string()}).code == 2);
  CHECK(run({"simulate", "--config", (tmp.path / "missing.json").string()}).code == 2);
}

TEST_CASE("every run logs its config and build") {
  auto r = run({"simulate", "--n", "10"});
  CHECK(r.code == 2);
  CHECK(r.log.find(cli::build_id()) != std::string::npos);
  CHECK(r.log.find("\"seed\":1") != std::string::npos);
  CHECK(r.log.find("\"n\":10") != std::string::npos);
  CHECK(run({"simulate", "--n", "10", "--verbosity", "0"}).log.find("config {") == std::string::npos);
}

TEST_CASE("estimate on scenario tables recovers the truth") {
  TempDir tmp("estimate");
  auto args = write_sites(tmp.path, 1.0, 2000, 21);
  args.insert(args.begin(), "estimate");
  auto r = run(args);
  REQUIRE(r.code == 0);
  auto j = nlohmann::json::parse(r.out);
  const double est = j["estimate"], se = j["se"];
  CHECK(std::abs(est - 1.0) < 4.0 * se);
  CHECK(se > 0.0);
  for (const auto& s : j["sources"]) CHECK(s["used"] == true);

  auto missing = run({"estimate", "--target", (tmp.path / "nope.csv").string()});
  CHECK(missing.code == 1);
  CHECK(missing.log.find("nope.csv") != std::string::npos);

  std::ofstream(tmp.path / "one_arm.csv") << "y,a,x1\n1,1,1.2\n2,1,1.5\n1.5,1,1.7\n";
  CHECK(run({"estimate", "--target", (tmp.path / "one_arm.csv").string(), "--estimator", "target-only"}).code == 1);
}

TEST_CASE("report writes a table and a figure") {
  TempDir tmp("report");
  simlab::Scenario scn;
  scn.n = 100;
  scn.epsilons = {0.0, 1.0};
  scn.estimators = {"target-only", "eco-all"};
  const fs::path csv = tmp.path / "results.csv";
  simlab::write_results(simlab::run_monte_carlo(scn, 3, 1), csv);
  auto r = run({"report", csv.string(), "--truth", "1.0", "--table", (tmp.path / "t.txt").string()});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("eco-all") != std::string::npos);
  CHECK(slurp(tmp.path / "t.txt") == r.out);
  CHECK(slurp(tmp.path / "results.svg").rfind("<svg", 0) == 0);
  CHECK(run({"report", (tmp.path / "none.csv").string()}).code == 1);
}

TEST_CASE("fed-run with one process per site equals the in-memory estimate") {
  TempDir tmp("fed");
  auto sites = write_sites(tmp.path, 1.0, 500, 5);
  std::vector<std::string> est{"estimate", "--verbosity", "0"};
  est.insert(est.end(), sites.begin(), sites.end());
  auto mem = run(est);
  REQUIRE(mem.code == 0);

  std::vector<std::string> fed{"fed-run", "--role", "all", "--verbosity", "0", "--dir", (tmp.path / "bus").string()};
  fed.insert(fed.end(), sites.begin(), sites.end());
  auto multi = run(fed);
  REQUIRE(multi.code == 0);
  CHECK(multi.out == mem.out);
  CHECK(slurp(tmp.path / "bus" / "report.json") == mem.out);
  CHECK(run(fed).code == 2);
}
