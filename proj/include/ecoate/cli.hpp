#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "ecoate/federation.hpp"

namespace ecoate::cli {

struct RunConfig {
  std::string command;  // simulate | fed-run | estimate | report

  // simulate
  std::vector<double> epsilons{0.0, 0.5, 0.7, 1.0, 1.1};
  int n = 500;
  int reps = 200;
  std::uint64_t seed = 1;
  int sources = 3;
  std::vector<std::string> estimators;  // empty: scenario default
  int workers = 1;
  std::string out;
  std::string sites_dir;  // write replicate-0 site tables instead of running the study

  // estimate and fed-run
  std::string target;
  std::vector<std::string> source_paths;
  std::vector<std::string> xi;  // one expression list per source
  std::string estimator = "eco";
  std::string role;
  std::string dir;
  std::string data;
  int site_id = -1;
  int target_id = 0;
  std::vector<int> expect;

  // report
  std::string results;
  double truth = 1.0;
  std::string svg;
  std::string table;

  federation::EcoOptions options;
  int verbosity = 1;
};

nlohmann::json to_json(const RunConfig& cfg);

// Flags override values from --config. Throws UsageError or ConfigError.
// Returns false when help was printed to `out`.
bool parse_config(const std::vector<std::string>& args, RunConfig& cfg, std::ostream& out);

// 0 on success, 1 when estimation fails, 2 on a usage or configuration error.
int dispatch(const RunConfig& cfg, std::ostream& out, std::ostream& log, const std::string& self_exe = {});
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& log, const std::string& self_exe = {});

const char* build_id();

}  // namespace ecoate::cli
