#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ecoate/data.hpp"
#include "ecoate/expr.hpp"
#include "ecoate/federation.hpp"

namespace ecoate::simlab {

std::uint64_t splitmix64(std::uint64_t& state);
// Independent stream seed for (base seed, replicate, site).
std::uint64_t stream_seed(std::uint64_t base, std::uint64_t replicate, std::uint64_t site);

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  double uniform();  // open interval (0, 1)
  double normal();
  double gamma(double shape);  // unit rate
  double beta(double a, double b);
  int bernoulli(double p) { return uniform() < p ? 1 : 0; }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

struct Scenario {
  std::vector<double> epsilons{0.0, 0.5, 0.7, 1.0, 1.1};
  int n = 500;
  int sources = 3;
  std::uint64_t seed = 1;
  std::vector<std::string> estimators{"target-only", "naive", "oracle", "eco-1", "eco-2", "eco-3", "eco-all",
                                      "eco-all-overparam"};
  federation::EcoOptions options;

  void validate() const;
};

const std::vector<std::string>& known_estimators();

double gamma_shape(double epsilon, int site, double x, int a);

// Target (site 0) followed by the sources, site_id = position.
std::vector<SiteDataset> sample_scenario(const Scenario& scn, double epsilon, int replicate);
SiteDataset sample_site(double epsilon, int site, int n, Rng& rng);

struct TrueValues {
  double ate = 1.0;
  std::vector<Eigen::VectorXd> beta;  // on true_basis(s)
};
TrueValues true_values(double epsilon, int sources = 3);
expr::BasisVector true_basis(int source);
expr::BasisVector overparam_basis(int source);

struct ResultRow {
  std::string estimator;
  double epsilon = 0.0;
  std::uint64_t seed = 0;
  int replicate = 0;
  double estimate = 0.0;
  double se = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  int covered = 0;
  int sources_used = 0;
  int failed = 0;
  std::string beta;   // "1:b,b;2:b" per used source
  double residual = 0.0;  // largest moment-equation residual
  std::string message;
};

ResultRow make_row(const EstimateReport& r, const std::string& estimator, double epsilon, std::uint64_t seed,
                   int replicate, double truth);
// Runs one estimator on one sampled replicate.
EstimateReport run_estimator(const std::string& name, const std::vector<SiteDataset>& sites, double epsilon,
                             const federation::EcoOptions& opt);

std::vector<ResultRow> run_monte_carlo(const Scenario& scn, int replications, int workers = 1);

struct McMetrics {
  std::string estimator;
  double epsilon = 0.0;
  int reps = 0;
  int failures = 0;
  double mean = 0.0;
  double mean_se = 0.0;  // MC standard error of the mean estimate
  double bias2 = 0.0;
  double bias2_se = 0.0;
  double variance = 0.0;
  double variance_se = 0.0;
  double coverage = 0.0;
  double coverage_se = 0.0;
  double avg_se = 0.0;  // average reported SE
};

// One entry per (estimator, ε), in first-appearance order.
std::vector<McMetrics> summarize_metrics(const std::vector<ResultRow>& rows, double truth);
const McMetrics& find_metrics(const std::vector<McMetrics>& m, const std::string& estimator, double epsilon);

void write_results(const std::vector<ResultRow>& rows, const std::filesystem::path& path);
std::string results_csv(const std::vector<ResultRow>& rows);
std::vector<ResultRow> read_results(const std::filesystem::path& path);
std::vector<ResultRow> parse_results(const std::string& text);

std::string render_table(const std::vector<McMetrics>& metrics);
std::string render_svg(const std::vector<McMetrics>& metrics);

struct KsResult {
  double statistic = 0.0;
  double p_value = 1.0;
};
KsResult ks_two_sample(std::vector<double> a, std::vector<double> b);

}  // namespace ecoate::simlab
