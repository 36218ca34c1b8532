#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace ecoate {

struct SourceDiagnostics {
  int site_id = 0;
  long n = 0;
  bool used = false;
  std::string status = "ok";
  Eigen::VectorXd beta;
  double residual = 0.0;      // moment-equation sup-norm at β̂
  int iterations = 0;         // β Newton iterations
  int tilt_iterations = 0;
  double overlap = 0.0;       // max/min of λ̂·w* over target records
  int clamped = 0;
};

struct EstimateReport {
  std::string estimator;
  double estimate = 0.0;
  double se = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  long n_total = 0;
  int sources_used = 0;
  int target_clamped = 0;
  double max_r = 0.0;
  std::vector<SourceDiagnostics> sources;
  std::vector<std::string> warnings;

  bool covers(double truth) const { return ci_lo <= truth && truth <= ci_hi; }
};

nlohmann::json to_json(const EstimateReport& r);
EstimateReport report_from_json(const nlohmann::json& j);
std::string dump_report(const EstimateReport& r);

}  // namespace ecoate
