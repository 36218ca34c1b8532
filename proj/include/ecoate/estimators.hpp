#pragma once

#include <vector>

#include <Eigen/Dense>

#include "ecoate/data.hpp"
#include "ecoate/expr.hpp"
#include "ecoate/federation.hpp"
#include "ecoate/report.hpp"

namespace ecoate::estimators {

using federation::EcoOptions;

struct Interval {
  double se = 0.0;
  double lo = 0.0;
  double hi = 0.0;
};

// SE = sqrt(sample variance / n), CI = point ± 1.96·SE.
Interval variance_ci(const Eigen::VectorXd& gradient_values, double point);

struct SiteEstimate {
  double estimate = 0.0;
  double se = 0.0;
};
EstimateReport meta_ivw(const std::vector<SiteEstimate>& inputs);

// One-step AIPW on the target alone with the same sieve and logistic settings as the federated fits.
EstimateReport aipw_target_only(const SiteDataset& target, const EcoOptions& opt = {});

// The two-round protocol run in-process. A MemoryTransport is used when `transport` is null.
EstimateReport eco_ate(const SiteDataset& target, const std::vector<SiteDataset>& sources,
                       const std::vector<expr::BasisVector>& bases, const EcoOptions& opt,
                       federation::Transport* transport = nullptr);

// Identical pipeline with w ≡ 1 for every source.
EstimateReport naive_fusion(const SiteDataset& target, const std::vector<SiteDataset>& sources, EcoOptions opt);

// Centralized variant: pooled logistic membership model for λ, kernel regression on the target for the
// normalizers and every broadcast conditional mean. Outcome and propensity fits match the federated ones.
EstimateReport oracle_pooled(const SiteDataset& target, const std::vector<SiteDataset>& sources,
                             const std::vector<expr::BasisVector>& bases, EcoOptions opt);

shift::CovariateShiftModel pooled_logistic_tilt(const SiteDataset& target, const SiteDataset& source);

}  // namespace ecoate::estimators
