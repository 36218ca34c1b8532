#pragma once

#include <memory>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "ecoate/data.hpp"
#include "ecoate/expr.hpp"
#include "ecoate/numerics.hpp"

namespace ecoate::shift {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// φ(x,a): x_j, x_j², x_j·x_k (j<k), a, a·x_j.
struct TiltFeatures {
  int dim = 1;
  int count() const { return 2 * dim + dim * (dim - 1) / 2 + 1 + dim; }
  void compute(std::span<const double> x, int a, double* out) const;
  VectorXd compute(std::span<const double> x, int a) const;
};

VectorXd covariate_moments(const SiteDataset& data);

class CovariateShiftModel {
 public:
  CovariateShiftModel() = default;
  CovariateShiftModel(int dim, VectorXd center, VectorXd scale, VectorXd gamma, double log_normalizer);
  static CovariateShiftModel identity(int dim);

  double evaluate(std::span<const double> x, int a) const;
  double linear_predictor(std::span<const double> x, int a) const;

  int dim() const { return features_.dim; }
  const TiltFeatures& features() const { return features_; }
  const VectorXd& center() const { return center_; }
  const VectorXd& scale() const { return scale_; }
  const VectorXd& gamma() const { return gamma_; }
  double log_normalizer() const { return log_normalizer_; }
  int iterations = 0;

 private:
  TiltFeatures features_;
  VectorXd center_, scale_, gamma_;
  double log_normalizer_ = 0.0;
};

CovariateShiftModel fit_covariate_tilt(const SiteDataset& target, const VectorXd& source_moments, long n_s,
                                       const numerics::NewtonOptions& opt = {1e-10, 100, 20, 1e-6});
double evaluate_lambda(const CovariateShiftModel& model, std::span<const double> x, int a);

struct SourceTilt {
  int site_id = 0;
  expr::BasisVector basis;  // empty means w ≡ 1 (exchangeable source)
  VectorXd beta;
};

class WeightModel {
 public:
  void add(int site_id, expr::BasisVector basis, VectorXd beta);

  int sources() const { return static_cast<int>(sources_.size()); }
  int dim() const { return dim_; }
  int offset(int s) const { return offsets_.at(s); }
  int block_size(int s) const { return sources_.at(s).basis.size(); }
  const SourceTilt& source(int s) const { return sources_.at(s); }
  // Stacked index → (source position, component).
  std::pair<int, int> locate(int stacked) const;
  VectorXd stacked_beta() const;

  double weight(int s, const expr::Point& p) const;
  // Writes the stacked ξ vector (length dim()).
  void basis_values(const expr::Point& p, double* out) const;

 private:
  std::vector<SourceTilt> sources_;
  std::vector<int> offsets_;
  int dim_ = 0;
};

class NormalizerModel {
 public:
  NormalizerModel() = default;
  NormalizerModel(std::shared_ptr<const numerics::ConditionalMean> fit, double floor);
  static NormalizerModel identity();

  double operator()(std::span<const double> x, int a) const;
  bool is_identity() const { return !fit_; }
  const std::shared_ptr<const numerics::ConditionalMean>& fit() const { return fit_; }
  double floor() const { return floor_; }

 private:
  std::shared_ptr<const numerics::ConditionalMean> fit_;
  double floor_ = 1e-6;
};

constexpr double kNormalizerFloor = 1e-6;

MatrixXd basis_matrix(const SiteDataset& data, const expr::BasisVector& basis);

NormalizerModel estimate_normalizer(const numerics::CondMeanFitter& fitter, const MatrixXd& basis_values,
                                    const VectorXd& beta, double floor = kNormalizerFloor);
// Convenience form using the default target sieve.
NormalizerModel estimate_normalizer(const SiteDataset& target, const WeightModel& weights, int s, const VectorXd& beta_s);

struct MomentTarget {
  int site_id = 0;
  long n = 0;
  expr::BasisVector basis;
  VectorXd xi_bar;
};

struct BetaSolution {
  VectorXd beta;
  NormalizerModel normalizer;
  double residual = 0.0;
  int iterations = 0;
};

// Target-sample moment condition mean(λ̂·w*·ξ) − ξ̄ with Ŵ re-fit at `beta`.
VectorXd moment_residual(const MatrixXd& basis_values, const VectorXd& lambda, const VectorXd& xi_bar,
                         const numerics::CondMeanFitter& fitter, const VectorXd& beta, double floor = kNormalizerFloor);

BetaSolution solve_beta_source(const SiteDataset& target, const MomentTarget& source, const VectorXd& lambda_values,
                               const numerics::CondMeanFitter& fitter, const numerics::NewtonOptions& opt = {},
                               double floor = kNormalizerFloor);

struct BetaOutcome {
  int site_id = 0;
  bool converged = false;
  BetaSolution solution;
  std::string message;
};

// Independent per-source solves; failures are reported, not thrown.
std::vector<BetaOutcome> solve_beta(const SiteDataset& target, const std::vector<MomentTarget>& sources,
                                    const std::vector<CovariateShiftModel>& lambdas,
                                    const numerics::CondMeanFitter& fitter, const numerics::NewtonOptions& opt = {});

VectorXd lambda_values(const SiteDataset& data, const CovariateShiftModel& model);

// max/min over target of λ̂_s·w*_s.
double overlap_ratio(const SiteDataset& target, const CovariateShiftModel& lambda, const expr::BasisVector& basis,
                     const VectorXd& beta, const NormalizerModel& normalizer);

}  // namespace ecoate::shift
