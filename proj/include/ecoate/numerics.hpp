#pragma once

#include <array>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "ecoate/data.hpp"

namespace ecoate::numerics {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct Standardization {
  VectorXd center;
  VectorXd scale;

  static Standardization fit(const RowMatrix& x);
  static Standardization identity(int dim);
  int dim() const { return static_cast<int>(center.size()); }
  void apply(std::span<const double> x, double* out) const;
};

struct SieveBasisSpec {
  int dim = 1;
  int degree = 3;
  bool arm_interaction = true;
  bool pairwise = false;

  int base_terms() const;
  int term_count() const;
  // `z` is already standardized; writes term_count() values.
  void expand(const double* z, int a, double* row) const;
  // Column positions of the intercept(s).
  std::vector<int> intercept_columns() const;
};

class ConditionalMean {
 public:
  virtual ~ConditionalMean() = default;
  virtual int inputs() const = 0;
  virtual int outputs() const = 0;
  virtual void predict(std::span<const double> x, int a, double* out) const = 0;

  VectorXd predict(std::span<const double> x, int a) const;
  MatrixXd predict_rows(const RowMatrix& x, const Eigen::VectorXi& a) const;
};

enum class Link { kIdentity, kLog };

class SieveModel final : public ConditionalMean {
 public:
  SieveModel(SieveBasisSpec spec, Standardization standardization, MatrixXd coef, double ridge,
             Link link = Link::kIdentity);

  int inputs() const override { return spec_.dim; }
  int outputs() const override { return static_cast<int>(coef_.cols()); }
  void predict(std::span<const double> x, int a, double* out) const override;
  using ConditionalMean::predict;

  const SieveBasisSpec& spec() const { return spec_; }
  const Standardization& standardization() const { return std_; }
  const MatrixXd& coefficients() const { return coef_; }
  double ridge() const { return ridge_; }
  Link link() const { return link_; }

 private:
  SieveBasisSpec spec_;
  Standardization std_;
  MatrixXd coef_;
  double ridge_;
  Link link_;
};

struct KernelModel final : public ConditionalMean {
  RowMatrix x;
  Eigen::VectorXi arm;
  MatrixXd responses;
  MatrixXd weights;  // per response column; empty means uniform
  std::array<VectorXd, 2> bandwidth;  // per arm stratum, per covariate
  bool stratified = true;

  int inputs() const override { return static_cast<int>(x.cols()); }
  int outputs() const override { return static_cast<int>(responses.cols()); }
  void predict(std::span<const double> q, int a, double* out) const override;
  using ConditionalMean::predict;
};

struct FitResult {
  std::shared_ptr<const ConditionalMean> model;
  MatrixXd fitted;  // in-sample predictions, n×q
};

// A regression family frozen to one set of training inputs, reusable across
// many response matrices.
class CondMeanFitter {
 public:
  virtual ~CondMeanFitter() = default;
  virtual int rows() const = 0;
  virtual FitResult fit(const MatrixXd& responses) const = 0;
  // Column c is fit with non-negative sample weights weights.col(c).
  virtual FitResult fit(const MatrixXd& responses, const MatrixXd& weights) const = 0;
  // Mean of a positive response with a fit that stays positive.
  virtual FitResult fit_positive(const VectorXd& response) const = 0;
};

class SieveFitter final : public CondMeanFitter {
 public:
  SieveFitter(SieveBasisSpec spec, Standardization standardization, const RowMatrix& x, const Eigen::VectorXi& a,
              double ridge = 1e-8);

  int rows() const override { return static_cast<int>(design_.rows()); }
  FitResult fit(const MatrixXd& responses) const override;
  FitResult fit(const MatrixXd& responses, const MatrixXd& weights) const override;
  // Log-link quasi-Poisson fit on the sieve basis.
  FitResult fit_positive(const VectorXd& response) const override;
  SieveModel fit_model(const MatrixXd& responses) const;
  MatrixXd coefficients(const MatrixXd& responses) const;
  MatrixXd fitted(const MatrixXd& coefficients) const { return design_ * coefficients; }

  const MatrixXd& design() const { return design_; }
  const SieveBasisSpec& spec() const { return spec_; }
  const Standardization& standardization() const { return std_; }
  double ridge() const { return ridge_; }

 private:
  SieveBasisSpec spec_;
  Standardization std_;
  double ridge_;
  MatrixXd design_;
  MatrixXd solver_;  // p×n map from responses to ridge coefficients
  std::vector<int> intercepts_;
};

// Builds the design for `inputs` then solves; standardization from the inputs.
SieveModel sieve_fit(const SieveBasisSpec& spec, const RowMatrix& x, const Eigen::VectorXi& a,
                     const MatrixXd& responses, double ridge = 1e-8);
VectorXd sieve_predict(const SieveModel& model, std::span<const double> x, int a);

VectorXd silverman_bandwidth(const RowMatrix& x);

class KernelFitter final : public CondMeanFitter {
 public:
  // bandwidth_scale multiplies the Silverman bandwidth; fixed_bandwidth > 0 overrides it.
  KernelFitter(const RowMatrix& x, const Eigen::VectorXi& a, double bandwidth_scale = 1.0, double fixed_bandwidth = 0.0);

  int rows() const override { return static_cast<int>(x_.rows()); }
  FitResult fit(const MatrixXd& responses) const override;
  FitResult fit(const MatrixXd& responses, const MatrixXd& weights) const override;
  FitResult fit_positive(const VectorXd& response) const override;
  const std::array<VectorXd, 2>& bandwidth() const { return bandwidth_; }

 private:
  RowMatrix x_;
  Eigen::VectorXi a_;
  std::array<VectorXd, 2> bandwidth_;
  std::array<std::vector<int>, 2> members_;
  std::array<MatrixXd, 2> smoother_;
};

KernelModel make_kernel_model(const RowMatrix& x, const Eigen::VectorXi& a, const MatrixXd& responses,
                              double fixed_bandwidth = 0.0);
double kernel_regress(const KernelModel& model, std::span<const double> x, int a);

struct LogisticOptions {
  int max_iter = 100;
  double tol = 1e-10;
  double coef_bound = 30.0;
};

VectorXd logistic_fit(const MatrixXd& design, const VectorXd& labels, const LogisticOptions& opt = {});

struct LogisticModel {
  Standardization standardization;
  VectorXd coef;  // intercept first, then one per standardized covariate

  double prob1(std::span<const double> x) const;
};

LogisticModel fit_propensity(const RowMatrix& x, const Eigen::VectorXi& a, const Standardization& standardization,
                             const LogisticOptions& opt = {});

// Singular values at or below rel_tol·max(σ_max, scale) are dropped.
MatrixXd pinv(const MatrixXd& m, double rel_tol = 1e-10, double scale = 0.0);

using VectorFunction = std::function<VectorXd(const VectorXd&)>;

struct NewtonOptions {
  double tol = 1e-8;
  int max_iter = 100;
  int max_halvings = 20;
  double fd_step = 1e-6;
};

struct NewtonResult {
  VectorXd x;
  double residual = 0.0;  // sup-norm of f at x
  int iterations = 0;
  int pinv_steps = 0;
};

MatrixXd fd_jacobian(const VectorFunction& f, const VectorXd& x, double rel_step = 1e-6);
NewtonResult newton_solve(const VectorFunction& f, const VectorXd& start, const NewtonOptions& opt = {});

}  // namespace ecoate::numerics
