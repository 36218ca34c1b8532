#include "ecoate/shift.hpp"

#include <cmath>

#include "ecoate/error.hpp"

namespace ecoate::shift {

void TiltFeatures::compute(std::span<const double> x, int a, double* out) const {
  if (static_cast<int>(x.size()) != dim) throw DimensionMismatch("tilt feature query has wrong dimension");
  int c = 0;
  for (int j = 0; j < dim; ++j) out[c++] = x[j];
  for (int j = 0; j < dim; ++j) out[c++] = x[j] * x[j];
  for (int j = 0; j < dim; ++j)
    for (int k = j + 1; k < dim; ++k) out[c++] = x[j] * x[k];
  out[c++] = a;
  for (int j = 0; j < dim; ++j) out[c++] = a * x[j];
}

VectorXd TiltFeatures::compute(std::span<const double> x, int a) const {
  VectorXd out(count());
  compute(x, a, out.data());
  return out;
}

namespace {

MatrixXd feature_matrix(const SiteDataset& data) {
  TiltFeatures f{data.dim()};
  MatrixXd phi(data.size(), f.count());
  VectorXd row(f.count());
  for (int i = 0; i < data.size(); ++i) {
    f.compute(data.row(i), data.a[i], row.data());
    phi.row(i) = row.transpose();
  }
  return phi;
}

double log_mean_exp(const VectorXd& v) {
  const double m = v.maxCoeff();
  return m + std::log((v.array() - m).exp().mean());
}

}  // namespace

VectorXd covariate_moments(const SiteDataset& data) {
  if (data.size() == 0) throw InsufficientRows("cannot take moments of an empty site");
  return feature_matrix(data).colwise().mean().transpose();
}

CovariateShiftModel::CovariateShiftModel(int dim, VectorXd center, VectorXd scale, VectorXd gamma,
                                         double log_normalizer)
    : features_{dim}, center_(std::move(center)), scale_(std::move(scale)), gamma_(std::move(gamma)),
      log_normalizer_(log_normalizer) {
  const int p = features_.count();
  if (center_.size() != p || scale_.size() != p || gamma_.size() != p)
    throw DimensionMismatch("covariate tilt coefficients do not match the feature basis");
}

CovariateShiftModel CovariateShiftModel::identity(int dim) {
  TiltFeatures f{dim};
  return {dim, VectorXd::Zero(f.count()), VectorXd::Ones(f.count()), VectorXd::Zero(f.count()), 0.0};
}

double CovariateShiftModel::linear_predictor(std::span<const double> x, int a) const {
  double buf[64];
  std::vector<double> big;
  double* phi = features_.count() > 64 ? (big.resize(features_.count()), big.data()) : buf;
  features_.compute(x, a, phi);
  double eta = 0.0;
  for (int j = 0; j < features_.count(); ++j) eta += gamma_[j] * (phi[j] - center_[j]) / scale_[j];
  return eta;
}

double CovariateShiftModel::evaluate(std::span<const double> x, int a) const {
  return std::exp(linear_predictor(x, a) - log_normalizer_);
}

double evaluate_lambda(const CovariateShiftModel& model, std::span<const double> x, int a) {
  return model.evaluate(x, a);
}

CovariateShiftModel fit_covariate_tilt(const SiteDataset& target, const VectorXd& source_moments, long n_s,
                                       const numerics::NewtonOptions& opt) {
  if (target.size() == 0) throw InsufficientRows("target site is empty");
  if (n_s < 1) throw DimensionMismatch("source size must be positive");
  MatrixXd phi = feature_matrix(target);
  if (source_moments.size() != phi.cols()) throw DimensionMismatch("source moments do not match the tilt features");
  if (!source_moments.allFinite()) throw NonFinite("source moments are not finite");
  VectorXd center = phi.colwise().mean().transpose();
  VectorXd scale(phi.cols());
  for (Eigen::Index j = 0; j < phi.cols(); ++j) {
    double sd = std::sqrt((phi.col(j).array() - center[j]).square().mean());
    scale[j] = sd > 0.0 ? sd : 1.0;
  }
  MatrixXd z = (phi.rowwise() - center.transpose()).array().rowwise() / scale.transpose().array();
  VectorXd goal = (source_moments - center).cwiseQuotient(scale);

  numerics::VectorFunction g = [&](const VectorXd& gamma) {
    VectorXd eta = z * gamma;
    VectorXd w = (eta.array() - eta.maxCoeff()).exp();
    VectorXd out = z.transpose() * w / w.sum() - goal;
    return out;
  };
  auto sol = numerics::newton_solve(g, VectorXd::Zero(phi.cols()), opt);
  VectorXd eta = z * sol.x;
  CovariateShiftModel m(target.dim(), center, scale, sol.x, log_mean_exp(eta));
  m.iterations = sol.iterations;
  return m;
}

void WeightModel::add(int site_id, expr::BasisVector basis, VectorXd beta) {
  if (beta.size() != basis.size()) throw DimensionMismatch("beta length does not match basis size");
  for (const auto& s : sources_)
    if (s.site_id == site_id) throw DimensionMismatch("duplicate source id " + std::to_string(site_id));
  offsets_.push_back(dim_);
  dim_ += basis.size();
  sources_.push_back({site_id, std::move(basis), std::move(beta)});
}

std::pair<int, int> WeightModel::locate(int stacked) const {
  if (stacked < 0 || stacked >= dim_) throw DimensionMismatch("stacked index out of range");
  for (int s = sources() - 1; s >= 0; --s)
    if (stacked >= offsets_[s] && block_size(s) > 0) return {s, stacked - offsets_[s]};
  throw DimensionMismatch("stacked index out of range");
}

VectorXd WeightModel::stacked_beta() const {
  VectorXd b(dim_);
  for (int s = 0; s < sources(); ++s) b.segment(offsets_[s], block_size(s)) = sources_[s].beta;
  return b;
}

double WeightModel::weight(int s, const expr::Point& p) const {
  const auto& src = sources_.at(s);
  if (src.basis.empty()) return 1.0;
  double eta = 0.0;
  for (int j = 0; j < src.basis.size(); ++j) eta += src.beta[j] * expr::evaluate(src.basis.terms()[j], p);
  return std::exp(eta);
}

void WeightModel::basis_values(const expr::Point& p, double* out) const {
  for (int s = 0; s < sources(); ++s) {
    if (sources_[s].basis.empty()) continue;
    sources_[s].basis.evaluate(p, std::span<double>(out + offsets_[s], block_size(s)));
  }
}

NormalizerModel::NormalizerModel(std::shared_ptr<const numerics::ConditionalMean> fit, double floor)
    : fit_(std::move(fit)), floor_(floor) {
  if (fit_ && fit_->outputs() != 1) throw DimensionMismatch("normalizer model must have one output");
}

NormalizerModel NormalizerModel::identity() { return {}; }

double NormalizerModel::operator()(std::span<const double> x, int a) const {
  if (!fit_) return 1.0;
  double v = 0.0;
  fit_->predict(x, a, &v);
  return std::max(v, floor_);
}

MatrixXd basis_matrix(const SiteDataset& data, const expr::BasisVector& basis) {
  MatrixXd out(data.size(), basis.size());
  VectorXd row(basis.size());
  for (int i = 0; i < data.size(); ++i) {
    basis.evaluate(data.point(i), std::span<double>(row.data(), row.size()));
    out.row(i) = row.transpose();
  }
  return out;
}

NormalizerModel estimate_normalizer(const numerics::CondMeanFitter& fitter, const MatrixXd& basis_values,
                                    const VectorXd& beta, double floor) {
  if (beta.size() != basis_values.cols()) throw DimensionMismatch("beta length does not match basis size");
  if (beta.size() == 0 || (beta.array() == 0.0).all()) return NormalizerModel::identity();
  MatrixXd w = (basis_values * beta).array().exp().matrix();
  return NormalizerModel(fitter.fit_positive(w.col(0)).model, floor);
}

NormalizerModel estimate_normalizer(const SiteDataset& target, const WeightModel& weights, int s,
                                    const VectorXd& beta_s) {
  const auto& src = weights.source(s);
  numerics::SieveBasisSpec spec{target.dim(), 3, true, false};
  numerics::SieveFitter fitter(spec, numerics::Standardization::fit(target.x), target.x, target.a);
  return estimate_normalizer(fitter, basis_matrix(target, src.basis), beta_s);
}

VectorXd moment_residual(const MatrixXd& basis_values, const VectorXd& lambda, const VectorXd& xi_bar,
                         const numerics::CondMeanFitter& fitter, const VectorXd& beta, double floor) {
  const Eigen::Index n = basis_values.rows();
  if (beta.size() == 0 || (beta.array() == 0.0).all())
    return basis_values.transpose() * lambda / static_cast<double>(n) - xi_bar;
  MatrixXd w = (basis_values * beta).array().exp().matrix();
  if (!w.allFinite()) throw NonFinite("tilt weights overflow");
  VectorXd fitted = fitter.fit_positive(w.col(0)).fitted.col(0);
  if (!(fitted.minCoeff() > floor)) throw DomainError("normalizer fit is not positive on the target sample");
  VectorXd wl = lambda.cwiseProduct(w.col(0)).cwiseQuotient(fitted);
  return basis_values.transpose() * wl / static_cast<double>(n) - xi_bar;
}

BetaSolution solve_beta_source(const SiteDataset& target, const MomentTarget& source, const VectorXd& lambda_values,
                               const numerics::CondMeanFitter& fitter, const numerics::NewtonOptions& opt,
                               double floor) {
  if (source.xi_bar.size() != source.basis.size()) throw DimensionMismatch("ξ̄ length does not match basis");
  if (!source.xi_bar.allFinite()) throw NonFinite("ξ̄ is not finite");
  MatrixXd xi = basis_matrix(target, source.basis);
  numerics::VectorFunction f = [&](const VectorXd& beta) {
    return moment_residual(xi, lambda_values, source.xi_bar, fitter, beta, floor);
  };
  auto sol = numerics::newton_solve(f, VectorXd::Zero(source.basis.size()), opt);
  BetaSolution out;
  out.beta = sol.x;
  out.residual = sol.residual;
  out.iterations = sol.iterations;
  out.normalizer = estimate_normalizer(fitter, xi, sol.x, floor);
  return out;
}

std::vector<BetaOutcome> solve_beta(const SiteDataset& target, const std::vector<MomentTarget>& sources,
                                    const std::vector<CovariateShiftModel>& lambdas,
                                    const numerics::CondMeanFitter& fitter, const numerics::NewtonOptions& opt) {
  if (lambdas.size() != sources.size()) throw DimensionMismatch("one covariate tilt per source required");
  std::vector<BetaOutcome> out;
  for (std::size_t s = 0; s < sources.size(); ++s) {
    BetaOutcome o;
    o.site_id = sources[s].site_id;
    try {
      o.solution = solve_beta_source(target, sources[s], lambda_values(target, lambdas[s]), fitter, opt);
      o.converged = true;
    } catch (const NoConvergence& e) {
      o.message = e.what();
    } catch (const NonFinite& e) {
      o.message = e.what();
    }
    out.push_back(std::move(o));
  }
  return out;
}

VectorXd lambda_values(const SiteDataset& data, const CovariateShiftModel& model) {
  VectorXd out(data.size());
  for (int i = 0; i < data.size(); ++i) out[i] = model.evaluate(data.row(i), data.a[i]);
  return out;
}

double overlap_ratio(const SiteDataset& target, const CovariateShiftModel& lambda, const expr::BasisVector& basis,
                     const VectorXd& beta, const NormalizerModel& normalizer) {
  double lo = INFINITY, hi = 0.0;
  for (int i = 0; i < target.size(); ++i) {
    auto p = target.point(i);
    double w = 1.0;
    if (!basis.empty()) w = std::exp(beta.dot(basis.evaluate(p)));
    double v = lambda.evaluate(p.x, target.a[i]) * w / normalizer(p.x, target.a[i]);
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  return lo > 0.0 ? hi / lo : INFINITY;
}

}  // namespace ecoate::shift
