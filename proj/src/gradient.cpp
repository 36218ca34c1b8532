#include "ecoate/gradient.hpp"

#include <algorithm>
#include <cmath>

#include "ecoate/error.hpp"

namespace ecoate::gradient {

int packed_index(int m, int l, int sites) {
  if (m > l) std::swap(m, l);
  return m * sites - m * (m - 1) / 2 + (l - m);
}

namespace {

void check_outputs(const std::shared_ptr<const ConditionalMean>& model, int expected, const char* name) {
  if (expected == 0 && !model) return;
  if (!model) throw DimensionMismatch(std::string("missing broadcast model: ") + name);
  if (model->outputs() != expected)
    throw DimensionMismatch(std::string("broadcast model ") + name + " has " + std::to_string(model->outputs()) +
                            " outputs, expected " + std::to_string(expected));
}

}  // namespace

GradientContext::GradientContext(Nuisances nuisances) : nu_(std::move(nuisances)) {
  const int k = nu_.sources();
  const int S = k + 1;
  if (static_cast<int>(nu_.site_prob.size()) != S || static_cast<int>(nu_.site_ids.size()) != S)
    throw DimensionMismatch("site probabilities must cover the target and every source");
  if (static_cast<int>(nu_.tilts.size()) != k || static_cast<int>(nu_.normalizers.size()) != k)
    throw DimensionMismatch("one covariate tilt and one normalizer per source required");
  double total = 0.0;
  for (double p : nu_.site_prob) {
    if (!(p > 0.0)) throw DomainError("site probabilities must be positive");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-12) throw DomainError("site probabilities must sum to one");
  const int P = nu_.score_dim();
  check_outputs(nu_.outcome, 1, "outcome");
  check_outputs(nu_.geometry, packed_size(S), "geometry");
  check_outputs(nu_.tilted_basis, P, "tilted_basis");
  check_outputs(nu_.outcome_cov, S, "outcome_cov");
  check_outputs(nu_.score_cov, P * S, "score_cov");
  if (nu_.propensity.coef.size() != nu_.dim + 1) throw DimensionMismatch("propensity model has wrong dimension");
  for (const auto& t : nu_.tilts)
    if (t.dim() != nu_.dim) throw DimensionMismatch("covariate tilt has wrong dimension");
  block_site_.resize(P);
  for (int j = 0; j < P; ++j) block_site_[j] = nu_.weights.locate(j).first + 1;
}

Cell GradientContext::cell(std::span<const double> x, int a) const {
  const int S = sites();
  const int P = score_dim();
  Cell c;
  const double p1 = nu_.propensity.prob1(x);
  double pa = a == 1 ? p1 : 1.0 - p1;
  const double lo = nu_.clamp, hi = 1.0 - nu_.clamp;
  if (pa < lo || pa > hi) {
    c.clamped = true;
    pa = std::clamp(pa, lo, hi);
  }
  c.pi = pa;
  double mu[2];
  nu_.outcome->predict(x, 0, &mu[0]);
  nu_.outcome->predict(x, 1, &mu[1]);
  c.mu = mu[a];
  c.tau = mu[1] - mu[0];

  c.lambda = VectorXd::Ones(S);
  c.normalizer = VectorXd::Ones(S);
  for (int s = 1; s < S; ++s) {
    c.lambda[s] = nu_.tilts[s - 1].evaluate(x, a);
    c.normalizer[s] = nu_.normalizers[s - 1](x, a);
  }

  VectorXd packed = nu_.geometry->predict(x, a);
  c.R2.resize(S, S);
  for (int m = 0; m < S; ++m)
    for (int l = m; l < S; ++l) c.R2(m, l) = c.R2(l, m) = packed[packed_index(m, l, S)];
  c.R1 = c.R2.row(0).transpose();

  const double g = (2.0 * a - 1.0) / pa;
  c.B = g * nu_.outcome_cov->predict(x, a);
  c.e = P ? nu_.tilted_basis->predict(x, a) : VectorXd();
  c.A = MatrixXd::Zero(P, S);
  if (P) {
    VectorXd cov = nu_.score_cov->predict(x, a);
    for (int j = 0; j < P; ++j) {
      const int s = block_site_[j];
      const double scale = nu_.site_prob[s] * c.lambda[s];
      for (int m = 0; m < S; ++m) c.A(j, m) = scale * cov[j * S + m];
    }
  }

  VectorXd prob = Eigen::Map<const VectorXd>(nu_.site_prob.data(), S);
  c.M = m_matrix(prob, c.lambda, c.R2, nu_.matrix_form);
  c.M_pinv = m_pinv(c.M, prob, c.lambda, nu_.matrix_form);
  c.alpha_d = c.M_pinv * c.B;
  c.alpha_a = c.M_pinv * c.A.transpose();
  return c;
}

PointEval GradientContext::evaluate(const Cell& c, const expr::Point& z) const {
  const int S = sites();
  const int P = score_dim();
  const int a = static_cast<int>(z.a);
  PointEval p;
  p.wstar = VectorXd::Ones(S);
  for (int s = 1; s < S; ++s) p.wstar[s] = nu_.weights.weight(s - 1, z) / c.normalizer[s];
  double denom = 0.0;
  for (int m = 0; m < S; ++m) denom += nu_.site_prob[m] * c.lambda[m] * p.wstar[m];
  p.r = 1.0 / denom;
  p.r_site.resize(S);
  for (int m = 0; m < S; ++m) p.r_site[m] = p.r * nu_.site_prob[m] * c.lambda[m] * p.wstar[m];
  if (!std::isfinite(p.r)) throw NonFinite("density ratio r is not finite");

  p.h = (2.0 * a - 1.0) / c.pi * (z.y - c.mu);
  p.dtilde = p.r * p.h;
  VectorXd u = p.r * p.wstar - c.R1;
  p.dstar = p.dtilde - c.B[0] + c.alpha_d.dot(u);

  p.xi.resize(P);
  p.atilde.resize(P);
  p.astar.resize(P);
  if (P) {
    nu_.weights.basis_values(z, p.xi.data());
    for (int j = 0; j < P; ++j) {
      p.atilde[j] = p.r_site[block_site_[j]] * (p.xi[j] - c.e[j]);
      p.astar[j] = p.atilde[j] - c.A(j, 0) + c.alpha_a.col(j).dot(u);
    }
  }
  return p;
}

double GradientContext::center_dstar(const Cell& c, int site) const {
  if (site == 0) return 0.0;
  return c.B[site] - c.B[0] + c.alpha_d.dot(c.R2.row(site).transpose() - c.R1);
}

VectorXd GradientContext::center_astar(const Cell& c, int site) const {
  const int P = score_dim();
  VectorXd out = VectorXd::Zero(P);
  if (site == 0) return out;
  VectorXd shift = c.R2.row(site).transpose() - c.R1;
  for (int j = 0; j < P; ++j) out[j] = c.A(j, site) - c.A(j, 0) + c.alpha_a.col(j).dot(shift);
  return out;
}

VectorXd GradientContext::score(const Cell& c, const PointEval& p, int site) const {
  const int P = score_dim();
  VectorXd out = VectorXd::Zero(P);
  if (site == 0) return out;
  for (int j = 0; j < P; ++j)
    if (block_site_[j] == site) out[j] = p.xi[j] - c.e[j];
  return out;
}

double GradientContext::gradient_known_beta(const Cell& c, const PointEval& p, int site) const {
  return p.dstar - center_dstar(c, site);
}

VectorXd GradientContext::efficient_score(const Cell& c, const PointEval& p, int site) const {
  return score(c, p, site) - (p.astar - center_astar(c, site));
}

MatrixXd m_matrix(const VectorXd& site_prob, const VectorXd& lambda, const MatrixXd& R2, MatrixForm form) {
  const Eigen::Index S = site_prob.size();
  MatrixXd M = -R2;
  for (Eigen::Index m = 0; m < S; ++m)
    M(m, m) += 1.0 / (form == MatrixForm::kTiltAdjusted ? site_prob[m] * lambda[m] : site_prob[m]);
  return M;
}

MatrixXd m_pinv(const MatrixXd& M, const VectorXd& site_prob, const VectorXd& lambda, MatrixForm form, double rel_tol) {
  MatrixXd sym = 0.5 * (M + M.transpose());
  if (form == MatrixForm::kUntilted) {
    double scale = site_prob.cwiseInverse().maxCoeff();
    MatrixXd out = numerics::pinv(sym, rel_tol, scale);
    return 0.5 * (out + out.transpose());
  }
  const Eigen::Index S = site_prob.size();
  VectorXd q = site_prob.cwiseProduct(lambda);
  VectorXd v = q / q.norm();
  MatrixXd proj = MatrixXd::Identity(S, S) - v * v.transpose();
  MatrixXd out = numerics::pinv(proj * sym * proj, rel_tol, q.cwiseInverse().maxCoeff());
  return 0.5 * (out + out.transpose());
}

WstarR eval_wstar_r(const GradientContext& ctx, const expr::Point& z) {
  auto p = ctx.evaluate(z);
  return {p.wstar, p.r, p.r_site};
}

MatrixXd eval_M_pinv(const GradientContext& ctx, std::span<const double> x, int a) { return ctx.cell(x, a).M_pinv; }

double eval_dstar(const GradientContext& ctx, const expr::Point& z) { return ctx.evaluate(z).dstar; }

VectorXd eval_astar(const GradientContext& ctx, const expr::Point& z) { return ctx.evaluate(z).astar; }

VectorXd efficient_score(const GradientContext& ctx, const expr::Point& z, int site) {
  auto c = ctx.cell(z.x, static_cast<int>(z.a));
  return ctx.efficient_score(c, ctx.evaluate(c, z), site);
}

double canonical_gradient_eff(const GradientContext& ctx, const FusedQuantities& fused, const expr::Point& z, int site) {
  auto c = ctx.cell(z.x, static_cast<int>(z.a));
  auto p = ctx.evaluate(c, z);
  double v = ctx.gradient_known_beta(c, p, site);
  if (site == 0) v += (c.tau - fused.phi_hat) / fused.p0;
  if (ctx.score_dim()) v += fused.adjust.dot(ctx.efficient_score(c, p, site));
  return v;
}

SiteGradients evaluate_site(const GradientContext& ctx, const SiteDataset& data, int site, Centering centering,
                            double bandwidth_scale) {
  const int n = data.size();
  const int P = ctx.score_dim();
  if (site < 0 || site >= ctx.sites()) throw DimensionMismatch("site position out of range");
  if (data.dim() != ctx.nuisances().dim) throw DimensionMismatch("site covariate dimension does not match package");
  SiteGradients out;
  out.D.resize(n);
  out.score.resize(n, P);
  out.h.resize(n);
  out.tau.resize(n);
  const bool kernel = centering == Centering::kSiteKernel;
  const auto& weights = ctx.nuisances().weights;
  const int block_lo = site > 0 ? weights.offset(site - 1) : 0;
  const int block_n = site > 0 ? weights.block_size(site - 1) : 0;
  MatrixXd raw;
  if (kernel) raw.resize(n, 1 + P + block_n);

  for (int i = 0; i < n; ++i) {
    auto z = data.point(i);
    Cell c = ctx.cell(z.x, data.a[i]);
    PointEval p = ctx.evaluate(c, z);
    out.h[i] = p.h;
    out.tau[i] = c.tau;
    out.clamped += c.clamped ? 1 : 0;
    out.max_r = std::max(out.max_r, p.r);
    if (kernel) {
      raw(i, 0) = p.dstar;
      if (P) raw.row(i).segment(1, P) = p.astar.transpose();
      if (block_n) raw.row(i).tail(block_n) = p.xi.segment(block_lo, block_n).transpose();
    } else {
      out.D[i] = ctx.gradient_known_beta(c, p, site);
      if (P) out.score.row(i) = ctx.efficient_score(c, p, site).transpose();
    }
  }

  if (kernel) {
    numerics::KernelFitter fitter(data.x, data.a, bandwidth_scale);
    MatrixXd fit = fitter.fit(raw).fitted;
    MatrixXd resid = raw - fit;
    out.D = resid.col(0);
    if (P) {
      out.score = -resid.middleCols(1, P);
      if (block_n) out.score.middleCols(block_lo, block_n) += resid.rightCols(block_n);
    }
  }
  return out;
}

}  // namespace ecoate::gradient
