#include "ecoate/numerics.hpp"

#include <cmath>
#include <limits>

#include "ecoate/error.hpp"

namespace ecoate::numerics {

namespace {

void require_finite(const MatrixXd& m, const char* what) {
  if (!m.allFinite()) throw NonFinite(std::string(what) + " contains non-finite entries");
}

}  // namespace

Standardization Standardization::fit(const RowMatrix& x) {
  Standardization s;
  const int d = static_cast<int>(x.cols());
  s.center = VectorXd::Zero(d);
  s.scale = VectorXd::Ones(d);
  if (x.rows() == 0) return s;
  s.center = x.colwise().mean().transpose();
  for (int j = 0; j < d; ++j) {
    double sd = std::sqrt((x.col(j).array() - s.center[j]).square().mean());
    s.scale[j] = sd > 0.0 ? sd : 1.0;
  }
  return s;
}

Standardization Standardization::identity(int dim) { return {VectorXd::Zero(dim), VectorXd::Ones(dim)}; }

void Standardization::apply(std::span<const double> x, double* out) const {
  if (static_cast<int>(x.size()) != dim()) throw DimensionMismatch("query has wrong covariate dimension");
  for (int j = 0; j < dim(); ++j) out[j] = (x[j] - center[j]) / scale[j];
}

int SieveBasisSpec::base_terms() const {
  if (degree < 0 || dim < 0) throw DimensionMismatch("sieve degree and dimension must be non-negative");
  return 1 + dim * degree + (pairwise ? dim * (dim - 1) / 2 : 0);
}

int SieveBasisSpec::term_count() const { return arm_interaction ? 2 * base_terms() : base_terms() + 1; }

void SieveBasisSpec::expand(const double* z, int a, double* row) const {
  const int b = base_terms();
  double* base = row;
  if (arm_interaction) {
    base = row + (a == 1 ? b : 0);
    std::fill(row + (a == 1 ? 0 : b), row + (a == 1 ? b : 2 * b), 0.0);
  }
  int c = 0;
  base[c++] = 1.0;
  for (int j = 0; j < dim; ++j) {
    double p = 1.0;
    for (int k = 1; k <= degree; ++k) {
      p *= z[j];
      base[c++] = p;
    }
  }
  if (pairwise)
    for (int j = 0; j < dim; ++j)
      for (int k = j + 1; k < dim; ++k) base[c++] = z[j] * z[k];
  if (!arm_interaction) row[b] = a;
}

std::vector<int> SieveBasisSpec::intercept_columns() const {
  if (arm_interaction) return {0, base_terms()};
  return {0};
}

VectorXd ConditionalMean::predict(std::span<const double> x, int a) const {
  VectorXd out(outputs());
  predict(x, a, out.data());
  return out;
}

MatrixXd ConditionalMean::predict_rows(const RowMatrix& x, const Eigen::VectorXi& a) const {
  MatrixXd out(x.rows(), outputs());
  VectorXd buf(outputs());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    predict(std::span<const double>(x.data() + i * x.cols(), x.cols()), a[i], buf.data());
    out.row(i) = buf.transpose();
  }
  return out;
}

SieveModel::SieveModel(SieveBasisSpec spec, Standardization standardization, MatrixXd coef, double ridge, Link link)
    : spec_(spec), std_(std::move(standardization)), coef_(std::move(coef)), ridge_(ridge), link_(link) {
  if (coef_.rows() != spec_.term_count()) throw DimensionMismatch("sieve coefficient rows do not match basis");
  if (std_.dim() != spec_.dim) throw DimensionMismatch("standardization dimension does not match basis");
}

void SieveModel::predict(std::span<const double> x, int a, double* out) const {
  const int p = spec_.term_count();
  double z[64];
  double row_buf[256];
  std::vector<double> zv, rv;
  double* zp = z;
  double* rp = row_buf;
  if (spec_.dim > 64) zp = (zv.resize(spec_.dim), zv.data());
  if (p > 256) rp = (rv.resize(p), rv.data());
  std_.apply(x, zp);
  spec_.expand(zp, a, rp);
  Eigen::Map<const VectorXd> row(rp, p);
  Eigen::Map<VectorXd> o(out, coef_.cols());
  o = coef_.transpose() * row;
  if (link_ == Link::kLog) o = o.array().exp().matrix();
}

SieveFitter::SieveFitter(SieveBasisSpec spec, Standardization standardization, const RowMatrix& x,
                         const Eigen::VectorXi& a, double ridge)
    : spec_(spec), std_(std::move(standardization)), ridge_(ridge), intercepts_(spec.intercept_columns()) {
  if (x.cols() != spec_.dim || std_.dim() != spec_.dim) throw DimensionMismatch("sieve inputs do not match spec");
  if (x.rows() != a.size()) throw DimensionMismatch("sieve inputs have unequal lengths");
  require_finite(x, "sieve inputs");
  const int n = static_cast<int>(x.rows());
  const int p = spec_.term_count();
  design_.resize(n, p);
  VectorXd z(spec_.dim), row(p);
  for (int i = 0; i < n; ++i) {
    std_.apply(std::span<const double>(x.data() + static_cast<std::ptrdiff_t>(i) * x.cols(), x.cols()), z.data());
    spec_.expand(z.data(), a[i], row.data());
    design_.row(i) = row.transpose();
  }
  Eigen::BDCSVD<MatrixXd> svd(design_, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const VectorXd& s = svd.singularValues();
  VectorXd shrink = VectorXd::Zero(s.size());
  const double cut = s.size() ? 1e-12 * s[0] : 0.0;
  for (Eigen::Index j = 0; j < s.size(); ++j)
    if (s[j] > cut) shrink[j] = s[j] / (s[j] * s[j] + ridge_);
  solver_ = svd.matrixV() * shrink.asDiagonal() * svd.matrixU().transpose();
}

MatrixXd SieveFitter::coefficients(const MatrixXd& responses) const {
  if (responses.rows() != design_.rows()) throw DimensionMismatch("sieve responses have wrong row count");
  require_finite(responses, "sieve responses");
  MatrixXd coef = solver_ * responses;
  for (Eigen::Index c = 0; c < responses.cols(); ++c) {
    if (responses.rows() == 0) break;
    const double v = responses(0, c);
    if ((responses.col(c).array() == v).all()) {
      coef.col(c).setZero();
      for (int j : intercepts_) coef(j, c) = v;
    }
  }
  return coef;
}

FitResult SieveFitter::fit(const MatrixXd& responses, const MatrixXd& weights) const {
  if (weights.rows() != responses.rows() || weights.cols() != responses.cols())
    throw DimensionMismatch("sieve weights do not match responses");
  require_finite(weights, "sieve weights");
  if ((weights.array() < 0.0).any()) throw DomainError("sieve weights must be non-negative");
  MatrixXd coef = coefficients(responses);
  for (Eigen::Index c = 0; c < responses.cols(); ++c) {
    const double total = weights.col(c).sum();
    if (!(total > 0.0)) throw DomainError("sieve weights sum to zero");
    VectorXd root = (weights.col(c) * (static_cast<double>(weights.rows()) / total)).cwiseSqrt();
    if ((root.array() == 1.0).all()) continue;
    MatrixXd xw = root.asDiagonal() * design_;
    Eigen::BDCSVD<MatrixXd> svd(xw, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const VectorXd& sv = svd.singularValues();
    VectorXd shrink = VectorXd::Zero(sv.size());
    const double cut = sv.size() ? 1e-12 * sv[0] : 0.0;
    for (Eigen::Index j = 0; j < sv.size(); ++j)
      if (sv[j] > cut) shrink[j] = sv[j] / (sv[j] * sv[j] + ridge_);
    const double v = responses(0, c);
    if ((responses.col(c).array() == v).all()) continue;
    coef.col(c) = svd.matrixV() * (shrink.asDiagonal() * (svd.matrixU().transpose() * root.cwiseProduct(responses.col(c))));
  }
  MatrixXd fitted = design_ * coef;
  return {std::make_shared<SieveModel>(spec_, std_, coef, ridge_), std::move(fitted)};
}

FitResult SieveFitter::fit_positive(const VectorXd& response) const {
  if (response.size() != design_.rows()) throw DimensionMismatch("sieve responses have wrong row count");
  require_finite(response, "sieve responses");
  if (!((response.array() > 0.0).all())) throw DomainError("positive fit needs a positive response");
  auto objective = [&](const VectorXd& b) {
    VectorXd eta = design_ * b;
    return eta.array().exp().sum() - response.dot(eta) + 0.5 * ridge_ * b.squaredNorm();
  };
  VectorXd b = solver_ * response.array().log().matrix();
  double f = objective(b);
  bool done = false;
  for (int it = 0; it < 100 && !done; ++it) {
    VectorXd mu = (design_ * b).array().exp().matrix();
    if (!mu.allFinite()) throw NonFinite("positive sieve fit overflowed");
    VectorXd grad = design_.transpose() * (response - mu) - ridge_ * b;
    MatrixXd hess = design_.transpose() * mu.asDiagonal() * design_;
    hess.diagonal().array() += ridge_;
    VectorXd step = hess.completeOrthogonalDecomposition().solve(grad);
    double t = 1.0, next = objective(b + step);
    while (!(next <= f) && t > 1e-10) {
      t *= 0.5;
      next = objective(b + t * step);
    }
    if (!(next <= f)) break;
    b += t * step;
    done = (t * step).cwiseAbs().maxCoeff() < 1e-12 * std::max(1.0, b.cwiseAbs().maxCoeff());
    f = next;
  }
  if (!b.allFinite()) throw NonFinite("positive sieve fit is not finite");
  MatrixXd coef = b;
  MatrixXd fitted = (design_ * b).array().exp().matrix();
  return {std::make_shared<SieveModel>(spec_, std_, coef, ridge_, Link::kLog), std::move(fitted)};
}

SieveModel SieveFitter::fit_model(const MatrixXd& responses) const {
  return SieveModel(spec_, std_, coefficients(responses), ridge_);
}

FitResult SieveFitter::fit(const MatrixXd& responses) const {
  MatrixXd coef = coefficients(responses);
  MatrixXd fitted = design_ * coef;
  return {std::make_shared<SieveModel>(spec_, std_, std::move(coef), ridge_), std::move(fitted)};
}

SieveModel sieve_fit(const SieveBasisSpec& spec, const RowMatrix& x, const Eigen::VectorXi& a,
                     const MatrixXd& responses, double ridge) {
  if (x.rows() < 1) throw DimensionMismatch("sieve fit needs at least one row");
  return SieveFitter(spec, Standardization::fit(x), x, a, ridge).fit_model(responses);
}

VectorXd sieve_predict(const SieveModel& model, std::span<const double> x, int a) { return model.predict(x, a); }

VectorXd silverman_bandwidth(const RowMatrix& x) {
  const Eigen::Index n = x.rows();
  VectorXd h = VectorXd::Ones(x.cols());
  if (n < 2) return h;
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    double mean = x.col(j).mean();
    double sd = std::sqrt((x.col(j).array() - mean).square().sum() / static_cast<double>(n - 1));
    if (sd > 0.0) h[j] = 1.06 * sd * std::pow(static_cast<double>(n), -0.2);
  }
  return h;
}

namespace {

std::array<std::vector<int>, 2> split_arms(const Eigen::VectorXi& a) {
  std::array<std::vector<int>, 2> m;
  for (int i = 0; i < a.size(); ++i) m[a[i] == 1 ? 1 : 0].push_back(i);
  return m;
}

RowMatrix take_rows(const RowMatrix& x, const std::vector<int>& idx) {
  RowMatrix out(idx.size(), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(i) = x.row(idx[i]);
  return out;
}

}  // namespace

void KernelModel::predict(std::span<const double> q, int a, double* out) const {
  const int d = inputs();
  if (static_cast<int>(q.size()) != d) throw DimensionMismatch("kernel query has wrong dimension");
  const VectorXd& h = bandwidth[stratified && a == 1 ? 1 : 0];
  double best = -std::numeric_limits<double>::infinity();
  std::vector<std::pair<int, double>> logw;
  logw.reserve(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    if (stratified && arm[i] != a) continue;
    double s = 0.0;
    for (int j = 0; j < d; ++j) {
      double u = (q[j] - x(i, j)) / h[j];
      s += u * u;
    }
    logw.emplace_back(static_cast<int>(i), -0.5 * s);
    best = std::max(best, -0.5 * s);
  }
  if (logw.empty()) throw EmptyStratum("no training points in treatment arm " + std::to_string(a));
  Eigen::Map<VectorXd> o(out, outputs());
  o.setZero();
  if (weights.size() == 0) {
    double total = 0.0;
    for (auto [i, lw] : logw) {
      double w = std::exp(lw - best);
      total += w;
      o += w * responses.row(i).transpose();
    }
    o /= total;
    return;
  }
  VectorXd total = VectorXd::Zero(outputs());
  for (auto [i, lw] : logw) {
    const double k = std::exp(lw - best);
    VectorXd w = k * weights.row(i).transpose();
    total += w;
    o += w.cwiseProduct(responses.row(i).transpose());
  }
  o = o.cwiseQuotient(total);
}

KernelModel make_kernel_model(const RowMatrix& x, const Eigen::VectorXi& a, const MatrixXd& responses,
                              double fixed_bandwidth) {
  if (x.rows() != a.size() || responses.rows() != x.rows()) throw DimensionMismatch("kernel inputs have unequal lengths");
  KernelModel m;
  m.x = x;
  m.arm = a;
  m.responses = responses;
  auto members = split_arms(a);
  for (int arm = 0; arm < 2; ++arm) {
    m.bandwidth[arm] = fixed_bandwidth > 0.0 ? VectorXd::Constant(x.cols(), fixed_bandwidth)
                                             : silverman_bandwidth(take_rows(x, members[arm]));
  }
  return m;
}

double kernel_regress(const KernelModel& model, std::span<const double> x, int a) {
  double out = 0.0;
  if (model.outputs() != 1) throw DimensionMismatch("kernel_regress expects a single response");
  model.predict(x, a, &out);
  return out;
}

KernelFitter::KernelFitter(const RowMatrix& x, const Eigen::VectorXi& a, double bandwidth_scale, double fixed_bandwidth)
    : x_(x), a_(a), members_(split_arms(a)) {
  if (x.rows() != a.size()) throw DimensionMismatch("kernel inputs have unequal lengths");
  for (int arm = 0; arm < 2; ++arm) {
    const auto& idx = members_[arm];
    RowMatrix xa = take_rows(x_, idx);
    bandwidth_[arm] = fixed_bandwidth > 0.0 ? VectorXd::Constant(x.cols(), fixed_bandwidth)
                                            : VectorXd(silverman_bandwidth(xa) * bandwidth_scale);
    const int m = static_cast<int>(idx.size());
    MatrixXd s(m, m);
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j <= i; ++j) {
        double q = 0.0;
        for (Eigen::Index c = 0; c < x.cols(); ++c) {
          double u = (xa(i, c) - xa(j, c)) / bandwidth_[arm][c];
          q += u * u;
        }
        s(i, j) = s(j, i) = std::exp(-0.5 * q);
      }
    }
    for (int i = 0; i < m; ++i) s.row(i) /= s.row(i).sum();
    smoother_[arm] = std::move(s);
  }
}

FitResult KernelFitter::fit(const MatrixXd& responses) const {
  if (responses.rows() != x_.rows()) throw DimensionMismatch("kernel responses have wrong row count");
  require_finite(responses, "kernel responses");
  auto model = std::make_shared<KernelModel>();
  model->x = x_;
  model->arm = a_;
  model->responses = responses;
  model->bandwidth = bandwidth_;
  MatrixXd fitted(responses.rows(), responses.cols());
  for (int arm = 0; arm < 2; ++arm) {
    const auto& idx = members_[arm];
    if (idx.empty()) continue;
    MatrixXd ya(idx.size(), responses.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) ya.row(i) = responses.row(idx[i]);
    MatrixXd fa = smoother_[arm] * ya;
    for (std::size_t i = 0; i < idx.size(); ++i) fitted.row(idx[i]) = fa.row(i);
  }
  return {std::move(model), std::move(fitted)};
}

FitResult KernelFitter::fit_positive(const VectorXd& response) const {
  if (!((response.array() > 0.0).all())) throw DomainError("positive fit needs a positive response");
  return fit(MatrixXd(response));
}

FitResult KernelFitter::fit(const MatrixXd& responses, const MatrixXd& weights) const {
  if (responses.rows() != x_.rows()) throw DimensionMismatch("kernel responses have wrong row count");
  if (weights.rows() != responses.rows() || weights.cols() != responses.cols())
    throw DimensionMismatch("kernel weights do not match responses");
  require_finite(responses, "kernel responses");
  require_finite(weights, "kernel weights");
  if ((weights.array() < 0.0).any()) throw DomainError("kernel weights must be non-negative");
  auto model = std::make_shared<KernelModel>();
  model->x = x_;
  model->arm = a_;
  model->responses = responses;
  model->weights = weights;
  model->bandwidth = bandwidth_;
  MatrixXd fitted(responses.rows(), responses.cols());
  for (int arm = 0; arm < 2; ++arm) {
    const auto& idx = members_[arm];
    if (idx.empty()) continue;
    MatrixXd ya(idx.size(), responses.cols()), wa(idx.size(), responses.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      ya.row(i) = responses.row(idx[i]);
      wa.row(i) = weights.row(idx[i]);
    }
    MatrixXd fa = (smoother_[arm] * wa.cwiseProduct(ya)).cwiseQuotient(smoother_[arm] * wa);
    for (std::size_t i = 0; i < idx.size(); ++i) fitted.row(idx[i]) = fa.row(i);
  }
  return {std::move(model), std::move(fitted)};
}

VectorXd logistic_fit(const MatrixXd& design, const VectorXd& labels, const LogisticOptions& opt) {
  if (design.rows() != labels.size()) throw DimensionMismatch("logistic design and labels differ in length");
  require_finite(design, "logistic design");
  const double ones = labels.sum();
  if (ones <= 0.0 || ones >= static_cast<double>(labels.size()))
    throw EmptyArm("logistic regression needs both classes present");
  VectorXd beta = VectorXd::Zero(design.cols());
  for (int it = 0; it < opt.max_iter; ++it) {
    VectorXd eta = design * beta;
    VectorXd p = (1.0 / (1.0 + (-eta.array()).exp())).matrix();
    VectorXd grad = design.transpose() * (labels - p);
    if (grad.lpNorm<Eigen::Infinity>() < opt.tol) {
      if (((labels - p).array().abs() < 1e-6).all())
        throw SeparationError("logistic fit reproduces every label (complete separation)");
      break;
    }
    VectorXd w = (p.array() * (1.0 - p.array())).matrix();
    MatrixXd info = design.transpose() * w.asDiagonal() * design;
    Eigen::LDLT<MatrixXd> ldlt(info);
    VectorXd step = ldlt.solve(grad);
    if (ldlt.info() != Eigen::Success || !step.allFinite()) step = pinv(info) * grad;
    beta += step;
    if (!beta.allFinite() || beta.lpNorm<Eigen::Infinity>() > opt.coef_bound)
      throw SeparationError("logistic coefficients diverge (quasi-separation)");
  }
  return beta;
}

double LogisticModel::prob1(std::span<const double> x) const {
  const int d = standardization.dim();
  double z[64];
  std::vector<double> zv;
  double* zp = d > 64 ? (zv.resize(d), zv.data()) : z;
  standardization.apply(x, zp);
  double eta = coef[0];
  for (int j = 0; j < d; ++j) eta += coef[j + 1] * zp[j];
  return 1.0 / (1.0 + std::exp(-eta));
}

LogisticModel fit_propensity(const RowMatrix& x, const Eigen::VectorXi& a, const Standardization& standardization,
                             const LogisticOptions& opt) {
  const int n = static_cast<int>(x.rows());
  const int d = static_cast<int>(x.cols());
  MatrixXd design(n, d + 1);
  VectorXd z(d);
  for (int i = 0; i < n; ++i) {
    standardization.apply(std::span<const double>(x.data() + static_cast<std::ptrdiff_t>(i) * d, d), z.data());
    design(i, 0) = 1.0;
    design.row(i).tail(d) = z.transpose();
  }
  return {standardization, logistic_fit(design, a.cast<double>(), opt)};
}

MatrixXd pinv(const MatrixXd& m, double rel_tol, double scale) {
  require_finite(m, "pinv input");
  if (m.size() == 0) return MatrixXd::Zero(m.cols(), m.rows());
  Eigen::JacobiSVD<MatrixXd> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const VectorXd& s = svd.singularValues();
  const double cut = rel_tol * std::max(s.size() ? s[0] : 0.0, scale);
  VectorXd inv = VectorXd::Zero(s.size());
  for (Eigen::Index j = 0; j < s.size(); ++j)
    if (s[j] > cut && s[j] > 0.0) inv[j] = 1.0 / s[j];
  return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

MatrixXd fd_jacobian(const VectorFunction& f, const VectorXd& x, double rel_step) {
  const Eigen::Index n = x.size();
  MatrixXd jac;
  for (Eigen::Index j = 0; j < n; ++j) {
    double h = rel_step * (1.0 + std::abs(x[j]));
    VectorXd xp = x, xm = x;
    xp[j] += h;
    xm[j] -= h;
    VectorXd diff = (f(xp) - f(xm)) / (2.0 * h);
    if (j == 0) jac.resize(diff.size(), n);
    jac.col(j) = diff;
  }
  return jac;
}

NewtonResult newton_solve(const VectorFunction& f, const VectorXd& start, const NewtonOptions& opt) {
  auto safe_eval = [&](const VectorXd& x, VectorXd& out) {
    try {
      out = f(x);
      return out.allFinite();
    } catch (const DomainError&) {
      return false;
    } catch (const NonFinite&) {
      return false;
    }
  };

  NewtonResult res;
  res.x = start;
  VectorXd fx;
  if (!safe_eval(res.x, fx)) throw NonFinite("newton_solve: function not finite at start");
  double norm = fx.norm();
  constexpr int kMaxJitters = 3;
  int jitters = 0;
  for (res.iterations = 0;; ++res.iterations) {
    res.residual = fx.size() ? fx.lpNorm<Eigen::Infinity>() : 0.0;
    if (res.residual < opt.tol) return res;
    if (res.iterations >= opt.max_iter) break;

    MatrixXd jac = fd_jacobian(f, res.x, opt.fd_step);
    VectorXd step;
    Eigen::FullPivLU<MatrixXd> lu(jac);
    if (jac.rows() == jac.cols() && lu.isInvertible()) {
      step = -lu.solve(fx);
    }
    if (step.size() == 0 || !step.allFinite()) {
      step = -pinv(jac, 1e-12) * fx;
      ++res.pinv_steps;
    }

    double t = 1.0;
    bool moved = false;
    VectorXd trial_f;
    for (int h = 0; h <= opt.max_halvings; ++h, t *= 0.5) {
      VectorXd trial = res.x + t * step;
      if (safe_eval(trial, trial_f) && trial_f.norm() < norm) {
        res.x = std::move(trial);
        fx = trial_f;
        norm = fx.norm();
        moved = true;
        break;
      }
    }
    if (!moved) {
      if (jitters >= kMaxJitters) break;
      // Deterministic asymmetric nudge; symmetric problems otherwise stall on a singular ridge.
      VectorXd v(res.x.size());
      for (Eigen::Index j = 0; j < v.size(); ++j) v[j] = (j % 2 ? -1.0 : 1.0) * (1.0 + 0.5 * j) * 1e-3 * (1.0 + std::abs(res.x[j]));
      VectorXd nudged = res.x + v;
      VectorXd nf;
      ++jitters;
      if (!safe_eval(nudged, nf)) break;
      res.x = std::move(nudged);
      fx = nf;
      norm = fx.norm();
    }
  }
  throw NoConvergence("newton_solve: residual " + std::to_string(res.residual) + " after " +
                          std::to_string(res.iterations) + " iterations",
                      res.x, res.residual, res.iterations);
}

}  // namespace ecoate::numerics
