#include "ecoate/estimators.hpp"

#include <algorithm>
#include <cmath>

#include "ecoate/error.hpp"
#include "ecoate/gradient.hpp"

namespace ecoate {

using nlohmann::json;

namespace {

json num(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }
double get_num(const json& j) { return j.is_null() ? INFINITY : j.get<double>(); }

}  // namespace

json to_json(const EstimateReport& r) {
  json sources = json::array();
  for (const auto& s : r.sources) {
    json beta = json::array();
    for (Eigen::Index i = 0; i < s.beta.size(); ++i) beta.push_back(s.beta[i]);
    sources.push_back({{"site_id", s.site_id},
                       {"n", s.n},
                       {"used", s.used},
                       {"status", s.status},
                       {"beta", beta},
                       {"residual", num(s.residual)},
                       {"iterations", s.iterations},
                       {"tilt_iterations", s.tilt_iterations},
                       {"overlap", num(s.overlap)},
                       {"clamped", s.clamped}});
  }
  return {{"estimator", r.estimator},
          {"estimate", num(r.estimate)},
          {"se", num(r.se)},
          {"ci", {num(r.ci_lo), num(r.ci_hi)}},
          {"n_total", r.n_total},
          {"sources_used", r.sources_used},
          {"target_clamped", r.target_clamped},
          {"max_r", num(r.max_r)},
          {"sources", sources},
          {"warnings", r.warnings}};
}

EstimateReport report_from_json(const json& j) {
  EstimateReport r;
  try {
    r.estimator = j.at("estimator").get<std::string>();
    r.estimate = get_num(j.at("estimate"));
    r.se = get_num(j.at("se"));
    r.ci_lo = get_num(j.at("ci").at(0));
    r.ci_hi = get_num(j.at("ci").at(1));
    r.n_total = j.at("n_total").get<long>();
    r.sources_used = j.at("sources_used").get<int>();
    r.target_clamped = j.at("target_clamped").get<int>();
    r.max_r = get_num(j.at("max_r"));
    for (const auto& s : j.at("sources")) {
      SourceDiagnostics d;
      d.site_id = s.at("site_id").get<int>();
      d.n = s.at("n").get<long>();
      d.used = s.at("used").get<bool>();
      d.status = s.at("status").get<std::string>();
      auto beta = s.at("beta").get<std::vector<double>>();
      d.beta = Eigen::Map<Eigen::VectorXd>(beta.data(), static_cast<Eigen::Index>(beta.size()));
      d.residual = get_num(s.at("residual"));
      d.iterations = s.at("iterations").get<int>();
      d.tilt_iterations = s.at("tilt_iterations").get<int>();
      d.overlap = get_num(s.at("overlap"));
      d.clamped = s.at("clamped").get<int>();
      r.sources.push_back(std::move(d));
    }
    r.warnings = j.at("warnings").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw SchemaError(std::string("malformed report: ") + e.what());
  }
  return r;
}

std::string dump_report(const EstimateReport& r) { return to_json(r).dump(2) + "\n"; }

namespace estimators {

using Eigen::MatrixXd;
using Eigen::VectorXd;

Interval variance_ci(const VectorXd& g, double point) {
  const Eigen::Index n = g.size();
  if (n < 2) throw InsufficientRows("variance needs at least two gradient values");
  const double mean = g.mean();
  const double var = (g.array() - mean).square().sum() / static_cast<double>(n - 1);
  Interval out;
  out.se = std::sqrt(var / static_cast<double>(n));
  out.lo = point - 1.96 * out.se;
  out.hi = point + 1.96 * out.se;
  return out;
}

EstimateReport meta_ivw(const std::vector<SiteEstimate>& inputs) {
  if (inputs.empty()) throw InsufficientRows("meta-analysis needs at least one estimate");
  double wsum = 0.0, acc = 0.0;
  for (const auto& e : inputs) {
    if (!(e.se > 0.0) || !std::isfinite(e.se)) throw ZeroVariance("inverse-variance weighting needs positive SEs");
    const double w = 1.0 / (e.se * e.se);
    wsum += w;
    acc += w * e.estimate;
  }
  EstimateReport r;
  r.estimator = "meta-ivw";
  r.estimate = inputs.size() == 1 ? inputs[0].estimate : acc / wsum;
  r.se = inputs.size() == 1 ? inputs[0].se : 1.0 / std::sqrt(wsum);
  r.ci_lo = r.estimate - 1.96 * r.se;
  r.ci_hi = r.estimate + 1.96 * r.se;
  r.sources_used = static_cast<int>(inputs.size()) - 1;
  return r;
}

EstimateReport aipw_target_only(const SiteDataset& target, const EcoOptions& opt) {
  const int n = target.size();
  if (n < 2) throw InsufficientRows("target site needs at least two records");
  if (target.arm_count(0) == 0 || target.arm_count(1) == 0) throw EmptyArm("target site lacks a treatment arm");
  auto standardization = numerics::Standardization::fit(target.x);
  auto propensity = numerics::fit_propensity(target.x, target.a, standardization);
  numerics::SieveFitter fitter(opt.sieve(target.dim()), standardization, target.x, target.a, opt.ridge);
  auto mu = fitter.fit(MatrixXd(target.y)).model;
  VectorXd h(n), tau(n);
  int clamped = 0;
  for (int i = 0; i < n; ++i) {
    auto x = target.row(i);
    const int a = target.a[i];
    const double p1 = propensity.prob1(x);
    double pa = a ? p1 : 1.0 - p1;
    if (pa < opt.clamp || pa > 1.0 - opt.clamp) {
      ++clamped;
      pa = std::clamp(pa, opt.clamp, 1.0 - opt.clamp);
    }
    double m[2];
    mu->predict(x, 0, &m[0]);
    mu->predict(x, 1, &m[1]);
    h[i] = (2.0 * a - 1.0) / pa * (target.y[i] - m[a]);
    tau[i] = m[1] - m[0];
  }
  EstimateReport r;
  r.estimator = "target-only";
  r.estimate = tau.mean() + h.mean();
  auto ci = variance_ci(h + tau, r.estimate);
  r.se = ci.se;
  r.ci_lo = ci.lo;
  r.ci_hi = ci.hi;
  r.n_total = n;
  r.target_clamped = clamped;
  r.max_r = 1.0;
  return r;
}

EstimateReport eco_ate(const SiteDataset& target, const std::vector<SiteDataset>& sources,
                       const std::vector<expr::BasisVector>& bases, const EcoOptions& opt,
                       federation::Transport* transport) {
  if (bases.size() != sources.size()) throw DimensionMismatch("one tilt basis per source required");
  federation::MemoryTransport memory;
  federation::Transport& channel = transport ? *transport : memory;
  federation::TargetNode node(target, opt);
  std::vector<federation::SourceNode> nodes;
  for (std::size_t s = 0; s < sources.size(); ++s) nodes.emplace_back(sources[s], bases[s]);
  return federation::orchestrate(channel, node, nodes, transport ? opt.timeout_seconds : 0.0);
}

EstimateReport naive_fusion(const SiteDataset& target, const std::vector<SiteDataset>& sources, EcoOptions opt) {
  if (opt.name == EcoOptions{}.name) opt.name = "naive";
  return eco_ate(target, sources, std::vector<expr::BasisVector>(sources.size()), opt);
}

shift::CovariateShiftModel pooled_logistic_tilt(const SiteDataset& target, const SiteDataset& source) {
  const int d = target.dim();
  if (source.dim() != d) throw DimensionMismatch("source covariate dimension differs from the target");
  shift::TiltFeatures f{d};
  const int F = f.count();
  const int n0 = target.size(), ns = source.size();
  MatrixXd phi(n0 + ns, F);
  VectorXd row(F);
  for (int i = 0; i < n0 + ns; ++i) {
    const SiteDataset& data = i < n0 ? target : source;
    const int k = i < n0 ? i : i - n0;
    f.compute(data.row(k), data.a[k], row.data());
    phi.row(i) = row.transpose();
  }
  VectorXd center = phi.topRows(n0).colwise().mean().transpose();
  VectorXd scale(F);
  for (int j = 0; j < F; ++j) {
    double sd = std::sqrt((phi.col(j).head(n0).array() - center[j]).square().mean());
    scale[j] = sd > 0.0 ? sd : 1.0;
  }
  MatrixXd design(n0 + ns, F + 1);
  design.col(0).setOnes();
  design.rightCols(F) = (phi.rowwise() - center.transpose()).array().rowwise() / scale.transpose().array();
  VectorXd labels = VectorXd::Zero(n0 + ns);
  labels.tail(ns).setOnes();
  VectorXd coef = numerics::logistic_fit(design, labels);
  // P(S=s|x,a)/P(S=0|x,a) = (n_s/n_0)·λ(x,a)
  const double log_norm = -coef[0] - std::log(static_cast<double>(n0) / ns);
  return shift::CovariateShiftModel(d, center, scale, coef.tail(F), log_norm);
}

EstimateReport oracle_pooled(const SiteDataset& target, const std::vector<SiteDataset>& sources,
                             const std::vector<expr::BasisVector>& bases, EcoOptions opt) {
  if (bases.size() != sources.size()) throw DimensionMismatch("one tilt basis per source required");
  if (opt.name == EcoOptions{}.name) opt.name = "oracle";
  std::vector<federation::SourceInput> inputs;
  for (std::size_t s = 0; s < sources.size(); ++s) {
    federation::SourceInput in;
    in.site_id = sources[s].site_id;
    in.n = sources[s].size();
    in.basis = bases[s];
    if (!bases[s].empty()) in.xi_bar = shift::basis_matrix(sources[s], bases[s]).colwise().mean().transpose();
    in.tilt = pooled_logistic_tilt(target, sources[s]);
    inputs.push_back(std::move(in));
  }
  numerics::KernelFitter kernel(target.x, target.a, opt.bandwidth_scale);
  numerics::SieveFitter sieve(opt.sieve(target.dim()), numerics::Standardization::fit(target.x), target.x, target.a,
                              opt.ridge);
  auto fits = federation::fit_target(target, inputs, opt, kernel, &sieve);
  gradient::GradientContext ctx(fits.nuisances);
  std::vector<federation::Round2Summary> summaries{federation::summarize_site(ctx, target, 0, opt)};
  const auto& ids = fits.nuisances.site_ids;
  for (std::size_t pos = 1; pos < ids.size(); ++pos)
    for (const auto& s : sources)
      if (s.site_id == ids[pos]) summaries.push_back(federation::summarize_site(ctx, s, static_cast<int>(pos), opt));
  EstimateReport rep = federation::fuse_summaries(summaries, opt);
  rep.sources = fits.sources;
  for (std::size_t s = 0; s < rep.sources.size(); ++s)
    if (!rep.sources[s].used) rep.warnings.push_back("source " + std::to_string(rep.sources[s].site_id) + " " + rep.sources[s].status);
  return rep;
}

}  // namespace estimators
}  // namespace ecoate
