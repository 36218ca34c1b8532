#include "ecoate/federation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "ecoate/error.hpp"

namespace ecoate::federation {

namespace fs = std::filesystem;
using gradient::packed_index;
using gradient::packed_size;

// ---- target fitting ---------------------------------------------------------

TargetFits fit_target(const SiteDataset& target, const std::vector<SourceInput>& sources, const EcoOptions& opt,
                      const numerics::CondMeanFitter& fitter, const numerics::CondMeanFitter* outcome_fitter) {
  const int n = target.size();
  if (n < 2) throw InsufficientRows("target site needs at least two records");
  if (fitter.rows() != n) throw DimensionMismatch("fitter was not trained on the target records");
  TargetFits out;
  out.standardization = numerics::Standardization::fit(target.x);
  auto& nu = out.nuisances;
  nu.dim = target.dim();
  nu.clamp = opt.clamp;
  nu.matrix_form = opt.matrix_form;
  nu.propensity = numerics::fit_propensity(target.x, target.a, out.standardization);
  auto mu_fit = (outcome_fitter ? *outcome_fitter : fitter).fit(MatrixXd(target.y));
  nu.outcome = mu_fit.model;
  const VectorXd mu_hat = mu_fit.fitted.col(0);

  struct Used {
    const SourceInput* in;
    shift::CovariateShiftModel tilt;
    VectorXd beta;
    shift::NormalizerModel normalizer;
  };
  std::vector<Used> used;
  std::set<int> ids{target.site_id};
  for (const auto& s : sources) {
    if (!ids.insert(s.site_id).second) throw SchemaError("duplicate site id " + std::to_string(s.site_id));
    SourceDiagnostics diag;
    diag.site_id = s.site_id;
    diag.n = s.n;
    try {
      if (s.n < 1) throw DimensionMismatch("source reports no records");
      shift::CovariateShiftModel tilt = s.tilt ? *s.tilt : shift::fit_covariate_tilt(target, s.phi_bar, s.n, opt.newton);
      diag.tilt_iterations = tilt.iterations;
      VectorXd beta(0);
      shift::NormalizerModel norm;
      if (!s.basis.empty()) {
        auto sol = shift::solve_beta_source(target, {s.site_id, s.n, s.basis, s.xi_bar}, shift::lambda_values(target, tilt),
                                            fitter, opt.newton);
        beta = sol.beta;
        norm = sol.normalizer;
        diag.residual = sol.residual;
        diag.iterations = sol.iterations;
      }
      diag.beta = beta;
      diag.overlap = shift::overlap_ratio(target, tilt, s.basis, beta, norm);
      diag.used = true;
      used.push_back({&s, std::move(tilt), std::move(beta), std::move(norm)});
    } catch (const NoConvergence& e) {
      diag.status = std::string("excluded: ") + e.what();
    } catch (const NonFinite& e) {
      diag.status = std::string("excluded: ") + e.what();
    } catch (const DomainError& e) {
      diag.status = std::string("excluded: ") + e.what();
    }
    out.sources.push_back(std::move(diag));
  }

  long n_total = n;
  for (const auto& u : used) n_total += u.in->n;
  nu.site_ids = {target.site_id};
  out.site_n = {n};
  nu.site_prob = {static_cast<double>(n) / n_total};
  for (const auto& u : used) {
    nu.site_ids.push_back(u.in->site_id);
    out.site_n.push_back(u.in->n);
    nu.site_prob.push_back(static_cast<double>(u.in->n) / n_total);
    nu.weights.add(u.in->site_id, u.in->basis, u.beta);
    nu.tilts.push_back(u.tilt);
    nu.normalizers.push_back(u.normalizer);
  }

  const int k = static_cast<int>(used.size());
  const int S = k + 1;
  const int P = nu.weights.dim();
  const int G = packed_size(S);
  MatrixXd wst = MatrixXd::Ones(n, S);
  VectorXd r(n);
  MatrixXd xi(n, P);
  std::vector<int> block(P);
  for (int j = 0; j < P; ++j) block[j] = nu.weights.locate(j).first + 1;
  VectorXd row(P);
  for (int i = 0; i < n; ++i) {
    auto z = target.point(i);
    const int a = target.a[i];
    double denom = nu.site_prob[0];
    for (int s = 1; s < S; ++s) {
      wst(i, s) = nu.weights.weight(s - 1, z) / nu.normalizers[s - 1](z.x, a);
      denom += nu.site_prob[s] * nu.tilts[s - 1].evaluate(z.x, a) * wst(i, s);
    }
    r[i] = 1.0 / denom;
    if (P) {
      nu.weights.basis_values(z, row.data());
      xi.row(i) = row.transpose();
    }
  }
  if (!r.allFinite() || !wst.allFinite()) throw NonFinite("density ratios on the target are not finite");

  // Products with w*_l are fit as w*_l-weighted regressions of the bounded factor,
  // which keeps heavy tails in the estimated ratios out of the squared residuals.
  MatrixXd geo(n, G), geo_w(n, G);
  for (int m = 0; m < S; ++m)
    for (int l = m; l < S; ++l) {
      geo.col(packed_index(m, l, S)) = r.cwiseProduct(wst.col(m));
      geo_w.col(packed_index(m, l, S)) = wst.col(l);
    }
  auto geo_fit = fitter.fit(geo, geo_w);
  nu.geometry = geo_fit.model;
  const MatrixXd& Gf = geo_fit.fitted;

  MatrixXd Ef;
  if (P) {
    MatrixXd tb_w(n, P);
    for (int j = 0; j < P; ++j) tb_w.col(j) = wst.col(block[j]);
    auto tb_fit = fitter.fit(xi, tb_w);
    nu.tilted_basis = tb_fit.model;
    Ef = tb_fit.fitted;
  }

  // With no source r is one and y - μ̂ is centered by construction; only the ridge would move it off zero.
  const VectorXd rres = S > 1 ? VectorXd(r.cwiseProduct(target.y - mu_hat)) : VectorXd::Zero(n);
  MatrixXd oc(n, S);
  for (int m = 0; m < S; ++m) oc.col(m) = rres;
  nu.outcome_cov = fitter.fit(oc, wst).model;

  if (P) {
    MatrixXd sc(n, P * S), sc_w(n, P * S);
    for (int j = 0; j < P; ++j) {
      const int s = block[j];
      VectorXd centered = xi.col(j) - Ef.col(j);
      for (int m = 0; m < S; ++m) {
        sc.col(j * S + m) = (r.cwiseProduct(wst.col(m)) - Gf.col(packed_index(s, m, S))).cwiseProduct(centered);
        sc_w.col(j * S + m) = wst.col(s);
      }
    }
    nu.score_cov = fitter.fit(sc, sc_w).model;
  }
  return out;
}

// ---- round 2 and fusion -------------------------------------------------------

Round2Summary summarize_site(const gradient::GradientContext& ctx, const SiteDataset& data, int position,
                             const EcoOptions& opt) {
  const int n = data.size();
  if (n < 1) throw InsufficientRows("site has no records");
  auto g = gradient::evaluate_site(ctx, data, position, opt.centering, opt.bandwidth_scale);
  Round2Summary s;
  s.site_id = data.site_id;
  s.n = n;
  s.H = g.D.mean();
  s.L = g.score.colwise().mean().transpose();
  s.I = g.score.transpose() * g.score / n;
  s.I = 0.5 * (s.I + s.I.transpose());
  s.D2 = g.D.squaredNorm() / n;
  s.DL = g.score.transpose() * g.D / n;
  s.clamped = g.clamped;
  s.max_r = g.max_r;
  if (position == 0) {
    TargetBlock t;
    t.N0 = g.tau.mean();
    t.T2 = g.tau.squaredNorm() / n;
    t.TD = g.tau.dot(g.D) / n;
    t.TL = g.score.transpose() * g.tau / n;
    t.C = g.score.transpose() * g.h / n;
    s.target = t;
  }
  return s;
}

EstimateReport fuse_summaries(const std::vector<Round2Summary>& summaries, const EcoOptions& opt) {
  if (summaries.empty() || !summaries[0].target) throw SchemaError("fusion needs the target summary first");
  const auto& t = *summaries[0].target;
  const int P = static_cast<int>(t.C.size());
  long n = 0;
  for (const auto& s : summaries) {
    if (s.L.size() != P || s.I.rows() != P || s.DL.size() != P) throw DimensionMismatch("round-2 summaries disagree on dim β");
    n += s.n;
  }
  const int m = static_cast<int>(summaries.size());
  std::vector<double> p(m);
  for (int s = 0; s < m; ++s) p[s] = static_cast<double>(summaries[s].n) / n;

  VectorXd v = VectorXd::Zero(P);
  if (P) {
    MatrixXd I = MatrixXd::Zero(P, P);
    for (int s = 0; s < m; ++s) I += p[s] * summaries[s].I;
    v = numerics::pinv(0.5 * (I + I.transpose())) * t.C;
  }
  double phi = t.N0;
  for (int s = 0; s < m; ++s) {
    const double w = opt.fusion == Fusion::kEqual ? 1.0 / m : p[s];
    phi += w * (summaries[s].H + v.dot(summaries[s].L));
  }

  // Pooled first and second moments of D^eff assembled from the aggregates.
  double sum = 0.0, ss = 0.0;
  for (int s = 0; s < m; ++s) {
    const auto& q = summaries[s];
    double mean = q.H + v.dot(q.L);
    double sq = q.D2 + 2.0 * v.dot(q.DL) + v.dot(q.I * v);
    if (s == 0) {
      const double p0 = p[0];
      const double et = (t.N0 - phi) / p0;
      const double et2 = (t.T2 - 2.0 * phi * t.N0 + phi * phi) / (p0 * p0);
      const double etd = (t.TD - phi * q.H) / p0;
      const double etl = (v.dot(t.TL) - phi * v.dot(q.L)) / p0;
      mean += et;
      sq += et2 + 2.0 * etd + 2.0 * etl;
    }
    sum += q.n * mean;
    ss += q.n * sq;
  }
  const double mu = sum / n;
  const double var = n > 1 ? std::max(0.0, (ss - n * mu * mu) / (n - 1)) : 0.0;

  EstimateReport rep;
  rep.estimator = opt.name;
  rep.estimate = phi;
  rep.se = std::sqrt(var / n);
  rep.ci_lo = phi - 1.96 * rep.se;
  rep.ci_hi = phi + 1.96 * rep.se;
  rep.n_total = n;
  rep.sources_used = m - 1;
  rep.target_clamped = summaries[0].clamped;
  for (const auto& s : summaries) rep.max_r = std::max(rep.max_r, s.max_r);
  return rep;
}

// ---- JSON helpers -------------------------------------------------------------

namespace {

json vec(const VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

json mat(const MatrixXd& m) {
  json d = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) d.push_back(m(i, j));
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", d}};
}

json num(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

double get_num(const json& j, const std::string& what) {
  if (j.is_null()) return INFINITY;
  if (!j.is_number()) throw SchemaError(what + " must be a number");
  return j.get<double>();
}

const json& field(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end()) throw SchemaError(std::string("missing field '") + key + "'");
  return *it;
}

VectorXd get_vec(const json& j, const std::string& what) {
  if (!j.is_array()) throw SchemaError(what + " must be an array");
  VectorXd v(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw SchemaError(what + " must hold numbers");
    v[i] = j[i].get<double>();
  }
  return v;
}

MatrixXd get_mat(const json& j, const std::string& what) {
  if (!j.is_object()) throw SchemaError(what + " must be a matrix object");
  const long rows = field(j, "rows").get<long>(), cols = field(j, "cols").get<long>();
  VectorXd d = get_vec(field(j, "data"), what);
  if (rows < 0 || cols < 0 || d.size() != rows * cols) throw SchemaError(what + " has inconsistent shape");
  MatrixXd m(rows, cols);
  for (long i = 0; i < rows; ++i)
    for (long c = 0; c < cols; ++c) m(i, c) = d[i * cols + c];
  return m;
}

void exact_keys(const json& j, std::initializer_list<const char*> required, std::initializer_list<const char*> optional,
                const std::string& what) {
  if (!j.is_object()) throw SchemaError(what + " must be an object");
  std::set<std::string> allowed;
  for (auto k : required) {
    allowed.insert(k);
    if (!j.contains(k)) throw SchemaError(what + " lacks field '" + k + "'");
  }
  for (auto k : optional) allowed.insert(k);
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) throw SchemaError(what + " has unexpected field '" + it.key() + "'");
}

void check_len(const json& arr, std::size_t n, const std::string& what) {
  if (!arr.is_array() || arr.size() != n)
    throw SchemaError(what + " must have length " + std::to_string(n));
}

void check_mat(const json& m, long rows, long cols, const std::string& what) {
  if (!m.is_object()) throw SchemaError(what + " must be a matrix object");
  exact_keys(m, {"rows", "cols", "data"}, {}, what);
  if (m["rows"].get<long>() != rows || m["cols"].get<long>() != cols)
    throw SchemaError(what + " must be " + std::to_string(rows) + "x" + std::to_string(cols));
  check_len(m["data"], static_cast<std::size_t>(rows * cols), what);
}

void check_header(const json& j, MessageKind kind) {
  if (!j.is_object()) throw SchemaError("message must be a JSON object");
  auto it = j.find("schema");
  if (it == j.end() || !it->is_string()) throw SchemaError("message lacks a schema version");
  if (it->get<std::string>() != kSchemaVersion)
    throw SchemaVersionMismatch("message schema '" + it->get<std::string>() + "' is not " + kSchemaVersion);
  auto k = j.find("kind");
  if (k == j.end() || !k->is_string() || k->get<std::string>() != kind_name(kind))
    throw SchemaError(std::string("expected a ") + kind_name(kind) + " message");
}

const char* fusion_name(Fusion f) { return f == Fusion::kEqual ? "equal" : "size-weighted"; }
const char* form_name(gradient::MatrixForm f) {
  return f == gradient::MatrixForm::kTiltAdjusted ? "tilt-adjusted" : "untilted";
}
const char* centering_name(gradient::Centering c) {
  return c == gradient::Centering::kModelImplied ? "model" : "kernel";
}

json diag_json(const SourceDiagnostics& d) {
  return {{"site_id", d.site_id}, {"n", d.n},           {"used", d.used},
          {"status", d.status},   {"beta", vec(d.beta)}, {"residual", num(d.residual)},
          {"iterations", d.iterations}, {"tilt_iterations", d.tilt_iterations}, {"overlap", num(d.overlap)},
          {"clamped", d.clamped}};
}

SourceDiagnostics diag_from(const json& j) {
  exact_keys(j, {"site_id", "n", "used", "status", "beta", "residual", "iterations", "tilt_iterations", "overlap", "clamped"},
             {}, "diagnostics");
  SourceDiagnostics d;
  d.site_id = j["site_id"].get<int>();
  d.n = j["n"].get<long>();
  d.used = j["used"].get<bool>();
  d.status = j["status"].get<std::string>();
  d.beta = get_vec(j["beta"], "beta");
  d.residual = get_num(j["residual"], "residual");
  d.iterations = j["iterations"].get<int>();
  d.tilt_iterations = j["tilt_iterations"].get<int>();
  d.overlap = get_num(j["overlap"], "overlap");
  d.clamped = j["clamped"].get<int>();
  return d;
}

std::shared_ptr<const numerics::SieveModel> as_sieve(const std::shared_ptr<const numerics::ConditionalMean>& m,
                                                      const char* what) {
  auto s = std::dynamic_pointer_cast<const numerics::SieveModel>(m);
  if (!s) throw SchemaError(std::string("broadcast needs a sieve model for ") + what);
  return s;
}

}  // namespace

json options_to_json(const EcoOptions& o) {
  return {{"name", o.name},
          {"sieve_degree", o.sieve_degree},
          {"sieve_pairwise", o.sieve_pairwise},
          {"ridge", o.ridge},
          {"clamp", o.clamp},
          {"fusion", fusion_name(o.fusion)},
          {"matrix_form", form_name(o.matrix_form)},
          {"centering", centering_name(o.centering)},
          {"bandwidth_scale", o.bandwidth_scale},
          {"newton_tol", o.newton.tol},
          {"newton_max_iter", o.newton.max_iter},
          {"timeout_seconds", o.timeout_seconds}};
}

EcoOptions options_from_json(const json& j, EcoOptions o) {
  if (!j.is_object()) throw ConfigError("options must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const json& v = it.value();
    try {
      if (k == "name") o.name = v.get<std::string>();
      else if (k == "sieve_degree") o.sieve_degree = v.get<int>();
      else if (k == "sieve_pairwise") o.sieve_pairwise = v.get<bool>();
      else if (k == "ridge") o.ridge = v.get<double>();
      else if (k == "clamp") o.clamp = v.get<double>();
      else if (k == "fusion") {
        auto s = v.get<std::string>();
        if (s == "equal") o.fusion = Fusion::kEqual;
        else if (s == "size-weighted" || s == "size") o.fusion = Fusion::kSizeWeighted;
        else throw ConfigError("fusion must be 'equal' or 'size-weighted', got '" + s + "'");
      } else if (k == "matrix_form") {
        auto s = v.get<std::string>();
        if (s == "tilt-adjusted") o.matrix_form = gradient::MatrixForm::kTiltAdjusted;
        else if (s == "untilted") o.matrix_form = gradient::MatrixForm::kUntilted;
        else throw ConfigError("matrix_form must be 'tilt-adjusted' or 'untilted', got '" + s + "'");
      } else if (k == "centering") {
        auto s = v.get<std::string>();
        if (s == "model") o.centering = gradient::Centering::kModelImplied;
        else if (s == "kernel") o.centering = gradient::Centering::kSiteKernel;
        else throw ConfigError("centering must be 'model' or 'kernel', got '" + s + "'");
      } else if (k == "bandwidth_scale") o.bandwidth_scale = v.get<double>();
      else if (k == "newton_tol") o.newton.tol = v.get<double>();
      else if (k == "newton_max_iter") o.newton.max_iter = v.get<int>();
      else if (k == "timeout_seconds") o.timeout_seconds = v.get<double>();
      else throw ConfigError("unknown option '" + k + "'");
    } catch (const json::exception& e) {
      throw ConfigError("option '" + k + "' has the wrong type: " + e.what());
    }
  }
  if (o.sieve_degree < 1) throw ConfigError("sieve_degree must be at least 1");
  if (!(o.clamp > 0.0 && o.clamp < 0.5)) throw ConfigError("clamp must lie in (0, 0.5)");
  if (!(o.bandwidth_scale > 0.0)) throw ConfigError("bandwidth_scale must be positive");
  return o;
}

// ---- messages -------------------------------------------------------------------

const char* kind_name(MessageKind k) {
  switch (k) {
    case MessageKind::kRound1: return "round1";
    case MessageKind::kBroadcast: return "broadcast";
    case MessageKind::kRound2: return "round2";
  }
  return "?";
}

std::string encode(const json& j) { return j.dump(2) + "\n"; }

json decode(const std::string& bytes) {
  try {
    return json::parse(bytes);
  } catch (const json::parse_error& e) {
    throw SchemaError(std::string("message is not valid JSON: ") + e.what());
  }
}

Round1Summary source_round1(const SiteDataset& data, const expr::BasisVector& basis) {
  if (data.size() < 1) throw InsufficientRows("source site has no records");
  Round1Summary m;
  m.site_id = data.site_id;
  m.n = data.size();
  m.dim = data.dim();
  m.phi_bar = shift::covariate_moments(data);
  m.xi = basis.to_strings();
  m.xi_bar = basis.empty() ? VectorXd() : VectorXd(shift::basis_matrix(data, basis).colwise().mean().transpose());
  return m;
}

json to_json(const Round1Summary& m) {
  return {{"schema", kSchemaVersion}, {"kind", "round1"},     {"site_id", m.site_id}, {"n", m.n},
          {"dim", m.dim},             {"phi_bar", vec(m.phi_bar)}, {"xi", m.xi},     {"xi_bar", vec(m.xi_bar)}};
}

json to_json(const Round2Summary& m) {
  json j = {{"schema", kSchemaVersion}, {"kind", "round2"}, {"site_id", m.site_id}, {"n", m.n},
            {"H", m.H},                 {"L", vec(m.L)},    {"I", mat(m.I)},       {"D2", m.D2},
            {"DL", vec(m.DL)},          {"diagnostics", {{"clamped", m.clamped}, {"max_r", m.max_r}}}};
  if (m.target)
    j["target"] = {{"N0", m.target->N0}, {"T2", m.target->T2}, {"TD", m.target->TD},
                   {"TL", vec(m.target->TL)}, {"C", vec(m.target->C)}};
  return j;
}

json to_json(const Broadcast& b) {
  json sources = json::array();
  for (const auto& s : b.sources)
    sources.push_back({{"site_id", s.site_id},
                       {"n", s.n},
                       {"xi", s.xi},
                       {"beta", vec(s.beta)},
                       {"tilt",
                        {{"center", vec(s.tilt_center)},
                         {"scale", vec(s.tilt_scale)},
                         {"gamma", vec(s.tilt_gamma)},
                         {"log_normalizer", s.tilt_log_normalizer}}},
                       {"normalizer", s.normalizer ? mat(*s.normalizer) : json(nullptr)},
                       {"normalizer_floor", s.normalizer_floor}});
  json diags = json::array();
  for (const auto& d : b.diagnostics) diags.push_back(diag_json(d));
  const bool has_score = b.tilted.cols() > 0;
  return {{"schema", kSchemaVersion},
          {"kind", "broadcast"},
          {"target", {{"site_id", b.target_id}, {"n", b.target_n}}},
          {"dim", b.dim},
          {"site_prob", b.site_prob},
          {"options", options_to_json(b.options)},
          {"standardization", {{"center", vec(b.standardization.center)}, {"scale", vec(b.standardization.scale)}}},
          {"propensity", vec(b.propensity)},
          {"outcome", mat(b.outcome)},
          {"geometry", mat(b.geometry)},
          {"tilted", has_score ? mat(b.tilted) : json(nullptr)},
          {"outcome_cov", mat(b.outcome_cov)},
          {"score_cov", has_score ? mat(b.score_cov) : json(nullptr)},
          {"sources", sources},
          {"diagnostics", diags}};
}

void validate_message(const json& j, MessageKind kind) {
  check_header(j, kind);
  switch (kind) {
    case MessageKind::kRound1: {
      exact_keys(j, {"schema", "kind", "site_id", "n", "dim", "phi_bar", "xi", "xi_bar"}, {}, "round1");
      const int dim = j["dim"].get<int>();
      if (dim < 1) throw SchemaError("round1 dim must be positive");
      if (j["n"].get<long>() < 1) throw SchemaError("round1 n must be positive");
      check_len(j["phi_bar"], shift::TiltFeatures{dim}.count(), "phi_bar");
      if (!j["xi"].is_array()) throw SchemaError("xi must be an array of expressions");
      for (const auto& e : j["xi"])
        if (!e.is_string()) throw SchemaError("xi must be an array of expressions");
      check_len(j["xi_bar"], j["xi"].size(), "xi_bar");
      break;
    }
    case MessageKind::kRound2: {
      exact_keys(j, {"schema", "kind", "site_id", "n", "H", "L", "I", "D2", "DL", "diagnostics"}, {"target"}, "round2");
      const std::size_t P = j["L"].is_array() ? j["L"].size() : 0;
      check_len(j["L"], P, "L");
      check_mat(j["I"], P, P, "I");
      check_len(j["DL"], P, "DL");
      exact_keys(j["diagnostics"], {"clamped", "max_r"}, {}, "round2 diagnostics");
      if (j.contains("target")) {
        exact_keys(j["target"], {"N0", "T2", "TD", "TL", "C"}, {}, "round2 target block");
        check_len(j["target"]["TL"], P, "TL");
        check_len(j["target"]["C"], P, "C");
      }
      break;
    }
    case MessageKind::kBroadcast: {
      exact_keys(j,
                 {"schema", "kind", "target", "dim", "site_prob", "options", "standardization", "propensity", "outcome",
                  "geometry", "tilted", "outcome_cov", "score_cov", "sources", "diagnostics"},
                 {}, "broadcast");
      exact_keys(j["target"], {"site_id", "n"}, {}, "broadcast target");
      const int dim = j["dim"].get<int>();
      EcoOptions opt = options_from_json(j["options"]);
      const long T = opt.sieve(dim).term_count();
      if (!j["sources"].is_array()) throw SchemaError("sources must be an array");
      const long S = static_cast<long>(j["sources"].size()) + 1;
      long P = 0;
      const long F = shift::TiltFeatures{dim}.count();
      for (const auto& s : j["sources"]) {
        exact_keys(s, {"site_id", "n", "xi", "beta", "tilt", "normalizer", "normalizer_floor"}, {}, "broadcast source");
        check_len(s["beta"], s["xi"].size(), "beta");
        exact_keys(s["tilt"], {"center", "scale", "gamma", "log_normalizer"}, {}, "tilt");
        for (const char* key : {"center", "scale", "gamma"}) check_len(s["tilt"][key], F, key);
        if (!s["normalizer"].is_null()) check_mat(s["normalizer"], T, 1, "normalizer");
        P += static_cast<long>(s["xi"].size());
      }
      check_len(j["site_prob"], S, "site_prob");
      exact_keys(j["standardization"], {"center", "scale"}, {}, "standardization");
      check_len(j["standardization"]["center"], dim, "standardization center");
      check_len(j["standardization"]["scale"], dim, "standardization scale");
      check_len(j["propensity"], dim + 1, "propensity");
      check_mat(j["outcome"], T, 1, "outcome");
      check_mat(j["geometry"], T, packed_size(S), "geometry");
      check_mat(j["outcome_cov"], T, S, "outcome_cov");
      if (P) {
        check_mat(j["tilted"], T, P, "tilted");
        check_mat(j["score_cov"], T, P * S, "score_cov");
      } else if (!j["tilted"].is_null() || !j["score_cov"].is_null()) {
        throw SchemaError("score models must be null when no source has a tilt basis");
      }
      if (!j["diagnostics"].is_array()) throw SchemaError("diagnostics must be an array");
      break;
    }
  }
}

Round1Summary round1_from_json(const json& j) {
  validate_message(j, MessageKind::kRound1);
  Round1Summary m;
  m.site_id = j["site_id"].get<int>();
  m.n = j["n"].get<long>();
  m.dim = j["dim"].get<int>();
  m.phi_bar = get_vec(j["phi_bar"], "phi_bar");
  m.xi = j["xi"].get<std::vector<std::string>>();
  m.xi_bar = get_vec(j["xi_bar"], "xi_bar");
  return m;
}

Round2Summary round2_from_json(const json& j) {
  validate_message(j, MessageKind::kRound2);
  Round2Summary m;
  m.site_id = j["site_id"].get<int>();
  m.n = j["n"].get<long>();
  m.H = get_num(j["H"], "H");
  m.L = get_vec(j["L"], "L");
  m.I = get_mat(j["I"], "I");
  m.D2 = get_num(j["D2"], "D2");
  m.DL = get_vec(j["DL"], "DL");
  m.clamped = j["diagnostics"]["clamped"].get<int>();
  m.max_r = get_num(j["diagnostics"]["max_r"], "max_r");
  if (j.contains("target")) {
    const auto& t = j["target"];
    m.target = TargetBlock{get_num(t["N0"], "N0"), get_num(t["T2"], "T2"), get_num(t["TD"], "TD"), get_vec(t["TL"], "TL"),
                           get_vec(t["C"], "C")};
  }
  return m;
}

Broadcast broadcast_from_json(const json& j) {
  validate_message(j, MessageKind::kBroadcast);
  Broadcast b;
  b.target_id = j["target"]["site_id"].get<int>();
  b.target_n = j["target"]["n"].get<long>();
  b.dim = j["dim"].get<int>();
  b.site_prob = j["site_prob"].get<std::vector<double>>();
  b.options = options_from_json(j["options"]);
  b.standardization.center = get_vec(j["standardization"]["center"], "center");
  b.standardization.scale = get_vec(j["standardization"]["scale"], "scale");
  b.propensity = get_vec(j["propensity"], "propensity");
  b.outcome = get_mat(j["outcome"], "outcome");
  b.geometry = get_mat(j["geometry"], "geometry");
  b.outcome_cov = get_mat(j["outcome_cov"], "outcome_cov");
  const long T = b.outcome.rows();
  b.tilted = j["tilted"].is_null() ? MatrixXd(T, 0) : get_mat(j["tilted"], "tilted");
  b.score_cov = j["score_cov"].is_null() ? MatrixXd(T, 0) : get_mat(j["score_cov"], "score_cov");
  for (const auto& s : j["sources"]) {
    BroadcastSource src;
    src.site_id = s["site_id"].get<int>();
    src.n = s["n"].get<long>();
    src.xi = s["xi"].get<std::vector<std::string>>();
    src.beta = get_vec(s["beta"], "beta");
    src.tilt_center = get_vec(s["tilt"]["center"], "center");
    src.tilt_scale = get_vec(s["tilt"]["scale"], "scale");
    src.tilt_gamma = get_vec(s["tilt"]["gamma"], "gamma");
    src.tilt_log_normalizer = get_num(s["tilt"]["log_normalizer"], "log_normalizer");
    if (!s["normalizer"].is_null()) src.normalizer = get_mat(s["normalizer"], "normalizer");
    src.normalizer_floor = get_num(s["normalizer_floor"], "normalizer_floor");
    b.sources.push_back(std::move(src));
  }
  for (const auto& d : j["diagnostics"]) b.diagnostics.push_back(diag_from(d));
  return b;
}

Broadcast make_broadcast(const TargetFits& fits, int target_id, const EcoOptions& opt) {
  const auto& nu = fits.nuisances;
  Broadcast b;
  b.target_id = target_id;
  b.target_n = fits.site_n.at(0);
  b.dim = nu.dim;
  b.site_prob = nu.site_prob;
  b.options = opt;
  b.options.clamp = nu.clamp;
  b.options.matrix_form = nu.matrix_form;
  auto outcome = as_sieve(nu.outcome, "the outcome");
  b.standardization = outcome->standardization();
  b.propensity = nu.propensity.coef;
  b.outcome = outcome->coefficients();
  b.geometry = as_sieve(nu.geometry, "the geometry")->coefficients();
  b.outcome_cov = as_sieve(nu.outcome_cov, "the outcome covariance")->coefficients();
  const long T = b.outcome.rows();
  b.tilted = nu.tilted_basis ? as_sieve(nu.tilted_basis, "the tilted basis")->coefficients() : MatrixXd(T, 0);
  b.score_cov = nu.score_cov ? as_sieve(nu.score_cov, "the score covariance")->coefficients() : MatrixXd(T, 0);
  if (outcome->spec().degree != opt.sieve_degree || outcome->spec().pairwise != opt.sieve_pairwise ||
      outcome->ridge() != opt.ridge)
    throw SchemaError("target sieve settings differ from the options being broadcast");
  if ((nu.propensity.standardization.center - b.standardization.center).norm() != 0.0)
    throw SchemaError("propensity and sieve standardizations differ");
  for (int s = 0; s < nu.sources(); ++s) {
    const auto& src = nu.weights.source(s);
    BroadcastSource bs;
    bs.site_id = src.site_id;
    bs.n = fits.site_n.at(s + 1);
    bs.xi = src.basis.to_strings();
    bs.beta = src.beta;
    const auto& t = nu.tilts[s];
    bs.tilt_center = t.center();
    bs.tilt_scale = t.scale();
    bs.tilt_gamma = t.gamma();
    bs.tilt_log_normalizer = t.log_normalizer();
    const auto& w = nu.normalizers[s];
    if (!w.is_identity()) {
      auto fit = as_sieve(w.fit(), "a normalizer");
      if (fit->link() != numerics::Link::kLog) throw SchemaError("broadcast normalizers must use the log link");
      bs.normalizer = fit->coefficients();
    }
    bs.normalizer_floor = w.floor();
    b.sources.push_back(std::move(bs));
  }
  b.diagnostics = fits.sources;
  return b;
}

gradient::Nuisances to_nuisances(const Broadcast& b) {
  gradient::Nuisances nu;
  const auto spec = b.options.sieve(b.dim);
  auto make = [&](const MatrixXd& coef) {
    return std::make_shared<numerics::SieveModel>(spec, b.standardization, coef, b.options.ridge);
  };
  nu.dim = b.dim;
  nu.site_prob = b.site_prob;
  nu.site_ids = {b.target_id};
  nu.clamp = b.options.clamp;
  nu.matrix_form = b.options.matrix_form;
  nu.propensity.standardization = b.standardization;
  nu.propensity.coef = b.propensity;
  nu.outcome = make(b.outcome);
  nu.geometry = make(b.geometry);
  nu.outcome_cov = make(b.outcome_cov);
  if (b.tilted.cols()) {
    nu.tilted_basis = make(b.tilted);
    nu.score_cov = make(b.score_cov);
  }
  for (const auto& s : b.sources) {
    nu.site_ids.push_back(s.site_id);
    expr::BasisVector basis = s.xi.empty() ? expr::BasisVector() : expr::BasisVector::parse(s.xi, b.dim);
    nu.weights.add(s.site_id, std::move(basis), s.beta);
    nu.tilts.emplace_back(b.dim, s.tilt_center, s.tilt_scale, s.tilt_gamma, s.tilt_log_normalizer);
    auto log_model = [&](const MatrixXd& coef) {
      return std::make_shared<numerics::SieveModel>(spec, b.standardization, coef, b.options.ridge, numerics::Link::kLog);
    };
    nu.normalizers.push_back(s.normalizer ? shift::NormalizerModel(log_model(*s.normalizer), s.normalizer_floor)
                                          : shift::NormalizerModel::identity());
  }
  return nu;
}

// ---- transports -------------------------------------------------------------------

void MemoryTransport::send(MessageKind kind, int site_id, const std::string& bytes) {
  auto key = std::make_pair(static_cast<int>(kind), site_id);
  if (box_.count(key))
    throw SchemaError(std::string("duplicate ") + kind_name(kind) + " message from site " + std::to_string(site_id));
  box_[key] = bytes;
  record(kind, site_id, bytes.size());
}

std::optional<std::string> MemoryTransport::receive(MessageKind kind, int site_id, double) {
  auto it = box_.find({static_cast<int>(kind), site_id});
  if (it == box_.end()) return std::nullopt;
  return it->second;
}

namespace {

void write_atomic(const fs::path& path, const std::string& bytes) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + tmp.string());
    f << bytes;
    if (!f) throw IoError("cannot write " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " into place: " + ec.message());
}

std::string read_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

FileTransport::FileTransport(fs::path root) : root_(std::move(root)) {
  std::error_code ec;
  for (auto k : {MessageKind::kRound1, MessageKind::kBroadcast, MessageKind::kRound2}) {
    fs::create_directories(root_ / kind_name(k), ec);
    if (ec) throw IoError("cannot create " + (root_ / kind_name(k)).string() + ": " + ec.message());
  }
  const fs::path manifest = root_ / "manifest.json";
  if (fs::exists(manifest)) {
    json m = decode(read_file(manifest));
    if (!m.is_object() || !m.contains("schema") || m["schema"] != kSchemaVersion)
      throw SchemaVersionMismatch("shared directory " + root_.string() + " uses a different schema");
  } else {
    json m = {{"schema", kSchemaVersion}, {"rounds", {"round1", "broadcast", "round2"}}};
    write_atomic(manifest, encode(m));
  }
}

fs::path FileTransport::path(MessageKind kind, int site_id) const {
  return root_ / kind_name(kind) / (std::string(kind_name(kind)) + "-" + std::to_string(site_id) + ".json");
}

void FileTransport::send(MessageKind kind, int site_id, const std::string& bytes) {
  auto p = path(kind, site_id);
  if (fs::exists(p))
    throw SchemaError(std::string("duplicate ") + kind_name(kind) + " message from site " + std::to_string(site_id) +
                      " in " + root_.string());
  write_atomic(p, bytes);
  record(kind, site_id, bytes.size());
}

std::optional<std::string> FileTransport::receive(MessageKind kind, int site_id, double timeout_seconds) {
  auto p = path(kind, site_id);
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout_seconds);
  while (true) {
    if (fs::exists(p)) return read_file(p);
    if (std::chrono::steady_clock::now() >= deadline) return std::nullopt;
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
}

// ---- nodes --------------------------------------------------------------------------

std::string SourceNode::round1() const { return encode(to_json(source_round1(data_, basis_))); }

std::optional<std::string> SourceNode::round2(const std::string& bytes) const {
  Broadcast b = broadcast_from_json(decode(bytes));
  if (b.dim != data_.dim()) throw DimensionMismatch("broadcast covariate dimension does not match this site");
  int position = -1;
  for (std::size_t s = 0; s < b.sources.size(); ++s)
    if (b.sources[s].site_id == data_.site_id) position = static_cast<int>(s) + 1;
  if (position < 0) return std::nullopt;
  gradient::GradientContext ctx(to_nuisances(b));
  return encode(to_json(summarize_site(ctx, data_, position, b.options)));
}

TargetNode::TargetNode(SiteDataset data, EcoOptions opt) : data_(std::move(data)), opt_(std::move(opt)) {}

std::string TargetNode::broadcast(const std::vector<std::pair<int, std::optional<std::string>>>& round1) {
  std::vector<SourceInput> inputs;
  std::vector<SourceDiagnostics> missing;
  for (const auto& [id, msg] : round1) {
    SourceDiagnostics d;
    d.site_id = id;
    if (!msg) {
      d.status = "excluded: no round-1 message before timeout";
      warnings_.push_back("source " + std::to_string(id) + " sent no round-1 message; excluded");
      missing.push_back(d);
      continue;
    }
    try {
      Round1Summary m = round1_from_json(decode(*msg));
      if (m.site_id != id) throw SchemaError("round-1 message names site " + std::to_string(m.site_id));
      if (m.dim != data_.dim()) throw DimensionMismatch("round-1 covariate dimension differs from the target");
      SourceInput in;
      in.site_id = id;
      in.n = m.n;
      in.phi_bar = m.phi_bar;
      if (!m.xi.empty()) in.basis = expr::BasisVector::parse(m.xi, m.dim);
      in.xi_bar = m.xi_bar;
      inputs.push_back(std::move(in));
    } catch (const Error& e) {
      d.status = std::string("excluded: invalid round-1 message: ") + e.what();
      warnings_.push_back("source " + std::to_string(id) + ": " + e.what());
      missing.push_back(d);
    }
  }
  numerics::SieveFitter fitter(opt_.sieve(data_.dim()), numerics::Standardization::fit(data_.x), data_.x, data_.a,
                               opt_.ridge);
  TargetFits fits = fit_target(data_, inputs, opt_, fitter);
  Broadcast b = make_broadcast(fits, data_.site_id, opt_);
  for (const auto& d : fits.sources)
    if (!d.used) warnings_.push_back("source " + std::to_string(d.site_id) + " " + d.status);
  b.diagnostics.insert(b.diagnostics.end(), missing.begin(), missing.end());
  std::sort(b.diagnostics.begin(), b.diagnostics.end(),
            [](const SourceDiagnostics& x, const SourceDiagnostics& y) { return x.site_id < y.site_id; });
  std::string bytes = encode(to_json(b));
  broadcast_ = broadcast_from_json(decode(bytes));
  ctx_ = std::make_shared<gradient::GradientContext>(to_nuisances(*broadcast_));
  return bytes;
}

std::string TargetNode::round2() const {
  if (!ctx_) throw SchemaError("target round 2 requested before the broadcast");
  return encode(to_json(summarize_site(*ctx_, data_, 0, opt_)));
}

EstimateReport TargetNode::fuse(const std::vector<std::pair<int, std::optional<std::string>>>& round2) const {
  if (!broadcast_) throw SchemaError("fusion requested before the broadcast");
  std::map<int, Round2Summary> got;
  for (const auto& [id, msg] : round2) {
    if (!msg) continue;
    Round2Summary s = round2_from_json(decode(*msg));
    if (s.site_id != id) throw SchemaError("round-2 message names site " + std::to_string(s.site_id));
    got[id] = std::move(s);
  }
  if (!got.count(data_.site_id)) throw TimeoutError("target round-2 summary missing");
  std::vector<Round2Summary> ordered{got[data_.site_id]};
  auto warnings = warnings_;
  auto diagnostics = broadcast_->diagnostics;
  for (const auto& s : broadcast_->sources) {
    auto it = got.find(s.site_id);
    auto d = std::find_if(diagnostics.begin(), diagnostics.end(), [&](auto& x) { return x.site_id == s.site_id; });
    if (it == got.end()) {
      warnings.push_back("source " + std::to_string(s.site_id) + " sent no round-2 summary; excluded from fusion");
      if (d != diagnostics.end()) {
        d->used = false;
        d->status = "excluded: no round-2 message before timeout";
      }
      continue;
    }
    if (d != diagnostics.end()) d->clamped = it->second.clamped;
    ordered.push_back(it->second);
  }
  EstimateReport rep = fuse_summaries(ordered, opt_);
  rep.sources = diagnostics;
  rep.warnings = warnings;
  return rep;
}

EstimateReport orchestrate(Transport& transport, TargetNode& target, const std::vector<SourceNode>& sources,
                           double timeout_seconds) {
  for (const auto& s : sources)
    if (!s.silent) transport.send(MessageKind::kRound1, s.site_id(), s.round1());
  std::vector<std::pair<int, std::optional<std::string>>> r1;
  for (const auto& s : sources) r1.emplace_back(s.site_id(), transport.receive(MessageKind::kRound1, s.site_id(), timeout_seconds));
  transport.send(MessageKind::kBroadcast, target.site_id(), target.broadcast(r1));
  for (const auto& s : sources) {
    if (s.silent) continue;
    auto b = transport.receive(MessageKind::kBroadcast, target.site_id(), timeout_seconds);
    if (!b) continue;
    if (auto m = s.round2(*b)) transport.send(MessageKind::kRound2, s.site_id(), *m);
  }
  transport.send(MessageKind::kRound2, target.site_id(), target.round2());
  std::vector<std::pair<int, std::optional<std::string>>> r2;
  r2.emplace_back(target.site_id(), transport.receive(MessageKind::kRound2, target.site_id(), timeout_seconds));
  for (const auto& s : sources) r2.emplace_back(s.site_id(), transport.receive(MessageKind::kRound2, s.site_id(), timeout_seconds));
  return target.fuse(r2);
}

EstimateReport run_target_role(FileTransport& transport, TargetNode& target, const std::vector<int>& expected_sources,
                               double timeout_seconds) {
  std::vector<std::pair<int, std::optional<std::string>>> r1;
  for (int id : expected_sources) r1.emplace_back(id, transport.receive(MessageKind::kRound1, id, timeout_seconds));
  std::string b = target.broadcast(r1);
  transport.send(MessageKind::kBroadcast, target.site_id(), b);
  transport.send(MessageKind::kRound2, target.site_id(), target.round2());
  Broadcast parsed = broadcast_from_json(decode(b));
  std::vector<std::pair<int, std::optional<std::string>>> r2;
  r2.emplace_back(target.site_id(), transport.receive(MessageKind::kRound2, target.site_id(), 0.0));
  for (const auto& s : parsed.sources)
    r2.emplace_back(s.site_id, transport.receive(MessageKind::kRound2, s.site_id, timeout_seconds));
  EstimateReport rep = target.fuse(r2);
  write_atomic(transport.root() / "report.json", dump_report(rep));
  return rep;
}

void run_source_role(FileTransport& transport, const SourceNode& source, int target_id, double timeout_seconds) {
  transport.send(MessageKind::kRound1, source.site_id(), source.round1());
  auto b = transport.receive(MessageKind::kBroadcast, target_id, timeout_seconds);
  if (!b) throw TimeoutError("no broadcast from site " + std::to_string(target_id) + " within " +
                             std::to_string(timeout_seconds) + " s");
  if (auto m = source.round2(*b)) transport.send(MessageKind::kRound2, source.site_id(), *m);
}

}  // namespace ecoate::federation
