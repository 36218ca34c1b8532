#include "ecoate/simlab.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <thread>

#include "ecoate/error.hpp"
#include "ecoate/estimators.hpp"

namespace ecoate::simlab {

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t stream_seed(std::uint64_t base, std::uint64_t replicate, std::uint64_t site) {
  std::uint64_t s = base;
  s = splitmix64(s) ^ (replicate * 0xD1B54A32D192ED03ULL + 1);
  s = splitmix64(s) ^ (site * 0xABC98388FB8FAC03ULL + 7);
  return splitmix64(s);
}

double Rng::uniform() { return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53; }

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u, v, s;
  do {
    u = 2.0 * uniform() - 1.0;
    v = 2.0 * uniform() - 1.0;
    s = u * u + v * v;
  } while (s >= 1.0 || s == 0.0);
  const double f = std::sqrt(-2.0 * std::log(s) / s);
  spare_ = v * f;
  has_spare_ = true;
  return u * f;
}

double Rng::gamma(double shape) {
  if (!(shape > 0.0)) throw InvalidShape("gamma shape must be positive");
  if (shape < 1.0) return gamma(shape + 1.0) * std::pow(uniform(), 1.0 / shape);
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x, v;
    do {
      x = normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = uniform();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

double Rng::beta(double a, double b) {
  const double g1 = gamma(a);
  const double g2 = gamma(b);
  return g1 / (g1 + g2);
}

const std::vector<std::string>& known_estimators() {
  static const std::vector<std::string> names{"target-only", "naive", "oracle",  "eco-1",   "eco-2",
                                              "eco-3",       "eco-all", "eco-all-overparam", "meta-ivw"};
  return names;
}

void Scenario::validate() const {
  if (n < 50) throw ConfigError("n must be at least 50 per site");
  if (sources < 1 || sources > 3) throw ConfigError("sources must be between 1 and 3");
  if (epsilons.empty()) throw ConfigError("epsilon grid is empty");
  if (estimators.empty()) throw ConfigError("estimator list is empty");
  for (const auto& e : estimators) {
    const auto& known = known_estimators();
    if (std::find(known.begin(), known.end(), e) == known.end()) throw ConfigError("unknown estimator '" + e + "'");
    if (e.rfind("eco-", 0) == 0 && e.size() == 5 && e[4] - '0' > sources)
      throw ConfigError("estimator '" + e + "' needs more sources");
  }
}

double gamma_shape(double epsilon, int site, double x, int a) {
  double shape = (2.0 - (site == 1 ? epsilon / 2.0 : 0.0)) * (x + x * a);
  if (site == 2) shape -= epsilon * a;
  if (site == 3) shape -= epsilon * x * a;
  return shape;
}

SiteDataset sample_site(double epsilon, int site, int n, Rng& rng) {
  RowMatrix x(n, 1);
  Eigen::VectorXi a(n);
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) {
    x(i, 0) = 1.0 + rng.beta(0.5 * site + 4.0, 5.0);
    a[i] = rng.bernoulli(0.5);
    const double shape = gamma_shape(epsilon, site, x(i, 0), a[i]);
    if (!(shape > 0.0)) {
      std::ostringstream msg;
      msg << "gamma shape " << shape << " at site " << site << " for epsilon " << epsilon;
      throw InvalidShape(msg.str());
    }
    y[i] = rng.gamma(shape) / (2.0 * x(i, 0));
  }
  return SiteDataset(site, std::move(x), std::move(a), std::move(y));
}

std::vector<SiteDataset> sample_scenario(const Scenario& scn, double epsilon, int replicate) {
  std::vector<SiteDataset> out;
  for (int s = 0; s <= scn.sources; ++s) {
    Rng rng(stream_seed(scn.seed, static_cast<std::uint64_t>(replicate), static_cast<std::uint64_t>(s)));
    out.push_back(sample_site(epsilon, s, scn.n, rng));
  }
  return out;
}

expr::BasisVector true_basis(int source) {
  switch (source) {
    case 1: return expr::BasisVector::parse({"x1*log(y)", "x1*a*log(y)"}, 1);
    case 2: return expr::BasisVector::parse({"a*log(y)"}, 1);
    case 3: return expr::BasisVector::parse({"x1*a*log(y)"}, 1);
    default: throw ConfigError("no tilt basis for source " + std::to_string(source));
  }
}

expr::BasisVector overparam_basis(int source) {
  switch (source) {
    case 1: return expr::BasisVector::parse({"x1*log(y)", "x1*a*log(y)", "log(y)", "a*log(y)"}, 1);
    case 2: return expr::BasisVector::parse({"a*log(y)", "x1*log(y)", "x1*a*log(y)"}, 1);
    case 3: return expr::BasisVector::parse({"x1*a*log(y)", "log(y)", "x1*log(y)"}, 1);
    default: throw ConfigError("no tilt basis for source " + std::to_string(source));
  }
}

TrueValues true_values(double epsilon, int sources) {
  TrueValues t;
  for (int s = 1; s <= sources; ++s) {
    if (s == 1) t.beta.push_back(Eigen::Vector2d(-epsilon / 2.0, -epsilon / 2.0));
    else t.beta.push_back(Eigen::VectorXd::Constant(1, -epsilon));
  }
  return t;
}

EstimateReport run_estimator(const std::string& name, const std::vector<SiteDataset>& sites, double /*epsilon*/,
                             const federation::EcoOptions& base) {
  if (sites.empty()) throw InsufficientRows("no target site");
  federation::EcoOptions opt = base;
  opt.name = name;
  const SiteDataset& target = sites[0];
  std::vector<SiteDataset> sources(sites.begin() + 1, sites.end());
  auto bases_for = [&](const std::vector<SiteDataset>& list, bool over) {
    std::vector<expr::BasisVector> out;
    for (const auto& s : list) out.push_back(over ? overparam_basis(s.site_id) : true_basis(s.site_id));
    return out;
  };
  if (name == "target-only") {
    auto r = estimators::aipw_target_only(target, opt);
    r.estimator = name;
    return r;
  }
  if (name == "naive") return estimators::naive_fusion(target, sources, opt);
  if (name == "oracle") return estimators::oracle_pooled(target, sources, bases_for(sources, false), opt);
  if (name == "eco-all") return estimators::eco_ate(target, sources, bases_for(sources, false), opt);
  if (name == "eco-all-overparam") return estimators::eco_ate(target, sources, bases_for(sources, true), opt);
  if (name.size() == 5 && name.rfind("eco-", 0) == 0) {
    const int k = name[4] - '0';
    if (k < 1 || k >= static_cast<int>(sites.size())) throw ConfigError("estimator '" + name + "' has no source");
    std::vector<SiteDataset> one{sites[static_cast<std::size_t>(k)]};
    return estimators::eco_ate(target, one, bases_for(one, false), opt);
  }
  if (name == "meta-ivw") {
    std::vector<estimators::SiteEstimate> per;
    for (const auto& s : sites) {
      auto r = estimators::aipw_target_only(s, opt);
      per.push_back({r.estimate, r.se});
    }
    auto r = estimators::meta_ivw(per);
    long total = 0;
    for (const auto& s : sites) total += s.size();
    r.n_total = total;
    return r;
  }
  throw ConfigError("unknown estimator '" + name + "'");
}

namespace {

std::string format_beta(const EstimateReport& r) {
  std::string out;
  for (const auto& s : r.sources) {
    if (!s.used) continue;
    if (!out.empty()) out += ';';
    out += std::to_string(s.site_id) + ':';
    for (Eigen::Index i = 0; i < s.beta.size(); ++i) {
      if (i) out += ',';
      out += expr::format_number(s.beta[i]);
    }
  }
  return out;
}

}  // namespace

ResultRow make_row(const EstimateReport& r, const std::string& estimator, double epsilon, std::uint64_t seed,
                   int replicate, double truth) {
  ResultRow row;
  row.estimator = estimator;
  row.epsilon = epsilon;
  row.seed = seed;
  row.replicate = replicate;
  row.estimate = r.estimate;
  row.se = r.se;
  row.ci_lo = r.ci_lo;
  row.ci_hi = r.ci_hi;
  row.covered = r.covers(truth) ? 1 : 0;
  row.sources_used = r.sources_used;
  row.beta = format_beta(r);
  for (const auto& s : r.sources)
    if (s.used && std::isfinite(s.residual)) row.residual = std::max(row.residual, s.residual);
  if (!r.warnings.empty()) {
    for (std::size_t i = 0; i < r.warnings.size(); ++i) row.message += (i ? "; " : "") + r.warnings[i];
  }
  return row;
}

std::vector<ResultRow> run_monte_carlo(const Scenario& scn, int replications, int workers) {
  scn.validate();
  if (replications < 1) throw ConfigError("replications must be at least 1");
  const int ne = static_cast<int>(scn.epsilons.size());
  const int tasks = ne * replications;
  std::vector<std::vector<ResultRow>> slots(static_cast<std::size_t>(tasks));
  std::atomic<int> next{0};
  const double truth = 1.0;

  auto work = [&]() {
    for (;;) {
      const int t = next.fetch_add(1);
      if (t >= tasks) return;
      const double eps = scn.epsilons[static_cast<std::size_t>(t / replications)];
      const int rep = t % replications;
      auto& out = slots[static_cast<std::size_t>(t)];
      auto failure = [&](const std::string& est, const std::string& what) {
        ResultRow row;
        row.estimator = est;
        row.epsilon = eps;
        row.seed = scn.seed;
        row.replicate = rep;
        row.estimate = row.se = row.ci_lo = row.ci_hi = NAN;
        row.failed = 1;
        row.message = what;
        out.push_back(std::move(row));
      };
      std::vector<SiteDataset> sites;
      try {
        sites = sample_scenario(scn, eps, rep);
      } catch (const std::exception& e) {
        for (const auto& est : scn.estimators) failure(est, e.what());
        continue;
      }
      for (const auto& est : scn.estimators) {
        try {
          out.push_back(make_row(run_estimator(est, sites, eps, scn.options), est, eps, scn.seed, rep, truth));
        } catch (const std::exception& e) {
          failure(est, e.what());
        }
      }
    }
  };

  const int n_threads = std::max(1, std::min(workers, tasks));
  if (n_threads == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < n_threads; ++i) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }
  std::vector<ResultRow> rows;
  for (auto& s : slots)
    for (auto& r : s) rows.push_back(std::move(r));
  return rows;
}

std::vector<McMetrics> summarize_metrics(const std::vector<ResultRow>& rows, double truth) {
  std::vector<std::pair<std::string, double>> order;
  std::map<std::pair<std::string, double>, std::vector<const ResultRow*>> groups;
  for (const auto& r : rows) {
    auto key = std::make_pair(r.estimator, r.epsilon);
    auto it = groups.find(key);
    if (it == groups.end()) {
      order.push_back(key);
      groups[key];
    }
    groups[key].push_back(&r);
  }
  std::vector<McMetrics> out;
  for (const auto& key : order) {
    const auto& g = groups[key];
    std::vector<double> est, se;
    double covered = 0.0;
    McMetrics m;
    m.estimator = key.first;
    m.epsilon = key.second;
    for (const auto* r : g) {
      if (r->failed || !std::isfinite(r->estimate)) {
        ++m.failures;
        continue;
      }
      est.push_back(r->estimate);
      se.push_back(r->se);
      covered += r->covered;
    }
    const int R = static_cast<int>(est.size());
    if (R < 2) {
      std::ostringstream msg;
      msg << "estimator " << key.first << " at epsilon " << expr::format_number(key.second) << " has " << R
          << " successful rows";
      throw InsufficientRows(msg.str());
    }
    m.reps = R;
    double s1 = 0.0, s2 = 0.0;
    for (double e : est) s1 += e;
    m.mean = s1 / R;
    for (double e : est) s2 += (e - m.mean) * (e - m.mean);
    m.variance = s2 / (R - 1);
    m.mean_se = std::sqrt(m.variance / R);
    m.bias2 = (m.mean - truth) * (m.mean - truth);
    m.bias2_se = 2.0 * std::abs(m.mean - truth) * m.mean_se;
    if (R >= 3) {
      // leave-one-out variances from centred sums
      std::vector<double> loo(static_cast<std::size_t>(R));
      double lbar = 0.0;
      for (int i = 0; i < R; ++i) {
        const double d = est[static_cast<std::size_t>(i)] - m.mean;
        const double mean_shift = -d / (R - 1);
        const double ss = s2 - d * d - (R - 1) * mean_shift * mean_shift;
        loo[static_cast<std::size_t>(i)] = ss / (R - 2);
        lbar += loo[static_cast<std::size_t>(i)];
      }
      lbar /= R;
      double acc = 0.0;
      for (double v : loo) acc += (v - lbar) * (v - lbar);
      m.variance_se = std::sqrt(acc * (R - 1) / R);
    }
    m.coverage = covered / R;
    m.coverage_se = std::sqrt(m.coverage * (1.0 - m.coverage) / R);
    double sse = 0.0;
    for (double s : se) sse += s;
    m.avg_se = sse / R;
    out.push_back(m);
  }
  return out;
}

const McMetrics& find_metrics(const std::vector<McMetrics>& m, const std::string& estimator, double epsilon) {
  for (const auto& x : m)
    if (x.estimator == estimator && std::abs(x.epsilon - epsilon) < 1e-12) return x;
  throw InsufficientRows("no metrics for " + estimator + " at epsilon " + expr::format_number(epsilon));
}

// ---- results table ---------------------------------------------------------

namespace {

const char* kHeader = "estimator,epsilon,seed,replicate,estimate,se,ci_lo,ci_hi,covered,sources_used,failed,beta,residual,message";

std::string quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c == '\n' ? ' ' : c;
  }
  return out + "\"";
}

std::vector<std::string> split_quoted(const std::string& line) {
  std::vector<std::string> cells(1);
  bool in_quotes = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (in_quotes) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cells.back() += '"';
        ++i;
      } else if (c == '"') {
        in_quotes = false;
      } else {
        cells.back() += c;
      }
    } else if (c == '"') {
      in_quotes = true;
    } else if (c == ',') {
      cells.emplace_back();
    } else {
      cells.back() += c;
    }
  }
  if (in_quotes) throw SchemaError("unterminated quote in results row");
  return cells;
}

double to_double(const std::string& s, int line) {
  if (s == "nan") return NAN;
  if (s == "inf") return INFINITY;
  if (s == "-inf") return -INFINITY;
  try {
    std::size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw SchemaError("results line " + std::to_string(line) + ": bad number '" + s + "'");
  }
}

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  return expr::format_number(v);
}

}  // namespace

std::string results_csv(const std::vector<ResultRow>& rows) {
  std::string out = std::string(kHeader) + "\n";
  for (const auto& r : rows) {
    out += quote(r.estimator) + ',' + num(r.epsilon) + ',' + std::to_string(r.seed) + ',' +
           std::to_string(r.replicate) + ',' + num(r.estimate) + ',' + num(r.se) + ',' + num(r.ci_lo) + ',' +
           num(r.ci_hi) + ',' + std::to_string(r.covered) + ',' + std::to_string(r.sources_used) + ',' +
           std::to_string(r.failed) + ',' + quote(r.beta) + ',' + num(r.residual) + ',' + quote(r.message) + '\n';
  }
  return out;
}

void write_results(const std::vector<ResultRow>& rows, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << results_csv(rows);
  if (!f) throw IoError("write failed for " + path.string());
}

std::vector<ResultRow> parse_results(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw SchemaError("results table is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kHeader) throw SchemaError("unexpected results header: " + line);
  std::vector<ResultRow> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto c = split_quoted(line);
    if (c.size() != 14) throw SchemaError("results line " + std::to_string(lineno) + " has " + std::to_string(c.size()) + " fields");
    ResultRow r;
    r.estimator = c[0];
    r.epsilon = to_double(c[1], lineno);
    try {
      r.seed = std::stoull(c[2]);
      r.replicate = std::stoi(c[3]);
      r.covered = std::stoi(c[8]);
      r.sources_used = std::stoi(c[9]);
      r.failed = std::stoi(c[10]);
    } catch (const std::exception&) {
      throw SchemaError("results line " + std::to_string(lineno) + ": bad integer field");
    }
    r.estimate = to_double(c[4], lineno);
    r.se = to_double(c[5], lineno);
    r.ci_lo = to_double(c[6], lineno);
    r.ci_hi = to_double(c[7], lineno);
    r.beta = c[11];
    r.residual = to_double(c[12], lineno);
    r.message = c[13];
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<ResultRow> read_results(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_results(ss.str());
}

// ---- rendering -------------------------------------------------------------

std::string render_table(const std::vector<McMetrics>& metrics) {
  std::ostringstream out;
  out << std::left << std::setw(20) << "estimator" << std::right << std::setw(8) << "eps" << std::setw(6) << "reps"
      << std::setw(6) << "fail" << std::setw(11) << "mean" << std::setw(11) << "bias2" << std::setw(11) << "(se)"
      << std::setw(11) << "variance" << std::setw(11) << "(se)" << std::setw(9) << "cover" << std::setw(8) << "(se)"
      << std::setw(10) << "avg_se" << "\n";
  for (const auto& m : metrics) {
    out << std::left << std::setw(20) << m.estimator << std::right << std::fixed << std::setprecision(2)
        << std::setw(8) << m.epsilon << std::setw(6) << m.reps << std::setw(6) << m.failures << std::setprecision(4)
        << std::setw(11) << m.mean << std::scientific << std::setprecision(3) << std::setw(11) << m.bias2
        << std::setw(11) << m.bias2_se << std::setw(11) << m.variance << std::setw(11) << m.variance_se << std::fixed
        << std::setprecision(3) << std::setw(9) << m.coverage << std::setw(8) << m.coverage_se << std::setprecision(4)
        << std::setw(10) << m.avg_se << "\n";
  }
  return out.str();
}

std::string render_svg(const std::vector<McMetrics>& metrics) {
  static const char* palette[] = {"#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e",
                                  "#e6ab02", "#a6761d", "#666666", "#1f78b4"};
  std::vector<std::string> names;
  for (const auto& m : metrics)
    if (std::find(names.begin(), names.end(), m.estimator) == names.end()) names.push_back(m.estimator);
  double emin = INFINITY, emax = -INFINITY;
  for (const auto& m : metrics) {
    emin = std::min(emin, m.epsilon);
    emax = std::max(emax, m.epsilon);
  }
  if (!(emax > emin)) {
    emin -= 0.5;
    emax += 0.5;
  }
  const int pw = 300, ph = 240, left = 60, top = 40, gap = 40;
  const int width = left + 3 * (pw + gap) + 150, height = top + ph + 60;
  std::ostringstream s;
  s << std::setprecision(6);
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  const char* titles[] = {"Bias squared", "Variance", "Coverage"};
  for (int p = 0; p < 3; ++p) {
    auto value = [p](const McMetrics& m) { return p == 0 ? m.bias2 : p == 1 ? m.variance : m.coverage; };
    double vmin = p == 2 ? 1.0 : 0.0, vmax = p == 2 ? 0.95 : 0.0;
    for (const auto& m : metrics) {
      vmin = std::min(vmin, value(m));
      vmax = std::max(vmax, value(m));
    }
    if (p == 2) vmax = std::max(vmax, 1.0);
    if (!(vmax > vmin)) vmax = vmin + 1.0;
    const double pad = 0.05 * (vmax - vmin);
    vmin = p == 2 ? vmin - pad : std::max(0.0, vmin - pad);
    vmax += pad;
    const int x0 = left + p * (pw + gap);
    auto px = [&](double e) { return x0 + (e - emin) / (emax - emin) * pw; };
    auto py = [&](double v) { return top + ph - (v - vmin) / (vmax - vmin) * ph; };
    s << "<g>\n<text x=\"" << x0 + pw / 2 << "\" y=\"" << top - 12 << "\" text-anchor=\"middle\" font-size=\"13\">"
      << titles[p] << "</text>\n";
    s << "<rect x=\"" << x0 << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"black\"/>\n";
    for (int t = 0; t <= 4; ++t) {
      const double v = vmin + (vmax - vmin) * t / 4.0;
      s << "<text x=\"" << x0 - 4 << "\" y=\"" << py(v) + 4 << "\" text-anchor=\"end\">" << std::setprecision(3) << v
        << "</text>\n";
    }
    std::vector<double> eps;
    for (const auto& m : metrics)
      if (std::find(eps.begin(), eps.end(), m.epsilon) == eps.end()) eps.push_back(m.epsilon);
    for (double e : eps)
      s << "<text x=\"" << px(e) << "\" y=\"" << top + ph + 16 << "\" text-anchor=\"middle\">" << e << "</text>\n";
    s << "<text x=\"" << x0 + pw / 2 << "\" y=\"" << top + ph + 34 << "\" text-anchor=\"middle\">epsilon</text>\n";
    if (p == 2)
      s << "<line x1=\"" << x0 << "\" x2=\"" << x0 + pw << "\" y1=\"" << py(0.95) << "\" y2=\"" << py(0.95)
        << "\" stroke=\"grey\" stroke-dasharray=\"4 3\"/>\n";
    for (std::size_t k = 0; k < names.size(); ++k) {
      std::vector<std::pair<double, double>> pts;
      for (const auto& m : metrics)
        if (m.estimator == names[k]) pts.emplace_back(m.epsilon, value(m));
      std::sort(pts.begin(), pts.end());
      const char* color = palette[k % 9];
      s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
      s << std::setprecision(6);
      for (const auto& [e, v] : pts) s << px(e) << ',' << py(v) << ' ';
      s << "\"/>\n";
      for (const auto& [e, v] : pts)
        s << "<circle cx=\"" << px(e) << "\" cy=\"" << py(v) << "\" r=\"2.5\" fill=\"" << color << "\"/>\n";
    }
    s << "</g>\n";
  }
  const int lx = left + 3 * (pw + gap);
  for (std::size_t k = 0; k < names.size(); ++k) {
    const int y = top + 10 + static_cast<int>(k) * 16;
    s << "<line x1=\"" << lx << "\" x2=\"" << lx + 18 << "\" y1=\"" << y << "\" y2=\"" << y << "\" stroke=\""
      << palette[k % 9] << "\" stroke-width=\"2\"/>\n";
    s << "<text x=\"" << lx + 24 << "\" y=\"" << y + 4 << "\">" << names[k] << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

KsResult ks_two_sample(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw InsufficientRows("KS test needs two non-empty samples");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < a.size() && j < b.size()) {
    const double v = std::min(a[i], b[j]);
    while (i < a.size() && a[i] == v) ++i;
    while (j < b.size() && b[j] == v) ++j;
    d = std::max(d, std::abs(i / na - j / nb));
  }
  KsResult r;
  r.statistic = d;
  const double en = std::sqrt(na * nb / (na + nb));
  const double lambda = (en + 0.12 + 0.11 / en) * d;
  if (lambda < 1e-3) return r;
  double p = 0.0;
  for (int k = 1; k <= 100; ++k) {
    const double term = 2.0 * ((k % 2) ? 1.0 : -1.0) * std::exp(-2.0 * k * k * lambda * lambda);
    p += term;
    if (std::abs(term) < 1e-12) break;
  }
  r.p_value = std::clamp(p, 0.0, 1.0);
  return r;
}

}  // namespace ecoate::simlab
