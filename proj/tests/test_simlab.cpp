#include <cmath>
#include <random>

#include "doctest.h"
#include "ecoate/error.hpp"
#include "ecoate/simlab.hpp"

using namespace ecoate;
using namespace ecoate::simlab;

namespace {

struct Moments {
  double mean = 0.0, var = 0.0;
};

Moments moments(const std::vector<double>& v) {
  Moments m;
  for (double x : v) m.mean += x;
  m.mean /= v.size();
  for (double x : v) m.var += (x - m.mean) * (x - m.mean);
  m.var /= v.size() - 1;
  return m;
}

ResultRow row(const std::string& est, double eps, double value, double half) {
  ResultRow r;
  r.estimator = est;
  r.epsilon = eps;
  r.estimate = value;
  r.se = half / 1.96;
  r.ci_lo = value - half;
  r.ci_hi = value + half;
  r.covered = r.ci_lo <= 1.0 && 1.0 <= r.ci_hi;
  return r;
}

}  // namespace

TEST_CASE("stream seeds separate replicates and sites") {
  CHECK(stream_seed(1, 0, 0) != stream_seed(1, 0, 1));
  CHECK(stream_seed(1, 0, 1) != stream_seed(1, 1, 0));
  CHECK(stream_seed(1, 2, 3) == stream_seed(1, 2, 3));
  CHECK(stream_seed(2, 2, 3) != stream_seed(1, 2, 3));
}

TEST_CASE("gamma and beta samplers match their moments") {
  Rng rng(123);
  const int n = 100000;
  for (double shape : {0.5, 1.0, 2.9, 8.0}) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.gamma(shape);
    auto m = moments(v);
    CHECK(std::abs(m.mean - shape) < 4.0 * std::sqrt(shape / n));
    CHECK(std::abs(m.var - shape) < 0.05 * shape);
  }
  std::vector<double> b(n);
  for (auto& x : b) x = rng.beta(4.0, 5.0);
  auto m = moments(b);
  const double var = 20.0 / (81.0 * 10.0);
  CHECK(std::abs(m.mean - 4.0 / 9.0) < 4.0 * std::sqrt(var / n));
  CHECK(std::abs(m.var - var) < 0.03 * var);
  CHECK_THROWS_AS(rng.gamma(0.0), InvalidShape);
}

TEST_CASE("sites follow the scenario law") {
  const int n = 100000;
  for (int s = 0; s <= 3; ++s) {
    Rng rng(stream_seed(9, 0, s));
    auto d = sample_site(1.0, s, n, rng);
    CHECK(d.site_id == s);
    CHECK(d.x.minCoeff() >= 1.0);
    CHECK(d.x.maxCoeff() <= 2.0);
    const double al = 0.5 * s + 4.0, be = 5.0;
    const double mx = 1.0 + al / (al + be);
    const double vx = al * be / ((al + be) * (al + be) * (al + be + 1.0));
    CHECK(std::abs(d.x.mean() - mx) < 4.0 * std::sqrt(vx / n));
    CHECK(std::abs(d.a.cast<double>().mean() - 0.5) < 0.01);
    if (s == 0) {
      double resid = 0.0;
      for (int i = 0; i < n; ++i) resid += d.y[i] - (1.0 + d.a[i]);
      CHECK(std::abs(resid / n) < 0.01);
    } else {
      // E[Y | a, x] = shape / (2x)
      double resid = 0.0;
      for (int i = 0; i < n; ++i) resid += d.y[i] - gamma_shape(1.0, s, d.x(i, 0), d.a[i]) / (2.0 * d.x(i, 0));
      CHECK(std::abs(resid / n) < 0.01);
    }
  }
}

TEST_CASE("gamma shapes and the truth") {
  CHECK(gamma_shape(0.0, 0, 1.5, 1) == doctest::Approx(6.0));
  CHECK(gamma_shape(1.1, 1, 1.0, 1) == doctest::Approx((2.0 - 0.55) * 2.0));
  CHECK(gamma_shape(1.0, 2, 1.5, 1) == doctest::Approx(2.0 * 3.0 - 1.0));
  CHECK(gamma_shape(1.0, 3, 1.5, 1) == doctest::Approx(2.0 * 3.0 - 1.5));
  CHECK(gamma_shape(1.0, 3, 1.5, 0) == doctest::Approx(3.0));
  Rng rng(1);
  CHECK_THROWS_AS(sample_site(10.0, 1, 50, rng), InvalidShape);

  auto t = true_values(0.5);
  CHECK(t.ate == 1.0);
  REQUIRE(t.beta.size() == 3);
  CHECK(t.beta[0].size() == 2);
  CHECK(t.beta[0][0] == -0.25);
  CHECK(t.beta[1][0] == -0.5);
  CHECK(t.beta[2][0] == -0.5);
  for (const auto& b : true_values(0.0).beta) CHECK(b.cwiseAbs().maxCoeff() == 0.0);
  for (int s = 1; s <= 3; ++s) {
    auto small = true_basis(s).to_strings(), big = overparam_basis(s).to_strings();
    CHECK(static_cast<int>(t.beta[s - 1].size()) == true_basis(s).size());
    REQUIRE(big.size() > small.size());
    for (std::size_t j = 0; j < small.size(); ++j) CHECK(big[j] == small[j]);
  }
}

TEST_CASE("target law does not move with epsilon") {
  Scenario scn;
  scn.n = 10000;
  auto a = sample_scenario(scn, 0.0, 0), b = sample_scenario(scn, 1.1, 0);
  CHECK(a[0].y == b[0].y);
  int rejected = 0;
  for (int seed = 0; seed < 20; ++seed) {
    Rng r0(stream_seed(100 + seed, 0, 0)), r1(stream_seed(500 + seed, 0, 0));
    auto d0 = sample_site(0.0, 0, 10000, r0), d1 = sample_site(1.1, 0, 10000, r1);
    auto ks = ks_two_sample(std::vector<double>(d0.y.data(), d0.y.data() + d0.size()),
                            std::vector<double>(d1.y.data(), d1.y.data() + d1.size()));
    rejected += ks.p_value < 0.01;
  }
  CHECK(rejected <= 2);
  CHECK(ks_two_sample({1, 2, 3}, {4, 5, 6}).statistic == 1.0);
  CHECK(ks_two_sample({1, 2, 3}, {1, 2, 3}).statistic == 0.0);
}

TEST_CASE("scenario validation") {
  Scenario scn;
  CHECK_NOTHROW(scn.validate());
  scn.n = 40;
  CHECK_THROWS_AS(scn.validate(), ConfigError);
  scn.n = 500;
  scn.estimators = {"eco-9"};
  CHECK_THROWS_AS(scn.validate(), ConfigError);
}

TEST_CASE("monte carlo output does not depend on the worker count") {
  Scenario scn;
  scn.n = 100;
  scn.epsilons = {0.0, 1.0};
  scn.estimators = {"target-only", "naive", "eco-2", "meta-ivw"};
  auto one = run_monte_carlo(scn, 3, 1);
  auto three = run_monte_carlo(scn, 3, 3);
  CHECK(one.size() == 2 * 3 * 4);
  CHECK(results_csv(one) == results_csv(three));
  int failed = 0;
  for (const auto& r : one) failed += r.failed;
  CHECK(failed == 0);
}

TEST_CASE("metrics on synthetic rows") {
  std::vector<ResultRow> exact;
  for (int i = 0; i < 5; ++i) exact.push_back(row("x", 0.0, 1.0, 0.1));
  auto m = summarize_metrics(exact, 1.0);
  REQUIRE(m.size() == 1);
  CHECK(m[0].bias2 == 0.0);
  CHECK(m[0].variance == 0.0);
  CHECK(m[0].coverage == 1.0);

  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd(1.0, 0.1);
  std::vector<ResultRow> rows;
  const int R = 4000;
  for (int i = 0; i < R; ++i) rows.push_back(row("y", 0.5, nd(rng), 0.196));
  auto a = summarize_metrics(rows, 1.0);
  CHECK(std::abs(a[0].coverage - 0.95) < 3.0 * std::sqrt(0.95 * 0.05 / R));
  CHECK(std::abs(a[0].variance - 0.01) < 4.0 * a[0].variance_se);
  CHECK(a[0].coverage_se == doctest::Approx(std::sqrt(a[0].coverage * (1 - a[0].coverage) / R)));

  std::vector<ResultRow> rev(rows.rbegin(), rows.rend());
  auto b = summarize_metrics(rev, 1.0);
  CHECK(b[0].mean == doctest::Approx(a[0].mean).epsilon(1e-12));
  CHECK(b[0].variance == doctest::Approx(a[0].variance).epsilon(1e-10));
  CHECK(b[0].coverage == a[0].coverage);

  std::vector<ResultRow> lonely{row("z", 0.0, 1.0, 0.1)};
  CHECK_THROWS_AS(summarize_metrics(lonely, 1.0), InsufficientRows);
  CHECK_THROWS(find_metrics(a, "y", 0.7));
  CHECK(find_metrics(a, "y", 0.5).reps == R);
}

TEST_CASE("results table round-trips") {
  std::vector<ResultRow> rows{row("eco-all", 1.0, 1.02, 0.1), row("naive", 1.1, 0.7, 0.05)};
  rows[0].beta = "1:-0.5,-0.5;2:-1";
  rows[0].message = "source 3 excluded: \"no\", sorry";
  rows[1].failed = 1;
  rows[1].estimate = NAN;
  rows[1].residual = INFINITY;
  const std::string text = results_csv(rows);
  auto back = parse_results(text);
  REQUIRE(back.size() == 2);
  CHECK(results_csv(back) == text);
  CHECK(back[0].message == rows[0].message);
  CHECK(std::isnan(back[1].estimate));
  CHECK(std::isinf(back[1].residual));
  CHECK_THROWS_AS(parse_results("estimator,epsilon\nx,1\n"), SchemaError);

  auto m = summarize_metrics({row("a", 0.0, 1.0, 0.1), row("a", 0.0, 1.1, 0.1)}, 1.0);
  CHECK(render_table(m).find("a") != std::string::npos);
  const std::string svg = render_svg(m);
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("Coverage") != std::string::npos);
}
