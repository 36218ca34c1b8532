#include <cmath>
#include <random>

#include "doctest.h"
#include "ecoate/error.hpp"
#include "ecoate/numerics.hpp"

using namespace ecoate;
using namespace ecoate::numerics;

namespace {

MatrixXd random_matrix(std::mt19937_64& rng, int r, int c) {
  std::normal_distribution<double> n(0.0, 1.0);
  MatrixXd m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = n(rng);
  return m;
}

double max_abs(const MatrixXd& m) { return m.size() ? m.cwiseAbs().maxCoeff() : 0.0; }

void check_penrose(const MatrixXd& a) {
  MatrixXd p = pinv(a);
  CHECK(max_abs(a * p * a - a) < 1e-8);
  CHECK(max_abs(p * a * p - p) < 1e-8);
  MatrixXd ap = a * p, pa = p * a;
  CHECK(max_abs(ap - ap.transpose()) < 1e-8);
  CHECK(max_abs(pa - pa.transpose()) < 1e-8);
}

struct Sample {
  RowMatrix x;
  Eigen::VectorXi a;
};

Sample uniform_sample(int n, int d, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 3.0);
  Sample s{RowMatrix(n, d), Eigen::VectorXi(n)};
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) s.x(i, j) = u(rng);
    s.a[i] = i % 2;
  }
  return s;
}

}  // namespace

TEST_CASE("pinv small cases") {
  CHECK(max_abs(pinv(MatrixXd::Zero(3, 2))) == 0.0);
  CHECK(pinv(MatrixXd::Zero(3, 2)).rows() == 2);
  MatrixXd d = MatrixXd::Zero(2, 2);
  d(0, 0) = 2.0;
  MatrixXd pd = pinv(d);
  CHECK(pd(0, 0) == doctest::Approx(0.5));
  CHECK(pd(1, 1) == 0.0);
  std::mt19937_64 rng(3);
  MatrixXd a = random_matrix(rng, 3, 2);
  CHECK(max_abs(pinv(a) * a - MatrixXd::Identity(2, 2)) < 1e-8);
  MatrixXd normal_eq = (a.transpose() * a).inverse() * a.transpose();
  CHECK(max_abs(pinv(a) - normal_eq) < 1e-10);
  MatrixXd bad(1, 1);
  bad(0, 0) = std::nan("");
  CHECK_THROWS_AS(pinv(bad), NonFinite);
}

TEST_CASE("pinv satisfies the Penrose conditions on random matrices") {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 40; ++t) {
    int r = 1 + t % 6, c = 1 + (t / 6) % 5;
    check_penrose(random_matrix(rng, r, c));
    int rank = 1 + t % std::min(r, c);
    check_penrose(random_matrix(rng, r, rank) * random_matrix(rng, rank, c));
  }
}

TEST_CASE("pinv scale floor zeros tiny matrices") {
  MatrixXd m = MatrixXd::Constant(1, 1, 1e-14);
  CHECK(pinv(m)(0, 0) == doctest::Approx(1e14));
  CHECK(pinv(m, 1e-10, 1.0)(0, 0) == 0.0);
}

TEST_CASE("sieve basis layout") {
  SieveBasisSpec spec{2, 3, true, true};
  CHECK(spec.base_terms() == 1 + 6 + 1);
  CHECK(spec.term_count() == 16);
  double z[2] = {2.0, -1.0};
  std::vector<double> row(16);
  spec.expand(z, 1, row.data());
  std::vector<double> expected{0, 0, 0, 0, 0, 0, 0, 0, 1, 2, 4, 8, -1, 1, -1, -2};
  CHECK(row == expected);
  SieveBasisSpec flat{1, 2, false, false};
  std::vector<double> r2(4);
  flat.expand(z, 1, r2.data());
  CHECK(r2 == std::vector<double>{1, 2, 4, 1});
}

TEST_CASE("sieve recovers an exact polynomial") {
  auto s = uniform_sample(300, 2, 1);
  SieveBasisSpec spec{2, 2, true, false};
  // Build the standardized design independently and draw responses from known coefficients.
  Eigen::Vector2d mean = s.x.colwise().mean().transpose();
  Eigen::Vector2d sd;
  for (int j = 0; j < 2; ++j) sd[j] = std::sqrt((s.x.col(j).array() - mean[j]).square().mean());
  std::mt19937_64 rng(9);
  VectorXd truth = random_matrix(rng, 10, 1);
  MatrixXd resp(300, 1);
  for (int i = 0; i < 300; ++i) {
    double z1 = (s.x(i, 0) - mean[0]) / sd[0], z2 = (s.x(i, 1) - mean[1]) / sd[1];
    int off = s.a[i] == 1 ? 5 : 0;
    resp(i, 0) = truth[off] + truth[off + 1] * z1 + truth[off + 2] * z1 * z1 + truth[off + 3] * z2 +
                 truth[off + 4] * z2 * z2;
  }
  SieveModel m = sieve_fit(spec, s.x, s.a, resp);
  CHECK(max_abs(m.coefficients() - truth) < 1e-8);
  std::vector<double> q{s.x(7, 0), s.x(7, 1)};
  CHECK(sieve_predict(m, q, s.a[7])[0] == doctest::Approx(resp(7, 0)).epsilon(1e-10));
}

TEST_CASE("sieve constant response gives the exact intercept") {
  auto s = uniform_sample(50, 1, 2);
  SieveModel m = sieve_fit(SieveBasisSpec{1, 3, true, false}, s.x, s.a, MatrixXd::Constant(50, 1, 2.5));
  const auto& c = m.coefficients();
  CHECK(c(0, 0) == 2.5);
  CHECK(c(4, 0) == 2.5);
  for (int j : {1, 2, 3, 5, 6, 7}) CHECK(std::abs(c(j, 0)) < 1e-10);
  std::vector<double> q{10.0};
  CHECK(m.predict(q, 1)[0] == 2.5);
}

TEST_CASE("sieve with collinear design matches the pseudoinverse solution") {
  auto s = uniform_sample(120, 1, 3);
  RowMatrix x2(120, 2);
  x2.col(0) = s.x.col(0);
  x2.col(1) = s.x.col(0);
  std::mt19937_64 rng(4);
  MatrixXd resp = random_matrix(rng, 120, 2);
  SieveBasisSpec spec{2, 2, true, true};
  SieveFitter fitter(spec, Standardization::fit(x2), x2, s.a);
  MatrixXd coef = fitter.coefficients(resp);
  MatrixXd oracle = fitter.design().completeOrthogonalDecomposition().pseudoInverse() * resp;
  CHECK(max_abs(fitter.design() * coef - fitter.design() * oracle) < 1e-8);
  CHECK(max_abs(coef - oracle) < 1e-6);
}

TEST_CASE("sieve residuals are orthogonal to the design") {
  auto s = uniform_sample(200, 2, 5);
  std::mt19937_64 rng(6);
  MatrixXd resp = random_matrix(rng, 200, 3);
  SieveFitter fitter(SieveBasisSpec{2, 3, true, true}, Standardization::fit(s.x), s.x, s.a);
  MatrixXd coef = fitter.coefficients(resp);
  MatrixXd g = fitter.design().transpose() * (resp - fitter.design() * coef);
  CHECK(max_abs(g) <= 1e-8 * max_abs(coef) + 1e-8);
}

TEST_CASE("sieve predictions are invariant to row permutation") {
  auto s = uniform_sample(80, 1, 7);
  std::mt19937_64 rng(8);
  MatrixXd resp = random_matrix(rng, 80, 1);
  SieveBasisSpec spec{1, 3, true, false};
  Standardization st = Standardization::fit(s.x);
  SieveModel m1 = SieveFitter(spec, st, s.x, s.a).fit_model(resp);
  Eigen::PermutationMatrix<Eigen::Dynamic> perm(80);
  perm.setIdentity();
  std::shuffle(perm.indices().data(), perm.indices().data() + 80, rng);
  RowMatrix xp = perm * s.x;
  Eigen::VectorXi ap = perm * s.a;
  SieveModel m2 = SieveFitter(spec, st, xp, ap).fit_model(perm * resp);
  std::vector<double> q{1.3};
  CHECK(m1.predict(q, 0)[0] == doctest::Approx(m2.predict(q, 0)[0]).epsilon(1e-10));
  CHECK(m1.predict(q, 1)[0] == doctest::Approx(m2.predict(q, 1)[0]).epsilon(1e-10));
}

TEST_CASE("intercept-only sieve model") {
  SieveBasisSpec spec{1, 0, true, false};
  MatrixXd coef = MatrixXd::Constant(2, 1, 3.0);
  SieveModel m(spec, Standardization::identity(1), coef, 1e-8);
  std::vector<double> q{-40.0};
  CHECK(m.predict(q, 0)[0] == 3.0);
  CHECK(m.predict(q, 1)[0] == 3.0);
  std::vector<double> wrong{1.0, 2.0};
  CHECK_THROWS_AS(m.predict(wrong, 0), DimensionMismatch);
}

TEST_CASE("sieve rejects bad inputs") {
  auto s = uniform_sample(10, 1, 1);
  CHECK_THROWS_AS(sieve_fit(SieveBasisSpec{1, 3, true, false}, s.x, s.a, MatrixXd::Zero(9, 1)), DimensionMismatch);
  MatrixXd bad = MatrixXd::Zero(10, 1);
  bad(3, 0) = INFINITY;
  CHECK_THROWS_AS(sieve_fit(SieveBasisSpec{1, 3, true, false}, s.x, s.a, bad), NonFinite);
}

TEST_CASE("logistic regression contracts") {
  std::mt19937_64 rng(12);
  const int n = 10000;
  MatrixXd design(n, 2);
  VectorXd labels(n);
  std::normal_distribution<double> z(0, 1);
  std::bernoulli_distribution coin(0.5);
  for (int i = 0; i < n; ++i) {
    design(i, 0) = 1.0;
    design(i, 1) = z(rng);
    labels[i] = coin(rng);
  }
  VectorXd b = logistic_fit(design, labels);
  // Standard error of each coefficient is about 2/sqrt(n) under p = 1/2.
  double se = 2.0 / std::sqrt(static_cast<double>(n));
  CHECK(std::abs(b[0]) < 4 * se);
  CHECK(std::abs(b[1]) < 4 * se);
  VectorXd p = (1.0 / (1.0 + (-(design * b).array()).exp())).matrix();
  CHECK((design.transpose() * (labels - p)).lpNorm<Eigen::Infinity>() < 1e-10);

  MatrixXd ones = MatrixXd::Ones(10, 1);
  VectorXd half(10);
  half << 0, 1, 0, 1, 0, 1, 0, 1, 0, 1;
  CHECK(std::abs(logistic_fit(ones, half)[0]) < 1e-12);

  MatrixXd sep(6, 2);
  sep << 1, -3, 1, -2, 1, -1, 1, 1, 1, 2, 1, 3;
  VectorXd sl(6);
  sl << 0, 0, 0, 1, 1, 1;
  CHECK_THROWS_AS(logistic_fit(sep, sl), SeparationError);
  CHECK_THROWS_AS(logistic_fit(ones, VectorXd::Zero(10)), EmptyArm);
}

TEST_CASE("kernel regression contracts") {
  auto s = uniform_sample(200, 1, 13);
  KernelModel c = make_kernel_model(s.x, s.a, MatrixXd::Constant(200, 1, 4.2));
  std::vector<double> q{1.7};
  CHECK(kernel_regress(c, q, 1) == doctest::Approx(4.2).epsilon(1e-14));

  std::mt19937_64 rng(1);
  MatrixXd resp = random_matrix(rng, 200, 1);
  KernelModel sharp = make_kernel_model(s.x, s.a, resp, 1e-6);
  std::vector<double> at{s.x(17, 0)};
  CHECK(std::abs(kernel_regress(sharp, at, s.a[17]) - resp(17, 0)) < 1e-6);

  KernelModel m = make_kernel_model(s.x, s.a, resp);
  for (double v : {0.0, 0.4, 1.5, 2.9, 10.0}) {
    std::vector<double> qq{v};
    for (int arm = 0; arm < 2; ++arm) {
      double lo = 1e9, hi = -1e9;
      for (int i = 0; i < 200; ++i)
        if (s.a[i] == arm) lo = std::min(lo, resp(i, 0)), hi = std::max(hi, resp(i, 0));
      double p = kernel_regress(m, qq, arm);
      CHECK(p >= lo - 1e-12);
      CHECK(p <= hi + 1e-12);
    }
  }

  Eigen::VectorXi all0 = Eigen::VectorXi::Zero(200);
  KernelModel one_arm = make_kernel_model(s.x, all0, resp);
  CHECK_THROWS_AS(kernel_regress(one_arm, q, 1), EmptyStratum);
}

TEST_CASE("kernel regression is consistent for a linear signal") {
  const int n = 5000;
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  RowMatrix x(n, 1);
  Eigen::VectorXi a = Eigen::VectorXi::Zero(n);
  MatrixXd resp(n, 1);
  for (int i = 0; i < n; ++i) {
    x(i, 0) = u(rng);
    resp(i, 0) = 2.0 * x(i, 0);
  }
  KernelModel m = make_kernel_model(x, a, resp);
  for (double v : {0.3, 0.5, 0.7}) {
    std::vector<double> q{v};
    CHECK(std::abs(kernel_regress(m, q, 0) - 2.0 * v) < 0.05);
  }
}

TEST_CASE("kernel fitter in-sample values agree with model predictions") {
  auto s = uniform_sample(60, 2, 14);
  std::mt19937_64 rng(2);
  MatrixXd resp = random_matrix(rng, 60, 2);
  KernelFitter f(s.x, s.a);
  FitResult r = f.fit(resp);
  for (int i = 0; i < 60; i += 7) {
    VectorXd p = r.model->predict(std::span<const double>(s.x.data() + 2 * i, 2), s.a[i]);
    CHECK(max_abs(p.transpose() - r.fitted.row(i)) < 1e-12);
  }
}

TEST_CASE("weighted sieve fit matches the normal equations") {
  auto s = uniform_sample(80, 1, 31);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.1, 3.0);
  MatrixXd resp = random_matrix(rng, 80, 2);
  MatrixXd w(80, 2);
  for (int i = 0; i < 80; ++i) w(i, 0) = u(rng), w(i, 1) = 1.0;
  SieveBasisSpec spec{1, 2, true, false};
  auto st = Standardization::fit(s.x);
  SieveFitter f(spec, st, s.x, s.a, 0.0);
  FitResult wf = f.fit(resp, w);
  FitResult plain = f.fit(resp);
  CHECK(max_abs(wf.fitted.col(1) - plain.fitted.col(1)) < 1e-10);
  MatrixXd design = MatrixXd::Zero(80, 6);
  for (int i = 0; i < 80; ++i) {
    const double z = (s.x(i, 0) - st.center[0]) / st.scale[0];
    const int off = s.a[i] == 1 ? 3 : 0;
    design(i, off) = 1.0;
    design(i, off + 1) = z;
    design(i, off + 2) = z * z;
  }
  MatrixXd xtw = design.transpose() * w.col(0).asDiagonal();
  VectorXd coef = (xtw * design).ldlt().solve(xtw * resp.col(0));
  CHECK(max_abs(wf.fitted.col(0) - design * coef) < 1e-8);
  for (int i = 0; i < 80; i += 9) {
    VectorXd p = wf.model->predict(std::span<const double>(s.x.data() + i, 1), s.a[i]);
    CHECK(max_abs(p.transpose() - wf.fitted.row(i)) < 1e-10);
  }
  MatrixXd scaled = 3.0 * w;
  CHECK(max_abs(f.fit(resp, scaled).fitted - wf.fitted) < 1e-9);
  MatrixXd neg = w;
  neg(3, 0) = -1.0;
  CHECK_THROWS_AS(f.fit(resp, neg), DomainError);
  CHECK_THROWS_AS(f.fit(resp, MatrixXd::Ones(80, 1)), DimensionMismatch);
}

TEST_CASE("weighted kernel fit is a ratio of smoothers") {
  auto s = uniform_sample(50, 1, 32);
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0.1, 3.0);
  MatrixXd resp = random_matrix(rng, 50, 2);
  MatrixXd w(50, 2);
  for (int i = 0; i < 50; ++i) w(i, 0) = u(rng), w(i, 1) = 1.0;
  KernelFitter f(s.x, s.a);
  FitResult wf = f.fit(resp, w);
  FitResult plain = f.fit(resp);
  CHECK(max_abs(wf.fitted.col(1) - plain.fitted.col(1)) < 1e-12);
  MatrixXd num = resp.col(0).cwiseProduct(w.col(0));
  FitResult top = f.fit(num), bottom = f.fit(MatrixXd(w.col(0)));
  CHECK(max_abs(wf.fitted.col(0) - top.fitted.cwiseQuotient(bottom.fitted)) < 1e-12);
  for (int i = 0; i < 50; i += 7) {
    VectorXd p = wf.model->predict(std::span<const double>(s.x.data() + i, 1), s.a[i]);
    CHECK(max_abs(p.transpose() - wf.fitted.row(i)) < 1e-12);
  }
}

TEST_CASE("finite-difference Jacobian matches the analytic one") {
  VectorFunction f = [](const VectorXd& b) {
    VectorXd out(2);
    out << b[0] * b[0], b[0] * b[1];
    return out;
  };
  for (auto [b1, b2] : {std::pair{1.0, 2.0}, std::pair{-3.0, 0.5}, std::pair{0.0, 0.0}}) {
    VectorXd b(2);
    b << b1, b2;
    MatrixXd j = fd_jacobian(f, b);
    MatrixXd analytic(2, 2);
    analytic << 2 * b1, 0, b2, b1;
    CHECK(max_abs(j - analytic) < 1e-4);
  }
}

TEST_CASE("newton solver contracts") {
  VectorFunction f1 = [](const VectorXd& b) { return VectorXd::Constant(1, std::exp(b[0]) - 1.0); };
  auto r1 = newton_solve(f1, VectorXd::Constant(1, 1.0));
  CHECK(std::abs(r1.x[0]) < 1e-8);
  CHECK(r1.residual < 1e-8);

  VectorFunction f2 = [](const VectorXd& b) {
    VectorXd out(2);
    out << b[0] + b[1] - 3.0, b[0] * b[1] - 2.0;
    return out;
  };
  VectorXd start(2);
  start << 0.5, 0.5;
  auto r2 = newton_solve(f2, start);
  CHECK(std::abs(r2.x[0] + r2.x[1] - 3.0) < 1e-8);
  CHECK(std::abs(r2.x[0] * r2.x[1] - 2.0) < 1e-8);

  VectorFunction f3 = [](const VectorXd& b) { return VectorXd::Constant(1, b[0] * b[0] + 1.0); };
  try {
    newton_solve(f3, VectorXd::Constant(1, 1.0));
    FAIL("expected NoConvergence");
  } catch (const NoConvergence& e) {
    CHECK(e.residual() >= 1.0);
    CHECK(e.best().size() == 1);
  }
}
