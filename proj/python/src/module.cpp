#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "ecoate/cli.hpp"
#include "ecoate/error.hpp"
#include "ecoate/estimators.hpp"
#include "ecoate/simlab.hpp"

namespace py = pybind11;
using namespace ecoate;

namespace {

federation::EcoOptions options(const std::string& json_text) {
  if (json_text.empty()) return {};
  return federation::options_from_json(nlohmann::json::parse(json_text));
}

std::vector<expr::BasisVector> bases(const std::vector<std::vector<std::string>>& xi, int dim) {
  std::vector<expr::BasisVector> out;
  for (const auto& list : xi) out.push_back(list.empty() ? expr::BasisVector{} : expr::BasisVector::parse(list, dim));
  return out;
}

py::dict row_dict(const simlab::ResultRow& r) {
  py::dict d;
  d["estimator"] = r.estimator;
  d["epsilon"] = r.epsilon;
  d["seed"] = r.seed;
  d["replicate"] = r.replicate;
  d["estimate"] = r.estimate;
  d["se"] = r.se;
  d["ci_lo"] = r.ci_lo;
  d["ci_hi"] = r.ci_hi;
  d["covered"] = r.covered;
  d["sources_used"] = r.sources_used;
  d["failed"] = r.failed;
  d["beta"] = r.beta;
  d["residual"] = r.residual;
  d["message"] = r.message;
  return d;
}

py::dict metrics_dict(const simlab::McMetrics& m) {
  py::dict d;
  d["estimator"] = m.estimator;
  d["epsilon"] = m.epsilon;
  d["reps"] = m.reps;
  d["failures"] = m.failures;
  d["mean"] = m.mean;
  d["mean_se"] = m.mean_se;
  d["bias2"] = m.bias2;
  d["bias2_se"] = m.bias2_se;
  d["variance"] = m.variance;
  d["variance_se"] = m.variance_se;
  d["coverage"] = m.coverage;
  d["coverage_se"] = m.coverage_se;
  d["avg_se"] = m.avg_se;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<UsageError>(m, "UsageError", base.ptr());
  py::register_exception<SyntaxError>(m, "SyntaxError", base.ptr());
  py::register_exception<DomainError>(m, "DomainError", base.ptr());
  py::register_exception<EmptyArm>(m, "EmptyArm", base.ptr());
  py::register_exception<SchemaError>(m, "SchemaError", base.ptr());
  py::register_exception<IoError>(m, "IoError", base.ptr());
  py::register_exception<NoConvergence>(m, "NoConvergence", base.ptr());

  py::class_<SiteDataset>(m, "SiteDataset")
      .def(py::init([](int site_id, const RowMatrix& x, const Eigen::VectorXi& a, const Eigen::VectorXd& y) {
             return SiteDataset(site_id, x, a, y);
           }),
           py::arg("site_id"), py::arg("x"), py::arg("a"), py::arg("y"))
      .def_readonly("site_id", &SiteDataset::site_id)
      .def_readonly("x", &SiteDataset::x)
      .def_readonly("a", &SiteDataset::a)
      .def_readonly("y", &SiteDataset::y)
      .def("__len__", &SiteDataset::size);

  m.def("read_csv", [](const std::string& path, int site_id) { return read_csv(path, site_id); }, py::arg("path"),
        py::arg("site_id"));
  m.def("write_csv", [](const SiteDataset& d, const std::string& path) { write_csv(d, path); });

  m.def(
      "eco_ate",
      [](const SiteDataset& t, const std::vector<SiteDataset>& s, const std::vector<std::vector<std::string>>& xi,
         const std::string& opt) { return dump_report(estimators::eco_ate(t, s, bases(xi, t.dim()), options(opt))); },
      py::arg("target"), py::arg("sources"), py::arg("xi"), py::arg("options_json") = "");
  m.def(
      "oracle_pooled",
      [](const SiteDataset& t, const std::vector<SiteDataset>& s, const std::vector<std::vector<std::string>>& xi,
         const std::string& opt) {
        return dump_report(estimators::oracle_pooled(t, s, bases(xi, t.dim()), options(opt)));
      },
      py::arg("target"), py::arg("sources"), py::arg("xi"), py::arg("options_json") = "");
  m.def(
      "naive_fusion",
      [](const SiteDataset& t, const std::vector<SiteDataset>& s, const std::string& opt) {
        return dump_report(estimators::naive_fusion(t, s, options(opt)));
      },
      py::arg("target"), py::arg("sources"), py::arg("options_json") = "");
  m.def(
      "aipw_target_only",
      [](const SiteDataset& t, const std::string& opt) { return dump_report(estimators::aipw_target_only(t, options(opt))); },
      py::arg("target"), py::arg("options_json") = "");

  m.def(
      "sample_scenario",
      [](double eps, int n, std::uint64_t seed, int replicate, int sources) {
        simlab::Scenario scn;
        scn.n = n;
        scn.seed = seed;
        scn.sources = sources;
        return simlab::sample_scenario(scn, eps, replicate);
      },
      py::arg("epsilon"), py::arg("n") = 500, py::arg("seed") = 1, py::arg("replicate") = 0, py::arg("sources") = 3);
  m.def("true_basis", [](int site) { return simlab::true_basis(site).to_strings(); });

  m.def(
      "run_monte_carlo",
      [](const std::vector<double>& eps, int n, int reps, std::uint64_t seed, const std::vector<std::string>& est,
         int workers, const std::string& opt) {
        simlab::Scenario scn;
        scn.epsilons = eps;
        scn.n = n;
        scn.seed = seed;
        if (!est.empty()) scn.estimators = est;
        scn.options = options(opt);
        scn.validate();
        std::vector<simlab::ResultRow> rows;
        {
          py::gil_scoped_release release;
          rows = simlab::run_monte_carlo(scn, reps, workers);
        }
        py::list out;
        for (const auto& r : rows) out.append(row_dict(r));
        return out;
      },
      py::arg("epsilons"), py::arg("n"), py::arg("reps"), py::arg("seed") = 1,
      py::arg("estimators") = std::vector<std::string>{}, py::arg("workers") = 1, py::arg("options_json") = "");

  m.def(
      "summarize_results",
      [](const std::string& path, double truth) {
        py::list out;
        for (const auto& mm : simlab::summarize_metrics(simlab::read_results(path), truth)) out.append(metrics_dict(mm));
        return out;
      },
      py::arg("path"), py::arg("truth") = 1.0);

  m.def(
      "cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, log;
        int code = cli::run(args, out, log);
        return py::make_tuple(code, out.str(), log.str());
      },
      py::arg("args"));
  m.attr("build_id") = cli::build_id();
}
