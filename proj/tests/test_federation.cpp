#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "ecoate/error.hpp"
#include "ecoate/estimators.hpp"
#include "ecoate/federation.hpp"
#include "ecoate/simlab.hpp"

using namespace ecoate;
using namespace ecoate::federation;
namespace fs = std::filesystem;

namespace {

struct World {
  SiteDataset target;
  std::vector<SiteDataset> sources;
  std::vector<expr::BasisVector> bases;
};

World make_world(double eps, int n, int rep = 0, std::uint64_t seed = 11) {
  simlab::Scenario scn;
  scn.n = n;
  scn.seed = seed;
  auto sites = simlab::sample_scenario(scn, eps, rep);
  World w{sites[0], {}, {}};
  for (std::size_t s = 1; s < sites.size(); ++s) {
    w.sources.push_back(sites[s]);
    w.bases.push_back(simlab::true_basis(static_cast<int>(s)));
  }
  return w;
}

std::vector<SourceNode> nodes(const World& w) {
  std::vector<SourceNode> out;
  for (std::size_t s = 0; s < w.sources.size(); ++s) out.emplace_back(w.sources[s], w.bases[s]);
  return out;
}

fs::path scratch_dir(const std::string& tag) {
  std::random_device rd;
  fs::path p = fs::temp_directory_path() / ("ecoate-" + tag + "-" + std::to_string(rd()));
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("round-1 summary of a three-record site") {
  RowMatrix x(3, 1);
  x << 1.0, 2.0, 1.5;
  Eigen::VectorXi a(3);
  a << 0, 1, 1;
  VectorXd y(3);
  y << 1.0, std::exp(1.0), std::exp(2.0);
  SiteDataset site(4, x, a, y);
  auto basis = expr::BasisVector::parse({"log(y)"}, 1);
  Round1Summary m = source_round1(site, basis);
  CHECK(m.n == 3);
  CHECK(m.site_id == 4);
  REQUIRE(m.xi_bar.size() == 1);
  CHECK(m.xi_bar[0] == doctest::Approx(1.0).epsilon(1e-15));

  RowMatrix xp(3, 1);
  xp << 1.5, 1.0, 2.0;
  Eigen::VectorXi ap(3);
  ap << 1, 0, 1;
  VectorXd yp(3);
  yp << y[2], y[0], y[1];
  Round1Summary mp = source_round1(SiteDataset(4, xp, ap, yp), basis);
  CHECK((mp.phi_bar - m.phi_bar).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(std::abs(mp.xi_bar[0] - m.xi_bar[0]) < 1e-15);

  VectorXd bad = y;
  bad[1] = -1.0;
  CHECK_THROWS_AS(source_round1(SiteDataset(4, x, a, bad), basis), DomainError);
}

TEST_CASE("no sources reduces to the one-step target AIPW") {
  for (std::uint64_t seed : {3u, 4u, 5u}) {
    World w = make_world(0.7, 300, 0, seed);
    EcoOptions opt;
    auto fed = estimators::eco_ate(w.target, {}, {}, opt);
    auto aipw = estimators::aipw_target_only(w.target, opt);
    CHECK(std::abs(fed.estimate - aipw.estimate) < 1e-10);
    CHECK(std::abs(fed.se - aipw.se) < 1e-10);
    CHECK(fed.sources_used == 0);
  }
}

TEST_CASE("messages survive serialize, parse, serialize byte for byte") {
  World w = make_world(0.5, 200);
  EcoOptions opt;
  MemoryTransport t;
  TargetNode target(w.target, opt);
  auto srcs = nodes(w);
  orchestrate(t, target, srcs);
  for (int id : {1, 2, 3}) {
    auto r1 = t.receive(MessageKind::kRound1, id, 0.0);
    REQUIRE(r1);
    CHECK(encode(to_json(round1_from_json(decode(*r1)))) == *r1);
    auto r2 = t.receive(MessageKind::kRound2, id, 0.0);
    REQUIRE(r2);
    CHECK(encode(to_json(round2_from_json(decode(*r2)))) == *r2);
  }
  auto b = t.receive(MessageKind::kBroadcast, 0, 0.0);
  REQUIRE(b);
  CHECK(encode(to_json(broadcast_from_json(decode(*b)))) == *b);
  auto r20 = t.receive(MessageKind::kRound2, 0, 0.0);
  REQUIRE(r20);
  Round2Summary s0 = round2_from_json(decode(*r20));
  CHECK(s0.target.has_value());
  CHECK(encode(to_json(s0)) == *r20);
}

TEST_CASE("message validation only admits aggregates") {
  World w = make_world(0.5, 200);
  json r1 = to_json(source_round1(w.sources[0], w.bases[0]));
  CHECK_NOTHROW(validate_message(r1, MessageKind::kRound1));

  json extra = r1;
  extra["y"] = json::array({1.0, 2.0});
  CHECK_THROWS_AS(validate_message(extra, MessageKind::kRound1), SchemaError);

  json longer = r1;
  longer["phi_bar"].push_back(0.0);
  CHECK_THROWS_AS(validate_message(longer, MessageKind::kRound1), SchemaError);

  json wrong = r1;
  wrong["schema"] = "eco-ate/0";
  CHECK_THROWS_AS(validate_message(wrong, MessageKind::kRound1), SchemaVersionMismatch);
  CHECK_THROWS_AS(validate_message(r1, MessageKind::kRound2), SchemaError);
  CHECK_THROWS_AS(decode("{not json"), SchemaError);

  MemoryTransport t;
  TargetNode target(w.target, {});
  orchestrate(t, target, nodes(w));
  json b = decode(*t.receive(MessageKind::kBroadcast, 0, 0.0));
  CHECK_NOTHROW(validate_message(b, MessageKind::kBroadcast));
  json bad = b;
  bad["geometry"]["rows"] = w.target.size();
  CHECK_THROWS_AS(validate_message(bad, MessageKind::kBroadcast), SchemaError);
  json records = b;
  records["sources"][0]["records"] = json::array();
  CHECK_THROWS_AS(validate_message(records, MessageKind::kBroadcast), SchemaError);

  json r2 = decode(*t.receive(MessageKind::kRound2, 1, 0.0));
  json grown = r2;
  grown["I"]["rows"] = 5;
  CHECK_THROWS_AS(validate_message(grown, MessageKind::kRound2), SchemaError);

  // No payload length depends on the number of records at the site.
  World big = make_world(0.5, 400);
  MemoryTransport t2;
  TargetNode target2(big.target, {});
  orchestrate(t2, target2, nodes(big));
  for (auto kind : {MessageKind::kRound1, MessageKind::kRound2}) {
    json small = decode(*t.receive(kind, 2, 0.0)), large = decode(*t2.receive(kind, 2, 0.0));
    for (auto it = small.begin(); it != small.end(); ++it)
      if (it->is_array()) CHECK(it->size() == large[it.key()].size());
  }
}

TEST_CASE("round-2 information matrices are symmetric positive semidefinite") {
  World w = make_world(1.0, 300);
  MemoryTransport t;
  TargetNode target(w.target, {});
  orchestrate(t, target, nodes(w));
  for (int id : {0, 1, 2, 3}) {
    auto msg = t.receive(MessageKind::kRound2, id, 0.0);
    if (!msg) continue;
    Round2Summary s = round2_from_json(decode(*msg));
    CHECK((s.I - s.I.transpose()).cwiseAbs().maxCoeff() == 0.0);
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(s.I);
    CHECK(es.eigenvalues().minCoeff() >= -1e-8);
  }
}

TEST_CASE("one target and three sources exchange eight messages") {
  World w = make_world(0.5, 200);
  MemoryTransport t;
  TargetNode target(w.target, {});
  auto rep = orchestrate(t, target, nodes(w));
  const auto& log = t.transcript();
  CHECK(log.size() == 8);
  int r1 = 0, b = 0, r2 = 0;
  for (const auto& e : log) {
    r1 += e.kind == MessageKind::kRound1;
    b += e.kind == MessageKind::kBroadcast;
    r2 += e.kind == MessageKind::kRound2;
  }
  CHECK(r1 == 3);
  CHECK(b == 1);
  CHECK(r2 == 4);
  CHECK(rep.sources_used == 3);
  CHECK(std::abs(rep.ci_hi - rep.estimate - 1.96 * rep.se) < 1e-12);
}

TEST_CASE("file and in-memory transports give byte-identical reports") {
  World w = make_world(1.1, 250);
  MemoryTransport mem;
  TargetNode t1(w.target, {});
  auto a = orchestrate(mem, t1, nodes(w));

  fs::path dir = scratch_dir("transport");
  {
    FileTransport files(dir);
    TargetNode t2(w.target, {});
    auto b = orchestrate(files, t2, nodes(w));
    CHECK(dump_report(a) == dump_report(b));
    CHECK(fs::exists(files.path(MessageKind::kRound1, 2)));
    CHECK(fs::exists(files.path(MessageKind::kBroadcast, 0)));
    CHECK(fs::exists(dir / "manifest.json"));
    for (int id : {0, 1, 2, 3}) {
      auto m1 = mem.receive(MessageKind::kRound2, id, 0.0);
      auto m2 = files.receive(MessageKind::kRound2, id, 0.0);
      REQUIRE(m1.has_value() == m2.has_value());
      if (m1) CHECK(*m1 == *m2);
    }
    CHECK_THROWS_AS(files.send(MessageKind::kRound1, 2, "{}"), SchemaError);
  }
  fs::remove_all(dir);
}

TEST_CASE("a silent source is excluded and flagged") {
  World w = make_world(0.5, 200);
  auto srcs = nodes(w);
  srcs[1].silent = true;
  MemoryTransport t;
  TargetNode target(w.target, {});
  auto rep = orchestrate(t, target, srcs);
  CHECK(rep.sources_used == 2);
  bool flagged = false;
  for (const auto& s : rep.sources)
    if (s.site_id == 2) flagged = !s.used && s.status.find("excluded") == 0;
  CHECK(flagged);
  CHECK_FALSE(rep.warnings.empty());
  CHECK(t.transcript().size() == 6);
}

TEST_CASE("equal-size sites make both fusion rules agree") {
  World w = make_world(1.0, 200);
  EcoOptions eq, sz;
  sz.fusion = Fusion::kSizeWeighted;
  auto a = estimators::eco_ate(w.target, w.sources, w.bases, eq);
  auto b = estimators::eco_ate(w.target, w.sources, w.bases, sz);
  CHECK(std::abs(a.estimate - b.estimate) < 1e-12);
}

TEST_CASE("fusion treats each site's summary independently") {
  World w = make_world(0.7, 250);
  EcoOptions opt;
  MemoryTransport t;
  TargetNode target(w.target, opt);
  orchestrate(t, target, nodes(w));
  const std::string b = *t.receive(MessageKind::kBroadcast, 0, 0.0);

  // With the broadcast fixed, a site's round-2 message depends on its own records only.
  World other = make_world(0.7, 250, 1);
  SourceNode s1(w.sources[0], w.bases[0]), s2(other.sources[1], w.bases[1]);
  CHECK(*s1.round2(b) == *t.receive(MessageKind::kRound2, 1, 0.0));
  CHECK(*s2.round2(b) != *t.receive(MessageKind::kRound2, 2, 0.0));

  std::vector<Round2Summary> sums;
  for (int id : {0, 1, 2, 3}) sums.push_back(round2_from_json(decode(*t.receive(MessageKind::kRound2, id, 0.0))));
  auto full = fuse_summaries(sums, opt);
  const auto& tb = *sums[0].target;
  MatrixXd I = MatrixXd::Zero(tb.C.size(), tb.C.size());
  long n = 0;
  for (const auto& s : sums) n += s.n;
  for (const auto& s : sums) I += static_cast<double>(s.n) / n * s.I;
  VectorXd v = I.completeOrthogonalDecomposition().pseudoInverse() * tb.C;
  double phi = tb.N0;
  for (const auto& s : sums) phi += 0.25 * (s.H + v.dot(s.L));
  CHECK(std::abs(full.estimate - phi) < 1e-10);
}

TEST_CASE("null shift: broadcast tilt parameters near zero and estimate covers the truth") {
  World w = make_world(0.0, 2000, 0, 21);
  auto rep = estimators::eco_ate(w.target, w.sources, w.bases, {});
  CHECK(rep.covers(1.0));
  REQUIRE(rep.sources.size() == 3);
  for (const auto& s : rep.sources) {
    CHECK(s.used);
    CHECK(s.beta.cwiseAbs().maxCoeff() < 0.2);
    CHECK(s.residual < 1e-8);
  }
}

TEST_CASE("options parse strictly") {
  EcoOptions o = options_from_json({{"fusion", "size-weighted"}, {"sieve_degree", 2}, {"centering", "kernel"}});
  CHECK(o.fusion == Fusion::kSizeWeighted);
  CHECK(o.sieve_degree == 2);
  CHECK(o.centering == gradient::Centering::kSiteKernel);
  EcoOptions back = options_from_json(options_to_json(o));
  CHECK(options_to_json(back) == options_to_json(o));
  CHECK_THROWS_AS(options_from_json({{"sieve_degre", 2}}), ConfigError);
  CHECK_THROWS_AS(options_from_json({{"fusion", "median"}}), ConfigError);
  CHECK_THROWS_AS(options_from_json({{"clamp", "x"}}), ConfigError);
  CHECK_THROWS_AS(options_from_json({{"clamp", 0.7}}), ConfigError);
}
