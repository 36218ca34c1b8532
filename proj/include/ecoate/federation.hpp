#pragma once

#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "ecoate/data.hpp"
#include "ecoate/expr.hpp"
#include "ecoate/gradient.hpp"
#include "ecoate/numerics.hpp"
#include "ecoate/report.hpp"
#include "ecoate/shift.hpp"

namespace ecoate::federation {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using nlohmann::json;

inline constexpr const char* kSchemaVersion = "eco-ate/1";

enum class Fusion { kEqual, kSizeWeighted };

struct EcoOptions {
  std::string name = "eco-ate";
  int sieve_degree = 3;
  bool sieve_pairwise = false;
  double ridge = 1e-8;
  double clamp = 0.01;
  Fusion fusion = Fusion::kEqual;
  gradient::MatrixForm matrix_form = gradient::MatrixForm::kTiltAdjusted;
  gradient::Centering centering = gradient::Centering::kModelImplied;
  double bandwidth_scale = 1.0;
  numerics::NewtonOptions newton{1e-10, 100, 20, 1e-6};
  double timeout_seconds = 60.0;

  numerics::SieveBasisSpec sieve(int dim) const { return {dim, sieve_degree, true, sieve_pairwise}; }
};

// What the target knows about a source before fitting.
struct SourceInput {
  int site_id = 0;
  long n = 0;
  VectorXd phi_bar;
  expr::BasisVector basis;
  VectorXd xi_bar;
  std::optional<shift::CovariateShiftModel> tilt;  // skip moment matching when set
};

struct TargetFits {
  gradient::Nuisances nuisances;
  numerics::Standardization standardization;
  std::vector<long> site_n;                // aligned with nuisances.site_ids
  std::vector<SourceDiagnostics> sources;  // every input source, used or not
};

// Fits every target-side nuisance with `fitter` (trained on the target's x and a);
// μ̂ uses `outcome_fitter` when given.
TargetFits fit_target(const SiteDataset& target, const std::vector<SourceInput>& sources, const EcoOptions& opt,
                      const numerics::CondMeanFitter& fitter, const numerics::CondMeanFitter* outcome_fitter = nullptr);

struct TargetBlock {
  double N0 = 0.0;  // mean of μ̂(1,x) − μ̂(0,x)
  double T2 = 0.0;  // mean of squared contrast
  double TD = 0.0;  // mean contrast × D
  VectorXd TL;      // mean contrast × ℓ̇*
  VectorXd C;       // mean AIPW residual × ℓ̇*
};

struct Round2Summary {
  int site_id = 0;
  long n = 0;
  double H = 0.0;
  VectorXd L;
  MatrixXd I;
  double D2 = 0.0;
  VectorXd DL;
  int clamped = 0;
  double max_r = 0.0;
  std::optional<TargetBlock> target;
};

Round2Summary summarize_site(const gradient::GradientContext& ctx, const SiteDataset& data, int position,
                             const EcoOptions& opt);

// `summaries` ordered as the broadcast sites with missing sources removed; entry 0 is the target.
EstimateReport fuse_summaries(const std::vector<Round2Summary>& summaries, const EcoOptions& opt);

// ---- messages --------------------------------------------------------------

struct Round1Summary {
  int site_id = 0;
  long n = 0;
  int dim = 0;
  VectorXd phi_bar;
  std::vector<std::string> xi;
  VectorXd xi_bar;
};

Round1Summary source_round1(const SiteDataset& data, const expr::BasisVector& basis);

struct BroadcastSource {
  int site_id = 0;
  long n = 0;
  std::vector<std::string> xi;
  VectorXd beta;
  VectorXd tilt_center, tilt_scale, tilt_gamma;
  double tilt_log_normalizer = 0.0;
  std::optional<MatrixXd> normalizer;  // sieve coefficients of log Ŵ; absent means Ŵ ≡ 1
  double normalizer_floor = shift::kNormalizerFloor;
};

struct Broadcast {
  int target_id = 0;
  long target_n = 0;
  int dim = 1;
  std::vector<double> site_prob;
  EcoOptions options;
  numerics::Standardization standardization;
  VectorXd propensity;
  MatrixXd outcome, geometry, tilted, outcome_cov, score_cov;
  std::vector<BroadcastSource> sources;
  std::vector<SourceDiagnostics> diagnostics;  // per round-1 source, including excluded ones
};

Broadcast make_broadcast(const TargetFits& fits, int target_id, const EcoOptions& opt);
gradient::Nuisances to_nuisances(const Broadcast& b);

json to_json(const Round1Summary& m);
json to_json(const Broadcast& m);
json to_json(const Round2Summary& m);
Round1Summary round1_from_json(const json& j);
Broadcast broadcast_from_json(const json& j);
Round2Summary round2_from_json(const json& j);

// Canonical bytes of a message.
std::string encode(const json& j);
json decode(const std::string& bytes);

enum class MessageKind { kRound1, kBroadcast, kRound2 };
const char* kind_name(MessageKind k);
// Schema-level check that the payload carries only aggregates: exact key sets and
// array lengths fixed by model dimensions, never by record counts.
void validate_message(const json& j, MessageKind kind);

// ---- transports ------------------------------------------------------------

struct TranscriptEntry {
  MessageKind kind;
  int site_id;
  std::size_t bytes;
};

class Transport {
 public:
  virtual ~Transport() = default;
  virtual void send(MessageKind kind, int site_id, const std::string& bytes) = 0;
  virtual std::optional<std::string> receive(MessageKind kind, int site_id, double timeout_seconds) = 0;
  const std::vector<TranscriptEntry>& transcript() const { return transcript_; }

 protected:
  void record(MessageKind kind, int site_id, std::size_t bytes) { transcript_.push_back({kind, site_id, bytes}); }

 private:
  std::vector<TranscriptEntry> transcript_;
};

class MemoryTransport final : public Transport {
 public:
  void send(MessageKind kind, int site_id, const std::string& bytes) override;
  std::optional<std::string> receive(MessageKind kind, int site_id, double timeout_seconds) override;

 private:
  std::map<std::pair<int, int>, std::string> box_;
};

// One directory per round, files {round}-{site}.json, manifest.json with the schema.
class FileTransport final : public Transport {
 public:
  explicit FileTransport(std::filesystem::path root);
  void send(MessageKind kind, int site_id, const std::string& bytes) override;
  std::optional<std::string> receive(MessageKind kind, int site_id, double timeout_seconds) override;
  std::filesystem::path path(MessageKind kind, int site_id) const;
  const std::filesystem::path& root() const { return root_; }

 private:
  std::filesystem::path root_;
};

// ---- nodes and orchestration -----------------------------------------------

class SourceNode {
 public:
  SourceNode(SiteDataset data, expr::BasisVector basis) : data_(std::move(data)), basis_(std::move(basis)) {}
  int site_id() const { return data_.site_id; }
  std::string round1() const;
  // Empty when the broadcast excluded this source.
  std::optional<std::string> round2(const std::string& broadcast) const;

  bool silent = false;  // simulate a site that never answers

 private:
  SiteDataset data_;
  expr::BasisVector basis_;
};

class TargetNode {
 public:
  TargetNode(SiteDataset data, EcoOptions opt);
  int site_id() const { return data_.site_id; }
  // `round1` pairs each expected source id with its message, if one arrived.
  std::string broadcast(const std::vector<std::pair<int, std::optional<std::string>>>& round1);
  std::string round2() const;
  EstimateReport fuse(const std::vector<std::pair<int, std::optional<std::string>>>& round2) const;

 private:
  SiteDataset data_;
  EcoOptions opt_;
  std::optional<Broadcast> broadcast_;
  std::shared_ptr<gradient::GradientContext> ctx_;
  std::vector<std::string> warnings_;
};

EstimateReport orchestrate(Transport& transport, TargetNode& target, const std::vector<SourceNode>& sources,
                           double timeout_seconds = 0.0);

// Multi-process roles over a shared FileTransport.
EstimateReport run_target_role(FileTransport& transport, TargetNode& target, const std::vector<int>& expected_sources,
                               double timeout_seconds);
void run_source_role(FileTransport& transport, const SourceNode& source, int target_id, double timeout_seconds);

json options_to_json(const EcoOptions& opt);
EcoOptions options_from_json(const json& j, EcoOptions base = {});

}  // namespace ecoate::federation
