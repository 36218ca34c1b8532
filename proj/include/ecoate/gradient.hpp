#pragma once

#include <memory>
#include <vector>

#include <Eigen/Dense>

#include "ecoate/data.hpp"
#include "ecoate/numerics.hpp"
#include "ecoate/shift.hpp"

namespace ecoate::gradient {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using numerics::ConditionalMean;

enum class MatrixForm {
  kTiltAdjusted,  // diag(P(S=m)·λ_m)⁻¹ − E[r w̄* w̄*ᵀ|a,x,S=0]
  kUntilted,  // diag(P(S=m))⁻¹ − E[r w̄* w̄*ᵀ|a,x,S=0]
};

enum class Centering {
  kModelImplied,  // E[·|a,x,S=s] through the broadcast models and E[w*_s | a,x,S=0] = 1
  kSiteKernel,    // Nadaraya–Watson on the site's own records
};

// Number of entries in the upper triangle of an (m+1)×(m+1) symmetric matrix.
inline int packed_size(int sites) { return sites * (sites + 1) / 2; }
int packed_index(int m, int l, int sites);

// Everything the per-observation machinery needs. Index 0 is the target; sources follow
// in the order of `weights`.
struct Nuisances {
  int dim = 1;
  std::vector<int> site_ids;
  std::vector<double> site_prob;
  shift::WeightModel weights;
  std::vector<shift::CovariateShiftModel> tilts;
  std::vector<shift::NormalizerModel> normalizers;
  numerics::LogisticModel propensity;
  double clamp = 0.01;
  std::shared_ptr<const ConditionalMean> outcome;       // μ̂(a,x)
  std::shared_ptr<const ConditionalMean> geometry;      // E[r w*_m w*_l | a,x,S=0], packed m ≤ l
  std::shared_ptr<const ConditionalMean> tilted_basis;  // E[w*_s ξ_s | a,x,S=0] = E[ξ_s | a,x,S=s]
  std::shared_ptr<const ConditionalMean> outcome_cov;   // E[(r w*_m − R1_m)(y − μ̂) | a,x,S=0]
  std::shared_ptr<const ConditionalMean> score_cov;     // E[w*_s (r w*_m − R2_sm)(ξ_j − e_j) | a,x,S=0], j·(k+1)+m
  MatrixForm matrix_form = MatrixForm::kTiltAdjusted;

  int sources() const { return weights.sources(); }
  int sites() const { return sources() + 1; }
  int score_dim() const { return weights.dim(); }
};

// (x,a)-level quantities shared by every y at that covariate/arm cell.
struct Cell {
  double pi = 0.5;        // clamped π̂(a,x) for the observed arm
  bool clamped = false;
  double mu = 0.0;        // μ̂(a,x)
  double tau = 0.0;       // μ̂(1,x) − μ̂(0,x)
  VectorXd lambda;        // k+1, λ_0 = 1
  VectorXd normalizer;    // k+1, Ŵ_0 = 1
  MatrixXd R2;            // (k+1)×(k+1)
  VectorXd R1;            // row 0 of R2
  VectorXd e;             // dim β
  VectorXd B;             // E[d̃ w*_m | a,x,S=0]
  MatrixXd A;             // dim β × (k+1): E[ã_j w*_m | a,x,S=0]
  MatrixXd M, M_pinv;
  VectorXd alpha_d;       // M⁻ B
  MatrixXd alpha_a;       // (k+1) × dim β
};

struct PointEval {
  VectorXd wstar;   // k+1
  double r = 1.0;
  VectorXd r_site;  // k+1
  double h = 0.0;   // AIPW residual (2a−1)/π̂ (y − μ̂)
  double dtilde = 0.0;
  double dstar = 0.0;
  VectorXd xi;      // stacked basis values
  VectorXd atilde;
  VectorXd astar;
};

class GradientContext {
 public:
  explicit GradientContext(Nuisances nuisances);

  const Nuisances& nuisances() const { return nu_; }
  int sites() const { return nu_.sites(); }
  int score_dim() const { return nu_.score_dim(); }

  Cell cell(std::span<const double> x, int a) const;
  PointEval evaluate(const Cell& c, const expr::Point& z) const;
  PointEval evaluate(const expr::Point& z) const { return evaluate(cell(z.x, static_cast<int>(z.a)), z); }

  // Model-implied E[d* | a,x,S=site] and E[a* | a,x,S=site].
  double center_dstar(const Cell& c, int site) const;
  VectorXd center_astar(const Cell& c, int site) const;
  // ℓ̇(z, site) with the broadcast E[ξ_s | a,x,S=s].
  VectorXd score(const Cell& c, const PointEval& p, int site) const;

  // Observation-level canonical pieces with model-implied centering.
  double gradient_known_beta(const Cell& c, const PointEval& p, int site) const;
  VectorXd efficient_score(const Cell& c, const PointEval& p, int site) const;

 private:
  Nuisances nu_;
  std::vector<int> block_site_;  // stacked index → site position (1-based over sources)
};

MatrixXd m_matrix(const VectorXd& site_prob, const VectorXd& lambda, const MatrixXd& R2, MatrixForm form);
MatrixXd m_pinv(const MatrixXd& M, const VectorXd& site_prob, const VectorXd& lambda, MatrixForm form,
                double rel_tol = 1e-10);

struct WstarR {
  VectorXd wstar;
  double r;
  VectorXd r_site;
};

WstarR eval_wstar_r(const GradientContext& ctx, const expr::Point& z);
MatrixXd eval_M_pinv(const GradientContext& ctx, std::span<const double> x, int a);
double eval_dstar(const GradientContext& ctx, const expr::Point& z);
VectorXd eval_astar(const GradientContext& ctx, const expr::Point& z);
VectorXd efficient_score(const GradientContext& ctx, const expr::Point& z, int site);

struct FusedQuantities {
  VectorXd adjust;  // Î⁺ Ĉᵀ
  double phi_hat = 0.0;
  double p0 = 1.0;
};

double canonical_gradient_eff(const GradientContext& ctx, const FusedQuantities& fused, const expr::Point& z, int site);

// Per-record quantities for one site's data.
struct SiteGradients {
  VectorXd D;        // d* − E[d*|a,x,S=site]
  MatrixXd score;    // n × dim β, ℓ̇*
  VectorXd h;        // AIPW residual
  VectorXd tau;      // μ̂(1,x) − μ̂(0,x)
  int clamped = 0;
  double max_r = 0.0;
};

SiteGradients evaluate_site(const GradientContext& ctx, const SiteDataset& data, int site,
                            Centering centering = Centering::kModelImplied, double bandwidth_scale = 1.0);

}  // namespace ecoate::gradient
