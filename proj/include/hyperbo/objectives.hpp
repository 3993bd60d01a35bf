#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "hyperbo/dataset.hpp"
#include "hyperbo/gp.hpp"

namespace hyperbo {

// Empirical mean vector and covariance matrix of the matching data, treating
// tasks as i.i.d. draws of the column vector y(.).
struct MomentEstimates {
  Eigen::MatrixXd inputs;    // M x d
  Eigen::VectorXd mu_tilde;  // M
  Eigen::MatrixXd k_tilde;   // M x M, symmetric PSD
  int rank = 0;              // eigenvalues above 1e-9 * lambda_max
  int n_tasks = 0;
};

// mu~ = (1/N) y 1, K~ = (1/N)(y - mu~ 1^T)(y - mu~ 1^T)^T; `unbiased` rescales
// K~ by N/(N-1). Requires M >= 1 and N >= 2.
MomentEstimates moment_estimates(const MatchingDataset& matching,
                                 bool unbiased = false);

// KL( N(mu~, K~) || N(mu, K) ) =
//   0.5 (tr(K^-1 K~) + (mu - mu~)^T K^-1 (mu - mu~) + ln(|K|/|K~|) - M).
// Requires K~ full rank.
double gaussian_kl(const Eigen::VectorXd& mu_tilde, const Eigen::MatrixXd& k_tilde,
                   const Eigen::VectorXd& mu, const Eigen::MatrixXd& k_model);

// Divergence extended to rank-deficient K~ via a truncated eigendecomposition
// K~ = A A^T with A of full column rank R:
//   0.5 (tr(K^-1 K~) + (mu - mu~)^T K^-1 (mu - mu~) + ln|K| - ln|A^T A|
//        - R + (M - R) ln 2pi).
// Coincides with gaussian_kl when R = M; may be negative otherwise.
double gaussian_pseudo_kl(const Eigen::VectorXd& mu_tilde,
                          const Eigen::MatrixXd& k_tilde,
                          const Eigen::VectorXd& mu,
                          const Eigen::MatrixXd& k_model);

// Model side for a parametric GP: mu = mean(inputs), K = k(inputs) + sigma^2 I.
double kl_divergence(const MomentEstimates& est, const GPParams& gp);
double pseudo_kl(const MomentEstimates& est, const GPParams& gp);

// Model side provided by retrieval; no noise term is added since stored
// covariances already include it.
double kl_vs_memory(const MomentEstimates& est, const MemoryGP& memory);

// Sum of per-task nll_subdataset values, reduced in task order.
double multi_task_nll(const GPParams& gp, const std::vector<WarpedTask>& tasks);

// What to do when K~ is rank deficient: fall back to the pseudo divergence, or
// add 1e-6 to both diagonals and keep the exact KL.
enum class DegenerateMode { pseudo_kl, epsilon_jitter };

inline constexpr double kEpsilonJitter = 1e-6;

// Full divergence value honoring the degenerate mode: exact KL when K~ has
// full rank, otherwise the mode's fallback.
double divergence_value(const MomentEstimates& est, const GPParams& gp,
                        DegenerateMode mode);

// multi_task_nll + lambda * divergence_value. Requires a nonempty matching set
// when lambda > 0.
double combined_objective(const GPParams& gp, const std::vector<WarpedTask>& tasks,
                          const MomentEstimates& est, double lambda,
                          DegenerateMode mode = DegenerateMode::pseudo_kl);

// Constant-free minimization target for divergence-only training:
//   tr(K^-1 K~) + (mu - mu~)^T K^-1 (mu - mu~) + ln|K|.
// Well defined for any rank of K~; under epsilon_jitter a rank-deficient K~
// shifts both diagonals first, exactly as divergence_value does. The full
// divergence is always 0.5 * target + (a constant depending only on K~).
double kl_minimization_target(const GPParams& gp, const MomentEstimates& est,
                              DegenerateMode mode = DegenerateMode::pseudo_kl);

struct ObjectiveSpec {
  enum class Kind { nll, kl, nll_plus_kl };
  Kind kind = Kind::nll;
  double lambda = 10.0;  // nll_plus_kl only
};

ObjectiveSpec parse_objective(const std::string& text);  // "nll" | "kl" | "nllkl[:lambda]"
std::string objective_name(const ObjectiveSpec& spec);

}  // namespace hyperbo
