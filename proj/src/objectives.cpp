#include "hyperbo/objectives.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>
#include <sstream>

#include "hyperbo/errors.hpp"

namespace hyperbo {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kRankTol = 1e-9;  // relative to the largest eigenvalue

[[noreturn]] void fail(const std::string& msg) { throw ValidationError(msg); }

int numerical_rank(const Eigen::VectorXd& eigenvalues) {
  const double lambda_max = eigenvalues.maxCoeff();
  if (!(lambda_max > 0.0)) return 0;
  const double cut = kRankTol * lambda_max;
  int rank = 0;
  for (int i = 0; i < eigenvalues.size(); ++i)
    if (eigenvalues(i) > cut) ++rank;
  return rank;
}

struct ModelSide {
  Eigen::VectorXd mu;
  Eigen::MatrixXd k;
};

ModelSide model_side(const MomentEstimates& est, const GPParams& gp) {
  ModelSide m;
  m.mu = mean_eval(gp.mean, est.inputs);
  m.k = kernel_gram(gp.kernel, est.inputs);
  m.k.diagonal().array() += gp.noise_variance();
  return m;
}

// Shared pieces of every divergence expression: tr(K^-1 K~), the quadratic
// form, and ln|K| through the Cholesky factor of the model matrix.
struct DivergenceCore {
  double trace;
  double quad;
  double log_det_k;
};

DivergenceCore divergence_core(const Eigen::VectorXd& mu_tilde,
                               const Eigen::MatrixXd& k_tilde,
                               const Eigen::VectorXd& mu,
                               const Eigen::MatrixXd& k_model) {
  const int m = static_cast<int>(mu_tilde.size());
  if (k_tilde.rows() != m || k_tilde.cols() != m || mu.size() != m ||
      k_model.rows() != m || k_model.cols() != m)
    fail("divergence: mean/covariance sizes disagree");
  const double scale = std::max(k_model.diagonal().maxCoeff(), 1e-300);
  auto chol = robust_cholesky(k_model, scale);
  DivergenceCore core;
  core.trace = chol.llt.solve(k_tilde).trace();
  const Eigen::VectorXd diff = mu - mu_tilde;
  core.quad = diff.dot(chol.llt.solve(diff));
  core.log_det_k = 0.0;
  for (int i = 0; i < m; ++i)
    core.log_det_k += 2.0 * std::log(chol.llt.matrixLLT()(i, i));
  return core;
}

}  // namespace

MomentEstimates moment_estimates(const MatchingDataset& matching, bool unbiased) {
  const int m = matching.size();
  const int n = matching.n_tasks();
  if (m < 1) fail("moment estimates need at least one matching input");
  if (n < 2) fail("moment estimates need at least two tasks");
  if (matching.values.rows() != m || matching.values.cols() != n)
    fail("matching values matrix has the wrong shape");
  if (!matching.values.allFinite()) fail("matching values must be finite");

  MomentEstimates est;
  est.inputs = matching.inputs;
  est.n_tasks = n;
  est.mu_tilde = matching.values.rowwise().mean();
  const Eigen::MatrixXd centered = matching.values.colwise() - est.mu_tilde;
  est.k_tilde = centered * centered.transpose() / double(n);
  if (unbiased) est.k_tilde *= double(n) / double(n - 1);
  est.k_tilde = ((est.k_tilde + est.k_tilde.transpose()) / 2.0).eval();

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(est.k_tilde);
  est.rank = numerical_rank(eig.eigenvalues());
  return est;
}

double gaussian_kl(const Eigen::VectorXd& mu_tilde, const Eigen::MatrixXd& k_tilde,
                   const Eigen::VectorXd& mu, const Eigen::MatrixXd& k_model) {
  const int m = static_cast<int>(mu_tilde.size());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(k_tilde);
  if (numerical_rank(eig.eigenvalues()) < m)
    fail("exact KL needs a full-rank estimated covariance");
  const auto core = divergence_core(mu_tilde, k_tilde, mu, k_model);
  double log_det_kt = 0.0;
  for (int i = 0; i < m; ++i) log_det_kt += std::log(eig.eigenvalues()(i));
  return 0.5 * (core.trace + core.quad + core.log_det_k - log_det_kt - m);
}

double gaussian_pseudo_kl(const Eigen::VectorXd& mu_tilde,
                          const Eigen::MatrixXd& k_tilde,
                          const Eigen::VectorXd& mu,
                          const Eigen::MatrixXd& k_model) {
  const int m = static_cast<int>(mu_tilde.size());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(k_tilde);
  const double lambda_max = eig.eigenvalues().maxCoeff();
  if (!(lambda_max > 0.0))
    fail("pseudo divergence needs a nonzero estimated covariance");
  // ln|A^T A| for K~ = A A^T with A the truncated eigenfactor: the product of
  // the kept eigenvalues.
  const double cut = kRankTol * lambda_max;
  int rank = 0;
  double log_det_ata = 0.0;
  for (int i = 0; i < m; ++i)
    if (eig.eigenvalues()(i) > cut) {
      ++rank;
      log_det_ata += std::log(eig.eigenvalues()(i));
    }
  const auto core = divergence_core(mu_tilde, k_tilde, mu, k_model);
  return 0.5 * (core.trace + core.quad + core.log_det_k - log_det_ata - rank +
                (m - rank) * kLog2Pi);
}

double kl_divergence(const MomentEstimates& est, const GPParams& gp) {
  const auto m = model_side(est, gp);
  return gaussian_kl(est.mu_tilde, est.k_tilde, m.mu, m.k);
}

double pseudo_kl(const MomentEstimates& est, const GPParams& gp) {
  const auto m = model_side(est, gp);
  return gaussian_pseudo_kl(est.mu_tilde, est.k_tilde, m.mu, m.k);
}

double kl_vs_memory(const MomentEstimates& est, const MemoryGP& memory) {
  const int m = est.inputs.rows();
  Eigen::VectorXd mu(m);
  Eigen::MatrixXd k(m, m);
  for (int i = 0; i < m; ++i) {
    mu(i) = memory.mean_at(est.inputs.row(i));
    for (int j = 0; j < m; ++j)
      k(i, j) = memory.cov_at(est.inputs.row(i), est.inputs.row(j));
  }
  // Stored covariances already carry the noise term, so none is added here.
  return gaussian_kl(est.mu_tilde, est.k_tilde, mu, k);
}

double multi_task_nll(const GPParams& gp, const std::vector<WarpedTask>& tasks) {
  if (tasks.empty()) fail("multi_task_nll: no tasks");
  // Reduced in task order so the sum is reproducible.
  double total = 0.0;
  for (const auto& t : tasks) total += nll_subdataset(gp, t.x, t.y);
  return total;
}

double divergence_value(const MomentEstimates& est, const GPParams& gp,
                        DegenerateMode mode) {
  if (est.rank == static_cast<int>(est.inputs.rows()))
    return kl_divergence(est, gp);
  if (mode == DegenerateMode::pseudo_kl) return pseudo_kl(est, gp);
  auto m = model_side(est, gp);
  m.k.diagonal().array() += kEpsilonJitter;
  Eigen::MatrixXd k_shift = est.k_tilde;
  k_shift.diagonal().array() += kEpsilonJitter;
  return gaussian_kl(est.mu_tilde, k_shift, m.mu, m.k);
}

double combined_objective(const GPParams& gp, const std::vector<WarpedTask>& tasks,
                          const MomentEstimates& est, double lambda,
                          DegenerateMode mode) {
  if (lambda < 0.0) fail("combined objective needs lambda >= 0");
  const double nll = multi_task_nll(gp, tasks);
  if (lambda == 0.0) return nll;
  if (est.inputs.rows() == 0)
    fail("combined objective with lambda > 0 needs matching data");
  return nll + lambda * divergence_value(est, gp, mode);
}

double kl_minimization_target(const GPParams& gp, const MomentEstimates& est,
                              DegenerateMode mode) {
  if (est.inputs.rows() == 0) fail("divergence target needs matching data");
  auto m = model_side(est, gp);
  Eigen::MatrixXd k_tilde = est.k_tilde;
  // The shift mirrors divergence_value: full-rank estimates never need it.
  if (mode == DegenerateMode::epsilon_jitter &&
      est.rank < static_cast<int>(est.inputs.rows())) {
    m.k.diagonal().array() += kEpsilonJitter;
    k_tilde.diagonal().array() += kEpsilonJitter;
  }
  const auto core = divergence_core(est.mu_tilde, k_tilde, m.mu, m.k);
  return core.trace + core.quad + core.log_det_k;
}

ObjectiveSpec parse_objective(const std::string& text) {
  ObjectiveSpec spec;
  if (text == "nll") {
    spec.kind = ObjectiveSpec::Kind::nll;
    return spec;
  }
  if (text == "kl") {
    spec.kind = ObjectiveSpec::Kind::kl;
    return spec;
  }
  if (text.rfind("nllkl", 0) == 0) {
    spec.kind = ObjectiveSpec::Kind::nll_plus_kl;
    if (text.size() > 5) {
      if (text[5] != ':') fail("unknown objective '" + text + "'");
      try {
        spec.lambda = std::stod(text.substr(6));
      } catch (const std::exception&) {
        fail("cannot parse lambda in '" + text + "'");
      }
      if (!(spec.lambda >= 0.0)) fail("lambda must be non-negative");
    }
    return spec;
  }
  fail("unknown objective '" + text + "'");
}

std::string objective_name(const ObjectiveSpec& spec) {
  switch (spec.kind) {
    case ObjectiveSpec::Kind::nll: return "nll";
    case ObjectiveSpec::Kind::kl: return "kl";
    case ObjectiveSpec::Kind::nll_plus_kl: {
      std::ostringstream out;
      out << "nllkl:" << spec.lambda;
      return out.str();
    }
  }
  return "nll";
}

}  // namespace hyperbo
