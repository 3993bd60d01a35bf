#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <string>
#include <utility>

namespace hyperbo {

enum class MeanKind { constant, linear };

struct MeanFn {
  MeanKind kind = MeanKind::constant;
  double constant = 0.0;
  // linear only
  Eigen::VectorXd weights;
  double bias = 0.0;
};

Eigen::VectorXd mean_eval(const MeanFn& mean, const Eigen::MatrixXd& x);

enum class KernelKind { squared_exponential, matern32, matern52, dot_product };

std::string mean_name(MeanKind kind);
std::string kernel_name(KernelKind kind);
MeanKind parse_mean(const std::string& text);
KernelKind parse_kernel(const std::string& text);

struct KernelFn {
  KernelKind kind = KernelKind::squared_exponential;
  // stationary kernels (ARD)
  double log_amplitude = 0.0;
  Eigen::VectorXd log_length_scales;
  // dot_product only
  double log_bias_variance = 0.0;
  double log_weight_variance = 0.0;

  // Scale used by the jitter ladder; for dot_product the sum of its two
  // variances stands in for amplitude^2.
  double amplitude_sq() const;
};

double kernel_eval_pair(const KernelFn& k, const Eigen::RowVectorXd& a,
                        const Eigen::RowVectorXd& b);
Eigen::MatrixXd kernel_cross(const KernelFn& k, const Eigen::MatrixXd& a,
                             const Eigen::MatrixXd& b);
Eigen::MatrixXd kernel_gram(const KernelFn& k, const Eigen::MatrixXd& x);

struct GPParams {
  MeanFn mean;
  KernelFn kernel;
  double log_noise_variance = -4.0;

  double noise_variance() const { return std::exp(log_noise_variance); }
};

std::string serialize_gp(const GPParams& gp);
GPParams parse_gp(const std::string& json_text);

// Cholesky with a jitter ladder: the bare matrix is tried first, then
// jitter*scale is added to the diagonal with jitter = 1e-10, 1e-9, ..., 1e-4.
// Exhausting the ladder raises NumericalError.
struct RobustCholesky {
  Eigen::LLT<Eigen::MatrixXd> llt;
  double jitter = 0.0;  // absolute value added to the diagonal
};
RobustCholesky robust_cholesky(const Eigen::MatrixXd& k, double scale);

// Frozen prior conditioned on observations; reusable across queries.
class GPPosterior {
 public:
  GPPosterior(GPParams prior, Eigen::MatrixXd x, Eigen::VectorXd y);

  const GPParams& prior() const { return prior_; }
  int n() const { return static_cast<int>(x_.rows()); }
  int dim() const { return static_cast<int>(x_.cols()); }

  // Latent posterior moments at the query points.
  std::pair<Eigen::VectorXd, Eigen::MatrixXd> joint(const Eigen::MatrixXd& xq) const;
  // Marginal mean/variance; include_noise adds sigma^2 to each variance.
  std::pair<Eigen::VectorXd, Eigen::VectorXd> marginals(const Eigen::MatrixXd& xq,
                                                        bool include_noise) const;
  // Negative log marginal likelihood of the conditioning data.
  double nll() const;

 private:
  GPParams prior_;
  Eigen::MatrixXd x_;
  Eigen::VectorXd y_;
  Eigen::LLT<Eigen::MatrixXd> llt_;  // of k(X) + sigma^2 I (+ jitter)
  Eigen::VectorXd alpha_;            // K^{-1} (y - mu(X))
};

// Posterior mean and latent covariance at xq given data (x, y); with empty
// data this reduces to the prior.
std::pair<Eigen::VectorXd, Eigen::MatrixXd> posterior(const GPParams& gp,
                                                      const Eigen::MatrixXd& x,
                                                      const Eigen::VectorXd& y,
                                                      const Eigen::MatrixXd& xq);

// 0.5 yb^T K^{-1} yb + 0.5 ln|K| + (M/2) ln 2pi with yb = y - mu(X) and
// K = k(X) + sigma^2 I, evaluated through the Cholesky factor.
double nll_subdataset(const GPParams& gp, const Eigen::MatrixXd& x,
                      const Eigen::VectorXd& y);

// Retrieval-based GP: mean and covariance are table lookups at the nearest
// anchor (Euclidean; ties break to the lowest index).
struct MemoryGP {
  Eigen::MatrixXd anchors;      // M x d
  Eigen::VectorXd mean_values;  // M
  Eigen::MatrixXd cov_values;   // M x M, symmetric PSD

  int nearest(const Eigen::RowVectorXd& x) const;
  double mean_at(const Eigen::RowVectorXd& x) const;
  double cov_at(const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b) const;
};

MemoryGP build_memory_gp(Eigen::MatrixXd anchors, Eigen::VectorXd mean_values,
                         Eigen::MatrixXd cov_values);

}  // namespace hyperbo
