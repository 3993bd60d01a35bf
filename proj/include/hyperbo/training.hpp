#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "hyperbo/dataset.hpp"
#include "hyperbo/gp.hpp"
#include "hyperbo/objectives.hpp"

namespace hyperbo {

struct Structure {
  MeanKind mean = MeanKind::constant;
  KernelKind kernel = KernelKind::squared_exponential;
};

struct TrainConfig {
  ObjectiveSpec objective;
  int steps = 1000;
  int restarts = 4;
  std::uint64_t seed = 0;
  double learning_rate = 1e-2;
  std::vector<MeanKind> mean_family = {MeanKind::constant, MeanKind::linear};
  std::vector<KernelKind> kernel_family = {KernelKind::squared_exponential,
                                           KernelKind::matern52,
                                           KernelKind::dot_product};
  DegenerateMode degenerate_mode = DegenerateMode::pseudo_kl;
  bool unbiased_moments = false;
  OutputWarp output_warp = OutputWarp::identity;
  double matching_tol = 1e-9;
};

struct TrainTrace {
  Structure structure;
  int restart = 0;
  std::vector<double> objective;    // loss at each step, step 0 = initialization
  std::vector<double> best_so_far;  // running minimum, non-increasing
};

struct TrainResult {
  GPParams gp;
  Structure structure;
  double final_objective = 0.0;
  std::vector<TrainTrace> traces;
  int n_tasks = 0;
  ObjectiveSpec objective;
  // Fit quality on the training data, always as the full objective values.
  double diag_nll = 0.0;
  double diag_divergence = std::numeric_limits<double>::quiet_NaN();
  bool diag_divergence_is_pseudo = false;
};

std::string serialize_train_result(const TrainResult& result);
TrainResult parse_train_result(const std::string& json_text);

// Free parameters are packed as [mean..., kernel..., log_noise_variance];
// positive quantities live in log space throughout.
int param_count(const Structure& s, int dim);
Eigen::VectorXd pack_params(const GPParams& gp);
GPParams unpack_params(const Structure& s, int dim, const Eigen::VectorXd& theta);

// Random initialization: log amplitude ~ N(0,1), each log length scale
// ~ N(0,1), log noise variance ~ N(-4,1), constant mean and linear bias
// ~ N(0,1), linear weights ~ N(0, 0.1^2). dot_product variances draw like
// amplitudes. Deterministic in the seed.
GPParams init_params(const Structure& s, int dim, std::uint64_t seed);

// Training loss value + analytic gradient of the packed parameters.
// nll mode: multi-task NLL. kl mode: the constant-free minimization target.
// nll_plus_kl: NLL + lambda * full divergence (pseudo form when degenerate).
struct ValueGrad {
  double value = 0.0;
  Eigen::VectorXd grad;
};
ValueGrad training_loss(const GPParams& gp, const std::vector<WarpedTask>& tasks,
                        const MomentEstimates* est, const ObjectiveSpec& objective,
                        DegenerateMode mode);

// Value/gradient of the declared objective itself (full divergence values, so
// gradient(nll_plus_kl) = gradient(nll) + lambda * gradient(kl) exactly).
double objective_value(const GPParams& gp, const std::vector<WarpedTask>& tasks,
                       const MomentEstimates* est, const ObjectiveSpec& objective,
                       DegenerateMode mode = DegenerateMode::pseudo_kl);
Eigen::VectorXd objective_gradient(const GPParams& gp,
                                   const std::vector<WarpedTask>& tasks,
                                   const MomentEstimates* est,
                                   const ObjectiveSpec& objective,
                                   DegenerateMode mode = DegenerateMode::pseudo_kl);

// Convenience overloads operating on raw study data.
double objective_value(const GPParams& gp, const TuningDataset& dataset,
                       const MatchingDataset& matching, const ObjectiveSpec& objective,
                       const TrainConfig& config);
Eigen::VectorXd objective_gradient(const GPParams& gp, const TuningDataset& dataset,
                                   const MatchingDataset& matching,
                                   const ObjectiveSpec& objective,
                                   const TrainConfig& config);

// Fixed-step Adam (beta1 0.9, beta2 0.999, eps 1e-8). Non-finite loss or
// gradient rejects the step: the iterate reverts to the last good point and
// the rate is halved for the remainder of the restart.
class AdamOptimizer {
 public:
  AdamOptimizer(int n, double learning_rate);
  void step(Eigen::VectorXd& theta, const Eigen::VectorXd& grad);
  void halve_rate() { lr_ *= 0.5; }
  double rate() const { return lr_; }

 private:
  double lr_;
  int t_ = 0;
  Eigen::VectorXd m_, v_;
};

// Fits every structure in the config's families with `restarts` restarts each
// and returns the best parameters seen anywhere, ties broken by structure
// order then restart index.
TrainResult train_gp(const TuningDataset& dataset, const MatchingDataset& matching,
                     const TrainConfig& config);

// Same engine on pre-warped tasks; est may be null for pure NLL training.
TrainResult train_gp_warped(const std::vector<WarpedTask>& tasks,
                            const MomentEstimates* est, const TrainConfig& config);

}  // namespace hyperbo
