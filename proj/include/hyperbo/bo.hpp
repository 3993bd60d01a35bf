#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "hyperbo/acquisition.hpp"
#include "hyperbo/dataset.hpp"
#include "hyperbo/gp.hpp"

namespace hyperbo {

enum class BoMode { offline, online };

struct BoConfig {
  int iterations = 30;
  Acquisition acquisition;
  std::uint64_t seed = 0;
  BoMode mode = BoMode::offline;
  int candidate_count = 5000;  // online only
  bool dedup = false;          // offline ablation: drop already-picked entries
  int n_train_tasks = 0;       // needed by ucb-theory
};

struct BoStep {
  Eigen::RowVectorXd x;  // warped input
  double y = 0.0;        // warped observation
  double raw = std::numeric_limits<double>::quiet_NaN();
  bool feasible = true;
  int pool_index = -1;  // offline only
  double best_so_far = 0.0;
  double regret = std::numeric_limits<double>::quiet_NaN();
};

struct BoTrace {
  std::vector<BoStep> steps;

  // argmax_t y_t, ties to the earliest iteration.
  int recommendation() const;
};

// regret_t = f_max - best_so_far_t, written into the trace.
void fill_regret(BoTrace& trace, double f_max);
std::vector<double> simple_regret(const BoTrace& trace, double f_max);

// Finite pool of pre-recorded evaluations (warped).
struct OfflinePool {
  Eigen::MatrixXd x;  // P x d
  Eigen::VectorXd y;  // P
  std::vector<double> raw;

  int size() const { return static_cast<int>(x.rows()); }
  double max_value() const { return y.maxCoeff(); }
};

// Builds the pool from one task. identity / error_rate warps keep feasible
// trials; infeasible ones stay in the pool at value -2 so the candidate set
// matches the recorded trials exactly.
OfflinePool make_pool(const SearchSpace& space, const SubDataset& task,
                      OutputWarp warp);

// Black-box objective on warped inputs; nullopt marks an infeasible point,
// which enters the GP at -2.
using OnlineOracle = std::function<std::optional<double>(const Eigen::RowVectorXd&)>;

// Cranley-Patterson rotated Halton points in [0,1)^d; prefixes of one fixed
// sequence, so candidate sets of growing size are nested.
Eigen::MatrixXd quasi_random(int count, int dim, std::uint64_t seed);

// The BO loop shared by every GP-based method: condition the frozen prior on
// the trace, score candidates, observe the argmax. The prior is never refit.
BoTrace run_hyperbo(const OfflinePool& pool, const GPParams& prior,
                    const BoConfig& config);
BoTrace run_hyperbo_online(const OnlineOracle& oracle, int dim,
                           const GPParams& prior, const BoConfig& config);

// Uniform baseline: with-replacement pool draws offline, uniform points online.
BoTrace run_random(const OfflinePool& pool, const BoConfig& config);
BoTrace run_random_online(const OnlineOracle& oracle, int dim, const BoConfig& config);

// Single-task BO: constant mean + Matern 3/2 refit by NLL on the trace every
// iteration (one restart, 100 steps); first point random.
BoTrace run_stbo(const OfflinePool& pool, const BoConfig& config);
BoTrace run_stbo_online(const OnlineOracle& oracle, int dim, const BoConfig& config);

// Hand-tuned single-task BO: constant mean + Matern 5/2, MAP fit under
// log-parameter priors with soft-clipping to the 1%..99% prior band.
BoTrace run_stboh(const OfflinePool& pool, const BoConfig& config);
BoTrace run_stboh_online(const OnlineOracle& oracle, int dim, const BoConfig& config);

// MAP refit used by run_stboh, exposed for direct checks: deterministic, the
// ascent starts at the prior means (-1, 0_d, -6), which with empty data is
// already the optimum.
GPParams fit_stboh_params(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                          int dim);

// Smooth squashing of v into (low, high); identity deep inside the band.
double soft_clip(double v, double low, double high);

enum class MethodKind { hyperbo, random_search, stbo, stboh };

MethodKind parse_method(const std::string& text);  // h-* | rand | stbo | stboh

// Worker-pool map over [0, n); thread count capped by HYPERBO_THREADS.
void parallel_runs(int n, const std::function<void(int)>& fn);
int harness_threads(int n_runs);

}  // namespace hyperbo
