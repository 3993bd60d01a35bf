#include "hyperbo/bo.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <numeric>
#include <thread>
#include <utility>
#include <vector>

#include "hyperbo/errors.hpp"
#include "hyperbo/rng.hpp"
#include "hyperbo/training.hpp"

namespace hyperbo {

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

// Phi^{-1}(0.99); the hand-tuned baseline clips log parameters to the
// central 98% band of their priors.
constexpr double kBand99 = 2.3263478740408408;

void check_iterations(const BoConfig& config) {
  if (config.iterations <= 0)
    throw ValidationError("bo: iterations must be positive");
}

void check_pool(const OfflinePool& pool) {
  if (pool.size() == 0) throw ValidationError("bo: offline pool is empty");
  if (pool.y.size() != pool.x.rows() ||
      static_cast<int>(pool.raw.size()) != pool.size())
    throw ValidationError("bo: pool fields disagree on size");
}

void check_dim(int dim) {
  if (dim <= 0) throw ValidationError("bo: dimension must be positive");
}

void append_offline_step(BoTrace& trace, const OfflinePool& pool, int i) {
  BoStep step;
  step.x = pool.x.row(i);
  step.y = pool.y(i);
  step.raw = pool.raw[i];
  step.feasible = !std::isnan(pool.raw[i]);
  step.pool_index = i;
  step.best_so_far = trace.steps.empty()
                         ? step.y
                         : std::max(step.y, trace.steps.back().best_so_far);
  trace.steps.push_back(std::move(step));
}

void append_online_step(BoTrace& trace, const OnlineOracle& oracle,
                        const Eigen::RowVectorXd& x) {
  BoStep step;
  step.x = x;
  const std::optional<double> value = oracle(x);
  if (value.has_value() && std::isfinite(*value)) {
    step.y = *value;
    step.raw = *value;
    step.feasible = true;
  } else {
    // failed evaluation enters the GP at the bottom of the warped band
    step.y = -2.0;
    step.raw = kNan;
    step.feasible = false;
  }
  step.best_so_far = trace.steps.empty()
                         ? step.y
                         : std::max(step.y, trace.steps.back().best_so_far);
  trace.steps.push_back(std::move(step));
}

struct Observations {
  Eigen::MatrixXd x;
  Eigen::VectorXd y;
};

Observations gather(const BoTrace& trace, int dim) {
  Observations obs;
  obs.x.resize(static_cast<int>(trace.steps.size()), dim);
  obs.y.resize(static_cast<int>(trace.steps.size()));
  for (std::size_t i = 0; i < trace.steps.size(); ++i) {
    obs.x.row(static_cast<int>(i)) = trace.steps[i].x;
    obs.y(static_cast<int>(i)) = trace.steps[i].y;
  }
  return obs;
}

// Conditions `params` on the trace and scores every candidate row. With no
// observations yet, improvement-based scores measure against the best prior
// mean over the candidates.
Eigen::VectorXd score_candidates(const GPParams& params, const BoTrace& trace,
                                 const Eigen::MatrixXd& candidates,
                                 const BoConfig& config, int iteration) {
  const Observations obs = gather(trace, static_cast<int>(candidates.cols()));
  const GPPosterior post(params, obs.x, obs.y);
  auto [mu, var] = post.marginals(candidates, true);

  const Acquisition& acq = config.acquisition;
  double best = 0.0;
  if (acq.kind == Acquisition::Kind::pi || acq.kind == Acquisition::Kind::ei)
    best = trace.steps.empty() ? mu.maxCoeff() : trace.steps.back().best_so_far;
  double zeta = acq.zeta;
  if (acq.kind == Acquisition::Kind::ucb_theory)
    zeta = theoretical_ucb_zeta(config.n_train_tasks, iteration + 1, acq.delta);

  Eigen::VectorXd scores(candidates.rows());
  for (int i = 0; i < candidates.rows(); ++i) {
    const double sigma = std::sqrt(std::max(var(i), 0.0));
    switch (acq.kind) {
      case Acquisition::Kind::pi:
        scores(i) = pi_score(mu(i), sigma, best, acq.margin);
        break;
      case Acquisition::Kind::ei:
        scores(i) = ei_score(mu(i), sigma, best);
        break;
      case Acquisition::Kind::ucb:
      case Acquisition::Kind::ucb_theory:
        scores(i) = ucb_score(mu(i), sigma, zeta);
        break;
    }
  }
  return scores;
}

int pick_offline(const OfflinePool& pool, const GPParams& params,
                 const BoTrace& trace, const BoConfig& config,
                 const std::vector<char>& taken, int iteration) {
  std::vector<int> index;
  if (config.dedup) {
    for (int i = 0; i < pool.size(); ++i)
      if (!taken[i]) index.push_back(i);
  }
  if (index.empty()) {  // dedup off, or every entry already picked
    index.resize(pool.size());
    std::iota(index.begin(), index.end(), 0);
  }
  Eigen::MatrixXd candidates(static_cast<int>(index.size()), pool.x.cols());
  for (std::size_t r = 0; r < index.size(); ++r)
    candidates.row(static_cast<int>(r)) = pool.x.row(index[r]);
  const Eigen::VectorXd scores =
      score_candidates(params, trace, candidates, config, iteration);
  return index[static_cast<std::size_t>(argmax_candidates(scores))];
}

// Shared offline loop. `params_at` supplies the GP for iteration t; methods
// that refit do so inside it. `start_seed` engages a random first point.
BoTrace drive_offline(const OfflinePool& pool, const BoConfig& config,
                      std::optional<std::uint64_t> start_seed,
                      const std::function<GPParams(const BoTrace&, int)>& params_at) {
  check_pool(pool);
  check_iterations(config);
  std::optional<Rng> start;
  if (start_seed) start.emplace(*start_seed);
  BoTrace trace;
  std::vector<char> taken(pool.size(), 0);
  for (int t = 0; t < config.iterations; ++t) {
    int pick;
    if (t == 0 && start)
      pick = static_cast<int>(start->uniform_index(pool.size()));
    else
      pick = pick_offline(pool, params_at(trace, t), trace, config, taken, t);
    taken[pick] = 1;
    append_offline_step(trace, pool, pick);
  }
  fill_regret(trace, pool.max_value());
  return trace;
}

// Online counterpart: one fixed quasi-random candidate set per run, with the
// observed points appended so exploitation can return to them.
BoTrace drive_online(const OnlineOracle& oracle, int dim, const BoConfig& config,
                     std::optional<std::uint64_t> start_seed,
                     const std::function<GPParams(const BoTrace&, int)>& params_at) {
  check_dim(dim);
  check_iterations(config);
  if (config.candidate_count <= 0)
    throw ValidationError("bo: candidate count must be positive");
  const Eigen::MatrixXd fixed = quasi_random(
      config.candidate_count, dim, derive_seed(config.seed, {label_hash("candidates")}));
  std::optional<Rng> start;
  if (start_seed) start.emplace(*start_seed);
  BoTrace trace;
  for (int t = 0; t < config.iterations; ++t) {
    Eigen::RowVectorXd x(dim);
    if (t == 0 && start) {
      for (int j = 0; j < dim; ++j) x(j) = start->uniform();
    } else {
      Eigen::MatrixXd candidates(fixed.rows() + static_cast<int>(trace.steps.size()),
                                 dim);
      candidates.topRows(fixed.rows()) = fixed;
      for (std::size_t i = 0; i < trace.steps.size(); ++i)
        candidates.row(fixed.rows() + static_cast<int>(i)) = trace.steps[i].x;
      const Eigen::VectorXd scores =
          score_candidates(params_at(trace, t), trace, candidates, config, t);
      x = candidates.row(argmax_candidates(scores));
    }
    append_online_step(trace, oracle, x);
  }
  return trace;
}

// NLL refit on the trace so far; failures keep the previous parameters.
GPParams stbo_refit(const BoTrace& trace, int dim, const BoConfig& config, int t,
                    const GPParams& previous) {
  WarpedTask task;
  task.task_id = "trace";
  const Observations obs = gather(trace, dim);
  task.x = obs.x;
  task.y = obs.y;
  task.raw.reserve(trace.steps.size());
  for (const BoStep& step : trace.steps) task.raw.push_back(step.raw);

  TrainConfig tc;
  tc.objective.kind = ObjectiveSpec::Kind::nll;
  tc.steps = 100;
  tc.restarts = 1;
  tc.seed = derive_seed(config.seed,
                        {label_hash("stbo-fit"), static_cast<std::uint64_t>(t)});
  tc.mean_family = {MeanKind::constant};
  tc.kernel_family = {KernelKind::matern32};
  try {
    return train_gp_warped({task}, nullptr, tc).gp;
  } catch (const NumericalError&) {
    return previous;
  }
}

}  // namespace

int BoTrace::recommendation() const {
  if (steps.empty()) throw ValidationError("bo: trace is empty");
  int best = 0;
  for (std::size_t i = 1; i < steps.size(); ++i)
    if (steps[i].y > steps[best].y) best = static_cast<int>(i);
  return best;
}

void fill_regret(BoTrace& trace, double f_max) {
  for (BoStep& step : trace.steps) step.regret = f_max - step.best_so_far;
}

std::vector<double> simple_regret(const BoTrace& trace, double f_max) {
  std::vector<double> out;
  out.reserve(trace.steps.size());
  for (const BoStep& step : trace.steps) out.push_back(f_max - step.best_so_far);
  return out;
}

OfflinePool make_pool(const SearchSpace& space, const SubDataset& task,
                      OutputWarp warp) {
  space.validate();
  if (task.trials.empty())
    throw ValidationError("bo: task '" + task.task_id + "' has no trials");
  const int n = static_cast<int>(task.trials.size());
  OfflinePool pool;
  pool.x.resize(n, space.dim());
  pool.y.resize(n);
  pool.raw.assign(n, kNan);

  std::vector<double> values(task.trials.size(), 0.0);
  std::vector<bool> feasible(task.trials.size());
  for (int i = 0; i < n; ++i) {
    const Trial& trial = task.trials[i];
    pool.x.row(i) = warp_point(space, trial.params);
    feasible[i] = trial.feasible && trial.objective.has_value();
    if (feasible[i]) values[i] = *trial.objective;
  }

  if (warp == OutputWarp::online) {
    const std::vector<double> warped = warp_online(values, feasible);
    for (int i = 0; i < n; ++i) {
      pool.y(i) = warped[i];
      if (feasible[i]) pool.raw[i] = values[i];
    }
    return pool;
  }
  for (int i = 0; i < n; ++i) {
    if (!feasible[i]) {
      pool.y(i) = -2.0;
      continue;
    }
    pool.raw[i] = values[i];
    pool.y(i) = warp == OutputWarp::error_rate ? warp_objective(values[i])
                                               : values[i];
  }
  return pool;
}

Eigen::MatrixXd quasi_random(int count, int dim, std::uint64_t seed) {
  if (count <= 0) throw ValidationError("bo: candidate count must be positive");
  check_dim(dim);

  // Halton bases: the first `dim` primes.
  std::vector<int> primes;
  primes.reserve(dim);
  for (int c = 2; static_cast<int>(primes.size()) < dim; ++c) {
    bool is_prime = true;
    for (int p : primes) {
      if (p * p > c) break;
      if (c % p == 0) {
        is_prime = false;
        break;
      }
    }
    if (is_prime) primes.push_back(c);
  }

  // One rotation offset per dimension; row i depends only on i, so shorter
  // point sets are prefixes of longer ones under the same seed.
  Rng rng(seed);
  std::vector<double> shift(dim);
  for (int j = 0; j < dim; ++j) shift[j] = rng.uniform();

  Eigen::MatrixXd points(count, dim);
  for (int i = 0; i < count; ++i) {
    for (int j = 0; j < dim; ++j) {
      double inv = 1.0 / primes[j];
      double fraction = inv;
      double h = 0.0;
      for (std::uint64_t k = static_cast<std::uint64_t>(i) + 1; k != 0;
           k /= primes[j]) {
        h += fraction * static_cast<double>(k % primes[j]);
        fraction *= inv;
      }
      const double v = h + shift[j];
      points(i, j) = v - std::floor(v);
    }
  }
  return points;
}

BoTrace run_hyperbo(const OfflinePool& pool, const GPParams& prior,
                    const BoConfig& config) {
  return drive_offline(pool, config, std::nullopt,
                       [&](const BoTrace&, int) { return prior; });
}

BoTrace run_hyperbo_online(const OnlineOracle& oracle, int dim,
                           const GPParams& prior, const BoConfig& config) {
  return drive_online(oracle, dim, config, std::nullopt,
                      [&](const BoTrace&, int) { return prior; });
}

BoTrace run_random(const OfflinePool& pool, const BoConfig& config) {
  check_pool(pool);
  check_iterations(config);
  Rng rng(derive_seed(config.seed, {label_hash("random")}));
  BoTrace trace;
  for (int t = 0; t < config.iterations; ++t)
    append_offline_step(trace, pool,
                        static_cast<int>(rng.uniform_index(pool.size())));
  fill_regret(trace, pool.max_value());
  return trace;
}

BoTrace run_random_online(const OnlineOracle& oracle, int dim,
                          const BoConfig& config) {
  check_dim(dim);
  check_iterations(config);
  Rng rng(derive_seed(config.seed, {label_hash("random")}));
  BoTrace trace;
  Eigen::RowVectorXd x(dim);
  for (int t = 0; t < config.iterations; ++t) {
    for (int j = 0; j < dim; ++j) x(j) = rng.uniform();
    append_online_step(trace, oracle, x);
  }
  return trace;
}

BoTrace run_stbo(const OfflinePool& pool, const BoConfig& config) {
  const int dim = static_cast<int>(pool.x.cols());
  GPParams params =
      init_params({MeanKind::constant, KernelKind::matern32}, dim,
                  derive_seed(config.seed, {label_hash("stbo-init")}));
  return drive_offline(pool, config,
                       derive_seed(config.seed, {label_hash("stbo-start")}),
                       [&params, dim, &config](const BoTrace& trace, int t) {
                         params = stbo_refit(trace, dim, config, t, params);
                         return params;
                       });
}

BoTrace run_stbo_online(const OnlineOracle& oracle, int dim,
                        const BoConfig& config) {
  GPParams params =
      init_params({MeanKind::constant, KernelKind::matern32}, dim,
                  derive_seed(config.seed, {label_hash("stbo-init")}));
  return drive_online(oracle, dim, config,
                      derive_seed(config.seed, {label_hash("stbo-start")}),
                      [&params, dim, &config](const BoTrace& trace, int t) {
                        params = stbo_refit(trace, dim, config, t, params);
                        return params;
                      });
}

BoTrace run_stboh(const OfflinePool& pool, const BoConfig& config) {
  const int dim = static_cast<int>(pool.x.cols());
  BoConfig forced = config;
  forced.acquisition = parse_acquisition("ucb:1.8");  // part of the hand tuning
  return drive_offline(pool, forced,
                       derive_seed(config.seed, {label_hash("stboh-start")}),
                       [dim](const BoTrace& trace, int) {
                         const Observations obs = gather(trace, dim);
                         return fit_stboh_params(obs.x, obs.y, dim);
                       });
}

BoTrace run_stboh_online(const OnlineOracle& oracle, int dim,
                         const BoConfig& config) {
  BoConfig forced = config;
  forced.acquisition = parse_acquisition("ucb:1.8");
  return drive_online(oracle, dim, forced,
                      derive_seed(config.seed, {label_hash("stboh-start")}),
                      [dim](const BoTrace& trace, int) {
                        const Observations obs = gather(trace, dim);
                        return fit_stboh_params(obs.x, obs.y, dim);
                      });
}

GPParams fit_stboh_params(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                          int dim) {
  check_dim(dim);
  if (x.rows() != y.size() || (x.rows() > 0 && x.cols() != dim))
    throw ValidationError("bo: observation shapes disagree");

  const Structure structure{MeanKind::constant, KernelKind::matern52};
  const int n_params = param_count(structure, dim);
  const int noise_at = n_params - 1;

  // Packed layout: [constant, log amplitude, log length scales..., log noise].
  // The ascent starts at the prior means.
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(n_params);
  theta(1) = -1.0;
  theta(noise_at) = -6.0;

  std::vector<WarpedTask> tasks;
  if (x.rows() > 0) {
    WarpedTask task;
    task.task_id = "trace";
    task.x = x;
    task.y = y;
    task.raw.assign(y.data(), y.data() + y.size());
    tasks.push_back(std::move(task));
  }

  ObjectiveSpec nll_spec;
  nll_spec.kind = ObjectiveSpec::Kind::nll;

  // NLL plus log-parameter priors: amplitude N(-1,1), each length scale
  // N(0,1), noise N(-6,3).
  auto eval = [&](const Eigen::VectorXd& th) -> std::optional<ValueGrad> {
    ValueGrad vg;
    if (tasks.empty()) {
      vg.value = 0.0;
      vg.grad = Eigen::VectorXd::Zero(n_params);
    } else {
      try {
        vg = training_loss(unpack_params(structure, dim, th), tasks, nullptr,
                           nll_spec, DegenerateMode::pseudo_kl);
      } catch (const NumericalError&) {
        return std::nullopt;
      }
    }
    const double la = th(1);
    const double ln = th(noise_at);
    vg.value += 0.5 * (la + 1.0) * (la + 1.0) + (ln + 6.0) * (ln + 6.0) / 18.0;
    vg.grad(1) += la + 1.0;
    vg.grad(noise_at) += (ln + 6.0) / 9.0;
    for (int l = 0; l < dim; ++l) {
      vg.value += 0.5 * th(2 + l) * th(2 + l);
      vg.grad(2 + l) += th(2 + l);
    }
    if (!std::isfinite(vg.value) || !vg.grad.allFinite()) return std::nullopt;
    return vg;
  };

  auto clip = [&](Eigen::VectorXd& th) {
    th(1) = soft_clip(th(1), -1.0 - kBand99, -1.0 + kBand99);
    for (int l = 0; l < dim; ++l)
      th(2 + l) = soft_clip(th(2 + l), -kBand99, kBand99);
    th(noise_at) = soft_clip(th(noise_at), -6.0 - 3.0 * kBand99,
                             -6.0 + 3.0 * kBand99);
  };

  std::optional<ValueGrad> standing = eval(theta);
  if (!standing) return unpack_params(structure, dim, theta);

  AdamOptimizer opt(n_params, 1e-2);
  Eigen::VectorXd best_theta = theta;
  double best_value = standing->value;
  for (int step = 0; step < 100; ++step) {
    Eigen::VectorXd proposal = theta;
    opt.step(proposal, standing->grad);
    clip(proposal);
    std::optional<ValueGrad> next = eval(proposal);
    if (!next) {  // reject: keep the iterate, slow down
      opt.halve_rate();
      continue;
    }
    theta = std::move(proposal);
    standing = std::move(next);
    if (standing->value < best_value) {
      best_value = standing->value;
      best_theta = theta;
    }
  }
  return unpack_params(structure, dim, best_theta);
}

double soft_clip(double v, double low, double high) {
  auto softplus = [](double z) {
    return std::log1p(std::exp(-std::abs(z))) + std::max(z, 0.0);
  };
  // the final clamp only absorbs rounding at the band edges
  return std::clamp(low + softplus(v - low) - softplus(v - high), low, high);
}

MethodKind parse_method(const std::string& text) {
  if (text == "rand") return MethodKind::random_search;
  if (text == "stbo") return MethodKind::stbo;
  if (text == "stboh") return MethodKind::stboh;
  if (text.rfind("h-", 0) == 0) {
    parse_objective(text.substr(2));  // the trailer must name a valid objective
    return MethodKind::hyperbo;
  }
  throw ValidationError("unknown method '" + text + "'");
}

int harness_threads(int n_runs) {
  if (n_runs <= 1) return 1;
  int cap = static_cast<int>(std::thread::hardware_concurrency());
  if (cap < 1) cap = 1;
  if (const char* env = std::getenv("HYPERBO_THREADS")) {
    char* end = nullptr;
    const long parsed = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && parsed >= 1)
      cap = static_cast<int>(std::min<long>(parsed, 1 << 16));
  }
  return std::min(cap, n_runs);
}

void parallel_runs(int n, const std::function<void(int)>& fn) {
  if (n <= 0) return;
  const int workers = harness_threads(n);
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
    });
  for (std::thread& worker : pool) worker.join();
}

}  // namespace hyperbo
