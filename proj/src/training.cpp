#include "hyperbo/training.hpp"

#include <cmath>
#include <json.hpp>
#include <optional>

#include "hyperbo/errors.hpp"
#include "hyperbo/rng.hpp"

namespace hyperbo {

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kSqrt3 = 1.7320508075688772935;
constexpr double kSqrt5 = 2.2360679774997896964;

[[noreturn]] void fail(const std::string& msg) { throw ValidationError(msg); }

int mean_count(MeanKind kind, int dim) {
  return kind == MeanKind::constant ? 1 : dim + 1;
}

int kernel_count(KernelKind kind, int dim) {
  return kind == KernelKind::dot_product ? 2 : dim + 1;
}

// d(mean)/d(mean params) contracted with a sensitivity vector, accumulated
// into the mean block at the start of grad.
void add_mean_grad(MeanKind kind, const Eigen::MatrixXd& x,
                   const Eigen::VectorXd& dmu, Eigen::VectorXd& grad) {
  if (kind == MeanKind::constant) {
    grad[0] += dmu.sum();
    return;
  }
  const int d = static_cast<int>(x.cols());
  for (int l = 0; l < d; ++l) grad[l] += dmu.dot(x.col(l));
  grad[d] += dmu.sum();
}

// d(loss)/d(kernel params and log noise) given the sensitivity matrix W with
// dLoss = sum(W .* dK); K here is the gram matrix plus the noise diagonal.
void add_kernel_and_noise_grad(const GPParams& gp, const Eigen::MatrixXd& x,
                               const Eigen::MatrixXd& w, int offset,
                               Eigen::VectorXd& grad) {
  const KernelFn& k = gp.kernel;
  const int n = static_cast<int>(x.rows());
  if (k.kind == KernelKind::dot_product) {
    const double bv = std::exp(k.log_bias_variance);
    const double wv = std::exp(k.log_weight_variance);
    grad[offset] += bv * w.sum();
    grad[offset + 1] += wv * (w.array() * (x * x.transpose()).array()).sum();
  } else {
    const double a2 = std::exp(2.0 * k.log_amplitude);
    const Eigen::MatrixXd latent = kernel_gram(k, x);
    grad[offset] += 2.0 * (w.array() * latent.array()).sum();

    const int d = static_cast<int>(x.cols());
    Eigen::MatrixXd sum_sq = Eigen::MatrixXd::Zero(n, n);
    std::vector<Eigen::MatrixXd> scaled_sq(d);
    for (int l = 0; l < d; ++l) {
      const Eigen::VectorXd c = x.col(l) * std::exp(-k.log_length_scales[l]);
      scaled_sq[l] =
          (c.replicate(1, n) - c.transpose().replicate(n, 1)).array().square();
      sum_sq += scaled_sq[l];
    }
    // Per length scale: dK/dlog ls_l = factor .* scaled_sq_l.
    Eigen::ArrayXXd factor;
    switch (k.kind) {
      case KernelKind::squared_exponential:
        factor = latent.array();
        break;
      case KernelKind::matern32: {
        const Eigen::ArrayXXd r = sum_sq.array().sqrt();
        factor = 3.0 * a2 * (-kSqrt3 * r).exp();
        break;
      }
      case KernelKind::matern52: {
        const Eigen::ArrayXXd r = sum_sq.array().sqrt();
        factor = (5.0 / 3.0) * a2 * (1.0 + kSqrt5 * r) * (-kSqrt5 * r).exp();
        break;
      }
      case KernelKind::dot_product:
        break;  // handled above
    }
    for (int l = 0; l < d; ++l)
      grad[offset + 1 + l] += (w.array() * factor * scaled_sq[l].array()).sum();
  }
  grad[grad.size() - 1] += gp.noise_variance() * w.trace();
}

// Summed task NLL with its gradient over the packed parameters.
ValueGrad nll_value_grad(const GPParams& gp, const Structure& s,
                         const std::vector<WarpedTask>& tasks) {
  if (tasks.empty()) fail("nll objective needs at least one task");
  const int dim = static_cast<int>(tasks.front().x.cols());
  ValueGrad out;
  out.grad = Eigen::VectorXd::Zero(param_count(s, dim));
  for (const WarpedTask& task : tasks) {
    const int n = static_cast<int>(task.x.rows());
    Eigen::MatrixXd kmat = kernel_gram(gp.kernel, task.x);
    kmat.diagonal().array() += gp.noise_variance();
    auto chol = robust_cholesky(kmat, gp.kernel.amplitude_sq());
    const Eigen::VectorXd centered = task.y - mean_eval(gp.mean, task.x);
    const Eigen::VectorXd alpha = chol.llt.solve(centered);
    double log_det = 0.0;
    for (int i = 0; i < n; ++i)
      log_det += 2.0 * std::log(chol.llt.matrixLLT()(i, i));
    out.value += 0.5 * centered.dot(alpha) + 0.5 * log_det + 0.5 * n * kLog2Pi;

    const Eigen::MatrixXd kinv = chol.llt.solve(Eigen::MatrixXd::Identity(n, n));
    Eigen::MatrixXd w = 0.5 * (kinv - alpha * alpha.transpose());
    w = (0.5 * (w + w.transpose())).eval();
    add_mean_grad(s.mean, task.x, -alpha, out.grad);
    add_kernel_and_noise_grad(gp, task.x, w, mean_count(s.mean, dim), out.grad);
  }
  return out;
}

// Constant-free divergence target tr(K^-1 K~) + quad + ln|K| with gradient;
// the full divergence is half of this plus an estimate-only constant.
ValueGrad kl_target_value_grad(const GPParams& gp, const Structure& s,
                               const MomentEstimates& est, DegenerateMode mode) {
  const int m = static_cast<int>(est.inputs.rows());
  if (m == 0) fail("divergence target needs matching data");
  const int dim = static_cast<int>(est.inputs.cols());

  Eigen::MatrixXd kmat = kernel_gram(gp.kernel, est.inputs);
  kmat.diagonal().array() += gp.noise_variance();
  Eigen::MatrixXd k_tilde = est.k_tilde;
  if (mode == DegenerateMode::epsilon_jitter && est.rank < m) {
    kmat.diagonal().array() += kEpsilonJitter;
    k_tilde.diagonal().array() += kEpsilonJitter;
  }
  const double scale = std::max(kmat.diagonal().maxCoeff(), 1e-300);
  auto chol = robust_cholesky(kmat, scale);

  const Eigen::VectorXd diff = mean_eval(gp.mean, est.inputs) - est.mu_tilde;
  const Eigen::VectorXd slack = chol.llt.solve(diff);
  const Eigen::MatrixXd kinv = chol.llt.solve(Eigen::MatrixXd::Identity(m, m));
  const Eigen::MatrixXd kinv_kt = chol.llt.solve(k_tilde);
  double log_det = 0.0;
  for (int i = 0; i < m; ++i)
    log_det += 2.0 * std::log(chol.llt.matrixLLT()(i, i));

  ValueGrad out;
  out.value = kinv_kt.trace() + diff.dot(slack) + log_det;
  out.grad = Eigen::VectorXd::Zero(param_count(s, dim));

  Eigen::MatrixXd w = kinv - kinv_kt * kinv - slack * slack.transpose();
  w = (0.5 * (w + w.transpose())).eval();
  add_mean_grad(s.mean, est.inputs, 2.0 * slack, out.grad);
  add_kernel_and_noise_grad(gp, est.inputs, w, mean_count(s.mean, dim), out.grad);
  return out;
}

Structure structure_of(const GPParams& gp) {
  return Structure{gp.mean.kind, gp.kernel.kind};
}

int dim_of(const std::vector<WarpedTask>& tasks, const MomentEstimates* est) {
  if (!tasks.empty()) return static_cast<int>(tasks.front().x.cols());
  if (est && est->inputs.rows() > 0) return static_cast<int>(est->inputs.cols());
  fail("cannot infer the input dimension without tasks or matching data");
}

void require_est(const MomentEstimates* est, const ObjectiveSpec& objective) {
  const bool needs =
      objective.kind == ObjectiveSpec::Kind::kl ||
      (objective.kind == ObjectiveSpec::Kind::nll_plus_kl && objective.lambda > 0.0);
  if (needs && (est == nullptr || est->inputs.rows() == 0))
    fail("objective '" + objective_name(objective) + "' needs matching data");
}

struct RestartOutcome {
  bool ok = false;
  std::string cause;
  double best_value = std::numeric_limits<double>::infinity();
  Eigen::VectorXd best_theta;
  TrainTrace trace;
};

RestartOutcome run_restart(const Structure& s, int dim,
                           const std::vector<WarpedTask>& tasks,
                           const MomentEstimates* est, const TrainConfig& config,
                           std::uint64_t init_seed, int restart) {
  RestartOutcome out;
  out.trace.structure = s;
  out.trace.restart = restart;

  Eigen::VectorXd theta = pack_params(init_params(s, dim, init_seed));
  AdamOptimizer opt(static_cast<int>(theta.size()), config.learning_rate);

  auto evaluate = [&](const Eigen::VectorXd& th,
                      std::string* cause) -> std::optional<ValueGrad> {
    try {
      ValueGrad vg = training_loss(unpack_params(s, dim, th), tasks, est,
                                   config.objective, config.degenerate_mode);
      if (!std::isfinite(vg.value) || !vg.grad.allFinite()) {
        if (cause) *cause = "non-finite objective or gradient";
        return std::nullopt;
      }
      return vg;
    } catch (const std::exception& e) {
      if (cause) *cause = e.what();
      return std::nullopt;
    }
  };

  std::string cause;
  auto current = evaluate(theta, &cause);
  if (!current) {
    out.cause = "failed at initialization: " + cause;
    return out;
  }

  double best = current->value;
  out.best_theta = theta;
  out.trace.objective.push_back(current->value);
  out.trace.best_so_far.push_back(best);

  for (int step = 0; step < config.steps; ++step) {
    Eigen::VectorXd proposed = theta;
    opt.step(proposed, current->grad);
    auto next = evaluate(proposed, nullptr);
    if (!next) {
      // Reject the step: stay at the last good iterate with a halved rate.
      opt.halve_rate();
      out.trace.objective.push_back(current->value);
      out.trace.best_so_far.push_back(best);
      continue;
    }
    theta = proposed;
    current = next;
    if (current->value < best) {
      best = current->value;
      out.best_theta = theta;
    }
    out.trace.objective.push_back(current->value);
    out.trace.best_so_far.push_back(best);
  }

  out.ok = true;
  out.best_value = best;
  return out;
}

ordered_json structure_to_json(const Structure& s) {
  ordered_json j;
  j["mean"] = mean_name(s.mean);
  j["kernel"] = kernel_name(s.kernel);
  return j;
}

Structure structure_from_json(const ordered_json& j) {
  Structure s;
  s.mean = parse_mean(j.at("mean").get<std::string>());
  s.kernel = parse_kernel(j.at("kernel").get<std::string>());
  return s;
}

}  // namespace

int param_count(const Structure& s, int dim) {
  return mean_count(s.mean, dim) + kernel_count(s.kernel, dim) + 1;
}

Eigen::VectorXd pack_params(const GPParams& gp) {
  const Structure s = structure_of(gp);
  const int dim = s.mean == MeanKind::linear
                      ? static_cast<int>(gp.mean.weights.size())
                      : static_cast<int>(gp.kernel.log_length_scales.size());
  Eigen::VectorXd theta(param_count(s, dim));
  int at = 0;
  if (s.mean == MeanKind::constant) {
    theta[at++] = gp.mean.constant;
  } else {
    for (int l = 0; l < gp.mean.weights.size(); ++l) theta[at++] = gp.mean.weights[l];
    theta[at++] = gp.mean.bias;
  }
  if (s.kernel == KernelKind::dot_product) {
    theta[at++] = gp.kernel.log_bias_variance;
    theta[at++] = gp.kernel.log_weight_variance;
  } else {
    theta[at++] = gp.kernel.log_amplitude;
    for (int l = 0; l < gp.kernel.log_length_scales.size(); ++l)
      theta[at++] = gp.kernel.log_length_scales[l];
  }
  theta[at++] = gp.log_noise_variance;
  return theta;
}

GPParams unpack_params(const Structure& s, int dim, const Eigen::VectorXd& theta) {
  if (theta.size() != param_count(s, dim))
    fail("packed parameter vector has length " + std::to_string(theta.size()) +
         ", expected " + std::to_string(param_count(s, dim)));
  GPParams gp;
  gp.mean.kind = s.mean;
  gp.kernel.kind = s.kernel;
  int at = 0;
  if (s.mean == MeanKind::constant) {
    gp.mean.constant = theta[at++];
  } else {
    gp.mean.weights.resize(dim);
    for (int l = 0; l < dim; ++l) gp.mean.weights[l] = theta[at++];
    gp.mean.bias = theta[at++];
  }
  if (s.kernel == KernelKind::dot_product) {
    gp.kernel.log_bias_variance = theta[at++];
    gp.kernel.log_weight_variance = theta[at++];
  } else {
    gp.kernel.log_amplitude = theta[at++];
    gp.kernel.log_length_scales.resize(dim);
    for (int l = 0; l < dim; ++l) gp.kernel.log_length_scales[l] = theta[at++];
  }
  gp.log_noise_variance = theta[at++];
  return gp;
}

GPParams init_params(const Structure& s, int dim, std::uint64_t seed) {
  Rng rng(seed);
  GPParams gp;
  gp.mean.kind = s.mean;
  gp.kernel.kind = s.kernel;
  if (s.mean == MeanKind::constant) {
    gp.mean.constant = rng.normal();
  } else {
    gp.mean.weights.resize(dim);
    for (int l = 0; l < dim; ++l) gp.mean.weights[l] = rng.normal(0.0, 0.1);
    gp.mean.bias = rng.normal();
  }
  if (s.kernel == KernelKind::dot_product) {
    gp.kernel.log_bias_variance = rng.normal();
    gp.kernel.log_weight_variance = rng.normal();
  } else {
    gp.kernel.log_amplitude = rng.normal();
    gp.kernel.log_length_scales.resize(dim);
    for (int l = 0; l < dim; ++l) gp.kernel.log_length_scales[l] = rng.normal();
  }
  gp.log_noise_variance = rng.normal(-4.0, 1.0);
  return gp;
}

ValueGrad training_loss(const GPParams& gp, const std::vector<WarpedTask>& tasks,
                        const MomentEstimates* est, const ObjectiveSpec& objective,
                        DegenerateMode mode) {
  const Structure s = structure_of(gp);
  require_est(est, objective);
  switch (objective.kind) {
    case ObjectiveSpec::Kind::nll:
      return nll_value_grad(gp, s, tasks);
    case ObjectiveSpec::Kind::kl:
      return kl_target_value_grad(gp, s, *est, mode);
    case ObjectiveSpec::Kind::nll_plus_kl: {
      ValueGrad nll = nll_value_grad(gp, s, tasks);
      if (objective.lambda == 0.0) return nll;
      ValueGrad target = kl_target_value_grad(gp, s, *est, mode);
      ValueGrad out;
      out.value = nll.value + objective.lambda * divergence_value(*est, gp, mode);
      out.grad = nll.grad + objective.lambda * (0.5 * target.grad).eval();
      return out;
    }
  }
  fail("unreachable objective kind");
}

double objective_value(const GPParams& gp, const std::vector<WarpedTask>& tasks,
                       const MomentEstimates* est, const ObjectiveSpec& objective,
                       DegenerateMode mode) {
  require_est(est, objective);
  switch (objective.kind) {
    case ObjectiveSpec::Kind::nll:
      return multi_task_nll(gp, tasks);
    case ObjectiveSpec::Kind::kl:
      return divergence_value(*est, gp, mode);
    case ObjectiveSpec::Kind::nll_plus_kl:
      if (objective.lambda == 0.0) return multi_task_nll(gp, tasks);
      return combined_objective(gp, tasks, *est, objective.lambda, mode);
  }
  fail("unreachable objective kind");
}

Eigen::VectorXd objective_gradient(const GPParams& gp,
                                   const std::vector<WarpedTask>& tasks,
                                   const MomentEstimates* est,
                                   const ObjectiveSpec& objective,
                                   DegenerateMode mode) {
  const Structure s = structure_of(gp);
  require_est(est, objective);
  switch (objective.kind) {
    case ObjectiveSpec::Kind::nll:
      return nll_value_grad(gp, s, tasks).grad;
    case ObjectiveSpec::Kind::kl:
      return (0.5 * kl_target_value_grad(gp, s, *est, mode).grad).eval();
    case ObjectiveSpec::Kind::nll_plus_kl: {
      Eigen::VectorXd nll = nll_value_grad(gp, s, tasks).grad;
      if (objective.lambda == 0.0) return nll;
      Eigen::VectorXd kl = 0.5 * kl_target_value_grad(gp, s, *est, mode).grad;
      return (nll + objective.lambda * kl).eval();
    }
  }
  fail("unreachable objective kind");
}

double objective_value(const GPParams& gp, const TuningDataset& dataset,
                       const MatchingDataset& matching, const ObjectiveSpec& objective,
                       const TrainConfig& config) {
  const auto tasks = warp_tasks(dataset, config.output_warp);
  if (matching.size() > 0 && matching.n_tasks() >= 2) {
    const auto est = moment_estimates(matching, config.unbiased_moments);
    return objective_value(gp, tasks, &est, objective, config.degenerate_mode);
  }
  return objective_value(gp, tasks, nullptr, objective, config.degenerate_mode);
}

Eigen::VectorXd objective_gradient(const GPParams& gp, const TuningDataset& dataset,
                                   const MatchingDataset& matching,
                                   const ObjectiveSpec& objective,
                                   const TrainConfig& config) {
  const auto tasks = warp_tasks(dataset, config.output_warp);
  if (matching.size() > 0 && matching.n_tasks() >= 2) {
    const auto est = moment_estimates(matching, config.unbiased_moments);
    return objective_gradient(gp, tasks, &est, objective, config.degenerate_mode);
  }
  return objective_gradient(gp, tasks, nullptr, objective, config.degenerate_mode);
}

AdamOptimizer::AdamOptimizer(int n, double learning_rate)
    : lr_(learning_rate),
      m_(Eigen::VectorXd::Zero(n)),
      v_(Eigen::VectorXd::Zero(n)) {}

void AdamOptimizer::step(Eigen::VectorXd& theta, const Eigen::VectorXd& grad) {
  ++t_;
  m_ = 0.9 * m_ + 0.1 * grad;
  v_ = (0.999 * v_.array() + 0.001 * grad.array().square()).matrix();
  const double bias1 = 1.0 - std::pow(0.9, t_);
  const double bias2 = 1.0 - std::pow(0.999, t_);
  theta.array() -=
      lr_ * (m_.array() / bias1) / ((v_.array() / bias2).sqrt() + 1e-8);
}

TrainResult train_gp_warped(const std::vector<WarpedTask>& tasks,
                            const MomentEstimates* est, const TrainConfig& config) {
  if (config.steps < 1) fail("training needs steps >= 1");
  if (config.restarts < 1) fail("training needs restarts >= 1");
  if (!(config.learning_rate > 0.0)) fail("training needs a positive learning rate");
  if (config.mean_family.empty() || config.kernel_family.empty())
    fail("training needs nonempty mean and kernel families");
  require_est(est, config.objective);
  if (tasks.empty() && config.objective.kind != ObjectiveSpec::Kind::kl)
    fail("objective '" + objective_name(config.objective) + "' needs task data");
  const int dim = dim_of(tasks, est);

  std::vector<Structure> structures;
  for (MeanKind mk : config.mean_family)
    for (KernelKind kk : config.kernel_family) structures.push_back({mk, kk});

  TrainResult result;
  result.objective = config.objective;
  result.n_tasks = static_cast<int>(tasks.size());

  bool any_ok = false;
  double best = std::numeric_limits<double>::infinity();
  std::string causes;
  for (std::size_t si = 0; si < structures.size(); ++si) {
    const Structure& s = structures[si];
    for (int r = 0; r < config.restarts; ++r) {
      const std::uint64_t init_seed = derive_seed(
          config.seed, {static_cast<std::uint64_t>(si), static_cast<std::uint64_t>(r)});
      RestartOutcome out = run_restart(s, dim, tasks, est, config, init_seed, r);
      if (!out.ok) {
        causes += "\n  " + mean_name(s.mean) + "/" + kernel_name(s.kernel) +
                  " restart " + std::to_string(r) + ": " + out.cause;
        continue;
      }
      result.traces.push_back(std::move(out.trace));
      if (out.best_value < best) {
        best = out.best_value;
        result.gp = unpack_params(s, dim, out.best_theta);
        result.structure = s;
      }
      any_ok = true;
    }
  }
  if (!any_ok)
    throw NumericalError("training failed in every restart:" + causes);

  result.final_objective = best;
  result.diag_nll = tasks.empty() ? std::numeric_limits<double>::quiet_NaN()
                                  : multi_task_nll(result.gp, tasks);
  if (est != nullptr && est->inputs.rows() > 0) {
    result.diag_divergence = divergence_value(*est, result.gp, config.degenerate_mode);
    result.diag_divergence_is_pseudo =
        est->rank < static_cast<int>(est->inputs.rows()) &&
        config.degenerate_mode == DegenerateMode::pseudo_kl;
  }
  return result;
}

TrainResult train_gp(const TuningDataset& dataset, const MatchingDataset& matching,
                     const TrainConfig& config) {
  const auto tasks = warp_tasks(dataset, config.output_warp);
  if (matching.size() > 0 && matching.n_tasks() >= 2) {
    const auto est = moment_estimates(matching, config.unbiased_moments);
    return train_gp_warped(tasks, &est, config);
  }
  return train_gp_warped(tasks, nullptr, config);
}

std::string serialize_train_result(const TrainResult& result) {
  ordered_json j;
  j["gp"] = ordered_json::parse(serialize_gp(result.gp));
  j["structure"] = structure_to_json(result.structure);
  j["objective"] = objective_name(result.objective);
  j["final_objective"] = result.final_objective;
  j["n_tasks"] = result.n_tasks;
  ordered_json diag;
  diag["nll"] = std::isnan(result.diag_nll) ? ordered_json(nullptr)
                                            : ordered_json(result.diag_nll);
  diag["divergence"] = std::isnan(result.diag_divergence)
                           ? ordered_json(nullptr)
                           : ordered_json(result.diag_divergence);
  diag["divergence_is_pseudo"] = result.diag_divergence_is_pseudo;
  j["diagnostics"] = diag;
  ordered_json traces = ordered_json::array();
  for (const TrainTrace& t : result.traces) {
    ordered_json tj = structure_to_json(t.structure);
    tj["restart"] = t.restart;
    tj["objective"] = t.objective;
    tj["best_so_far"] = t.best_so_far;
    traces.push_back(tj);
  }
  j["traces"] = traces;
  return j.dump(2) + "\n";
}

TrainResult parse_train_result(const std::string& json_text) {
  ordered_json j;
  try {
    j = ordered_json::parse(json_text);
  } catch (const std::exception& e) {
    fail(std::string("train result is not valid JSON: ") + e.what());
  }
  TrainResult result;
  try {
    result.gp = parse_gp(j.at("gp").dump());
    result.structure = structure_from_json(j.at("structure"));
    result.objective = parse_objective(j.at("objective").get<std::string>());
    result.final_objective = j.at("final_objective").get<double>();
    result.n_tasks = j.at("n_tasks").get<int>();
    const auto& diag = j.at("diagnostics");
    result.diag_nll = diag.at("nll").is_null()
                          ? std::numeric_limits<double>::quiet_NaN()
                          : diag.at("nll").get<double>();
    result.diag_divergence = diag.at("divergence").is_null()
                                 ? std::numeric_limits<double>::quiet_NaN()
                                 : diag.at("divergence").get<double>();
    result.diag_divergence_is_pseudo = diag.at("divergence_is_pseudo").get<bool>();
    for (const auto& tj : j.at("traces")) {
      TrainTrace t;
      t.structure = structure_from_json(tj);
      t.restart = tj.at("restart").get<int>();
      t.objective = tj.at("objective").get<std::vector<double>>();
      t.best_so_far = tj.at("best_so_far").get<std::vector<double>>();
      result.traces.push_back(std::move(t));
    }
  } catch (const ValidationError&) {
    throw;
  } catch (const std::exception& e) {
    fail(std::string("train result JSON is malformed: ") + e.what());
  }
  return result;
}

}  // namespace hyperbo
