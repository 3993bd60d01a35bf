#include "hyperbo/synth.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "hyperbo/bo.hpp"
#include "hyperbo/errors.hpp"

namespace hyperbo {

namespace {

using ordered_json = nlohmann::ordered_json;

[[noreturn]] void fail(const std::string& msg) { throw ValidationError(msg); }

void validate_truth(const GPParams& truth, int dim) {
  if (dim <= 0) fail("synth: dimension must be positive");
  if (truth.kernel.kind != KernelKind::dot_product &&
      truth.kernel.log_length_scales.size() != dim)
    fail("synth: truth kernel length scales disagree with the dimension");
  if (truth.mean.kind == MeanKind::linear && truth.mean.weights.size() != dim)
    fail("synth: truth mean weights disagree with the dimension");
}

struct Conditional {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

// Moments of f(q) given noiseless pins (xs, fs); with no pins, the prior.
Conditional conditional_moments(const GPParams& truth, const Eigen::MatrixXd& xs,
                                const Eigen::VectorXd& fs,
                                const Eigen::MatrixXd& q) {
  Conditional out;
  out.mean = mean_eval(truth.mean, q);
  out.cov = kernel_gram(truth.kernel, q);
  if (xs.rows() > 0) {
    const RobustCholesky chol =
        robust_cholesky(kernel_gram(truth.kernel, xs), truth.kernel.amplitude_sq());
    const Eigen::MatrixXd cross = kernel_cross(truth.kernel, q, xs);
    out.mean += cross * chol.llt.solve(fs - mean_eval(truth.mean, xs));
    out.cov -= cross * chol.llt.solve(cross.transpose());
  }
  return out;
}

// Joint draw via the eigendecomposition; negative eigenvalues from roundoff
// clamp to zero, which also covers exactly singular covariances.
Eigen::VectorXd sample_gaussian(const Conditional& c, Rng& rng) {
  const int p = static_cast<int>(c.mean.size());
  const Eigen::MatrixXd sym = 0.5 * (c.cov + c.cov.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  if (es.info() != Eigen::Success)
    throw NumericalError("synth: covariance eigendecomposition failed");
  const Eigen::VectorXd scale = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  Eigen::VectorXd z(p);
  for (int i = 0; i < p; ++i) z(i) = rng.normal();
  return c.mean + es.eigenvectors() * (scale.array() * z.array()).matrix();
}

Eigen::MatrixXd draw_uniform(int rows, int dim, std::uint64_t seed) {
  Rng rng(seed);
  Eigen::MatrixXd x(rows, dim);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < dim; ++j) x(i, j) = rng.uniform();
  return x;
}

void validate_config(const SynthConfig& config) {
  validate_truth(config.truth, config.dim);
  if (config.n_tasks < 1) fail("synth: need at least one task");
  if (config.points_per_task < 1) fail("synth: need at least one point per task");
  if (!(config.matched_fraction >= 0.0 && config.matched_fraction <= 1.0))
    fail("synth: matched fraction must lie in [0, 1]");
}

Eigen::MatrixXd matched_block(const SynthConfig& config) {
  const int m = static_cast<int>(
      std::lround(config.matched_fraction * config.points_per_task));
  return draw_uniform(m, config.dim,
                      derive_seed(config.seed, {label_hash("matched")}));
}

}  // namespace

// Joint conditional draws that extend a handle's stored path; construction
// only, so it stays out of the public header.
struct SynthSampler {
  static Eigen::VectorXd extend(TaskHandle& handle, const Eigen::MatrixXd& x) {
    const Conditional c =
        conditional_moments(handle.truth_, handle.x_, handle.f_, x);
    Eigen::VectorXd f = sample_gaussian(c, handle.rng_);
    handle.append(x, f);
    return f;
  }
};

namespace {

struct BuiltTask {
  std::shared_ptr<TaskHandle> handle;
  Eigen::MatrixXd x;
  Eigen::VectorXd y;
};

BuiltTask build_task(const SynthConfig& config, const Eigen::MatrixXd& matched,
                     int index) {
  const std::uint64_t task_seed = derive_seed(
      config.seed, {label_hash("task"), static_cast<std::uint64_t>(index)});
  BuiltTask out;
  out.handle = std::make_shared<TaskHandle>(config.truth, config.dim, task_seed);

  out.x.resize(config.points_per_task, config.dim);
  out.x.topRows(matched.rows()) = matched;
  const Eigen::MatrixXd fresh =
      draw_uniform(config.points_per_task - static_cast<int>(matched.rows()),
                   config.dim, derive_seed(task_seed, {label_hash("inputs")}));
  out.x.bottomRows(fresh.rows()) = fresh;

  const Eigen::VectorXd f = SynthSampler::extend(*out.handle, out.x);
  Rng noise(derive_seed(task_seed, {label_hash("noise")}));
  const double sd = std::sqrt(config.truth.noise_variance());
  out.y.resize(f.size());
  for (int k = 0; k < f.size(); ++k) out.y(k) = f(k) + sd * noise.normal();
  return out;
}

}  // namespace

TaskHandle::TaskHandle(GPParams truth, int dim, std::uint64_t seed)
    : truth_(std::move(truth)),
      dim_(dim),
      x_(0, std::max(dim, 1)),
      f_(0),
      rng_(derive_seed(seed, {label_hash("path")})),
      seed_(seed) {
  validate_truth(truth_, dim_);
}

double TaskHandle::latent(const Eigen::RowVectorXd& x) {
  if (x.size() != dim_) fail("synth: query dimension mismatch");
  for (int i = 0; i < n_; ++i)
    if ((x_.row(i).array() == x.array()).all()) return f_(i);
  const Conditional c = conditional_moments(truth_, x_, f_, x);
  const double sd = std::sqrt(std::max(c.cov(0, 0), 0.0));
  const double f = c.mean(0) + sd * rng_.normal();
  Eigen::VectorXd one(1);
  one(0) = f;
  append(x, one);
  return f;
}

double TaskHandle::observe(const Eigen::RowVectorXd& x) {
  const double f = latent(x);
  return f + std::sqrt(truth_.noise_variance()) * rng_.normal();
}

Eigen::VectorXd TaskHandle::peek(const Eigen::MatrixXd& points,
                                 std::uint64_t stream) const {
  if (points.cols() != dim_) fail("synth: query dimension mismatch");
  if (points.rows() < 1) fail("synth: peek needs at least one point");
  const Conditional c = conditional_moments(truth_, x_, f_, points);
  Rng rng(derive_seed(seed_, {label_hash("peek"), stream}));
  return sample_gaussian(c, rng);
}

void TaskHandle::append(const Eigen::MatrixXd& x, const Eigen::VectorXd& f) {
  x_.conservativeResize(n_ + x.rows(), dim_);
  f_.conservativeResize(n_ + f.size());
  x_.bottomRows(x.rows()) = x;
  f_.tail(f.size()) = f;
  n_ += static_cast<int>(x.rows());
}

std::string serialize_synth_config(const SynthConfig& config) {
  ordered_json j;
  j["truth"] = ordered_json::parse(serialize_gp(config.truth));
  j["dim"] = config.dim;
  j["n_tasks"] = config.n_tasks;
  j["points_per_task"] = config.points_per_task;
  j["matched_fraction"] = config.matched_fraction;
  j["seed"] = config.seed;
  return j.dump(2) + "\n";
}

SynthConfig parse_synth_config(const std::string& json_text) {
  ordered_json j;
  try {
    j = ordered_json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("synth config is not valid JSON: ") + e.what());
  }
  try {
    SynthConfig config;
    config.truth = parse_gp(j.at("truth").dump());
    config.dim = j.at("dim").get<int>();
    config.n_tasks = j.at("n_tasks").get<int>();
    config.points_per_task = j.at("points_per_task").get<int>();
    config.matched_fraction = j.at("matched_fraction").get<double>();
    config.seed = j.at("seed").get<std::uint64_t>();
    return config;
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("synth config does not match the schema: ") + e.what());
  }
}

SynthResult sample_tasks(const SynthConfig& config) {
  validate_config(config);
  const Eigen::MatrixXd matched = matched_block(config);

  SynthResult out;
  out.study.objective_kind = "synthetic";
  for (int j = 0; j < config.dim; ++j)
    out.study.space.params.push_back(
        {"x" + std::to_string(j), 0.0, 1.0, Scaling::linear});

  for (int i = 0; i < config.n_tasks; ++i) {
    BuiltTask built = build_task(config, matched, i);
    SubDataset task;
    task.task_id = "synth-" + std::to_string(i);
    task.trials.reserve(config.points_per_task);
    for (int k = 0; k < config.points_per_task; ++k) {
      Trial trial;
      trial.params.resize(config.dim);
      for (int j = 0; j < config.dim; ++j) trial.params[j] = built.x(k, j);
      trial.objective = built.y(k);
      trial.feasible = true;
      task.trials.push_back(std::move(trial));
    }
    out.study.tasks.push_back(std::move(task));
    out.handles.push_back(std::move(built.handle));
  }
  return out;
}

std::shared_ptr<TaskHandle> rebuild_handle(const SynthConfig& config, int index) {
  validate_config(config);
  if (index < 0 || index >= config.n_tasks)
    fail("synth: task index out of range");
  return build_task(config, matched_block(config), index).handle;
}

double task_max(const TaskHandle& handle, int resolution) {
  if (resolution < 1000)
    fail("synth: task max needs a grid of at least 1000 points");
  constexpr int kChunk = 256;
  const int chunks = (resolution + kChunk - 1) / kChunk;
  const Eigen::MatrixXd grid = quasi_random(
      chunks * kChunk, handle.dim(), derive_seed(0, {label_hash("task-max-grid")}));
  double best = -std::numeric_limits<double>::infinity();
  for (int c = 0; c < chunks; ++c) {
    const Eigen::VectorXd sample =
        handle.peek(grid.middleRows(c * kChunk, kChunk),
                    static_cast<std::uint64_t>(c));
    best = std::max(best, sample.maxCoeff());
  }
  return best;
}

}  // namespace hyperbo
