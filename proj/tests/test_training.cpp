#include <cmath>
#include <cstring>
#include <limits>
#include <vector>

#include <doctest.h>

#include "hyperbo/errors.hpp"
#include "hyperbo/rng.hpp"
#include "hyperbo/training.hpp"

using namespace hyperbo;

namespace {

std::vector<WarpedTask> make_tasks(int n_tasks, int points, int dim, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {11}));
  std::vector<WarpedTask> tasks(n_tasks);
  for (int i = 0; i < n_tasks; ++i) {
    const int m = points + (i % 2);  // uneven task sizes
    tasks[i].task_id = "task-" + std::to_string(i);
    tasks[i].x.resize(m, dim);
    tasks[i].y.resize(m);
    for (int r = 0; r < m; ++r) {
      for (int c = 0; c < dim; ++c) tasks[i].x(r, c) = rng.uniform();
      tasks[i].y(r) = rng.normal();
    }
    tasks[i].raw.assign(m, 0.0);
  }
  return tasks;
}

MomentEstimates make_moments(int m, int n_tasks, int dim, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {12}));
  MatchingDataset md;
  md.inputs.resize(m, dim);
  md.values.resize(m, n_tasks);
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < dim; ++c) md.inputs(r, c) = rng.uniform();
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < n_tasks; ++c) md.values(r, c) = rng.normal(0.2, 0.8);
  for (int c = 0; c < n_tasks; ++c) md.task_ids.push_back("task-" + std::to_string(c));
  return moment_estimates(md);
}

Eigen::VectorXd fd_gradient(const Structure& s, int dim, const Eigen::VectorXd& theta,
                            const std::vector<WarpedTask>& tasks,
                            const MomentEstimates* est, const ObjectiveSpec& spec,
                            DegenerateMode mode) {
  const double h = 1e-5;
  Eigen::VectorXd g(theta.size());
  for (int i = 0; i < theta.size(); ++i) {
    Eigen::VectorXd up = theta;
    Eigen::VectorXd dn = theta;
    up[i] += h;
    dn[i] -= h;
    const double fu = objective_value(unpack_params(s, dim, up), tasks, est, spec, mode);
    const double fl = objective_value(unpack_params(s, dim, dn), tasks, est, spec, mode);
    g[i] = (fu - fl) / (2.0 * h);
  }
  return g;
}

void check_gradient_close(const Eigen::VectorXd& analytic, const Eigen::VectorXd& fd,
                          double tol) {
  REQUIRE(analytic.size() == fd.size());
  for (int i = 0; i < analytic.size(); ++i) {
    const double scale = std::max({1.0, std::abs(analytic[i]), std::abs(fd[i])});
    CHECK(std::abs(analytic[i] - fd[i]) <= tol * scale);
  }
}

}  // namespace

TEST_CASE("parameter packing round trips") {
  SUBCASE("constant mean, stationary kernel") {
    Structure s{MeanKind::constant, KernelKind::squared_exponential};
    CHECK(param_count(s, 3) == 6);  // c, log_amp, 3 log_ls, log_noise
    GPParams gp = init_params(s, 3, 42);
    Eigen::VectorXd theta = pack_params(gp);
    REQUIRE(theta.size() == 6);
    GPParams back = unpack_params(s, 3, theta);
    CHECK(pack_params(back) == theta);
    CHECK(back.mean.constant == gp.mean.constant);
    CHECK(back.kernel.log_amplitude == gp.kernel.log_amplitude);
    CHECK(back.kernel.log_length_scales == gp.kernel.log_length_scales);
    CHECK(back.log_noise_variance == gp.log_noise_variance);
  }

  SUBCASE("linear mean, dot product kernel") {
    Structure s{MeanKind::linear, KernelKind::dot_product};
    CHECK(param_count(s, 2) == 6);  // w1 w2 b, log_bv, log_wv, log_noise
    GPParams gp = init_params(s, 2, 43);
    Eigen::VectorXd theta = pack_params(gp);
    REQUIRE(theta.size() == 6);
    GPParams back = unpack_params(s, 2, theta);
    CHECK(pack_params(back) == theta);
    CHECK(back.mean.weights == gp.mean.weights);
    CHECK(back.mean.bias == gp.mean.bias);
    CHECK(back.kernel.log_bias_variance == gp.kernel.log_bias_variance);
    CHECK(back.kernel.log_weight_variance == gp.kernel.log_weight_variance);
  }
}

TEST_CASE("initialization stream") {
  Structure s{MeanKind::linear, KernelKind::matern52};
  GPParams a = init_params(s, 4, 7);
  GPParams b = init_params(s, 4, 7);
  CHECK(pack_params(a) == pack_params(b));

  GPParams c = init_params(s, 4, 8);
  CHECK(pack_params(a) != pack_params(c));

  SUBCASE("noise variance always positive and distribution centered") {
    double sum_noise = 0.0, sum_amp = 0.0, sum_w2 = 0.0;
    const int n = 400;
    int n_w = 0;
    for (int k = 0; k < n; ++k) {
      GPParams g = init_params(Structure{MeanKind::linear, KernelKind::squared_exponential},
                               3, 1000 + k);
      CHECK(g.noise_variance() > 0.0);
      sum_noise += g.log_noise_variance;
      sum_amp += g.kernel.log_amplitude;
      for (int j = 0; j < g.mean.weights.size(); ++j) {
        sum_w2 += g.mean.weights[j] * g.mean.weights[j];
        ++n_w;
      }
    }
    CHECK(sum_noise / n == doctest::Approx(-4.0).epsilon(0.1));
    CHECK(std::abs(sum_amp / n) < 0.25);
    // linear weights drawn with sd 0.1
    CHECK(std::sqrt(sum_w2 / n_w) == doctest::Approx(0.1).epsilon(0.2));
  }
}

TEST_CASE("analytic gradients match central finite differences") {
  const int dim = 2;
  auto tasks = make_tasks(2, 3, dim, 99);
  MomentEstimates full = make_moments(3, 6, dim, 17);
  REQUIRE(full.rank == 3);
  MomentEstimates deficient = make_moments(4, 2, dim, 18);
  REQUIRE(deficient.rank < 4);

  const Structure structures[] = {
      {MeanKind::constant, KernelKind::squared_exponential},
      {MeanKind::linear, KernelKind::squared_exponential},
      {MeanKind::constant, KernelKind::matern32},
      {MeanKind::constant, KernelKind::matern52},
      {MeanKind::linear, KernelKind::dot_product},
  };

  for (const Structure& s : structures) {
    CAPTURE(mean_name(s.mean));
    CAPTURE(kernel_name(s.kernel));
    GPParams gp = init_params(s, dim, 1234 + static_cast<int>(s.kernel));
    Eigen::VectorXd theta = pack_params(gp);

    SUBCASE("nll") {
      ObjectiveSpec spec{ObjectiveSpec::Kind::nll, 0.0};
      Eigen::VectorXd g = objective_gradient(gp, tasks, nullptr, spec);
      Eigen::VectorXd fd =
          fd_gradient(s, dim, theta, tasks, nullptr, spec, DegenerateMode::pseudo_kl);
      check_gradient_close(g, fd, 1e-4);
    }

    SUBCASE("kl, full rank estimate") {
      ObjectiveSpec spec{ObjectiveSpec::Kind::kl, 0.0};
      Eigen::VectorXd g = objective_gradient(gp, tasks, &full, spec);
      Eigen::VectorXd fd =
          fd_gradient(s, dim, theta, tasks, &full, spec, DegenerateMode::pseudo_kl);
      check_gradient_close(g, fd, 1e-4);
    }

    SUBCASE("kl, rank deficient estimate") {
      ObjectiveSpec spec{ObjectiveSpec::Kind::kl, 0.0};
      Eigen::VectorXd g = objective_gradient(gp, tasks, &deficient, spec);
      Eigen::VectorXd fd = fd_gradient(s, dim, theta, tasks, &deficient, spec,
                                       DegenerateMode::pseudo_kl);
      check_gradient_close(g, fd, 1e-4);
      Eigen::VectorXd ge = objective_gradient(gp, tasks, &deficient, spec,
                                              DegenerateMode::epsilon_jitter);
      Eigen::VectorXd fde = fd_gradient(s, dim, theta, tasks, &deficient, spec,
                                        DegenerateMode::epsilon_jitter);
      check_gradient_close(ge, fde, 1e-4);
    }

    SUBCASE("combined") {
      ObjectiveSpec spec{ObjectiveSpec::Kind::nll_plus_kl, 10.0};
      Eigen::VectorXd g = objective_gradient(gp, tasks, &full, spec);
      Eigen::VectorXd fd =
          fd_gradient(s, dim, theta, tasks, &full, spec, DegenerateMode::pseudo_kl);
      check_gradient_close(g, fd, 1e-4);
    }
  }
}

TEST_CASE("combined gradient is exactly linear in its parts") {
  const int dim = 2;
  auto tasks = make_tasks(3, 4, dim, 5);
  MomentEstimates est = make_moments(4, 7, dim, 6);
  Structure s{MeanKind::constant, KernelKind::squared_exponential};
  GPParams gp = init_params(s, dim, 21);

  Eigen::VectorXd g_nll =
      objective_gradient(gp, tasks, nullptr, {ObjectiveSpec::Kind::nll, 0.0});
  Eigen::VectorXd g_kl =
      objective_gradient(gp, tasks, &est, {ObjectiveSpec::Kind::kl, 0.0});
  for (double lambda : {0.5, 10.0}) {
    Eigen::VectorXd g_mix = objective_gradient(
        gp, tasks, &est, {ObjectiveSpec::Kind::nll_plus_kl, lambda});
    Eigen::VectorXd expected = g_nll + lambda * g_kl;
    for (int i = 0; i < g_mix.size(); ++i) {
      CHECK(g_mix[i] == doctest::Approx(expected[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("training loss agrees with the declared objectives") {
  const int dim = 2;
  auto tasks = make_tasks(2, 4, dim, 31);
  MomentEstimates est = make_moments(3, 5, dim, 32);
  Structure s{MeanKind::constant, KernelKind::matern52};
  GPParams gp = init_params(s, dim, 77);

  SUBCASE("nll mode is the multi-task nll") {
    ValueGrad vg = training_loss(gp, tasks, nullptr, {ObjectiveSpec::Kind::nll, 0.0},
                                 DegenerateMode::pseudo_kl);
    CHECK(vg.value == doctest::Approx(multi_task_nll(gp, tasks)).epsilon(1e-14));
  }

  SUBCASE("kl mode is the constant-free target with half-scaled gradient") {
    ValueGrad vg = training_loss(gp, tasks, &est, {ObjectiveSpec::Kind::kl, 0.0},
                                 DegenerateMode::pseudo_kl);
    CHECK(vg.value ==
          doctest::Approx(kl_minimization_target(gp, est)).epsilon(1e-14));
    Eigen::VectorXd g_obj =
        objective_gradient(gp, tasks, &est, {ObjectiveSpec::Kind::kl, 0.0});
    for (int i = 0; i < g_obj.size(); ++i) {
      CHECK(g_obj[i] == doctest::Approx(0.5 * vg.grad[i]).epsilon(1e-13));
    }
  }

  SUBCASE("combined mode matches combined_objective") {
    ValueGrad vg = training_loss(gp, tasks, &est, {ObjectiveSpec::Kind::nll_plus_kl, 3.0},
                                 DegenerateMode::pseudo_kl);
    CHECK(vg.value ==
          doctest::Approx(combined_objective(gp, tasks, est, 3.0)).epsilon(1e-13));
  }
}

TEST_CASE("constant mean gradient vanishes at the generalized mean") {
  // Symmetric two-point design: the generalized least squares constant equals
  // the sample mean, where the mean-gradient component must vanish.
  WarpedTask t;
  t.task_id = "sym";
  t.x.resize(2, 1);
  t.x << 0.3, 0.7;
  t.y.resize(2);
  t.y << 1.0, 3.0;
  t.raw = {1.0, 3.0};

  GPParams gp;
  gp.mean.kind = MeanKind::constant;
  gp.mean.constant = 2.0;
  gp.kernel.kind = KernelKind::squared_exponential;
  gp.kernel.log_amplitude = 0.0;
  gp.kernel.log_length_scales = Eigen::VectorXd::Zero(1);
  gp.log_noise_variance = -2.0;

  Eigen::VectorXd g = objective_gradient(gp, {t}, nullptr, {ObjectiveSpec::Kind::nll, 0.0});
  CHECK(std::abs(g[0]) <= 1e-10);
}

TEST_CASE("adam steps") {
  SUBCASE("first step matches the closed form") {
    AdamOptimizer opt(2, 0.1);
    Eigen::VectorXd theta = Eigen::VectorXd::Zero(2);
    Eigen::VectorXd grad(2);
    grad << 1.0, -2.0;
    opt.step(theta, grad);
    // bias-corrected first step: lr * g / (|g| + eps)
    CHECK(theta[0] == doctest::Approx(-0.1 * 1.0 / (1.0 + 1e-8)).epsilon(1e-14));
    CHECK(theta[1] == doctest::Approx(0.1 * 2.0 / (2.0 + 1e-8)).epsilon(1e-14));
  }

  SUBCASE("trajectory matches an independent loop") {
    AdamOptimizer opt(1, 0.05);
    Eigen::VectorXd theta = Eigen::VectorXd::Constant(1, 0.4);
    double m = 0.0, v = 0.0, ref = 0.4;
    for (int t = 1; t <= 5; ++t) {
      const double g = 2.0 * ref;  // d/dx of x^2, evaluated on the reference path
      Eigen::VectorXd grad = Eigen::VectorXd::Constant(1, 2.0 * theta[0]);
      opt.step(theta, grad);
      m = 0.9 * m + 0.1 * g;
      v = 0.999 * v + 0.001 * g * g;
      const double mhat = m / (1.0 - std::pow(0.9, t));
      const double vhat = v / (1.0 - std::pow(0.999, t));
      ref -= 0.05 * mhat / (std::sqrt(vhat) + 1e-8);
      CHECK(theta[0] == doctest::Approx(ref).epsilon(1e-12));
    }
  }

  SUBCASE("rate halving") {
    AdamOptimizer opt(1, 0.1);
    opt.halve_rate();
    CHECK(opt.rate() == doctest::Approx(0.05));
  }
}

TEST_CASE("training is deterministic and improves on initialization") {
  const int dim = 2;
  auto tasks = make_tasks(3, 5, dim, 404);
  TrainConfig config;
  config.objective = {ObjectiveSpec::Kind::nll, 0.0};
  config.steps = 40;
  config.restarts = 2;
  config.seed = 2024;
  config.mean_family = {MeanKind::constant};
  config.kernel_family = {KernelKind::squared_exponential};

  TrainResult r1 = train_gp_warped(tasks, nullptr, config);
  TrainResult r2 = train_gp_warped(tasks, nullptr, config);

  Eigen::VectorXd p1 = pack_params(r1.gp);
  Eigen::VectorXd p2 = pack_params(r2.gp);
  REQUIRE(p1.size() == p2.size());
  CHECK(std::memcmp(p1.data(), p2.data(), sizeof(double) * p1.size()) == 0);
  CHECK(r1.final_objective == r2.final_objective);

  CHECK(r1.n_tasks == 3);
  CHECK(r1.traces.size() == 2);
  double best_seen = std::numeric_limits<double>::infinity();
  double best_init = std::numeric_limits<double>::infinity();
  for (const TrainTrace& trace : r1.traces) {
    REQUIRE(trace.objective.size() == static_cast<size_t>(config.steps) + 1);
    for (size_t i = 1; i < trace.best_so_far.size(); ++i) {
      CHECK(trace.best_so_far[i] <= trace.best_so_far[i - 1]);
    }
    best_seen = std::min(best_seen, trace.best_so_far.back());
    best_init = std::min(best_init, trace.objective.front());
  }
  CHECK(r1.final_objective == doctest::Approx(best_seen).epsilon(1e-14));
  CHECK(r1.final_objective <= best_init);
  CHECK(r1.diag_nll == doctest::Approx(multi_task_nll(r1.gp, tasks)).epsilon(1e-13));
  CHECK(std::isnan(r1.diag_divergence));
}

TEST_CASE("divergence training lowers the full divergence") {
  // Matching values drawn from a smooth function family so the empirical
  // covariance is far from any random initialization.
  const int dim = 2;
  const int m = 6, n = 24;
  Rng rng(909);
  MatchingDataset md;
  md.inputs.resize(m, dim);
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < dim; ++c) md.inputs(r, c) = rng.uniform();
  md.values.resize(m, n);
  for (int j = 0; j < n; ++j) {
    const double a = rng.normal(0.0, 1.0), b = rng.normal(0.0, 1.0);
    for (int r = 0; r < m; ++r) {
      md.values(r, j) = a * std::sin(3.0 * md.inputs(r, 0)) +
                        b * std::cos(2.0 * md.inputs(r, 1)) + 0.05 * rng.normal();
    }
    md.task_ids.push_back("t" + std::to_string(j));
  }
  MomentEstimates est = moment_estimates(md);
  REQUIRE(est.rank == m);

  std::vector<WarpedTask> tasks;  // divergence-only training reads the moments
  TrainConfig config;
  config.objective = {ObjectiveSpec::Kind::kl, 0.0};
  config.steps = 80;
  config.restarts = 2;
  config.seed = 99;
  config.mean_family = {MeanKind::constant};
  config.kernel_family = {KernelKind::squared_exponential};

  TrainResult r = train_gp_warped(tasks, &est, config);
  CHECK(std::isfinite(r.diag_divergence));
  CHECK(r.diag_divergence ==
        doctest::Approx(divergence_value(est, r.gp, DegenerateMode::pseudo_kl))
            .epsilon(1e-12));
  CHECK_FALSE(r.diag_divergence_is_pseudo);
  for (const TrainTrace& trace : r.traces) {
    CHECK(trace.best_so_far.back() < trace.objective.front());
  }
  // The target and the full divergence differ by an estimate-only constant,
  // so improvement transfers one-to-one.
  CHECK(r.final_objective < r.traces.front().objective.front());
}

TEST_CASE("structure grid is exhaustive") {
  const int dim = 2;
  auto tasks = make_tasks(2, 4, dim, 55);
  TrainConfig config;
  config.objective = {ObjectiveSpec::Kind::nll, 0.0};
  config.steps = 5;
  config.restarts = 2;
  config.seed = 3;
  config.mean_family = {MeanKind::constant, MeanKind::linear};
  config.kernel_family = {KernelKind::squared_exponential, KernelKind::dot_product};

  TrainResult r = train_gp_warped(tasks, nullptr, config);
  CHECK(r.traces.size() == 8);
  int per_structure[2][2] = {{0, 0}, {0, 0}};
  for (const TrainTrace& trace : r.traces) {
    const int mi = trace.structure.mean == MeanKind::constant ? 0 : 1;
    const int ki = trace.structure.kernel == KernelKind::squared_exponential ? 0 : 1;
    per_structure[mi][ki] += 1;
    CHECK((trace.restart == 0 || trace.restart == 1));
  }
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b) CHECK(per_structure[a][b] == 2);
}

TEST_CASE("train result serialization round trips") {
  const int dim = 2;
  auto tasks = make_tasks(2, 3, dim, 66);
  TrainConfig config;
  config.objective = {ObjectiveSpec::Kind::nll, 0.0};
  config.steps = 4;
  config.restarts = 1;
  config.seed = 10;
  config.mean_family = {MeanKind::linear};
  config.kernel_family = {KernelKind::matern52};

  TrainResult r = train_gp_warped(tasks, nullptr, config);
  const std::string text = serialize_train_result(r);
  TrainResult back = parse_train_result(text);

  CHECK(pack_params(back.gp) == pack_params(r.gp));
  CHECK(back.structure.mean == r.structure.mean);
  CHECK(back.structure.kernel == r.structure.kernel);
  CHECK(back.final_objective == r.final_objective);
  CHECK(back.n_tasks == r.n_tasks);
  CHECK(back.diag_nll == r.diag_nll);
  CHECK((std::isnan(back.diag_divergence) && std::isnan(r.diag_divergence)));
  CHECK(objective_name(back.objective) == objective_name(r.objective));
  REQUIRE(back.traces.size() == r.traces.size());
  CHECK(back.traces[0].objective == r.traces[0].objective);
  CHECK(back.traces[0].best_so_far == r.traces[0].best_so_far);
  CHECK(serialize_train_result(back) == text);
}

TEST_CASE("step rejection keeps divergent rates finite") {
  const int dim = 1;
  auto tasks = make_tasks(2, 4, dim, 51);
  TrainConfig config;
  config.objective = {ObjectiveSpec::Kind::nll, 0.0};
  config.steps = 30;
  config.restarts = 1;
  config.seed = 5;
  config.learning_rate = 1e6;
  config.mean_family = {MeanKind::constant};
  config.kernel_family = {KernelKind::squared_exponential};

  TrainResult r = train_gp_warped(tasks, nullptr, config);
  CHECK(std::isfinite(r.final_objective));
  for (const TrainTrace& trace : r.traces) {
    CHECK(std::isfinite(trace.best_so_far.back()));
  }
}

TEST_CASE("unusable data fails with per-restart causes") {
  WarpedTask t;
  t.task_id = "broken";
  t.x.resize(2, 1);
  t.x << 0.1, 0.9;
  t.y.resize(2);
  t.y << std::numeric_limits<double>::infinity(), 1.0;
  t.raw = {0.0, 1.0};

  TrainConfig config;
  config.objective = {ObjectiveSpec::Kind::nll, 0.0};
  config.steps = 3;
  config.restarts = 2;
  config.mean_family = {MeanKind::constant};
  config.kernel_family = {KernelKind::squared_exponential};

  CHECK_THROWS_AS(train_gp_warped({t}, nullptr, config), NumericalError);
}

TEST_CASE("training from a study applies warping and matching extraction") {
  TuningDataset ds;
  ds.space.params = {{"a", 0.0, 1.0, Scaling::linear}, {"b", 0.0, 1.0, Scaling::linear}};
  Rng rng(777);
  for (int task = 0; task < 2; ++task) {
    SubDataset sub;
    sub.task_id = "task-" + std::to_string(task);
    for (int i = 0; i < 3; ++i) {  // shared matched block
      Trial tr;
      tr.params = {0.1 + 0.3 * i, 0.2 + 0.2 * i};
      tr.objective = rng.normal(0.5, 0.2);
      tr.feasible = true;
      sub.trials.push_back(tr);
    }
    for (int i = 0; i < 3; ++i) {
      Trial tr;
      tr.params = {rng.uniform(), rng.uniform()};
      tr.objective = rng.normal(0.5, 0.2);
      tr.feasible = true;
      sub.trials.push_back(tr);
    }
    ds.tasks.push_back(sub);
  }

  MatchingDataset matching = extract_matching(ds);
  REQUIRE(matching.size() == 3);
  REQUIRE(matching.n_tasks() == 2);

  TrainConfig config;
  config.objective = {ObjectiveSpec::Kind::nll_plus_kl, 1.0};
  config.steps = 10;
  config.restarts = 1;
  config.seed = 1;
  config.mean_family = {MeanKind::constant};
  config.kernel_family = {KernelKind::squared_exponential};

  TrainResult r = train_gp(ds, matching, config);
  CHECK(r.n_tasks == 2);
  CHECK(std::isfinite(r.final_objective));
  CHECK(std::isfinite(r.diag_nll));
  CHECK(std::isfinite(r.diag_divergence));
  // two tasks of matching data give a rank-1 estimate
  CHECK(r.diag_divergence_is_pseudo);
}
