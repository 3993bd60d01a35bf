#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "hyperbo/acquisition.hpp"
#include "hyperbo/errors.hpp"
#include "hyperbo/synth.hpp"

using namespace hyperbo;

namespace {

GPParams truth_se(int dim, double constant = 0.5, double log_amp = 0.0,
                  double log_ls = std::log(0.5), double log_noise = -2.0) {
  GPParams gp;
  gp.mean.kind = MeanKind::constant;
  gp.mean.constant = constant;
  gp.kernel.kind = KernelKind::squared_exponential;
  gp.kernel.log_amplitude = log_amp;
  gp.kernel.log_length_scales = Eigen::VectorXd::Constant(dim, log_ls);
  gp.log_noise_variance = log_noise;
  return gp;
}

SynthConfig small_config() {
  SynthConfig config;
  config.truth = truth_se(2, 0.5, 0.0, std::log(0.5), std::log(0.01));
  config.dim = 2;
  config.n_tasks = 4;
  config.points_per_task = 8;
  config.matched_fraction = 0.5;
  config.seed = 99;
  return config;
}

}  // namespace

TEST_CASE("synth config serialization") {
  SynthConfig config = small_config();
  config.matched_fraction = 0.375;
  config.seed = 0xabcdef0123456789ULL;
  const std::string text = serialize_synth_config(config);
  const SynthConfig back = parse_synth_config(text);
  CHECK(back.dim == config.dim);
  CHECK(back.n_tasks == config.n_tasks);
  CHECK(back.points_per_task == config.points_per_task);
  CHECK(back.matched_fraction == config.matched_fraction);
  CHECK(back.seed == config.seed);
  CHECK(back.truth.mean.constant == config.truth.mean.constant);
  CHECK(back.truth.kernel.log_length_scales == config.truth.kernel.log_length_scales);
  CHECK(back.truth.log_noise_variance == config.truth.log_noise_variance);
  CHECK(serialize_synth_config(back) == text);

  CHECK_THROWS_AS(parse_synth_config("not json"), ValidationError);
  CHECK_THROWS_AS(parse_synth_config("{\"dim\": 2}"), ValidationError);
}

TEST_CASE("task handle") {
  const GPParams truth = truth_se(2);
  Eigen::RowVectorXd a(2), b(2), c(2);
  a << 0.2, 0.8;
  b << 0.7, 0.1;
  c << 0.21, 0.79;

  SUBCASE("same seed gives the same path") {
    TaskHandle h1(truth, 2, 7);
    TaskHandle h2(truth, 2, 7);
    CHECK(h1.latent(a) == h2.latent(a));
    CHECK(h1.latent(b) == h2.latent(b));
    CHECK(h1.observe(c) == h2.observe(c));
    CHECK(h1.stored_points() == 3);
  }

  SUBCASE("different seeds give different paths") {
    TaskHandle h1(truth, 2, 7);
    TaskHandle h2(truth, 2, 8);
    CHECK(h1.latent(a) != h2.latent(a));
  }

  SUBCASE("stored inputs return their stored value exactly") {
    TaskHandle h(truth, 2, 11);
    const double fa = h.latent(a);
    const double fb = h.latent(b);
    CHECK(h.latent(a) == fa);
    h.latent(c);  // extend further
    CHECK(h.latent(a) == fa);
    CHECK(h.latent(b) == fb);
    CHECK(h.stored_points() == 3);
  }

  SUBCASE("zero noise observations equal the latent path") {
    GPParams clean = truth;
    clean.log_noise_variance = -std::numeric_limits<double>::infinity();
    TaskHandle h(clean, 2, 13);
    const double fa = h.latent(a);
    CHECK(h.observe(a) == fa);
    const double fc = h.observe(c);
    CHECK(h.latent(c) == fc);
  }

  SUBCASE("nearby points are strongly correlated") {
    TaskHandle h(truth, 2, 17);
    const double fa = h.latent(a);
    const double fc = h.latent(c);  // 0.014 away under ls 0.5
    CHECK(std::abs(fa - fc) < 0.2);
  }

  SUBCASE("peek is repeatable and pins stored values") {
    TaskHandle h(truth, 2, 19);
    const double fa = h.latent(a);
    const double fb = h.latent(b);
    Eigen::MatrixXd q(3, 2);
    q.row(0) = a;
    q.row(1) = c;
    q.row(2) = b;
    const Eigen::VectorXd s1 = h.peek(q, 0);
    const Eigen::VectorXd s2 = h.peek(q, 0);
    CHECK(s1 == s2);
    CHECK(s1(0) == doctest::Approx(fa).epsilon(1e-8));
    CHECK(s1(2) == doctest::Approx(fb).epsilon(1e-8));
    const Eigen::VectorXd s3 = h.peek(q, 1);
    CHECK(s1 != s3);
    CHECK(h.stored_points() == 2);  // peeking never extends the path
  }

  SUBCASE("tiny amplitude collapses to the mean function") {
    GPParams flat = truth;
    flat.kernel.log_amplitude = -30.0;
    flat.log_noise_variance = -std::numeric_limits<double>::infinity();
    TaskHandle h(flat, 2, 23);
    CHECK(h.latent(a) == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(h.observe(b) == doctest::Approx(0.5).epsilon(1e-9));
  }

  SUBCASE("dimension mismatches are rejected") {
    TaskHandle h(truth, 2, 29);
    Eigen::RowVectorXd wrong(3);
    wrong << 0.1, 0.2, 0.3;
    CHECK_THROWS_AS(h.latent(wrong), ValidationError);
    CHECK_THROWS_AS(TaskHandle(truth, 3, 1), ValidationError);
    CHECK_THROWS_AS(TaskHandle(truth, 0, 1), ValidationError);
  }
}

TEST_CASE("sampled marginals match the truth moments") {
  const GPParams truth = truth_se(2);  // k(x,x) = 1, noise = e^-2
  Eigen::RowVectorXd x(2);
  x << 0.3, 0.7;
  const int n = 2000;
  std::vector<double> draws;
  draws.reserve(n);
  for (int s = 0; s < n; ++s) {
    TaskHandle h(truth, 2, 5000 + s);
    draws.push_back(h.observe(x));
  }
  double mean = 0.0;
  for (double v : draws) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : draws) var += (v - mean) * (v - mean);
  var /= n - 1;

  const double want_var = 1.0 + std::exp(-2.0);
  CHECK(std::abs(mean - 0.5) < 0.1);
  CHECK(var > 0.9 * want_var);
  CHECK(var < 1.1 * want_var);

  SUBCASE("and the distribution is gaussian") {
    const int m = 200;
    std::vector<double> z(draws.begin(), draws.begin() + m);
    for (double& v : z) v = (v - 0.5) / std::sqrt(want_var);
    std::sort(z.begin(), z.end());
    double d = 0.0;
    for (int i = 0; i < m; ++i) {
      const double cdf = norm_cdf(z[i]);
      d = std::max(d, std::abs((i + 1.0) / m - cdf));
      d = std::max(d, std::abs(cdf - i / static_cast<double>(m)));
    }
    CHECK(d < 1.6276 / std::sqrt(static_cast<double>(m)));  // KS, alpha = 0.01
  }
}

TEST_CASE("sample tasks") {
  const SynthConfig config = small_config();
  const SynthResult result = sample_tasks(config);

  SUBCASE("study shape and identity warping") {
    REQUIRE(result.study.tasks.size() == 4);
    REQUIRE(result.handles.size() == 4);
    CHECK(result.study.space.dim() == 2);
    for (const auto& spec : result.study.space.params) {
      CHECK(spec.low == 0.0);
      CHECK(spec.high == 1.0);
      CHECK(spec.scaling == Scaling::linear);
    }
    for (const auto& task : result.study.tasks) {
      REQUIRE(task.trials.size() == 8);
      for (const auto& trial : task.trials) {
        REQUIRE(trial.params.size() == 2);
        CHECK(trial.feasible);
        REQUIRE(trial.objective.has_value());
        for (double v : trial.params) {
          CHECK(v >= 0.0);
          CHECK(v < 1.0);
        }
      }
    }
    CHECK(result.study.tasks[0].task_id != result.study.tasks[1].task_id);
  }

  SUBCASE("matched block is shared verbatim and survives matching at zero tolerance") {
    const int m = 4;  // round(8 * 0.5)
    for (int k = 0; k < m; ++k)
      for (std::size_t i = 1; i < result.study.tasks.size(); ++i)
        CHECK(result.study.tasks[i].trials[k].params ==
              result.study.tasks[0].trials[k].params);

    const MatchingDataset matching =
        extract_matching(result.study, 0.0, OutputWarp::identity);
    CHECK(matching.size() == m);
    CHECK(matching.n_tasks() == 4);
    // cells carry each task's own recorded objective
    for (int j = 0; j < 4; ++j)
      CHECK(matching.values(0, j) == *result.study.tasks[j].trials[0].objective);
  }

  SUBCASE("handles are conditioned on exactly the sampled points") {
    for (int i = 0; i < 4; ++i) {
      CHECK(result.handles[i]->stored_points() == 8);
      // observations sit within noise distance of the stored latents
      const double sd = std::sqrt(config.truth.noise_variance());
      for (int k = 0; k < 8; ++k) {
        const auto& trial = result.study.tasks[i].trials[k];
        Eigen::RowVectorXd x(2);
        x << trial.params[0], trial.params[1];
        const double latent = result.handles[i]->latent(x);
        CHECK(result.handles[i]->stored_points() == 8);  // query hit the store
        CHECK(std::abs(*trial.objective - latent) < 6.0 * sd);
      }
    }
  }

  SUBCASE("deterministic in the seed") {
    const SynthResult again = sample_tasks(config);
    CHECK(serialize_study(again.study) == serialize_study(result.study));
    SynthConfig other = config;
    other.seed = 100;
    CHECK(serialize_study(sample_tasks(other).study) !=
          serialize_study(result.study));
  }

  SUBCASE("rebuilt handles continue the original path") {
    const auto rebuilt = rebuild_handle(config, 2);
    CHECK(rebuilt->stored_points() == 8);
    Eigen::RowVectorXd q1(2), q2(2);
    q1 << 0.11, 0.93;
    q2 << 0.44, 0.37;
    CHECK(rebuilt->latent(q1) == result.handles[2]->latent(q1));
    CHECK(rebuilt->observe(q2) == result.handles[2]->observe(q2));
  }

  SUBCASE("matched fraction edge cases") {
    SynthConfig none = config;
    none.matched_fraction = 0.0;
    CHECK(extract_matching(sample_tasks(none).study, 0.0, OutputWarp::identity)
              .size() == 0);

    SynthConfig all = config;
    all.matched_fraction = 1.0;
    all.n_tasks = 3;
    CHECK(extract_matching(sample_tasks(all).study, 0.0, OutputWarp::identity)
              .size() == all.points_per_task);
  }

  SUBCASE("validation") {
    SynthConfig bad = config;
    bad.matched_fraction = 1.5;
    CHECK_THROWS_AS(sample_tasks(bad), ValidationError);
    bad = config;
    bad.matched_fraction = -0.1;
    CHECK_THROWS_AS(sample_tasks(bad), ValidationError);
    bad = config;
    bad.n_tasks = 0;
    CHECK_THROWS_AS(sample_tasks(bad), ValidationError);
    bad = config;
    bad.points_per_task = 0;
    CHECK_THROWS_AS(sample_tasks(bad), ValidationError);
    bad = config;
    bad.dim = 3;  // truth keeps two length scales
    CHECK_THROWS_AS(sample_tasks(bad), ValidationError);
    CHECK_THROWS_AS(rebuild_handle(config, 4), ValidationError);
    CHECK_THROWS_AS(rebuild_handle(config, -1), ValidationError);
  }
}

TEST_CASE("task max") {
  const GPParams truth = truth_se(1, 0.0, 0.0, std::log(0.3), -4.0);
  TaskHandle handle(truth, 1, 31);
  // pin the path on a coarse grid first so the estimate has something to find
  double best_stored = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < 16; ++i) {
    Eigen::RowVectorXd x(1);
    x << (i + 0.5) / 16.0;
    best_stored = std::max(best_stored, handle.latent(x));
  }

  const double coarse = task_max(handle, 1000);
  const double mid = task_max(handle, 2000);
  const double fine = task_max(handle, 4000);
  CHECK(coarse == task_max(handle, 1000));  // repeatable
  CHECK(mid >= coarse);
  CHECK(fine >= mid);
  // a grid point lands near the best pinned value
  CHECK(fine >= best_stored - 0.1);
  CHECK(fine < best_stored + 4.0);

  CHECK_THROWS_AS(task_max(handle, 999), ValidationError);
  CHECK_THROWS_AS(task_max(handle, 0), ValidationError);
}
