#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "hyperbo/errors.hpp"
#include "hyperbo/gp.hpp"
#include "hyperbo/rng.hpp"

using namespace hyperbo;
using Eigen::MatrixXd;
using Eigen::RowVectorXd;
using Eigen::VectorXd;

namespace {

KernelFn stationary(KernelKind kind, double amplitude, const VectorXd& ls) {
  KernelFn k;
  k.kind = kind;
  k.log_amplitude = std::log(amplitude);
  k.log_length_scales = ls.array().log();
  return k;
}

GPParams simple_gp(KernelKind kind, int d, double amplitude, double ls,
                   double noise_var) {
  GPParams gp;
  gp.mean.kind = MeanKind::constant;
  gp.mean.constant = 0.0;
  gp.kernel = stationary(kind, amplitude, VectorXd::Constant(d, ls));
  gp.log_noise_variance =
      noise_var > 0 ? std::log(noise_var) : -800.0;  // exp(-800) underflows to 0
  return gp;
}

// Brute-force posterior through the joint Gaussian: plain inverses, no
// Cholesky, kept deliberately independent of the library path.
void schur_posterior(const GPParams& gp, const MatrixXd& x, const VectorXd& y,
                     const MatrixXd& xq, VectorXd& mean_out, MatrixXd& cov_out) {
  const int n = int(x.rows());
  const MatrixXd kxx = kernel_gram(gp.kernel, x) +
                       gp.noise_variance() * MatrixXd::Identity(n, n);
  const MatrixXd kqx = kernel_cross(gp.kernel, xq, x);
  const MatrixXd kqq = kernel_gram(gp.kernel, xq);
  const MatrixXd kinv = kxx.inverse();
  mean_out = mean_eval(gp.mean, xq) + kqx * kinv * (y - mean_eval(gp.mean, x));
  cov_out = kqq - kqx * kinv * kqx.transpose();
}

}  // namespace

TEST_CASE("squared exponential reference value") {
  auto k = stationary(KernelKind::squared_exponential, 1.0, VectorXd::Ones(1));
  RowVectorXd a(1), b(1);
  a << 0.0;
  b << 1.0;
  // exp(-0.5 * 1^2)
  CHECK(kernel_eval_pair(k, a, b) == doctest::Approx(0.6065306597126334).epsilon(1e-14));
  CHECK(kernel_eval_pair(k, a, a) == doctest::Approx(1.0));
}

TEST_CASE("matern kernels reference values at r = 1") {
  RowVectorXd a(1), b(1);
  a << 0.25;
  b << 1.25;
  auto m32 = stationary(KernelKind::matern32, 1.0, VectorXd::Ones(1));
  auto m52 = stationary(KernelKind::matern52, 1.0, VectorXd::Ones(1));
  CHECK(kernel_eval_pair(m32, a, b) == doctest::Approx(0.4833577245965077).epsilon(1e-14));
  CHECK(kernel_eval_pair(m52, a, b) == doctest::Approx(0.5239941088318203).epsilon(1e-14));
}

TEST_CASE("ard length scales weight each dimension") {
  VectorXd ls(2);
  ls << 0.5, 2.0;
  auto k = stationary(KernelKind::squared_exponential, 2.0, ls);
  RowVectorXd a(2), b(2);
  a << 0.0, 0.0;
  b << 0.3, 0.4;
  // r^2 = (0.3/0.5)^2 + (0.4/2)^2 = 0.4, value 4 exp(-0.2)
  CHECK(kernel_eval_pair(k, a, b) == doctest::Approx(3.2749230123119273).epsilon(1e-14));
}

TEST_CASE("dot product kernel") {
  KernelFn k;
  k.kind = KernelKind::dot_product;
  k.log_bias_variance = 0.0;    // 1.0
  k.log_weight_variance = 0.0;  // 1.0
  RowVectorXd a(2), b(2);
  a << 1.0, 0.5;
  b << 0.5, 0.0;
  CHECK(kernel_eval_pair(k, a, b) == doctest::Approx(1.5).epsilon(1e-15));
}

TEST_CASE("stationary kernels are translation invariant") {
  Rng rng(7);
  for (auto kind : {KernelKind::squared_exponential, KernelKind::matern32,
                    KernelKind::matern52}) {
    VectorXd ls(3);
    ls << 0.4, 1.1, 0.7;
    auto k = stationary(kind, 1.3, ls);
    for (int i = 0; i < 20; ++i) {
      RowVectorXd a(3), b(3), shift(3);
      for (int j = 0; j < 3; ++j) {
        a(j) = rng.uniform();
        b(j) = rng.uniform();
        shift(j) = rng.uniform(-2.0, 2.0);
      }
      CHECK(kernel_eval_pair(k, a, b) ==
            doctest::Approx(kernel_eval_pair(k, a + shift, b + shift)).epsilon(1e-12));
    }
  }
}

TEST_CASE("mean functions") {
  MeanFn c;
  c.kind = MeanKind::constant;
  c.constant = 1.5;
  MatrixXd x(2, 2);
  x << 0.0, 0.0, 1.0, 2.0;
  CHECK(mean_eval(c, x)(0) == 1.5);
  CHECK(mean_eval(c, x)(1) == 1.5);

  MeanFn lin;
  lin.kind = MeanKind::linear;
  lin.weights = VectorXd(2);
  lin.weights << 0.5, -1.0;
  lin.bias = 0.25;
  auto m = mean_eval(lin, x);
  CHECK(m(0) == doctest::Approx(0.25));
  CHECK(m(1) == doctest::Approx(0.5 - 2.0 + 0.25));
}

TEST_CASE("nll_subdataset frozen values") {
  // single observation, mu = 0, k(x,x) = 1, sigma^2 = 0
  auto gp = simple_gp(KernelKind::squared_exponential, 1, 1.0, 1.0, 0.0);
  MatrixXd x(1, 1);
  x << 0.3;
  VectorXd y(1);
  y << 0.5;
  // 0.5 * 0.25 + 0.5 ln 2pi
  CHECK(nll_subdataset(gp, x, y) == doctest::Approx(1.0439385332046727).epsilon(1e-12));
  y << 0.0;  // y at the mean, unit total variance
  CHECK(nll_subdataset(gp, x, y) == doctest::Approx(0.9189385332046727).epsilon(1e-12));
}

TEST_CASE("nll matches dense determinant evaluation") {
  Rng rng(11);
  auto gp = simple_gp(KernelKind::matern52, 2, 1.2, 0.6, 0.05);
  MatrixXd x(5, 2);
  VectorXd y(5);
  for (int i = 0; i < 5; ++i) {
    x(i, 0) = rng.uniform();
    x(i, 1) = rng.uniform();
    y(i) = rng.normal();
  }
  const MatrixXd k = kernel_gram(gp.kernel, x) +
                     gp.noise_variance() * MatrixXd::Identity(5, 5);
  const VectorXd yb = y - mean_eval(gp.mean, x);
  const double direct = 0.5 * yb.dot(k.inverse() * yb) +
                        0.5 * std::log(k.determinant()) +
                        2.5 * std::log(2.0 * 3.14159265358979323846);
  CHECK(nll_subdataset(gp, x, y) == doctest::Approx(direct).epsilon(1e-10));
}

TEST_CASE("posterior matches brute-force conditioning") {
  Rng rng(3);
  for (auto kind : {KernelKind::squared_exponential, KernelKind::matern32,
                    KernelKind::matern52}) {
    auto gp = simple_gp(kind, 2, 1.0, 0.7, 0.01);
    gp.mean.constant = 0.4;
    MatrixXd x(6, 2), xq(3, 2);
    VectorXd y(6);
    for (int i = 0; i < 6; ++i) {
      x(i, 0) = rng.uniform();
      x(i, 1) = rng.uniform();
      y(i) = rng.normal();
    }
    for (int i = 0; i < 3; ++i) {
      xq(i, 0) = rng.uniform();
      xq(i, 1) = rng.uniform();
    }
    auto [mean, cov] = posterior(gp, x, y, xq);
    VectorXd mean_ref;
    MatrixXd cov_ref;
    schur_posterior(gp, x, y, xq, mean_ref, cov_ref);
    CHECK((mean - mean_ref).cwiseAbs().maxCoeff() < 1e-9);
    CHECK((cov - cov_ref).cwiseAbs().maxCoeff() < 1e-9);
    // posterior covariance stays symmetric
    CHECK((cov - cov.transpose()).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("posterior with empty data reduces to the prior") {
  auto gp = simple_gp(KernelKind::squared_exponential, 1, 1.0, 0.5, 0.01);
  gp.mean.constant = 2.0;
  MatrixXd x(0, 1);
  VectorXd y(0);
  MatrixXd xq(2, 1);
  xq << 0.2, 0.8;
  auto [mean, cov] = posterior(gp, x, y, xq);
  CHECK(mean(0) == doctest::Approx(2.0));
  CHECK(cov(0, 0) == doctest::Approx(1.0));
  CHECK(cov(0, 1) == doctest::Approx(kernel_gram(gp.kernel, xq)(0, 1)));
}

TEST_CASE("noise-free posterior interpolates the data") {
  auto gp = simple_gp(KernelKind::squared_exponential, 1, 1.0, 0.4, 0.0);
  MatrixXd x(3, 1);
  x << 0.1, 0.5, 0.9;
  VectorXd y(3);
  y << -0.3, 0.7, 0.2;
  auto [mean, cov] = posterior(gp, x, y, x);
  for (int i = 0; i < 3; ++i) {
    CHECK(mean(i) == doctest::Approx(y(i)).epsilon(1e-6));
    CHECK(cov(i, i) <= 1e-6);
  }
}

TEST_CASE("posterior rejects dimension mismatch") {
  auto gp = simple_gp(KernelKind::squared_exponential, 2, 1.0, 0.5, 0.01);
  MatrixXd x(2, 2);
  x << 0.0, 0.0, 1.0, 1.0;
  VectorXd y(2);
  y << 0.0, 1.0;
  MatrixXd xq(1, 3);
  xq << 0.1, 0.2, 0.3;
  CHECK_THROWS_AS(posterior(gp, x, y, xq), ValidationError);
}

TEST_CASE("marginals can include observation noise") {
  auto gp = simple_gp(KernelKind::squared_exponential, 1, 1.0, 0.5, 0.04);
  MatrixXd x(2, 1);
  x << 0.2, 0.8;
  VectorXd y(2);
  y << 0.1, -0.1;
  GPPosterior post(gp, x, y);
  MatrixXd xq(1, 1);
  xq << 0.5;
  auto [m0, v_latent] = post.marginals(xq, false);
  auto [m1, v_noisy] = post.marginals(xq, true);
  CHECK(m0(0) == doctest::Approx(m1(0)));
  CHECK(v_noisy(0) == doctest::Approx(v_latent(0) + 0.04).epsilon(1e-12));
}

TEST_CASE("gram matrices factor after the jitter ladder") {
  Rng rng(19);
  // 256 points in d = 8 with a long length scale: plainly rank deficient
  MatrixXd x(256, 8);
  for (int i = 0; i < 256; ++i)
    for (int j = 0; j < 8; ++j) x(i, j) = rng.uniform();
  auto k = stationary(KernelKind::squared_exponential, 1.0, VectorXd::Constant(8, 10.0));
  auto chol = robust_cholesky(kernel_gram(k, x), k.amplitude_sq());
  CHECK(chol.llt.info() == Eigen::Success);
  CHECK(chol.jitter <= 1e-4 * k.amplitude_sq());
}

TEST_CASE("jitter ladder gives up on indefinite matrices") {
  MatrixXd bad(2, 2);
  bad << 1.0, 2.0, 2.0, 1.0;  // eigenvalues 3 and -1
  CHECK_THROWS_AS(robust_cholesky(bad, 1.0), NumericalError);
}

TEST_CASE("memory gp retrieves nearest-anchor moments") {
  MatrixXd anchors(3, 2);
  anchors << 0.0, 0.0, 1.0, 0.0, 0.0, 1.0;
  VectorXd mu(3);
  mu << 10.0, 20.0, 30.0;
  MatrixXd cov(3, 3);
  cov << 1.0, 0.2, 0.1, 0.2, 2.0, 0.3, 0.1, 0.3, 3.0;
  auto gp = build_memory_gp(anchors, mu, cov);

  RowVectorXd q(2);
  q << 0.9, 0.1;  // nearest anchor: (1, 0)
  CHECK(gp.mean_at(q) == 20.0);
  RowVectorXd q2(2);
  q2 << 0.1, 0.8;  // nearest anchor: (0, 1)
  CHECK(gp.cov_at(q, q2) == 0.3);

  RowVectorXd tie(2);
  tie << 0.7, 0.7;  // equidistant from anchors 1 and 2: lowest index wins
  CHECK(gp.nearest(tie) == 1);

  CHECK_THROWS_AS(build_memory_gp(MatrixXd(0, 2), VectorXd(0), MatrixXd(0, 0)),
                  ValidationError);
}

TEST_CASE("gp params serialize and parse") {
  GPParams gp;
  gp.mean.kind = MeanKind::linear;
  gp.mean.weights = VectorXd(2);
  gp.mean.weights << 0.25, -0.5;
  gp.mean.bias = 0.125;
  gp.kernel.kind = KernelKind::matern52;
  gp.kernel.log_amplitude = 0.3;
  gp.kernel.log_length_scales = VectorXd(2);
  gp.kernel.log_length_scales << -1.2, 0.4;
  gp.log_noise_variance = -5.5;
  auto gp2 = parse_gp(serialize_gp(gp));
  CHECK(gp2.mean.kind == MeanKind::linear);
  CHECK(gp2.mean.weights(1) == -0.5);
  CHECK(gp2.kernel.kind == KernelKind::matern52);
  CHECK(gp2.kernel.log_length_scales(0) == -1.2);
  CHECK(gp2.log_noise_variance == -5.5);

  GPParams dot;
  dot.kernel.kind = KernelKind::dot_product;
  dot.kernel.log_bias_variance = 0.7;
  dot.kernel.log_weight_variance = -0.1;
  auto dot2 = parse_gp(serialize_gp(dot));
  CHECK(dot2.kernel.log_bias_variance == 0.7);
  CHECK(dot2.kernel.log_weight_variance == -0.1);
}
