#include "hyperbo/gp.hpp"

#include <json.hpp>

#include <cmath>
#include <limits>

#include "hyperbo/errors.hpp"

namespace hyperbo {

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kSqrt3 = 1.7320508075688772935;
constexpr double kSqrt5 = 2.2360679774997896964;

[[noreturn]] void fail(const std::string& msg) { throw ValidationError(msg); }

}  // namespace

Eigen::VectorXd mean_eval(const MeanFn& mean, const Eigen::MatrixXd& x) {
  if (mean.kind == MeanKind::constant)
    return Eigen::VectorXd::Constant(x.rows(), mean.constant);
  if (mean.weights.size() != x.cols())
    fail("linear mean has " + std::to_string(mean.weights.size()) +
         " weights for " + std::to_string(x.cols()) + " input dimensions");
  return (x * mean.weights).array() + mean.bias;
}

std::string mean_name(MeanKind kind) {
  return kind == MeanKind::constant ? "constant" : "linear";
}

std::string kernel_name(KernelKind kind) {
  switch (kind) {
    case KernelKind::squared_exponential: return "se";
    case KernelKind::matern32: return "matern32";
    case KernelKind::matern52: return "matern52";
    case KernelKind::dot_product: return "dot_product";
  }
  return "se";
}

MeanKind parse_mean(const std::string& text) {
  if (text == "constant") return MeanKind::constant;
  if (text == "linear") return MeanKind::linear;
  fail("unknown mean function '" + text + "'");
}

KernelKind parse_kernel(const std::string& text) {
  if (text == "se" || text == "squared_exponential")
    return KernelKind::squared_exponential;
  if (text == "matern32" || text == "m32") return KernelKind::matern32;
  if (text == "matern52" || text == "m52") return KernelKind::matern52;
  if (text == "dot_product" || text == "dot") return KernelKind::dot_product;
  fail("unknown kernel '" + text + "'");
}

double KernelFn::amplitude_sq() const {
  if (kind == KernelKind::dot_product)
    return std::exp(log_bias_variance) + std::exp(log_weight_variance);
  return std::exp(2.0 * log_amplitude);
}

namespace {

// Squared length-scale-weighted distance between two rows.
double scaled_sqdist(const KernelFn& k, const Eigen::RowVectorXd& a,
                     const Eigen::RowVectorXd& b) {
  double r2 = 0.0;
  for (int j = 0; j < a.size(); ++j) {
    const double d = (a(j) - b(j)) / std::exp(k.log_length_scales(j));
    r2 += d * d;
  }
  return r2;
}

double stationary_value(const KernelFn& k, double r2) {
  const double a2 = std::exp(2.0 * k.log_amplitude);
  switch (k.kind) {
    case KernelKind::squared_exponential:
      return a2 * std::exp(-0.5 * r2);
    case KernelKind::matern32: {
      const double r = std::sqrt(r2);
      return a2 * (1.0 + kSqrt3 * r) * std::exp(-kSqrt3 * r);
    }
    case KernelKind::matern52: {
      const double r = std::sqrt(r2);
      return a2 * (1.0 + kSqrt5 * r + 5.0 * r2 / 3.0) * std::exp(-kSqrt5 * r);
    }
    default:
      fail("stationary_value called for a non-stationary kernel");
  }
}

void check_kernel_dims(const KernelFn& k, int d) {
  if (k.kind != KernelKind::dot_product && k.log_length_scales.size() != d)
    fail("kernel has " + std::to_string(k.log_length_scales.size()) +
         " length scales for " + std::to_string(d) + " input dimensions");
}

}  // namespace

double kernel_eval_pair(const KernelFn& k, const Eigen::RowVectorXd& a,
                        const Eigen::RowVectorXd& b) {
  if (a.size() != b.size()) fail("kernel arguments differ in dimension");
  if (k.kind == KernelKind::dot_product)
    return std::exp(k.log_bias_variance) +
           std::exp(k.log_weight_variance) * a.dot(b);
  check_kernel_dims(k, static_cast<int>(a.size()));
  return stationary_value(k, scaled_sqdist(k, a, b));
}

Eigen::MatrixXd kernel_cross(const KernelFn& k, const Eigen::MatrixXd& a,
                             const Eigen::MatrixXd& b) {
  if (a.cols() != b.cols()) fail("kernel arguments differ in dimension");
  if (k.kind == KernelKind::dot_product) {
    const double sb = std::exp(k.log_bias_variance);
    const double sv = std::exp(k.log_weight_variance);
    return (sv * (a * b.transpose())).array() + sb;
  }
  check_kernel_dims(k, static_cast<int>(a.cols()));
  Eigen::MatrixXd out(a.rows(), b.rows());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < b.rows(); ++j)
      out(i, j) = stationary_value(k, scaled_sqdist(k, a.row(i), b.row(j)));
  return out;
}

Eigen::MatrixXd kernel_gram(const KernelFn& k, const Eigen::MatrixXd& x) {
  if (k.kind == KernelKind::dot_product) {
    const double sb = std::exp(k.log_bias_variance);
    const double sv = std::exp(k.log_weight_variance);
    Eigen::MatrixXd out = (sv * (x * x.transpose())).array() + sb;
    return (out + out.transpose()) / 2.0;
  }
  check_kernel_dims(k, static_cast<int>(x.cols()));
  const int n = static_cast<int>(x.rows());
  Eigen::MatrixXd out(n, n);
  for (int i = 0; i < n; ++i) {
    out(i, i) = stationary_value(k, 0.0);
    for (int j = i + 1; j < n; ++j) {
      out(i, j) = stationary_value(k, scaled_sqdist(k, x.row(i), x.row(j)));
      out(j, i) = out(i, j);
    }
  }
  return out;
}

RobustCholesky robust_cholesky(const Eigen::MatrixXd& k, double scale) {
  if (k.rows() != k.cols()) fail("robust_cholesky needs a square matrix");
  RobustCholesky result;
  result.llt.compute(k);
  if (result.llt.info() == Eigen::Success) {
    result.jitter = 0.0;
    return result;
  }
  // 1e-10 * scale up to 1e-4 * scale, one decade per rung
  for (double rung = 1e-10; rung <= 1.000001e-4; rung *= 10.0) {
    const double jitter = rung * scale;
    result.llt.compute(k + jitter * Eigen::MatrixXd::Identity(k.rows(), k.cols()));
    if (result.llt.info() == Eigen::Success) {
      result.jitter = jitter;
      return result;
    }
  }
  throw NumericalError(
      "Cholesky factorization failed after the full jitter ladder (scale " +
      std::to_string(scale) + ")");
}

GPPosterior::GPPosterior(GPParams prior, Eigen::MatrixXd x, Eigen::VectorXd y)
    : prior_(std::move(prior)), x_(std::move(x)), y_(std::move(y)) {
  if (x_.rows() != y_.size())
    fail("posterior data: " + std::to_string(x_.rows()) + " inputs vs " +
         std::to_string(y_.size()) + " observations");
  if (n() == 0) return;
  Eigen::MatrixXd k = kernel_gram(prior_.kernel, x_);
  k.diagonal().array() += prior_.noise_variance();
  llt_ = robust_cholesky(k, prior_.kernel.amplitude_sq()).llt;
  alpha_ = llt_.solve(y_ - mean_eval(prior_.mean, x_));
}

std::pair<Eigen::VectorXd, Eigen::MatrixXd> GPPosterior::joint(
    const Eigen::MatrixXd& xq) const {
  if (xq.cols() != x_.cols() && n() > 0)
    fail("query dimension " + std::to_string(xq.cols()) +
         " does not match data dimension " + std::to_string(x_.cols()));
  const Eigen::VectorXd prior_mean = mean_eval(prior_.mean, xq);
  Eigen::MatrixXd prior_cov = kernel_gram(prior_.kernel, xq);
  if (n() == 0) return {prior_mean, prior_cov};
  const Eigen::MatrixXd kqx = kernel_cross(prior_.kernel, xq, x_);
  const Eigen::MatrixXd w = llt_.solve(kqx.transpose());  // K^{-1} k(X, xq)
  Eigen::MatrixXd cov = prior_cov - kqx * w;
  cov = ((cov + cov.transpose()) / 2.0).eval();
  return {prior_mean + kqx * alpha_, cov};
}

std::pair<Eigen::VectorXd, Eigen::VectorXd> GPPosterior::marginals(
    const Eigen::MatrixXd& xq, bool include_noise) const {
  auto [mean, cov] = joint(xq);
  Eigen::VectorXd var = cov.diagonal().cwiseMax(0.0);
  if (include_noise) var.array() += prior_.noise_variance();
  return {std::move(mean), std::move(var)};
}

double GPPosterior::nll() const {
  if (n() == 0) fail("nll needs at least one observation");
  const Eigen::VectorXd yb = y_ - mean_eval(prior_.mean, x_);
  double log_det = 0.0;
  for (int i = 0; i < n(); ++i)
    log_det += 2.0 * std::log(llt_.matrixLLT()(i, i));
  return 0.5 * yb.dot(alpha_) + 0.5 * log_det + 0.5 * n() * kLog2Pi;
}

std::pair<Eigen::VectorXd, Eigen::MatrixXd> posterior(const GPParams& gp,
                                                      const Eigen::MatrixXd& x,
                                                      const Eigen::VectorXd& y,
                                                      const Eigen::MatrixXd& xq) {
  if (x.rows() > 0 && x.cols() != xq.cols())
    fail("query dimension " + std::to_string(xq.cols()) +
         " does not match data dimension " + std::to_string(x.cols()));
  return GPPosterior(gp, x, y).joint(xq);
}

double nll_subdataset(const GPParams& gp, const Eigen::MatrixXd& x,
                      const Eigen::VectorXd& y) {
  if (x.rows() == 0) fail("nll_subdataset: empty sub-dataset");
  return GPPosterior(gp, x, y).nll();
}

int MemoryGP::nearest(const Eigen::RowVectorXd& x) const {
  int best = 0;
  double best_d2 = (anchors.row(0) - x).squaredNorm();
  for (int i = 1; i < anchors.rows(); ++i) {
    const double d2 = (anchors.row(i) - x).squaredNorm();
    if (d2 < best_d2) {
      best_d2 = d2;
      best = i;
    }
  }
  return best;
}

double MemoryGP::mean_at(const Eigen::RowVectorXd& x) const {
  return mean_values(nearest(x));
}

double MemoryGP::cov_at(const Eigen::RowVectorXd& a,
                        const Eigen::RowVectorXd& b) const {
  return cov_values(nearest(a), nearest(b));
}

MemoryGP build_memory_gp(Eigen::MatrixXd anchors, Eigen::VectorXd mean_values,
                         Eigen::MatrixXd cov_values) {
  if (anchors.rows() == 0) fail("memory gp needs at least one anchor");
  if (mean_values.size() != anchors.rows() ||
      cov_values.rows() != anchors.rows() || cov_values.cols() != anchors.rows())
    fail("memory gp: anchors, means and covariances disagree in size");
  return MemoryGP{std::move(anchors), std::move(mean_values), std::move(cov_values)};
}

namespace {

ordered_json mean_to_json(const MeanFn& mean) {
  ordered_json j;
  j["kind"] = mean_name(mean.kind);
  if (mean.kind == MeanKind::constant) {
    j["constant"] = mean.constant;
  } else {
    j["weights"] = std::vector<double>(mean.weights.data(),
                                       mean.weights.data() + mean.weights.size());
    j["bias"] = mean.bias;
  }
  return j;
}

ordered_json kernel_to_json(const KernelFn& kernel) {
  ordered_json j;
  j["kind"] = kernel_name(kernel.kind);
  if (kernel.kind == KernelKind::dot_product) {
    j["log_bias_variance"] = kernel.log_bias_variance;
    j["log_weight_variance"] = kernel.log_weight_variance;
  } else {
    j["log_amplitude"] = kernel.log_amplitude;
    j["log_length_scales"] = std::vector<double>(
        kernel.log_length_scales.data(),
        kernel.log_length_scales.data() + kernel.log_length_scales.size());
  }
  return j;
}

}  // namespace

std::string serialize_gp(const GPParams& gp) {
  ordered_json j;
  j["mean"] = mean_to_json(gp.mean);
  j["kernel"] = kernel_to_json(gp.kernel);
  j["log_noise_variance"] = gp.log_noise_variance;
  return j.dump(2) + "\n";
}

GPParams parse_gp(const std::string& json_text) {
  ordered_json j;
  try {
    j = ordered_json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("gp parameters are not valid JSON: ") + e.what());
  }
  try {
    GPParams gp;
    gp.mean.kind = parse_mean(j.at("mean").at("kind").get<std::string>());
    if (gp.mean.kind == MeanKind::constant) {
      gp.mean.constant = j["mean"].at("constant").get<double>();
    } else {
      const auto w = j["mean"].at("weights").get<std::vector<double>>();
      gp.mean.weights = Eigen::Map<const Eigen::VectorXd>(w.data(), w.size());
      gp.mean.bias = j["mean"].at("bias").get<double>();
    }
    gp.kernel.kind = parse_kernel(j.at("kernel").at("kind").get<std::string>());
    if (gp.kernel.kind == KernelKind::dot_product) {
      gp.kernel.log_bias_variance = j["kernel"].at("log_bias_variance").get<double>();
      gp.kernel.log_weight_variance =
          j["kernel"].at("log_weight_variance").get<double>();
    } else {
      gp.kernel.log_amplitude = j["kernel"].at("log_amplitude").get<double>();
      const auto ls = j["kernel"].at("log_length_scales").get<std::vector<double>>();
      gp.kernel.log_length_scales =
          Eigen::Map<const Eigen::VectorXd>(ls.data(), ls.size());
    }
    gp.log_noise_variance = j.at("log_noise_variance").get<double>();
    return gp;
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("gp parameters do not match the schema: ") + e.what());
  }
}

}  // namespace hyperbo
