#include "hyperbo/acquisition.hpp"

#include <cmath>
#include <sstream>

#include "hyperbo/errors.hpp"

namespace hyperbo {

namespace {

constexpr double kStdFloor = 1e-12;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;
constexpr double kInvSqrt2 = 0.7071067811865475244;

[[noreturn]] void fail(const std::string& msg) { throw ValidationError(msg); }

double parse_number(const std::string& text, const std::string& what) {
  std::size_t pos = 0;
  double value = 0.0;
  try {
    value = std::stod(text, &pos);
  } catch (const std::exception&) {
    fail("cannot parse " + what + " in acquisition '" + text + "'");
  }
  if (pos != text.size()) fail("trailing characters after " + what + " in '" + text + "'");
  return value;
}

std::string format_number(double v) {
  std::ostringstream out;
  out << v;
  return out.str();
}

}  // namespace

double norm_pdf(double z) { return kInvSqrt2Pi * std::exp(-0.5 * z * z); }

double norm_cdf(double z) { return 0.5 * std::erfc(-z * kInvSqrt2); }

Acquisition parse_acquisition(const std::string& text) {
  Acquisition acq;
  if (text == "ei") {
    acq.kind = Acquisition::Kind::ei;
    return acq;
  }
  if (text.rfind("ucb-theory:", 0) == 0) {
    acq.kind = Acquisition::Kind::ucb_theory;
    acq.delta = parse_number(text.substr(11), "delta");
    if (!(acq.delta > 0.0 && acq.delta < 1.0))
      fail("ucb-theory delta must lie in (0, 1)");
    return acq;
  }
  if (text.rfind("ucb:", 0) == 0) {
    acq.kind = Acquisition::Kind::ucb;
    acq.zeta = parse_number(text.substr(4), "zeta");
    if (!(acq.zeta >= 0.0)) fail("ucb coefficient must be >= 0");
    return acq;
  }
  if (text.rfind("pi", 0) == 0) {
    acq.kind = Acquisition::Kind::pi;
    if (text.size() > 2) acq.margin = parse_number(text.substr(2), "margin");
    if (!(acq.margin >= 0.0)) fail("pi margin must be >= 0");
    return acq;
  }
  fail("unknown acquisition '" + text + "'");
}

std::string acquisition_name(const Acquisition& acq) {
  switch (acq.kind) {
    case Acquisition::Kind::pi:
      return "pi" + format_number(acq.margin);
    case Acquisition::Kind::ei:
      return "ei";
    case Acquisition::Kind::ucb:
      return "ucb:" + format_number(acq.zeta);
    case Acquisition::Kind::ucb_theory:
      return "ucb-theory:" + format_number(acq.delta);
  }
  fail("unreachable acquisition kind");
}

double pi_score(double post_mean, double post_std, double best_y, double margin) {
  const double sd = post_std > 0.0 ? post_std : kStdFloor;
  return (post_mean - (best_y + margin)) / sd;
}

double ei_score(double post_mean, double post_std, double best_y) {
  const double gap = post_mean - best_y;
  if (!(post_std > 0.0)) return gap > 0.0 ? gap : 0.0;
  const double z = gap / post_std;
  const double value = gap * norm_cdf(z) + post_std * norm_pdf(z);
  return value > 0.0 ? value : 0.0;
}

double ucb_score(double post_mean, double post_std, double zeta) {
  return post_mean + zeta * post_std;
}

double theoretical_ucb_zeta(int n_tasks, int t, double delta) {
  if (!(delta > 0.0 && delta < 1.0))
    fail("ucb-theory: delta must lie in (0, 1), got " + format_number(delta));
  if (t < 1) fail("ucb-theory: iteration index t must be >= 1");
  const double n = n_tasks;
  const double l6 = std::log(6.0 / delta);
  if (n_tasks < t + 2)
    fail("ucb-theory: the radical over delta N (N - t - 1) needs N - t - 1 > 0; "
         "got N = " + std::to_string(n_tasks) + ", t = " + std::to_string(t));
  if (n < 4.0 * l6 + t + 2.0)
    fail("ucb-theory: the radical 1 - 2*sqrt(log(6/delta)/(N - t)) needs "
         "N >= 4 log(6/delta) + t + 2; got N = " + std::to_string(n_tasks) +
         ", t = " + std::to_string(t) + ", delta = " + format_number(delta));

  const double inner = n - 3.0 + t + 2.0 * std::sqrt(t * l6) + 2.0 * l6;
  const double first = std::sqrt(6.0 * n * inner / (delta * n * (n - t - 1.0)));
  const double second = std::sqrt(2.0 * n * std::log(3.0 / delta));
  const double shrink = 1.0 - 2.0 * std::sqrt(l6 / (n - t));
  // Guaranteed positive by the size precondition above.
  const double denom = std::sqrt((n - 1.0) * shrink);
  return (first + second) / denom;
}

int argmax_candidates(const Eigen::VectorXd& scores) {
  if (scores.size() == 0) fail("argmax over an empty candidate set");
  int best = 0;
  for (int i = 0; i < scores.size(); ++i) {
    if (std::isnan(scores[i]))
      fail("candidate " + std::to_string(i) + " has a NaN acquisition score");
    if (scores[i] > scores[best]) best = i;
  }
  return best;
}

}  // namespace hyperbo
