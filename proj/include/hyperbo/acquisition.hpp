#pragma once

#include <Eigen/Dense>
#include <string>

namespace hyperbo {

double norm_pdf(double z);
double norm_cdf(double z);

struct Acquisition {
  enum class Kind { pi, ei, ucb, ucb_theory };
  Kind kind = Kind::pi;
  double margin = 0.1;  // pi
  double zeta = 1.8;    // ucb
  double delta = 0.1;   // ucb_theory confidence level
};

// Accepts "pi<margin>", "ei", "ucb:<zeta>", "ucb-theory:<delta>".
Acquisition parse_acquisition(const std::string& text);
std::string acquisition_name(const Acquisition& acq);

// Raw improvement score (mean - (best + margin)) / std; deliberately not
// passed through the normal CDF, which preserves the ranking while keeping
// resolution once all probabilities saturate.
double pi_score(double post_mean, double post_std, double best_y, double margin);

// Expected improvement, closed form.
double ei_score(double post_mean, double post_std, double best_y);

double ucb_score(double post_mean, double post_std, double zeta);

// Iteration-dependent UCB coefficient backed by the regret bound; requires
// 0 < delta < 1 and n_tasks >= 4 ln(6/delta) + t + 2.
double theoretical_ucb_zeta(int n_tasks, int t, double delta);

// Index of the largest score; ties break to the lowest index; non-finite
// scores are rejected.
int argmax_candidates(const Eigen::VectorXd& scores);

}  // namespace hyperbo
