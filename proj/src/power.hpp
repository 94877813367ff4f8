#pragma once

#include <Eigen/Core>
#include <string>
#include <vector>

#include "json_fwd.hpp"
#include "two_sample.hpp"

namespace krct::power {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// CDF of the noncentral F distribution with noncentrality delta.
/// Poisson-mixture series over the regularized incomplete beta, started at
/// the modal Poisson index and expanded in both directions; truncated when
/// the unconsumed Poisson mass drops below 1e-12 (capped at 1e5 terms).
/// delta = 0 reduces exactly to the central F CDF.
double noncentral_f_cdf(double x, int dof1, int dof2, double delta);

/// sqrt(shift' Sigma^-1 shift), the standardized multivariate difference.
double effect_size(const Vec& shift, const Mat& sigma_pooled);

/// Power of the two-sample Hotelling test at the given design and effect
/// size; delta = (n_T n_C / (n_T + n_C)) * effect^2.
double power_at(int n_T, int n_C, int p, double alpha, double effect);

/// Smallest design (by total n, respecting the allocation ratio
/// n_T : n_C = allocation : 1) with power_at >= target_power.
std::pair<int, int> sample_size_for_power(double target_power, int p, double alpha, double effect,
                                          double allocation = 1.0, long long n_cap = 1000000);

/// The hypothesized shift (1 - rho) * (mu_A - mu_S); the shift is always
/// recomputed from the stored cohort means.
struct LocalAlternative {
  Vec mu_A;
  Vec mu_S;
  double rho = 0.4;

  Vec shift() const { return (1.0 - rho) * (mu_A - mu_S); }
};

LocalAlternative local_alternative_from_cohorts(const stats::Sample& asymptomatic,
                                                const stats::Sample& symptomatic, double rho);

struct PowerCurve {
  double allocation = 1.0;
  double alpha = 0.05;
  int dim = 0;
  double effect = 0.0;

  struct Row {
    int n_total;
    int n_T;
    int n_C;
    double power;
  };
  std::vector<Row> rows;

  std::string to_csv() const;  // header n_total,n_T,n_C,power
  nlohmann::json to_json() const;
  static PowerCurve from_json(const nlohmann::json& j);
};

/// Evaluates power over the requested total sample sizes; throws if a
/// requested n is infeasible for the dimension. Asserts monotonicity.
PowerCurve power_curve(const std::vector<int>& n_totals, int p, double alpha, double effect,
                       double allocation = 1.0);

}  // namespace krct::power
