#pragma once

namespace krct::num {

/// ln B(a, b)
double log_beta(double a, double b);

/// Regularized incomplete beta I_x(a, b), a > 0, b > 0, x in [0, 1].
/// Continued fraction (modified Lentz) with the symmetry switch at
/// x > (a + 1) / (a + b + 2).
double reg_inc_beta(double a, double b, double x);

/// Central F distribution.
double f_cdf(double x, double dof1, double dof2);

/// Inverse of f_cdf in p; p in (0, 1).
double f_quantile(double p, double dof1, double dof2);

/// Standard normal.
double normal_cdf(double x);
double normal_quantile(double p);

}  // namespace krct::num
