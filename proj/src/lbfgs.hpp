#pragma once

#include <Eigen/Core>
#include <functional>

namespace krct::opt {

using Vec = Eigen::VectorXd;

/// Objective callback: returns f(x); fills *grad when non-null (line
/// searches evaluate the value only).
using Objective = std::function<double(const Vec& x, Vec* grad)>;

struct LbfgsOptions {
  int max_iter = 500;
  double grad_tol = 1e-6;  // infinity norm of the gradient
  int memory = 8;
  double f_tol = 1e-12;  // relative objective-change stop; 0 disables
  int patience = 10;     // iterations without meaningful progress before stalling
};

struct LbfgsResult {
  Vec x;
  double f = 0.0;
  double grad_norm = 0.0;
  int iters = 0;
  bool converged = false;  // gradient tolerance reached
  bool stalled = false;    // progress exhausted before the tolerance
  bool f_stable = false;   // stopped because the objective is stable
};

/// Limited-memory BFGS minimization with Armijo backtracking line search.
/// Curvature pairs with non-positive s'y are skipped.
LbfgsResult lbfgs_minimize(const Objective& fn, const Vec& x0, const LbfgsOptions& opts = {});

}  // namespace krct::opt
