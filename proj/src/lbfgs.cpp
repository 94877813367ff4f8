#include "lbfgs.hpp"

#include <cmath>
#include <deque>
#include <limits>
#include <vector>

namespace krct::opt {

namespace {

struct Pair {
  Vec s, y;
  double rho;
};

Vec two_loop_direction(const std::deque<Pair>& mem, const Vec& grad) {
  Vec q = -grad;
  if (mem.empty()) return q;
  std::vector<double> alpha(mem.size());
  for (int i = static_cast<int>(mem.size()) - 1; i >= 0; --i) {
    alpha[i] = mem[i].rho * mem[i].s.dot(q);
    q -= alpha[i] * mem[i].y;
  }
  const Pair& last = mem.back();
  q *= last.s.dot(last.y) / last.y.squaredNorm();
  for (std::size_t i = 0; i < mem.size(); ++i) {
    const double beta = mem[i].rho * mem[i].y.dot(q);
    q += (alpha[i] - beta) * mem[i].s;
  }
  return q;
}

}  // namespace

LbfgsResult lbfgs_minimize(const Objective& fn, const Vec& x0, const LbfgsOptions& opts) {
  LbfgsResult res;
  res.x = x0;
  Vec grad(x0.size());
  res.f = fn(res.x, &grad);
  res.grad_norm = grad.lpNorm<Eigen::Infinity>();

  std::deque<Pair> mem;
  std::vector<double> f_history;
  for (res.iters = 0; res.iters < opts.max_iter; ++res.iters) {
    if (res.grad_norm <= opts.grad_tol) {
      res.converged = true;
      return res;
    }

    Vec dir = two_loop_direction(mem, grad);
    double slope = grad.dot(dir);
    if (!(slope < 0.0) || !dir.allFinite()) {
      mem.clear();
      dir = -grad;
      slope = -grad.squaredNorm();
    }

    // Armijo backtracking from the quasi-Newton unit step; the gradient is
    // evaluated only at the accepted point.
    const double c1 = 1e-4;
    double step = 1.0;
    double f_new = std::numeric_limits<double>::infinity();
    Vec x_new;
    bool accepted = false;
    for (int ls = 0; ls < 30; ++ls) {
      x_new = res.x + step * dir;
      f_new = fn(x_new, nullptr);
      if (std::isfinite(f_new) && f_new <= res.f + c1 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      if (!mem.empty()) {
        // Retry the iteration along the raw gradient before giving up.
        mem.clear();
        continue;
      }
      // No resolvable improvement along the gradient itself: the objective
      // is flat at double precision.
      res.stalled = true;
      res.f_stable = true;
      return res;
    }
    Vec g_new(grad.size());
    fn(x_new, &g_new);

    const Vec s = x_new - res.x;
    const Vec y = g_new - grad;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      mem.push_back({s, y, 1.0 / sy});
      if (static_cast<int>(mem.size()) > opts.memory) mem.pop_front();
    }

    const double f_prev = res.f;
    res.x = std::move(x_new);
    res.f = f_new;
    grad = g_new;
    res.grad_norm = grad.lpNorm<Eigen::Infinity>();
    if (opts.f_tol > 0.0 && std::abs(f_prev - res.f) <= opts.f_tol * (std::abs(f_prev) + 1.0)) {
      res.stalled = true;
      res.f_stable = true;
      ++res.iters;
      break;
    }
    f_history.push_back(res.f);
    if (opts.patience > 0 && static_cast<int>(f_history.size()) > opts.patience) {
      const double past = f_history[f_history.size() - 1 - opts.patience];
      if (past - res.f <= 1e-11 * (std::abs(res.f) + 1.0) * opts.patience) {
        res.stalled = true;
        res.f_stable = true;
        ++res.iters;
        break;
      }
    }
  }
  res.converged = res.grad_norm <= opts.grad_tol;
  return res;
}

}  // namespace krct::opt
