#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "errors.hpp"
#include "gp_model.hpp"

namespace krct::gp {

struct FitConfig {
  int max_iter = 500;
  double grad_tol = 1e-6;        // infinity norm in unconstrained coordinates
  int multistarts = 5;
  std::uint64_t seed = 0;        // drives multistart perturbations
  double fd_step_scale = 1e-5;   // central-difference step: scale * (1 + |theta_j|)
  double beta_box = 10.0;        // beta constrained to [-beta_box, beta_box]
  std::array<bool, 6> free_mask = {true, true, true, true, true, true};
};

struct FitResult {
  GpParams params;
  double loglik = 0.0;
  bool converged = false;
  int iters = 0;
  double grad_norm = 0.0;
  std::vector<std::string> warnings;
};

/// Raised when no restart improves on the initial point and the gradient
/// tolerance was not met; carries the best result seen.
class FitNonConvergence : public Error {
public:
  FitNonConvergence(const std::string& msg, FitResult best)
      : Error(ErrorCode::nonconvergence, msg), best_(std::move(best)) {}
  const FitResult& best() const { return best_; }

private:
  FitResult best_;
};

/// Penalized maximum likelihood over the sum of per-trajectory MVN log
/// densities. Works in unconstrained coordinates (log for sigma2, alpha2,
/// rho2; scaled logit for nu; beta box-penalized), quasi-Newton with
/// multistarts. Missing values are marginalized exactly.
FitResult fit_mle(const std::vector<Trajectory>& data, const ObservationGrid& grid,
                  const GpParams& init, const FitConfig& config = {});

/// Sum of per-trajectory log likelihoods at fixed parameters.
double total_log_likelihood(const GpParams& params, const ObservationGrid& grid,
                            const std::vector<Trajectory>& data);

/// Central-difference probes for the five covariance parameters
/// (sigma2, alpha2, beta, rho2, nu), interval-guarded so every probe stays
/// in the valid parameter region; denom is the actual probe separation.
/// Shared by the fitter and the Fisher score.
struct FdStep {
  GpParams plus, minus;
  double denom = 0.0;
};
std::array<FdStep, 5> make_fd_plan(const GpParams& theta, double scale);

/// Standard error of mu from the observed-information diagonal,
/// 1 / sqrt(sum_i t_i' Sigma_i^-1 t_i) over observed subsets.
double mu_standard_error(const GpParams& params, const ObservationGrid& grid,
                         const std::vector<Trajectory>& data);

/// Moment-based starting point: pooled through-origin slope for mu, split
/// residual variance, neutral shape parameters.
GpParams heuristic_init(const std::vector<Trajectory>& data, const ObservationGrid& grid);

/// Fitted parameters plus provenance, serialized as the fitted-model JSON
/// document {"mu":..., ..., "grid":{...}, "fit":{...}}.
struct FittedModel {
  GpParams params;
  ObservationGrid grid;
  double loglik = 0.0;
  bool converged = false;
  int iters = 0;

  nlohmann::json to_json() const;
  static FittedModel from_json(const nlohmann::json& j);
};

}  // namespace krct::gp
