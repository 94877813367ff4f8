#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fisher.hpp"
#include "gp_fit.hpp"
#include "gp_model.hpp"
#include "json_fwd.hpp"
#include "power.hpp"

namespace krct::sim {

/// Mean-shift simulation design: treated and control differ only in mu.
struct Scenario {
  // Defaults give a smooth, identifiable process with the treated arm
  // shifted in mu only; the smallest cell sits near 0.99 power.
  gp::GpParams theta_control{-0.1, 1.0, 0.15, 0.5, 72.0, 2.0};
  gp::GpParams theta_treated{-0.088, 1.0, 0.15, 0.5, 72.0, 2.0};
  double span = 150.0;                    // total trial span in weeks
  std::vector<int> n_list = {20, 40, 80};  // subjects per arm
  std::vector<int> t_list = {25, 75, 150};  // time points over the span
  int n_sims = 1000;
  double alpha = 0.05;
  std::uint64_t seed = 1;
  int pretrial_n = 100;  // asymptomatic cohort used to fit the embedding
  gp::FitConfig fit{.max_iter = 200, .multistarts = 2};

  void validate() const;
};

struct CellResult {
  std::string method;  // FvH | LMM
  int n = 0;
  int t = 0;
  std::vector<double> p_values;  // NaN marks a failed replicate
  int n_fail = 0;
  double powr = 0.0;
  double se = 0.0;
};

struct ExperimentTable {
  std::vector<CellResult> cells;

  std::string replicates_csv() const;  // method,n,t,replicate,p_value
  std::string summary_csv() const;     // method,n,t,power,se
};

/// The power-vs-(n, t) experiment: per cell, fit the embedding on a fresh
/// simulated asymptomatic cohort, then per replicate simulate both arms,
/// run Hotelling on Fisher vectors (FvH) and the LMM interaction test.
ExperimentTable run_power_experiment(const Scenario& scenario);

/// Cross-validation design of the pseudo-trial experiment.
struct FoldPlan {
  struct Fold {
    std::vector<std::string> treated;   // pseudo-treated CN ids
    std::vector<std::string> control;   // MCI ids
    std::vector<std::string> heldout;   // out-of-sample healthy ids
  };
  std::vector<Fold> folds;

  nlohmann::json to_json() const;
};

/// Splits the CN ids into n_folds groups of fold_size, repeating just
/// enough ids (two, for 86 CN in 8x11) to fill the last slots; every fold's
/// held-out set is the CN complement of its treated set.
FoldPlan build_fold_plan(const std::vector<std::string>& cn_ids,
                         const std::vector<std::string>& mci_ids, std::uint64_t seed,
                         int n_folds = 8, int fold_size = 11);

struct FoldPowerOptions {
  double rho = 0.4;
  double alpha = 0.05;
  std::vector<int> n_grid;  // total sample sizes for the curves
  gp::FitConfig fit;
  double target_power = 0.8;
};

struct FoldPowerResult {
  std::vector<power::PowerCurve> fold_curves;
  std::vector<int> fold_n_for_target;  // total n reaching the target power
  power::PowerCurve averaged;          // from averaged shift and covariance
  int averaged_n_for_target = 0;
  std::vector<std::string> skipped;  // folds that failed, with reasons

  std::string curves_csv() const;  // fold,n_total,n_T,n_C,power (fold "avg" last)
  nlohmann::json to_json() const;
};

/// Runs the per-fold pipeline: GP fit + embedding on held-out healthy
/// subjects, Fisher vectors for the two pseudo-arms, the (1-rho) local
/// alternative, and power curves per fold plus the averaged-estimate curve.
FoldPowerResult run_fold_power(const FoldPlan& plan, const std::vector<gp::Trajectory>& data,
                               const std::vector<std::string>& cohorts,
                               const gp::ObservationGrid& grid, const FoldPowerOptions& opts);

}  // namespace krct::sim
