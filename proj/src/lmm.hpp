#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "json_fwd.hpp"
#include "rng.hpp"
#include "two_sample.hpp"

namespace krct::lmm {

/// Long-format observation: one measurement of one subject.
struct LongRow {
  std::string subject_id;
  double week = 0.0;
  int group = 0;  // 1 = treatment (T), 0 = control (C)
  double value = 0.0;
};

struct LongData {
  std::vector<LongRow> rows;

  /// Reads `subject_id,week,group,value` with group in {T, C}.
  static LongData from_csv(const std::string& path);
  std::string to_csv() const;
};

/// ML fit of y = b0 + b_subject + b1 t + b2 g + b3 g t + e with a random
/// intercept; the marginal likelihood is profiled over the variance ratio.
struct LmmFit {
  Eigen::Vector4d beta = Eigen::Vector4d::Zero();
  double sigma2_subject = 0.0;
  double sigma2_resid = 0.0;
  double se_beta3 = 0.0;
  double loglik = 0.0;
  bool boundary = false;  // variance ratio at the search boundary
  int n_subjects_t = 0;
  int n_subjects_c = 0;
  long long n_obs = 0;

  nlohmann::json to_json() const;
};

LmmFit fit_lmm(const LongData& data);

/// Two-sided Wald test of the group-by-time interaction coefficient.
stats::TestResult lmm_interaction_test(const LmmFit& fit, double alpha);

/// Simulation-based power of the interaction test. The generator draws one
/// dataset per replicate from its own RNG stream.
using LongGenerator = std::function<LongData(Rng& rng)>;

struct LmmPower {
  double power = 0.0;
  int n_sims = 0;
  int n_reject = 0;
  int n_skipped = 0;  // fit failures
};

LmmPower lmm_power_mc(const LongGenerator& generator, double alpha, int n_sims, std::uint64_t seed);

/// Generating truth for null/alternative calibration runs.
struct LmmTruth {
  double beta0 = 0.0, beta1 = 0.0, beta2 = 0.0, beta3 = 0.0;
  double sigma2_subject = 1.0;
  double sigma2_resid = 1.0;
};

/// Balanced design with weeks 1..n_timepoints per subject.
LongGenerator lmm_truth_generator(const LmmTruth& truth, int n_per_arm, int n_timepoints);

}  // namespace krct::lmm
