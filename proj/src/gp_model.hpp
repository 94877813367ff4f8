#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "json_fwd.hpp"

namespace krct::gp {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Missing entries in trajectories are NaN.
inline bool is_missing(double v) { return std::isnan(v); }
inline double missing_value() { return std::numeric_limits<double>::quiet_NaN(); }

/// Parameters of the longitudinal Gaussian-process model,
/// theta = (mu, sigma2, alpha2, beta, rho2, nu).
struct GpParams {
  double mu = 0.0;      // drift slope per week
  double sigma2 = 1.0;  // white-noise variance
  double alpha2 = 1.0;  // process variance scale
  double beta = 0.0;    // power-law exponent on time
  double rho2 = 1.0;    // squared length scale
  double nu = 1.0;      // exponent of |s - t|, in (0, 2]

  std::array<double, 6> to_array() const { return {mu, sigma2, alpha2, beta, rho2, nu}; }
  static GpParams from_array(const std::array<double, 6>& a) {
    return {a[0], a[1], a[2], a[3], a[4], a[5]};
  }

  /// Throws InvalidArgument on violation. sigma2 and alpha2 may be 0 here
  /// (degenerate but evaluable); the fitter keeps them strictly positive.
  void validate() const;

  nlohmann::json to_json() const;
  static GpParams from_json(const nlohmann::json& j);
};

/// Names in theta order; used for JSON fields and score coordinates.
extern const std::array<const char*, 6> kParamNames;

/// Observation design: times with per-time and pairwise subject counts.
struct ObservationGrid {
  Vec times;        // strictly increasing, all > 0 (weeks)
  Vec counts;       // n(t_i) > 0
  Mat pair_counts;  // n(s, t), symmetric, diagonal equals counts

  int size() const { return static_cast<int>(times.size()); }
  void validate() const;

  /// Grid with all counts equal to 1 (per-subject modeling).
  static ObservationGrid unit(Vec times);
  /// Restriction to the given (ascending) index subset.
  ObservationGrid subset(const std::vector<int>& idx) const;

  nlohmann::json to_json() const;
  static ObservationGrid from_json(const nlohmann::json& j);
};

/// One subject's baseline-subtracted series on a grid; NaN marks missing.
struct Trajectory {
  std::string subject_id;
  Vec values;

  std::vector<int> observed_indices() const;
};

/// Sigma(s,t) = K(s,t) + (sigma2 / n(t)) * [s == t], with
/// K(s,t) = alpha2 * n(s,t)/(n(s) n(t)) * s^(beta/2) t^(beta/2)
///          * exp(-|s-t|^nu / (2 rho2)).
Mat build_covariance(const GpParams& params, const ObservationGrid& grid);

/// (mu * t_1, ..., mu * t_m); the baseline y(0) is identically 0.
Vec mean_vector(const GpParams& params, const ObservationGrid& grid);

/// Cholesky factor with the escalating-jitter policy: if the plain LLT
/// fails, add lambda * mean(diag) to the diagonal with lambda = 1e-10,
/// escalating tenfold up to 1e-6 before raising NumericalError (which
/// names the smallest eigenvalue).
class CovFactor {
public:
  explicit CovFactor(Mat sigma);

  int dim() const { return static_cast<int>(llt_.matrixLLT().rows()); }
  double log_det() const { return log_det_; }
  double jitter() const { return jitter_; }

  /// r^T Sigma^-1 r
  double quad_form(const Vec& r) const;
  Vec solve(const Vec& b) const;
  Mat solve(const Mat& b) const;
  /// Sigma^-1 as a dense matrix.
  Mat inverse() const;
  /// L * z for sampling.
  Vec half_mul(const Vec& z) const;

private:
  Eigen::LLT<Mat> llt_;
  double log_det_ = 0.0;
  double jitter_ = 0.0;
};

/// MVN log density of x under the model; missing entries of x are
/// marginalized by subsetting the grid.
double log_likelihood(const GpParams& params, const ObservationGrid& grid, const Vec& x);

/// As above but with a prebuilt factor and mean for the observed subset.
double log_likelihood_given(const CovFactor& factor, const Vec& mean, const Vec& x_observed);

/// i.i.d. MVN draws on the grid; deterministic given seed. Subject ids are
/// "<id_prefix><i>".
std::vector<Trajectory> simulate(const GpParams& params, const ObservationGrid& grid, int n_subjects,
                                 std::uint64_t seed, const std::string& id_prefix = "sim-");

}  // namespace krct::gp
