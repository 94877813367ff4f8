#pragma once

#include <memory>
#include <mutex>
#include <vector>

#include "gp_fit.hpp"
#include "gp_model.hpp"

namespace krct::fisher {

using gp::Mat;
using gp::Vec;

/// Gradient of the GP log density with respect to theta, evaluated at a
/// fixed parameter point. The mu coordinate is analytic; the five
/// covariance coordinates use interval-guarded central differences with
/// the same step policy as the fitter. Factorizations are cached per
/// missingness pattern, so scoring many trajectories on a common grid
/// costs O(m^2) each after the first.
class ScoreComputer {
public:
  ScoreComputer(gp::GpParams theta, gp::ObservationGrid grid, double fd_scale = 1e-5);

  /// 6-vector in theta order. Thread-safe.
  Vec score(const gp::Trajectory& x) const;

  const gp::GpParams& theta() const { return theta_; }
  const gp::ObservationGrid& grid() const { return grid_; }

private:
  struct Factors;
  std::shared_ptr<const Factors> factors_for(const std::vector<int>& obs_idx) const;

  gp::GpParams theta_;
  gp::ObservationGrid grid_;
  std::array<gp::FdStep, 5> plan_;
  mutable std::mutex mutex_;
  mutable std::vector<std::pair<std::vector<int>, std::shared_ptr<const Factors>>> cache_;
};

/// Fitted parameter point plus the empirical Fisher information and its
/// regularized inverse square root; immutable once built.
struct FisherEmbedding {
  gp::GpParams theta_hat;
  gp::ObservationGrid grid;
  Mat info;          // empirical second moment of scores, before eps
  double eps = 0.0;  // added to the diagonal before inversion
  Mat info_inv_sqrt;
  std::vector<std::string> warnings;
  std::shared_ptr<const ScoreComputer> scorer;

  nlohmann::json to_json() const;
  static FisherEmbedding from_json(const nlohmann::json& j);
};

/// (1/n) sum of score outer products + eps * I. eps < 0 selects the
/// default 1e-6 * trace/6 regularization. Fewer than 7 trajectories is
/// recorded as a rank-deficiency warning, not an error.
Mat estimate_information(const gp::GpParams& theta_hat, const gp::ObservationGrid& grid,
                         const std::vector<gp::Trajectory>& data, double eps,
                         std::vector<std::string>* warnings = nullptr);

/// Builds the embedding from a fitted parameter point and a reference
/// dataset (typically the asymptomatic cohort the parameters were fit on).
FisherEmbedding build_embedding(const gp::GpParams& theta_hat, const gp::ObservationGrid& grid,
                                const std::vector<gp::Trajectory>& data, double eps = -1.0);

Vec fisher_score(const FisherEmbedding& emb, const gp::Trajectory& x);
Vec fisher_vector(const FisherEmbedding& emb, const gp::Trajectory& x);
double kernel(const FisherEmbedding& emb, const gp::Trajectory& a, const gp::Trajectory& b);

/// Fisher vectors for a whole dataset, one row per trajectory.
Mat fisher_vectors(const FisherEmbedding& emb, const std::vector<gp::Trajectory>& data);

}  // namespace krct::fisher
