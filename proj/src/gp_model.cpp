#include "gp_model.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>
#include <nlohmann/json.hpp>
#include <numbers>
#include <sstream>

#include "errors.hpp"
#include "rng.hpp"

namespace krct::gp {

const std::array<const char*, 6> kParamNames = {"mu", "sigma2", "alpha2", "beta", "rho2", "nu"};

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw InvalidArgument(msg);
}

}  // namespace

void GpParams::validate() const {
  for (double v : to_array()) {
    require(std::isfinite(v), "GpParams: all fields must be finite");
  }
  require(sigma2 >= 0.0, "GpParams: sigma2 must be non-negative");
  require(alpha2 >= 0.0, "GpParams: alpha2 must be non-negative");
  require(rho2 > 0.0, "GpParams: rho2 must be positive");
  require(nu > 0.0 && nu <= 2.0, "GpParams: nu must be in (0, 2]");
}

nlohmann::json GpParams::to_json() const {
  return nlohmann::json{{"mu", mu},     {"sigma2", sigma2}, {"alpha2", alpha2},
                        {"beta", beta}, {"rho2", rho2},     {"nu", nu}};
}

GpParams GpParams::from_json(const nlohmann::json& j) {
  GpParams p;
  p.mu = j.at("mu").get<double>();
  p.sigma2 = j.at("sigma2").get<double>();
  p.alpha2 = j.at("alpha2").get<double>();
  p.beta = j.at("beta").get<double>();
  p.rho2 = j.at("rho2").get<double>();
  p.nu = j.at("nu").get<double>();
  p.validate();
  return p;
}

void ObservationGrid::validate() const {
  const int m = size();
  require(m >= 1, "ObservationGrid: empty grid");
  require(counts.size() == m, "ObservationGrid: counts length mismatch");
  require(pair_counts.rows() == m && pair_counts.cols() == m,
          "ObservationGrid: pair_counts shape mismatch");
  for (int i = 0; i < m; ++i) {
    require(times[i] > 0.0 && std::isfinite(times[i]), "ObservationGrid: times must be positive");
    if (i > 0) require(times[i] > times[i - 1], "ObservationGrid: times must be strictly increasing");
    require(counts[i] > 0.0, "ObservationGrid: counts must be positive");
    require(pair_counts(i, i) == counts[i], "ObservationGrid: n(t,t) must equal n(t)");
    for (int j = 0; j < m; ++j) {
      require(pair_counts(i, j) == pair_counts(j, i), "ObservationGrid: pair_counts must be symmetric");
      require(pair_counts(i, j) >= 0.0 && pair_counts(i, j) <= std::min(counts[i], counts[j]),
              "ObservationGrid: 0 <= n(s,t) <= min(n(s), n(t))");
    }
  }
}

ObservationGrid ObservationGrid::unit(Vec times) {
  ObservationGrid g;
  const int m = static_cast<int>(times.size());
  g.times = std::move(times);
  g.counts = Vec::Ones(m);
  g.pair_counts = Mat::Ones(m, m);
  g.validate();
  return g;
}

ObservationGrid ObservationGrid::subset(const std::vector<int>& idx) const {
  ObservationGrid g;
  const int k = static_cast<int>(idx.size());
  g.times.resize(k);
  g.counts.resize(k);
  g.pair_counts.resize(k, k);
  for (int a = 0; a < k; ++a) {
    g.times[a] = times[idx[a]];
    g.counts[a] = counts[idx[a]];
    for (int b = 0; b < k; ++b) g.pair_counts(a, b) = pair_counts(idx[a], idx[b]);
  }
  return g;
}

nlohmann::json ObservationGrid::to_json() const {
  std::vector<double> t(times.data(), times.data() + times.size());
  std::vector<double> c(counts.data(), counts.data() + counts.size());
  return nlohmann::json{{"times", t}, {"counts", c}};
}

ObservationGrid ObservationGrid::from_json(const nlohmann::json& j) {
  const auto t = j.at("times").get<std::vector<double>>();
  const auto c = j.at("counts").get<std::vector<double>>();
  if (t.size() != c.size()) throw ParseError("grid: times/counts length mismatch");
  ObservationGrid g;
  const int m = static_cast<int>(t.size());
  g.times = Eigen::Map<const Vec>(t.data(), m);
  g.counts = Eigen::Map<const Vec>(c.data(), m);
  // Pairwise counts are not serialized; reconstruct the conservative
  // elementwise minimum (exact for unit-count per-subject grids).
  g.pair_counts.resize(m, m);
  for (int i = 0; i < m; ++i)
    for (int j2 = 0; j2 < m; ++j2) g.pair_counts(i, j2) = std::min(g.counts[i], g.counts[j2]);
  g.validate();
  return g;
}

std::vector<int> Trajectory::observed_indices() const {
  std::vector<int> idx;
  idx.reserve(values.size());
  for (int i = 0; i < values.size(); ++i) {
    if (!is_missing(values[i])) idx.push_back(i);
  }
  return idx;
}

Mat build_covariance(const GpParams& params, const ObservationGrid& grid) {
  params.validate();
  grid.validate();
  const int m = grid.size();
  Mat sigma(m, m);
  const double inv_two_rho2 = 1.0 / (2.0 * params.rho2);
  for (int i = 0; i < m; ++i) {
    const double ti = grid.times[i];
    const double ti_pow = std::pow(ti, 0.5 * params.beta);
    for (int j = 0; j <= i; ++j) {
      const double tj = grid.times[j];
      const double ratio = grid.pair_counts(i, j) / (grid.counts[i] * grid.counts[j]);
      const double tj_pow = std::pow(tj, 0.5 * params.beta);
      const double dist = std::abs(ti - tj);
      const double k =
          params.alpha2 * ratio * ti_pow * tj_pow * std::exp(-std::pow(dist, params.nu) * inv_two_rho2);
      sigma(i, j) = k;
      sigma(j, i) = k;
    }
    sigma(i, i) += params.sigma2 / grid.counts[i];
  }
  return sigma;
}

Vec mean_vector(const GpParams& params, const ObservationGrid& grid) {
  params.validate();
  grid.validate();
  return params.mu * grid.times;
}

CovFactor::CovFactor(Mat sigma) {
  const int m = static_cast<int>(sigma.rows());
  const double mean_diag = sigma.diagonal().mean();
  double lambda = 0.0;
  for (;;) {
    Mat attempt = sigma;
    if (lambda > 0.0) attempt.diagonal().array() += lambda * mean_diag;
    llt_.compute(attempt);
    if (llt_.info() == Eigen::Success) {
      // Reject factorizations with non-positive pivots that LLT let through.
      const auto& L = llt_.matrixLLT();
      bool ok = true;
      double ld = 0.0;
      for (int i = 0; i < m; ++i) {
        const double pivot = L(i, i);
        if (!(pivot > 0.0) || !std::isfinite(pivot)) {
          ok = false;
          break;
        }
        ld += std::log(pivot);
      }
      if (ok) {
        log_det_ = 2.0 * ld;
        jitter_ = lambda;
        return;
      }
    }
    lambda = (lambda == 0.0) ? 1e-10 : lambda * 10.0;
    if (lambda > 1e-6) {
      Eigen::SelfAdjointEigenSolver<Mat> es(sigma, Eigen::EigenvaluesOnly);
      std::ostringstream msg;
      msg << "covariance not positive definite after jitter; smallest eigenvalue "
          << es.eigenvalues().minCoeff();
      throw NumericalError(msg.str());
    }
  }
}

double CovFactor::quad_form(const Vec& r) const { return r.dot(llt_.solve(r)); }

Vec CovFactor::solve(const Vec& b) const { return llt_.solve(b); }

Mat CovFactor::solve(const Mat& b) const { return llt_.solve(b); }

Mat CovFactor::inverse() const {
  return llt_.solve(Mat::Identity(dim(), dim()));
}

Vec CovFactor::half_mul(const Vec& z) const { return llt_.matrixL() * z; }

double log_likelihood_given(const CovFactor& factor, const Vec& mean, const Vec& x_observed) {
  const int m = factor.dim();
  const Vec r = x_observed - mean;
  return -0.5 * m * std::log(2.0 * std::numbers::pi) - 0.5 * factor.log_det() -
         0.5 * factor.quad_form(r);
}

double log_likelihood(const GpParams& params, const ObservationGrid& grid, const Vec& x) {
  if (x.size() != grid.size()) throw InvalidArgument("log_likelihood: vector/grid length mismatch");
  std::vector<int> idx;
  for (int i = 0; i < x.size(); ++i) {
    if (!is_missing(x[i])) idx.push_back(i);
  }
  if (static_cast<int>(idx.size()) == grid.size()) {
    CovFactor f(build_covariance(params, grid));
    return log_likelihood_given(f, mean_vector(params, grid), x);
  }
  if (idx.empty()) throw InvalidArgument("log_likelihood: no observed values");
  const ObservationGrid sub = grid.subset(idx);
  Vec xo(idx.size());
  for (std::size_t a = 0; a < idx.size(); ++a) xo[a] = x[idx[a]];
  CovFactor f(build_covariance(params, sub));
  return log_likelihood_given(f, mean_vector(params, sub), xo);
}

std::vector<Trajectory> simulate(const GpParams& params, const ObservationGrid& grid, int n_subjects,
                                 std::uint64_t seed, const std::string& id_prefix) {
  if (n_subjects < 1) throw InvalidArgument("simulate: n_subjects must be >= 1");
  const Vec mean = mean_vector(params, grid);
  CovFactor factor(build_covariance(params, grid));
  const int m = grid.size();
  Rng rng(seed);
  std::vector<Trajectory> out;
  out.reserve(n_subjects);
  for (int s = 0; s < n_subjects; ++s) {
    Vec z(m);
    for (int i = 0; i < m; ++i) z[i] = rng.normal();
    Trajectory tr;
    tr.subject_id = id_prefix + std::to_string(s);
    tr.values = mean + factor.half_mul(z);
    out.push_back(std::move(tr));
  }
  return out;
}

}  // namespace krct::gp
