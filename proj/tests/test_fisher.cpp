#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Eigenvalues>
#include <cmath>
#include <nlohmann/json.hpp>

#include "fisher.hpp"
#include "gp_fit.hpp"
#include "oracles.hpp"
#include "rng.hpp"

using namespace krct;
using gp::Mat;
using gp::Vec;

namespace {

gp::ObservationGrid weekly_grid(int m) {
  Vec t(m);
  for (int i = 0; i < m; ++i) t[i] = i + 1;
  return gp::ObservationGrid::unit(std::move(t));
}

gp::GpParams base_params() {
  gp::GpParams p;
  p.mu = -0.2;
  p.sigma2 = 1.0;
  p.alpha2 = 0.6;
  p.beta = 0.3;
  p.rho2 = 9.0;
  p.nu = 1.2;
  return p;
}

fisher::FisherEmbedding identity_embedding(const gp::GpParams& p, const gp::ObservationGrid& grid,
                                           double scale) {
  nlohmann::json j = p.to_json();
  j["grid"] = grid.to_json();
  std::vector<double> info(36, 0.0);
  for (int i = 0; i < 6; ++i) info[i * 7] = scale;
  j["info"] = info;
  j["eps"] = 0.0;
  return fisher::FisherEmbedding::from_json(j);
}

}  // namespace

TEST_CASE("scalar Gaussian score in the mu coordinate") {
  gp::GpParams p = base_params();
  p.mu = 0.4;
  p.sigma2 = 1.0;
  p.alpha2 = 0.0;
  const auto grid = weekly_grid(1);  // t = (1), Sigma = [1]
  fisher::ScoreComputer scorer(p, grid);
  gp::Trajectory x{"a", Vec::Constant(1, 1.7)};
  const Vec sc = scorer.score(x);
  CHECK(sc[0] == doctest::Approx(1.7 - 0.4).epsilon(1e-12));
}

TEST_CASE("mu score is linear in the residual") {
  const auto p = base_params();
  const auto grid = weekly_grid(6);
  fisher::ScoreComputer scorer(p, grid);
  const Vec mean = gp::mean_vector(p, grid);
  Rng rng(5);
  Vec r(6);
  for (int i = 0; i < 6; ++i) r[i] = rng.normal();
  gp::Trajectory x1{"a", mean + r}, x2{"b", mean + 2.0 * r};
  CHECK(scorer.score(x2)[0] == doctest::Approx(2.0 * scorer.score(x1)[0]).epsilon(1e-10));
}

TEST_CASE("score matches full central differences of the log likelihood") {
  Rng rng(99);
  for (int rep = 0; rep < 6; ++rep) {
    gp::GpParams p = base_params();
    p.mu = rng.uniform(-1.0, 1.0);
    p.sigma2 = rng.uniform(0.4, 1.6);
    p.alpha2 = rng.uniform(0.4, 1.6);
    p.beta = rng.uniform(-0.8, 0.8);
    p.rho2 = rng.uniform(2.0, 15.0);
    p.nu = rng.uniform(0.6, 1.8);
    const int m = 4 + static_cast<int>(rng.below(26));
    const auto grid = weekly_grid(m);
    const auto traj = gp::simulate(p, grid, 1, 1000 + rep)[0];

    fisher::ScoreComputer scorer(p, grid);
    const Vec sc = scorer.score(traj);

    Vec fd(6);
    const auto theta = p.to_array();
    for (int j = 0; j < 6; ++j) {
      auto plus = theta, minus = theta;
      double h = 3e-6 * (1.0 + std::fabs(theta[j]));
      if (j == 5) h = std::min(h, 0.5 * (2.0 - theta[j]));
      plus[j] += h;
      minus[j] -= h;
      fd[j] = (gp::log_likelihood(gp::GpParams::from_array(plus), grid, traj.values) -
               gp::log_likelihood(gp::GpParams::from_array(minus), grid, traj.values)) /
              (2.0 * h);
    }
    CHECK((sc - fd).lpNorm<Eigen::Infinity>() <= 1e-4 * fd.lpNorm<Eigen::Infinity>());
  }
}

TEST_CASE("score has zero mean at the generating parameters") {
  const auto p = base_params();
  const auto grid = weekly_grid(8);
  const int n = 10000;
  const auto data = gp::simulate(p, grid, n, 2718);
  fisher::ScoreComputer scorer(p, grid);
  Mat scores(n, 6);
  for (int i = 0; i < n; ++i) scores.row(i) = scorer.score(data[i]).transpose();
  for (int j = 0; j < 6; ++j) {
    const double mean = scores.col(j).mean();
    const double sd = std::sqrt((scores.col(j).array() - mean).square().sum() / (n - 1));
    CHECK(std::fabs(mean) < 4.0 * sd / std::sqrt(static_cast<double>(n)));
  }
}

TEST_CASE("missing entries marginalize to the subset score") {
  const auto p = base_params();
  const auto grid = weekly_grid(10);
  auto traj = gp::simulate(p, grid, 1, 7)[0];
  traj.values[2] = gp::missing_value();
  traj.values[8] = gp::missing_value();

  fisher::ScoreComputer scorer(p, grid);
  const Vec sc = scorer.score(traj);

  std::vector<int> idx = traj.observed_indices();
  const auto sub = grid.subset(idx);
  Vec xo(idx.size());
  for (std::size_t a = 0; a < idx.size(); ++a) xo[a] = traj.values[idx[a]];
  fisher::ScoreComputer sub_scorer(p, sub);
  const Vec sc2 = sub_scorer.score({"a", xo});
  CHECK((sc - sc2).lpNorm<Eigen::Infinity>() < 1e-12);
}

TEST_CASE("information of identical trajectories is rank one plus eps") {
  const auto p = base_params();
  const auto grid = weekly_grid(5);
  const auto one = gp::simulate(p, grid, 1, 31)[0];
  std::vector<gp::Trajectory> data(12, one);
  std::vector<std::string> warnings;
  const double eps = 1e-4;
  const Mat info = fisher::estimate_information(p, grid, data, eps, &warnings);
  Eigen::SelfAdjointEigenSolver<Mat> es(info);
  const Vec lam = es.eigenvalues();
  for (int i = 0; i < 5; ++i) CHECK(lam[i] == doctest::Approx(eps).epsilon(1e-6));
  CHECK(lam[5] > eps * 10);
}

TEST_CASE("information is linear in eps") {
  const auto p = base_params();
  const auto grid = weekly_grid(5);
  const auto data = gp::simulate(p, grid, 10, 33);
  const Mat a = fisher::estimate_information(p, grid, data, 0.0);
  const Mat b = fisher::estimate_information(p, grid, data, 1.0);
  CHECK(((b - a) - Mat::Identity(6, 6)).lpNorm<Eigen::Infinity>() < 1e-12);
}

TEST_CASE("small samples record a rank-deficiency warning") {
  const auto p = base_params();
  const auto grid = weekly_grid(5);
  const auto data = gp::simulate(p, grid, 4, 35);
  std::vector<std::string> warnings;
  (void)fisher::estimate_information(p, grid, data, -1.0, &warnings);
  REQUIRE(warnings.size() == 1);
  CHECK(warnings[0].find("rank deficient") != std::string::npos);
}

TEST_CASE("independent straight-loop estimate agrees within Monte Carlo error") {
  const auto p = base_params();
  const auto grid = weekly_grid(6);
  const auto sample1 = gp::simulate(p, grid, 4000, 41);
  const auto sample2 = gp::simulate(p, grid, 4000, 43);
  const Mat info = fisher::estimate_information(p, grid, sample1, 0.0);

  // Straight loop over plain arrays on an independent sample.
  fisher::ScoreComputer scorer(p, grid);
  double acc[6][6] = {};
  double acc2[6][6] = {};
  for (const auto& tr : sample2) {
    const Vec s = scorer.score(tr);
    for (int i = 0; i < 6; ++i) {
      for (int j = 0; j < 6; ++j) {
        const double v = s[i] * s[j];
        acc[i][j] += v;
        acc2[i][j] += v * v;
      }
    }
  }
  const double n = static_cast<double>(sample2.size());
  for (int i = 0; i < 6; ++i) {
    for (int j = 0; j < 6; ++j) {
      const double mean = acc[i][j] / n;
      const double var = acc2[i][j] / n - mean * mean;
      const double se = std::sqrt(var / n);
      // Both sides are Monte Carlo draws of the same expectation.
      CHECK(std::fabs(info(i, j) - mean) < 5.0 * std::sqrt(2.0) * se);
    }
  }
}

TEST_CASE("whitening: fisher vectors have near-identity covariance") {
  // The information is the empirical second moment of the scores, so the
  // vectors of the sample it was estimated on are whitened up to the mean
  // correction and the eps regularization.
  const auto p = base_params();
  const auto grid = weekly_grid(6);
  const auto fit_sample = gp::simulate(p, grid, 8000, 51);
  const auto emb = fisher::build_embedding(p, grid, fit_sample, 0.0);

  const Mat psi = fisher::fisher_vectors(emb, fit_sample);
  const int n = static_cast<int>(psi.rows());
  const Vec mean = psi.colwise().mean().transpose();
  for (int i = 0; i < 6; ++i) {
    for (int j = 0; j < 6; ++j) {
      double cov = 0.0, m2 = 0.0;
      for (int r = 0; r < n; ++r) {
        const double v = (psi(r, i) - mean[i]) * (psi(r, j) - mean[j]);
        cov += v;
        m2 += v * v;
      }
      cov /= n;
      const double se = std::sqrt((m2 / n - cov * cov) / n);
      const double target = (i == j) ? 1.0 : 0.0;
      CHECK(std::fabs(cov - target) < 5.0 * std::max(se, 1e-3));
    }
  }
}

TEST_CASE("fisher vector equals the whitened score bitwise") {
  const auto p = base_params();
  const auto grid = weekly_grid(7);
  const auto data = gp::simulate(p, grid, 20, 61);
  const auto emb = fisher::build_embedding(p, grid, data);
  for (int i = 0; i < 5; ++i) {
    const Vec direct = fisher::fisher_vector(emb, data[i]);
    const Vec via = emb.info_inv_sqrt * fisher::fisher_score(emb, data[i]);
    CHECK((direct - via).lpNorm<Eigen::Infinity>() == 0.0);
  }
}

TEST_CASE("identity and scalar information whitening") {
  const auto p = base_params();
  const auto grid = weekly_grid(5);
  const auto emb1 = identity_embedding(p, grid, 1.0);
  const auto emb4 = identity_embedding(p, grid, 4.0);
  const auto x = gp::simulate(p, grid, 1, 77)[0];
  const Vec phi = fisher::fisher_score(emb1, x);
  CHECK((fisher::fisher_vector(emb1, x) - phi).lpNorm<Eigen::Infinity>() < 1e-12);
  CHECK((fisher::fisher_vector(emb4, x) - 0.5 * phi).lpNorm<Eigen::Infinity>() < 1e-12);
}

TEST_CASE("kernel diagonal and PSD gram") {
  const auto p = base_params();
  const auto grid = weekly_grid(6);
  const auto data = gp::simulate(p, grid, 10, 71);
  const auto emb = fisher::build_embedding(p, grid, data);

  const auto x = data[0];
  CHECK(fisher::kernel(emb, x, x) ==
        doctest::Approx(fisher::fisher_vector(emb, x).squaredNorm()).epsilon(1e-12));

  Mat gram(10, 10);
  for (int i = 0; i < 10; ++i)
    for (int j = 0; j < 10; ++j) gram(i, j) = fisher::kernel(emb, data[i], data[j]);
  CHECK((gram - gram.transpose()).lpNorm<Eigen::Infinity>() < 1e-10);
  Eigen::SelfAdjointEigenSolver<Mat> es(gram, Eigen::EigenvaluesOnly);
  CHECK(es.eigenvalues().minCoeff() >= -1e-10);
  CHECK(es.eigenvalues().minCoeff() >= -1e-8 * gram.trace());
}

TEST_CASE("embedding JSON round trip and inverse-sqrt invariant") {
  const auto p = base_params();
  const auto grid = weekly_grid(5);
  const auto data = gp::simulate(p, grid, 15, 81);
  const auto emb = fisher::build_embedding(p, grid, data);

  const auto j = emb.to_json();
  CHECK(j.at("info").size() == 36);
  CHECK(j.contains("eps"));
  const auto back = fisher::FisherEmbedding::from_json(j);
  CHECK((back.info - emb.info).lpNorm<Eigen::Infinity>() < 1e-12);

  const Mat prod = emb.info_inv_sqrt * emb.info_inv_sqrt *
                   (emb.info + emb.eps * Mat::Identity(6, 6));
  CHECK((prod - Mat::Identity(6, 6)).lpNorm<Eigen::Infinity>() < 1e-8);
}
