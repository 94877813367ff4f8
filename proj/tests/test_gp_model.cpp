#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gp_fit.hpp"
#include "gp_model.hpp"
#include "oracles.hpp"
#include "rng.hpp"

using namespace krct;
using gp::Mat;
using gp::Vec;

namespace {

gp::ObservationGrid unit_grid(std::initializer_list<double> times) {
  Vec t(static_cast<int>(times.size()));
  int i = 0;
  for (double v : times) t[i++] = v;
  return gp::ObservationGrid::unit(std::move(t));
}

gp::GpParams random_params(Rng& rng) {
  gp::GpParams p;
  p.mu = rng.uniform(-1.0, 1.0);
  p.sigma2 = rng.uniform(0.3, 2.0);
  p.alpha2 = rng.uniform(0.3, 2.0);
  p.beta = rng.uniform(-1.0, 1.0);
  p.rho2 = rng.uniform(1.0, 20.0);
  p.nu = rng.uniform(0.5, 1.9);
  return p;
}

gp::ObservationGrid random_grid(Rng& rng, int max_m) {
  const int m = 3 + static_cast<int>(rng.below(max_m - 2));
  std::vector<double> t;
  double cur = 0.0;
  for (int i = 0; i < m; ++i) {
    cur += rng.uniform(0.5, 4.0);
    t.push_back(cur);
  }
  Vec tv(m);
  for (int i = 0; i < m; ++i) tv[i] = t[i];
  return gp::ObservationGrid::unit(std::move(tv));
}

}  // namespace

TEST_CASE("covariance matches the kernel formula on a two-point grid") {
  gp::GpParams p;
  p.mu = 0.0;
  p.sigma2 = 0.0;
  p.alpha2 = 1.0;
  p.beta = 0.0;
  p.rho2 = 1.0;
  p.nu = 2.0;
  const auto grid = unit_grid({1.0, 2.0});
  const Mat s = gp::build_covariance(p, grid);
  CHECK(s(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(s(1, 1) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(s(0, 1) == doctest::Approx(std::exp(-0.5)).epsilon(1e-15));
  CHECK(s(1, 0) == s(0, 1));
}

TEST_CASE("single-point grid covariance is alpha2 * t^beta + sigma2") {
  gp::GpParams p;
  p.sigma2 = 0.7;
  p.alpha2 = 2.5;
  p.beta = 1.3;
  p.rho2 = 4.0;
  p.nu = 1.0;
  const auto grid = unit_grid({1.0});
  const Mat s = gp::build_covariance(p, grid);
  REQUIRE(s.rows() == 1);
  CHECK(s(0, 0) == doctest::Approx(p.alpha2 * std::pow(1.0, p.beta) + p.sigma2).epsilon(1e-15));
}

TEST_CASE("alpha2 = 0 gives the pure noise diagonal sigma2 / n(t)") {
  gp::GpParams p;
  p.sigma2 = 1.8;
  p.alpha2 = 0.0;
  gp::ObservationGrid grid = unit_grid({1.0, 3.0, 7.0});
  grid.counts << 1, 2, 4;
  grid.pair_counts = grid.counts.asDiagonal();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      if (i != j) grid.pair_counts(i, j) = 1.0;
  const Mat s = gp::build_covariance(p, grid);
  CHECK((s - Mat((p.sigma2 * grid.counts.cwiseInverse()).asDiagonal())).norm() == 0.0);
}

TEST_CASE("count weighting scales the kernel by n(s,t)/(n(s)n(t))") {
  gp::GpParams p;
  p.sigma2 = 0.5;
  p.alpha2 = 1.5;
  p.beta = 0.8;
  p.rho2 = 9.0;
  p.nu = 1.5;
  gp::ObservationGrid grid = unit_grid({2.0, 5.0});
  grid.counts << 4, 3;
  grid.pair_counts << 4, 2, 2, 3;
  const Mat s = gp::build_covariance(p, grid);
  const double k01 = p.alpha2 * (2.0 / 12.0) * std::pow(2.0, 0.4) * std::pow(5.0, 0.4) *
                     std::exp(-std::pow(3.0, 1.5) / 18.0);
  CHECK(s(0, 1) == doctest::Approx(k01).epsilon(1e-14));
  CHECK(s(0, 0) == doctest::Approx(p.alpha2 * (1.0 / 4.0) * std::pow(2.0, 0.8) + p.sigma2 / 4.0)
                       .epsilon(1e-14));
}

TEST_CASE("mean vector is mu * t") {
  gp::GpParams p;
  SUBCASE("zero mu") {
    p.mu = 0.0;
    CHECK(gp::mean_vector(p, unit_grid({1, 2, 3})).norm() == 0.0);
  }
  SUBCASE("negative slope") {
    p.mu = -0.5;
    const Vec m = gp::mean_vector(p, unit_grid({1, 2, 3}));
    CHECK(m[0] == doctest::Approx(-0.5));
    CHECK(m[1] == doctest::Approx(-1.0));
    CHECK(m[2] == doctest::Approx(-1.5));
  }
  SUBCASE("single point") {
    p.mu = 1.0;
    CHECK(gp::mean_vector(p, unit_grid({10}))[0] == doctest::Approx(10.0));
  }
}

TEST_CASE("covariance is symmetric and positive definite across random draws") {
  Rng rng(42);
  for (int rep = 0; rep < 25; ++rep) {
    const auto p = random_params(rng);
    const auto grid = random_grid(rng, 40);
    const Mat s = gp::build_covariance(p, grid);
    CHECK((s - s.transpose()).lpNorm<Eigen::Infinity>() == 0.0);
    gp::CovFactor f(s);  // throws if not PD after jitter
    CHECK(f.jitter() <= 1e-6);
  }
}

TEST_CASE("covariance stays factorizable on a dense 200-point grid") {
  Rng rng(77);
  for (int rep = 0; rep < 3; ++rep) {
    const auto p = random_params(rng);
    Vec times(200);
    for (int i = 0; i < 200; ++i) times[i] = 0.75 * (i + 1);
    const auto grid = gp::ObservationGrid::unit(std::move(times));
    gp::CovFactor f(gp::build_covariance(p, grid));
    CHECK(f.jitter() <= 1e-6);
  }
}

TEST_CASE("log likelihood closed forms") {
  gp::GpParams p;
  p.mu = 0.0;
  p.sigma2 = 1.0;
  p.alpha2 = 0.0;
  const auto grid = unit_grid({1.0});
  Vec x(1);
  x << 0.0;
  CHECK(gp::log_likelihood(p, grid, x) == doctest::Approx(-0.5 * std::log(2.0 * M_PI)).epsilon(1e-14));
}

TEST_CASE("log likelihood at the mean drops the quadratic term") {
  Rng rng(7);
  const auto p = random_params(rng);
  const auto grid = random_grid(rng, 12);
  const Vec x = gp::mean_vector(p, grid);
  const Mat s = gp::build_covariance(p, grid);
  gp::CovFactor f(s);
  const double expected = -0.5 * grid.size() * std::log(2.0 * M_PI) - 0.5 * f.log_det();
  CHECK(gp::log_likelihood(p, grid, x) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("log likelihood matches the brute-force MVN oracle") {
  Rng rng(11);
  for (int rep = 0; rep < 10; ++rep) {
    const auto p = random_params(rng);
    const auto grid = random_grid(rng, 8);
    const int m = grid.size();
    const Mat s = gp::build_covariance(p, grid);
    const Vec mean = gp::mean_vector(p, grid);
    Vec x(m);
    for (int i = 0; i < m; ++i) x[i] = mean[i] + rng.normal();

    std::vector<std::vector<double>> sv(m, std::vector<double>(m));
    std::vector<double> mv(m), xv(m);
    for (int i = 0; i < m; ++i) {
      mv[i] = mean[i];
      xv[i] = x[i];
      for (int j = 0; j < m; ++j) sv[i][j] = s(i, j);
    }
    CHECK(gp::log_likelihood(p, grid, x) ==
          doctest::Approx(oracles::mvn_loglik(sv, mv, xv)).epsilon(1e-10));
  }
}

TEST_CASE("log likelihood is invariant under simultaneous permutation") {
  Rng rng(13);
  const auto p = random_params(rng);
  const auto grid = random_grid(rng, 10);
  const int m = grid.size();
  Vec x(m);
  for (int i = 0; i < m; ++i) x[i] = rng.normal();
  const double base = gp::log_likelihood(p, grid, x);

  std::vector<int> perm(m);
  for (int i = 0; i < m; ++i) perm[i] = i;
  rng.shuffle(perm);

  // Permuted evaluation through the MVN core directly.
  const Mat s = gp::build_covariance(p, grid);
  const Vec mean = gp::mean_vector(p, grid);
  Mat sp(m, m);
  Vec meanp(m), xp(m);
  for (int i = 0; i < m; ++i) {
    meanp[i] = mean[perm[i]];
    xp[i] = x[perm[i]];
    for (int j = 0; j < m; ++j) sp(i, j) = s(perm[i], perm[j]);
  }
  gp::CovFactor f(sp);
  CHECK(gp::log_likelihood_given(f, meanp, xp) == doctest::Approx(base).epsilon(1e-11));
}

TEST_CASE("missing values marginalize to the subset density") {
  Rng rng(17);
  const auto p = random_params(rng);
  const auto grid = random_grid(rng, 10);
  const int m = grid.size();
  Vec x(m);
  for (int i = 0; i < m; ++i) x[i] = rng.normal();
  x[1] = gp::missing_value();
  x[m - 1] = gp::missing_value();

  std::vector<int> idx;
  for (int i = 0; i < m; ++i)
    if (!gp::is_missing(x[i])) idx.push_back(i);
  const auto sub = grid.subset(idx);
  Vec xo(idx.size());
  for (std::size_t a = 0; a < idx.size(); ++a) xo[a] = x[idx[a]];
  CHECK(gp::log_likelihood(p, grid, x) ==
        doctest::Approx(gp::log_likelihood(p, sub, xo)).epsilon(1e-13));
}

TEST_CASE("simulate: noise-free limit reproduces mu * t") {
  gp::GpParams p;
  p.mu = -0.4;
  p.sigma2 = 1e-12;
  p.alpha2 = 1e-12;
  p.rho2 = 4.0;
  p.nu = 1.0;
  const auto grid = unit_grid({1, 5, 9, 20});
  const auto trajs = gp::simulate(p, grid, 5, 99);
  for (const auto& tr : trajs) {
    for (int i = 0; i < grid.size(); ++i) {
      CHECK(std::fabs(tr.values[i] - p.mu * grid.times[i]) < 1e-3);
    }
  }
}

TEST_CASE("simulate is deterministic given the seed") {
  Rng rng(23);
  const auto p = random_params(rng);
  const auto grid = random_grid(rng, 12);
  const auto a = gp::simulate(p, grid, 7, 1234);
  const auto b = gp::simulate(p, grid, 7, 1234);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].subject_id == b[i].subject_id);
    CHECK((a[i].values - b[i].values).norm() == 0.0);
  }
  const auto c = gp::simulate(p, grid, 7, 1235);
  CHECK((a[0].values - c[0].values).norm() != 0.0);
}

TEST_CASE("simulate moments: mean within 4 SE, covariance within 5 MC SE") {
  gp::GpParams p;
  p.mu = -0.3;
  p.sigma2 = 0.8;
  p.alpha2 = 1.2;
  p.beta = 0.5;
  p.rho2 = 6.0;
  p.nu = 1.2;
  const auto grid = unit_grid({1.0, 4.0, 9.0, 15.0});
  const int m = grid.size();
  const int n = 20000;
  const auto trajs = gp::simulate(p, grid, n, 321);
  const Mat sigma = gp::build_covariance(p, grid);
  const Vec mean = gp::mean_vector(p, grid);

  Vec xbar = Vec::Zero(m);
  for (const auto& tr : trajs) xbar += tr.values;
  xbar /= n;
  for (int i = 0; i < m; ++i) {
    const double se = std::sqrt(sigma(i, i) / n);
    CHECK(std::fabs(xbar[i] - mean[i]) < 4.0 * se);
  }

  Mat cov = Mat::Zero(m, m);
  for (const auto& tr : trajs) {
    const Vec d = tr.values - xbar;
    cov += d * d.transpose();
  }
  cov /= (n - 1);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < m; ++j) {
      const double var_entry = sigma(i, i) * sigma(j, j) + sigma(i, j) * sigma(i, j);
      const double se = std::sqrt(var_entry / n);
      CHECK(std::fabs(cov(i, j) - sigma(i, j)) < 5.0 * se);
    }
  }
}

TEST_CASE("analytic mu gradient matches central differences") {
  Rng rng(31);
  for (int rep = 0; rep < 8; ++rep) {
    const auto p = random_params(rng);
    const auto grid = random_grid(rng, 15);
    const int m = grid.size();
    Vec x(m);
    for (int i = 0; i < m; ++i) x[i] = p.mu * grid.times[i] + rng.normal();
    std::vector<gp::Trajectory> data{{"a", x}};

    const double h = 1e-5 * (1.0 + std::fabs(p.mu));
    auto at_mu = [&](double mu) {
      gp::GpParams q = p;
      q.mu = mu;
      return gp::log_likelihood(q, grid, x);
    };
    const double fd = (at_mu(p.mu + h) - at_mu(p.mu - h)) / (2.0 * h);

    const Mat s = gp::build_covariance(p, grid);
    gp::CovFactor f(s);
    const Vec r = x - gp::mean_vector(p, grid);
    const double analytic = grid.times.dot(f.solve(r));
    CHECK(std::fabs(analytic - fd) <= 1e-5 * std::max(1.0, std::fabs(fd)));
  }
}

TEST_CASE("invalid inputs are rejected") {
  gp::GpParams p;
  p.sigma2 = -1.0;
  CHECK_THROWS_AS(p.validate(), Error);
  p = gp::GpParams{};
  p.nu = 2.5;
  CHECK_THROWS_AS(p.validate(), Error);
  p = gp::GpParams{};
  Vec bad(2);
  bad << 3.0, 1.0;  // not increasing
  CHECK_THROWS_AS(gp::ObservationGrid::unit(std::move(bad)), Error);
  CHECK_THROWS_AS(gp::simulate(p, unit_grid({1, 2}), 0, 1), Error);
}
