#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <nlohmann/json.hpp>

#include "errors.hpp"
#include "lmm.hpp"
#include "oracles.hpp"
#include "special.hpp"

using namespace krct;

namespace {

lmm::LongData from_truth(const lmm::LmmTruth& truth, int n_per_arm, int n_time, std::uint64_t seed) {
  Rng rng(seed);
  return lmm::lmm_truth_generator(truth, n_per_arm, n_time)(rng);
}

}  // namespace

TEST_CASE("boundary fit reduces GLS to ordinary least squares") {
  // Within each group every subject is identical, so the between-subject
  // variance component collapses to zero and the fit must match OLS.
  lmm::LongData d;
  const double vals_t[] = {0.3, 1.1, 1.9, 3.2, 4.1};
  const double vals_c[] = {0.1, 0.7, 1.2, 1.6, 2.3};
  for (int s = 0; s < 3; ++s) {
    for (int k = 0; k < 5; ++k) {
      d.rows.push_back({"t" + std::to_string(s), static_cast<double>(k + 1), 1, vals_t[k]});
      d.rows.push_back({"c" + std::to_string(s), static_cast<double>(k + 1), 0, vals_c[k]});
    }
  }
  const auto fit = lmm::fit_lmm(d);
  CHECK(fit.boundary);
  CHECK(fit.sigma2_subject == doctest::Approx(0.0).epsilon(1e-10));

  // Normal equations on plain arrays.
  double xtx[4][4] = {}, xty[4] = {};
  for (const auto& r : d.rows) {
    const double x[4] = {1.0, r.week, static_cast<double>(r.group), r.group * r.week};
    for (int i = 0; i < 4; ++i) {
      xty[i] += x[i] * r.value;
      for (int j = 0; j < 4; ++j) xtx[i][j] += x[i] * x[j];
    }
  }
  oracles::DenseMat m(4), inv(4);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) m.a[i][j] = xtx[i][j];
  oracles::det_and_inverse(m, inv);
  for (int i = 0; i < 4; ++i) {
    double beta_i = 0.0;
    for (int j = 0; j < 4; ++j) beta_i += inv.a[i][j] * xty[j];
    CHECK(std::fabs(fit.beta[i] - beta_i) < 1e-8);
  }
}

TEST_CASE("identical groups zero out the group coefficients") {
  lmm::LongData d;
  Rng rng(12);
  std::vector<double> shared;
  for (int k = 0; k < 6; ++k) shared.push_back(0.4 * k + rng.normal());
  for (int s = 0; s < 4; ++s) {
    const double offset = rng.normal();
    for (int k = 0; k < 6; ++k) {
      d.rows.push_back({"t" + std::to_string(s), static_cast<double>(k + 1), 1, shared[k] + offset});
      d.rows.push_back({"c" + std::to_string(s), static_cast<double>(k + 1), 0, shared[k] + offset});
    }
  }
  const auto fit = lmm::fit_lmm(d);
  CHECK(std::fabs(fit.beta[2]) < 1e-8);
  CHECK(std::fabs(fit.beta[3]) < 1e-8);
  const auto res = lmm::lmm_interaction_test(fit, 0.05);
  CHECK(res.p_value == doctest::Approx(1.0).epsilon(1e-6));
  CHECK_FALSE(res.reject);
}

TEST_CASE("borderline Wald rejection at |z| = 1.96") {
  lmm::LmmFit fit;
  fit.beta[3] = 1.96;
  fit.se_beta3 = 1.0;
  fit.n_subjects_t = fit.n_subjects_c = 10;
  const auto res = lmm::lmm_interaction_test(fit, 0.05);
  CHECK(res.p_value == doctest::Approx(0.05).epsilon(1e-3));
  CHECK(res.p_value < 0.05);
  CHECK(res.reject);  // 1.96 exceeds the 1.959964 quantile
}

TEST_CASE("profiled likelihood equals the brute-force marginal MVN density") {
  lmm::LmmTruth truth;
  truth.beta0 = 0.5;
  truth.beta1 = -0.2;
  truth.beta2 = 0.3;
  truth.beta3 = 0.15;
  truth.sigma2_subject = 0.7;
  truth.sigma2_resid = 1.3;
  const auto d = from_truth(truth, 6, 5, 77);
  const auto fit = lmm::fit_lmm(d);

  // Group rows by subject and evaluate the marginal density with the
  // fitted parameters via the Gauss-Jordan oracle.
  std::map<std::string, std::vector<const lmm::LongRow*>> by_subject;
  for (const auto& r : d.rows) by_subject[r.subject_id].push_back(&r);
  double total = 0.0;
  for (const auto& [id, rows] : by_subject) {
    const int n = static_cast<int>(rows.size());
    std::vector<std::vector<double>> sigma(n, std::vector<double>(n, fit.sigma2_subject));
    for (int i = 0; i < n; ++i) sigma[i][i] += fit.sigma2_resid;
    std::vector<double> mean(n), x(n);
    for (int i = 0; i < n; ++i) {
      const auto& r = *rows[i];
      mean[i] = fit.beta[0] + fit.beta[1] * r.week + fit.beta[2] * r.group +
                fit.beta[3] * r.group * r.week;
      x[i] = r.value;
    }
    total += oracles::mvn_loglik(sigma, mean, x);
  }
  CHECK(fit.loglik == doctest::Approx(total).epsilon(1e-8));
}

TEST_CASE("fit is invariant to subject relabeling and time rescaling") {
  lmm::LmmTruth truth;
  truth.beta1 = -0.1;
  truth.beta3 = 0.2;
  truth.sigma2_subject = 0.5;
  const auto d = from_truth(truth, 5, 6, 31);
  const auto fit = lmm::fit_lmm(d);

  lmm::LongData renamed = d;
  for (auto& r : renamed.rows) r.subject_id = "zz-" + r.subject_id;
  const auto fit2 = lmm::fit_lmm(renamed);
  CHECK(fit2.loglik == doctest::Approx(fit.loglik).epsilon(1e-12));
  CHECK((fit2.beta - fit.beta).lpNorm<Eigen::Infinity>() < 1e-10);

  lmm::LongData scaled = d;
  for (auto& r : scaled.rows) r.week *= 2.0;
  const auto fit3 = lmm::fit_lmm(scaled);
  CHECK(fit3.beta[0] == doctest::Approx(fit.beta[0]).epsilon(1e-7));
  CHECK(fit3.beta[1] == doctest::Approx(0.5 * fit.beta[1]).epsilon(1e-7));
  CHECK(fit3.beta[2] == doctest::Approx(fit.beta[2]).epsilon(1e-7));
  CHECK(fit3.beta[3] == doctest::Approx(0.5 * fit.beta[3]).epsilon(1e-7));
  CHECK(fit3.loglik == doctest::Approx(fit.loglik).epsilon(1e-9));
}

TEST_CASE("null calibration of the interaction test") {
  lmm::LmmTruth truth;
  truth.beta1 = -0.05;
  truth.sigma2_subject = 0.8;
  truth.sigma2_resid = 1.0;
  const auto power = lmm::lmm_power_mc(lmm::lmm_truth_generator(truth, 12, 8), 0.05, 1500, 555);
  CHECK(power.n_skipped == 0);
  CHECK(power.power > 0.03);
  CHECK(power.power < 0.07);
}

TEST_CASE("power: null at alpha, huge slopes near one, oracle agreement") {
  lmm::LmmTruth big;
  big.beta3 = 2.0;
  const auto p_big = lmm::lmm_power_mc(lmm::lmm_truth_generator(big, 10, 6), 0.05, 400, 7);
  CHECK(p_big.power > 0.99);

  // Balanced-design closed form: Var(b3) = s2e (1/nT + 1/nC) / S_tt.
  lmm::LmmTruth mid;
  mid.beta3 = 0.06;
  mid.sigma2_subject = 0.4;
  mid.sigma2_resid = 1.0;
  const int n_per_arm = 15, n_time = 10;
  double t_bar = 0.0;
  for (int k = 1; k <= n_time; ++k) t_bar += k;
  t_bar /= n_time;
  double s_tt = 0.0;
  for (int k = 1; k <= n_time; ++k) s_tt += (k - t_bar) * (k - t_bar);
  const double sd = std::sqrt(mid.sigma2_resid * (2.0 / n_per_arm) / s_tt);
  const double z = num::normal_quantile(0.975);
  const double ncp = mid.beta3 / sd;
  const double analytic = num::normal_cdf(-z + ncp) + num::normal_cdf(-z - ncp);
  const auto mc = lmm::lmm_power_mc(lmm::lmm_truth_generator(mid, n_per_arm, n_time), 0.05, 4000, 11);
  CHECK(std::fabs(mc.power - analytic) < 0.02);
}

TEST_CASE("power is non-decreasing in subjects per arm") {
  lmm::LmmTruth truth;
  truth.beta3 = 0.05;
  truth.sigma2_subject = 0.5;
  truth.sigma2_resid = 1.0;
  double prev = -1.0;
  for (int n : {8, 16, 32}) {
    const auto p = lmm::lmm_power_mc(lmm::lmm_truth_generator(truth, n, 8), 0.05, 1500, 42 + n);
    CHECK(p.power >= prev - 0.02);
    prev = p.power;
  }
}

TEST_CASE("degenerate designs are rejected") {
  lmm::LongData d;
  for (int k = 0; k < 4; ++k) d.rows.push_back({"a", static_cast<double>(k), 1, 0.1 * k});
  for (int k = 0; k < 4; ++k) d.rows.push_back({"b", static_cast<double>(k), 1, 0.2 * k});
  CHECK_THROWS_AS(lmm::fit_lmm(d), Error);  // only one group

  lmm::LongData single;
  single.rows.push_back({"a", 1.0, 1, 0.5});
  single.rows.push_back({"b", 1.0, 0, 0.5});
  CHECK_THROWS_AS(lmm::fit_lmm(single), Error);  // one time point per subject

  lmm::LongData mixed = from_truth({}, 3, 4, 3);
  mixed.rows.push_back({mixed.rows[0].subject_id, 99.0, 1 - mixed.rows[0].group, 0.0});
  CHECK_THROWS_AS(lmm::fit_lmm(mixed), Error);  // subject in both groups
}

TEST_CASE("long CSV round trip and parse errors") {
  const auto d = from_truth({}, 3, 4, 9);
  const std::string path = "/tmp/krct_lmm_test.csv";
  {
    std::ofstream out(path);
    out << d.to_csv();
  }
  const auto back = lmm::LongData::from_csv(path);
  REQUIRE(back.rows.size() == d.rows.size());
  CHECK(back.rows[5].subject_id == d.rows[5].subject_id);
  CHECK(back.rows[5].value == doctest::Approx(d.rows[5].value));

  {
    std::ofstream out(path);
    out << "subject_id,week,group,value\na,1,X,0.5\n";
  }
  try {
    lmm::LongData::from_csv(path);
    FAIL("expected parse error");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  std::remove(path.c_str());
}

TEST_CASE("fit JSON carries the documented fields") {
  const auto fit = lmm::fit_lmm(from_truth({}, 4, 5, 21));
  const auto j = fit.to_json();
  for (const char* key : {"beta", "sigma2_subject", "sigma2_resid", "se_beta3", "loglik",
                          "boundary", "n_subjects_T", "n_subjects_C", "n_obs"}) {
    CHECK(j.contains(key));
  }
  CHECK(j["beta"].size() == 4);
}
