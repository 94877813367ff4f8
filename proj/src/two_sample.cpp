#include "two_sample.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <limits>
#include <nlohmann/json.hpp>

#include "errors.hpp"
#include "parallel.hpp"
#include "rng.hpp"
#include "special.hpp"

namespace krct::stats {

namespace {

void check_sample(const Sample& s) {
  if (s.size() == 0) throw InvalidArgument("sample '" + s.label + "' is empty");
}

std::vector<Vec> rows_of(const Mat& m) {
  std::vector<Vec> rows(m.rows());
  for (int i = 0; i < m.rows(); ++i) rows[i] = m.row(i).transpose();
  return rows;
}

/// Unbiased per-group covariance about the group's own mean.
Mat group_cov(const Mat& rows, Vec* mean_out) {
  const int n = static_cast<int>(rows.rows());
  const Vec mean = rows.colwise().mean().transpose();
  Mat c = Mat::Zero(rows.cols(), rows.cols());
  for (int i = 0; i < n; ++i) {
    const Vec d = rows.row(i).transpose() - mean;
    c.selfadjointView<Eigen::Lower>().rankUpdate(d);
  }
  c.triangularView<Eigen::StrictlyUpper>() = c.transpose().triangularView<Eigen::StrictlyUpper>();
  if (n >= 2) c /= static_cast<double>(n - 1);
  if (mean_out) *mean_out = mean;
  return c;
}

double lambda_min_ratio(const Mat& m, double* lmin) {
  Eigen::SelfAdjointEigenSolver<Mat> es(m, Eigen::EigenvaluesOnly);
  const double lo = es.eigenvalues().minCoeff();
  const double hi = es.eigenvalues().maxCoeff();
  if (lmin) *lmin = lo;
  return (hi > 0.0) ? lo / hi : -1.0;
}

}  // namespace

nlohmann::json TestResult::to_json() const {
  nlohmann::json j{{"method", method},   {"statistic", statistic}, {"threshold", threshold},
                   {"p_value", p_value}, {"reject", reject},       {"n_T", n_T},
                   {"n_C", n_C},         {"alpha", alpha}};
  j["seed"] = seed ? nlohmann::json(*seed) : nlohmann::json(nullptr);
  j["n_perm"] = n_perm ? nlohmann::json(*n_perm) : nlohmann::json(nullptr);
  if (dof1) j["dof1"] = *dof1;
  if (dof2) j["dof2"] = *dof2;
  if (!notes.empty()) j["notes"] = notes;
  return j;
}

KernelFn linear_kernel() {
  return [](const Vec& a, const Vec& b) { return a.dot(b); };
}

KernelFn gaussian_kernel(double bandwidth) {
  if (!(bandwidth > 0.0)) throw InvalidArgument("gaussian_kernel: bandwidth must be positive");
  const double inv = 1.0 / (2.0 * bandwidth * bandwidth);
  return [inv](const Vec& a, const Vec& b) { return std::exp(-(a - b).squaredNorm() * inv); };
}

double median_heuristic_bandwidth(const Mat& rows) {
  const int n = static_cast<int>(rows.rows());
  std::vector<double> d;
  d.reserve(static_cast<std::size_t>(n) * (n - 1) / 2);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) d.push_back((rows.row(i) - rows.row(j)).norm());
  if (d.empty()) return 1.0;
  std::nth_element(d.begin(), d.begin() + d.size() / 2, d.end());
  const double med = d[d.size() / 2];
  return med > 0.0 ? med : 1.0;
}

Mat gram_matrix(const Mat& rows, const KernelFn& kernel) {
  const auto items = rows_of(rows);
  const int n = static_cast<int>(items.size());
  Mat g(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) {
      const double v = kernel(items[i], items[j]);
      g(i, j) = v;
      g(j, i) = v;
    }
  }
  return g;
}

double mmd_unbiased_from_gram(const Mat& gram, const std::vector<int>& order, int n_T) {
  const int n = static_cast<int>(order.size());
  const int n_C = n - n_T;
  if (n_T < 2 || n_C < 2) throw InvalidArgument("mmd: each group needs at least 2 items");
  double within_t = 0.0;
  for (int a = 0; a < n_T; ++a)
    for (int b = 0; b < n_T; ++b)
      if (a != b) within_t += gram(order[a], order[b]);
  double within_c = 0.0;
  for (int a = n_T; a < n; ++a)
    for (int b = n_T; b < n; ++b)
      if (a != b) within_c += gram(order[a], order[b]);
  double cross = 0.0;
  for (int a = 0; a < n_T; ++a)
    for (int b = n_T; b < n; ++b) cross += gram(order[a], order[b]);
  return within_t / (static_cast<double>(n_T) * (n_T - 1)) +
         within_c / (static_cast<double>(n_C) * (n_C - 1)) -
         2.0 * cross / (static_cast<double>(n_T) * n_C);
}

double mmd_unbiased(const Sample& x_t, const Sample& x_c, const KernelFn& kernel) {
  check_sample(x_t);
  check_sample(x_c);
  if (x_t.dim() != x_c.dim()) throw InvalidArgument("mmd: feature dimensions differ");
  const int n_t = x_t.size(), n_c = x_c.size();
  if (n_t < 2 || n_c < 2) throw InvalidArgument("mmd: each group needs at least 2 items");
  const auto rows_t = rows_of(x_t.features);
  const auto rows_c = rows_of(x_c.features);

  // Each sum is accumulated in a value-canonical order so that swapping
  // the two samples reproduces the statistic bitwise.
  auto canonical_sum = [](std::vector<double>& terms) {
    std::sort(terms.begin(), terms.end());
    return pairwise_sum(terms);
  };
  std::vector<double> within_t, within_c, cross;
  within_t.reserve(n_t * (n_t - 1) / 2);
  within_c.reserve(n_c * (n_c - 1) / 2);
  cross.reserve(static_cast<std::size_t>(n_t) * n_c);
  for (int i = 0; i < n_t; ++i)
    for (int j = i + 1; j < n_t; ++j) within_t.push_back(kernel(rows_t[i], rows_t[j]));
  for (int i = 0; i < n_c; ++i)
    for (int j = i + 1; j < n_c; ++j) within_c.push_back(kernel(rows_c[i], rows_c[j]));
  for (int i = 0; i < n_t; ++i)
    for (int j = 0; j < n_c; ++j) cross.push_back(kernel(rows_t[i], rows_c[j]));

  return 2.0 * canonical_sum(within_t) / (static_cast<double>(n_t) * (n_t - 1)) +
         2.0 * canonical_sum(within_c) / (static_cast<double>(n_c) * (n_c - 1)) -
         2.0 * canonical_sum(cross) / (static_cast<double>(n_t) * n_c);
}

TestResult mmd_permutation_test_gram(const Mat& gram, int n_T, int n_C, double alpha, int n_perm,
                                     std::uint64_t seed) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw InvalidArgument("mmd test: alpha must be in (0, 1)");
  if (n_perm < 100) throw InvalidArgument("mmd test: n_perm must be >= 100");
  const int n = n_T + n_C;
  if (gram.rows() != n || gram.cols() != n) throw InvalidArgument("mmd test: gram size mismatch");

  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  const double observed = mmd_unbiased_from_gram(gram, order, n_T);

  Rng rng(seed);
  std::vector<double> perm_stats(n_perm);
  int count_ge = 0;
  for (int r = 0; r < n_perm; ++r) {
    rng.shuffle(order);
    perm_stats[r] = mmd_unbiased_from_gram(gram, order, n_T);
    if (perm_stats[r] >= observed) ++count_ge;
  }

  TestResult res;
  res.method = "MMD-permutation";
  res.statistic = observed;
  res.p_value = static_cast<double>(1 + count_ge) / (n_perm + 1);
  res.n_T = n_T;
  res.n_C = n_C;
  res.alpha = alpha;
  res.seed = seed;
  res.n_perm = n_perm;

  const int j = static_cast<int>(std::floor(alpha * (n_perm + 1)));
  if (j >= 1) {
    std::nth_element(perm_stats.begin(), perm_stats.begin() + (j - 1), perm_stats.end(),
                     std::greater<double>());
    res.threshold = perm_stats[j - 1];  // j-th largest permuted statistic
  } else {
    res.threshold = std::numeric_limits<double>::infinity();
  }
  res.reject = res.statistic > res.threshold;
  return res;
}

TestResult mmd_permutation_test(const Sample& x_t, const Sample& x_c, const KernelFn& kernel,
                                double alpha, int n_perm, std::uint64_t seed) {
  check_sample(x_t);
  check_sample(x_c);
  if (x_t.dim() != x_c.dim()) throw InvalidArgument("mmd: feature dimensions differ");
  Mat all(x_t.size() + x_c.size(), x_t.dim());
  all << x_t.features, x_c.features;
  const Mat g = gram_matrix(all, kernel);
  return mmd_permutation_test_gram(g, x_t.size(), x_c.size(), alpha, n_perm, seed);
}

KernelHotelling kernel_hotelling_full(const Sample& x_t, const Sample& x_c, double gamma,
                                      PooledWeights weights) {
  check_sample(x_t);
  check_sample(x_c);
  if (x_t.dim() != x_c.dim()) throw InvalidArgument("kernel hotelling: feature dimensions differ");
  if (x_t.size() < 2 || x_c.size() < 2)
    throw InvalidArgument("kernel hotelling: each group needs at least 2 items");
  if (gamma < 0.0) throw InvalidArgument("kernel hotelling: gamma must be >= 0");

  const double n_t = x_t.size(), n_c = x_c.size();
  Vec mean_t, mean_c;
  const Mat cov_t = group_cov(x_t.features, &mean_t);
  const Mat cov_c = group_cov(x_c.features, &mean_c);

  double w_t, w_c;
  if (weights == PooledWeights::shifted) {
    w_t = (n_t - 1.0) / (n_t + n_c + 2.0);
    w_c = (n_c + 1.0) / (n_t + n_c + 2.0);
  } else {
    w_t = (n_t - 1.0) / (n_t + n_c - 2.0);
    w_c = (n_c - 1.0) / (n_t + n_c - 2.0);
  }
  const Mat sigma_w = w_t * cov_t + w_c * cov_c;
  const int d = static_cast<int>(sigma_w.rows());

  if (gamma == 0.0) {
    double lmin = 0.0;
    if (lambda_min_ratio(sigma_w, &lmin) <= 1e-12)
      throw NumericalError("within covariance is singular with gamma = 0; use gamma > 0");
  }
  const Mat b = sigma_w + gamma * Mat::Identity(d, d);
  Eigen::LLT<Mat> llt(b);
  if (llt.info() != Eigen::Success)
    throw NumericalError("regularized within covariance not positive definite");

  const Vec diff = mean_c - mean_t;
  KernelHotelling kh;
  kh.quad = diff.dot(llt.solve(diff));
  const Mat binv_sw = llt.solve(sigma_w);
  kh.d1 = binv_sw.trace();
  kh.d2 = (binv_sw.array() * binv_sw.transpose().array()).sum();
  if (!(kh.d2 > 0.0)) throw NumericalError("kernel hotelling: d2 is not positive");
  kh.statistic = (kh.quad - kh.d1) / std::sqrt(2.0 * kh.d2);
  return kh;
}

double kernel_hotelling(const Sample& x_t, const Sample& x_c, double gamma, PooledWeights weights) {
  return kernel_hotelling_full(x_t, x_c, gamma, weights).statistic;
}

Hotelling hotelling_t2(const Sample& x_t, const Sample& x_c) {
  check_sample(x_t);
  check_sample(x_c);
  if (x_t.dim() != x_c.dim()) throw InvalidArgument("hotelling: feature dimensions differ");
  const int p = x_t.dim();
  const int n_t = x_t.size(), n_c = x_c.size();
  if (n_t + n_c - 2 < p)
    throw InvalidArgument("hotelling: need n_T + n_C - 2 >= feature dimension");

  Vec mean_t, mean_c;
  const Mat cov_t = group_cov(x_t.features, &mean_t);
  const Mat cov_c = group_cov(x_c.features, &mean_c);
  const Mat pooled = ((n_t - 1.0) * cov_t + (n_c - 1.0) * cov_c) / (n_t + n_c - 2.0);

  double lmin = 0.0;
  if (lambda_min_ratio(pooled, &lmin) <= 1e-12)
    throw NumericalError("pooled covariance is singular");
  Eigen::LLT<Mat> llt(pooled);
  if (llt.info() != Eigen::Success) throw NumericalError("pooled covariance not positive definite");

  const Vec diff = mean_t - mean_c;
  Hotelling h;
  h.t2 = (static_cast<double>(n_t) * n_c / (n_t + n_c)) * diff.dot(llt.solve(diff));
  h.dof1 = p;
  h.dof2 = n_t + n_c - 1 - p;
  h.f_stat = (static_cast<double>(n_t + n_c - p - 1) / ((n_t + n_c - 2.0) * p)) * h.t2;
  h.p_value = 1.0 - num::f_cdf(h.f_stat, h.dof1, h.dof2);
  return h;
}

TestResult hotelling_test(const Sample& x_t, const Sample& x_c, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw InvalidArgument("hotelling: alpha must be in (0, 1)");
  const Hotelling h = hotelling_t2(x_t, x_c);
  TestResult res;
  res.method = "Hotelling-F";
  res.statistic = h.f_stat;
  res.threshold = num::f_quantile(1.0 - alpha, h.dof1, h.dof2);
  res.p_value = h.p_value;
  res.reject = res.statistic > res.threshold;
  res.n_T = x_t.size();
  res.n_C = x_c.size();
  res.alpha = alpha;
  res.dof1 = h.dof1;
  res.dof2 = h.dof2;
  return res;
}

}  // namespace krct::stats
