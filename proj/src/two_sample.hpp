#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json_fwd.hpp"

namespace krct::stats {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// One arm of a trial: a label and explicit feature vectors (one row per
/// subject). Raw-item tests go through gram_matrix with a kernel evaluator.
struct Sample {
  std::string label;
  Mat features;

  int size() const { return static_cast<int>(features.rows()); }
  int dim() const { return static_cast<int>(features.cols()); }
};

struct TestResult {
  std::string method;
  double statistic = 0.0;
  double threshold = 0.0;
  double p_value = 1.0;
  bool reject = false;
  int n_T = 0;
  int n_C = 0;
  double alpha = 0.0;
  std::optional<std::uint64_t> seed;
  std::optional<int> n_perm;
  std::optional<int> dof1, dof2;
  std::vector<std::string> notes;

  nlohmann::json to_json() const;
};

using KernelFn = std::function<double(const Vec&, const Vec&)>;

KernelFn linear_kernel();
KernelFn gaussian_kernel(double bandwidth);
/// Median pairwise distance over the rows; a standard Gaussian bandwidth.
double median_heuristic_bandwidth(const Mat& rows);

/// Entry (i, j) = K(row_i, row_j). Computed once and reused across
/// permutations.
Mat gram_matrix(const Mat& rows, const KernelFn& kernel);

/// Unbiased MMD^2 from a precomputed Gram matrix. `order` is a permutation
/// of 0..N-1; the first n_T entries are the treatment arm. Summation order
/// depends only on (order, n_T), so a from-scratch Gram over permuted items
/// reproduces the value bitwise.
double mmd_unbiased_from_gram(const Mat& gram, const std::vector<int>& order, int n_T);

double mmd_unbiased(const Sample& x_t, const Sample& x_c, const KernelFn& kernel);

TestResult mmd_permutation_test(const Sample& x_t, const Sample& x_c, const KernelFn& kernel,
                                double alpha, int n_perm, std::uint64_t seed);
/// Same test from a precomputed Gram over [treatment rows; control rows].
TestResult mmd_permutation_test_gram(const Mat& gram, int n_T, int n_C, double alpha, int n_perm,
                                     std::uint64_t seed);

/// Mixture weights for the within covariance: `shifted` (the default)
/// weights the two group covariances by (n_T-1)/(n_T+n_C+2) and
/// (n_C+1)/(n_T+n_C+2); `standard` substitutes the usual pooled
/// (n_T-1)/(n_T+n_C-2), (n_C-1)/(n_T+n_C-2).
enum class PooledWeights { shifted, standard };

struct KernelHotelling {
  double statistic = 0.0;  // (quad - d1) / sqrt(2 d2)
  double quad = 0.0;       // <diff, (S_W + gamma I)^-1 diff>
  double d1 = 0.0;
  double d2 = 0.0;
};

KernelHotelling kernel_hotelling_full(const Sample& x_t, const Sample& x_c, double gamma,
                                      PooledWeights weights = PooledWeights::shifted);
double kernel_hotelling(const Sample& x_t, const Sample& x_c, double gamma,
                        PooledWeights weights = PooledWeights::shifted);

struct Hotelling {
  double t2 = 0.0;
  double f_stat = 0.0;
  int dof1 = 0;
  int dof2 = 0;
  double p_value = 1.0;
};

/// Two-sample Hotelling T^2 with the unbiased pooled covariance;
/// the scaled statistic is referred to F(p, n_T + n_C - 1 - p).
Hotelling hotelling_t2(const Sample& x_t, const Sample& x_c);
TestResult hotelling_test(const Sample& x_t, const Sample& x_c, double alpha);

}  // namespace krct::stats
