#include "power.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <cmath>
#include <nlohmann/json.hpp>
#include <sstream>

#include "errors.hpp"
#include "fmt.hpp"
#include "special.hpp"

namespace krct::power {

double noncentral_f_cdf(double x, int dof1, int dof2, double delta) {
  if (dof1 < 1 || dof2 < 1) throw InvalidArgument("noncentral_f_cdf: dof must be >= 1");
  if (delta < 0.0) throw InvalidArgument("noncentral_f_cdf: delta must be >= 0");
  if (!(x >= 0.0)) throw InvalidArgument("noncentral_f_cdf: x must be >= 0");
  if (x == 0.0) return 0.0;

  const double a = 0.5 * dof1;
  const double b = 0.5 * dof2;
  const double y = dof1 * x / (dof1 * x + dof2);
  if (delta == 0.0) return num::reg_inc_beta(a, b, y);

  const double lambda = 0.5 * delta;
  constexpr double kTailTol = 1e-12;
  constexpr long kTermCap = 100000;

  const long k0 = static_cast<long>(std::floor(lambda));
  // Central term: Poisson weight, incomplete beta, and the "gap"
  // g(a+k) = y^(a+k) (1-y)^b / ((a+k) B(a+k, b)) linking neighbours via
  // I(a+k+1) = I(a+k) - g(a+k).
  const double log_w0 = -lambda + k0 * std::log(lambda) - std::lgamma(k0 + 1.0);
  const double w0 = std::exp(log_w0);
  const double i0 = num::reg_inc_beta(a + k0, b, y);
  auto gap_at = [&](double ak) {
    return std::exp(ak * std::log(y) + b * std::log1p(-y) - std::log(ak) - num::log_beta(ak, b));
  };

  double sum = w0 * i0;
  double consumed = w0;
  long terms = 1;

  // Upward from k0.
  {
    double w = w0, ib = i0, g = gap_at(a + k0);
    long k = k0;
    while (consumed < 1.0 - kTailTol && terms < kTermCap) {
      ib -= g;
      if (ib < 0.0) ib = 0.0;
      g *= y * (a + k + b) / (a + k + 1.0);
      ++k;
      w *= lambda / static_cast<double>(k);
      sum += w * ib;
      consumed += w;
      ++terms;
      if (w * ib < kTailTol * 1e-3 && w < kTailTol) break;
    }
  }
  // Downward from k0.
  {
    double w = w0, ib = i0, g_above = gap_at(a + k0);
    for (long k = k0 - 1; k >= 0 && consumed < 1.0 - kTailTol && terms < kTermCap; --k) {
      double g = g_above * (a + k + 1.0) / (y * (a + k + b));
      if (!std::isfinite(g)) g = gap_at(a + k);
      ib += g;
      if (ib > 1.0) ib = 1.0;
      w *= static_cast<double>(k + 1) / lambda;
      sum += w * ib;
      consumed += w;
      g_above = g;
      ++terms;
    }
  }

  if (consumed < 1.0 - kTailTol && terms >= kTermCap) {
    std::ostringstream msg;
    msg << "noncentral_f_cdf: series not converged after " << terms
        << " terms; partial sum = " << sum << ", consumed Poisson mass = " << consumed;
    throw NumericalError(msg.str());
  }
  // Unconsumed mass multiplies incomplete-beta values in [0, 1]; the sum
  // itself is already within the tail tolerance.
  if (sum < 0.0) sum = 0.0;
  if (sum > 1.0) sum = 1.0;
  return sum;
}

double effect_size(const Vec& shift, const Mat& sigma_pooled) {
  if (shift.size() != sigma_pooled.rows() || sigma_pooled.rows() != sigma_pooled.cols())
    throw InvalidArgument("effect_size: dimension mismatch");
  Eigen::SelfAdjointEigenSolver<Mat> es(sigma_pooled, Eigen::EigenvaluesOnly);
  const double lmin = es.eigenvalues().minCoeff();
  const double lmax = es.eigenvalues().maxCoeff();
  if (!(lmin > 0.0) || lmin <= 1e-12 * lmax)
    throw NumericalError("effect_size: covariance is singular");
  Eigen::LLT<Mat> llt(sigma_pooled);
  if (llt.info() != Eigen::Success) throw NumericalError("effect_size: covariance not positive definite");
  const double q = shift.dot(llt.solve(shift));
  return std::sqrt(std::max(q, 0.0));
}

double power_at(int n_T, int n_C, int p, double alpha, double effect) {
  if (n_T < 1 || n_C < 1) throw InvalidArgument("power_at: group sizes must be >= 1");
  if (p < 1) throw InvalidArgument("power_at: dimension must be >= 1");
  if (!(alpha > 0.0 && alpha < 1.0)) throw InvalidArgument("power_at: alpha must be in (0, 1)");
  if (effect < 0.0) throw InvalidArgument("power_at: effect must be >= 0");
  const int dof2 = n_T + n_C - 1 - p;
  if (dof2 < 1) throw InvalidArgument("power_at: infeasible degrees of freedom (need n_T+n_C-1-p >= 1)");
  const double delta =
      (static_cast<double>(n_T) * n_C / (static_cast<double>(n_T) + n_C)) * effect * effect;
  const double f_crit = num::f_quantile(1.0 - alpha, p, dof2);
  return 1.0 - noncentral_f_cdf(f_crit, p, dof2, delta);
}

namespace {

// Smallest feasible control-arm size for the allocation ratio.
std::pair<int, int> design_for(double allocation, int n_c) {
  const int n_t = std::max(1, static_cast<int>(std::llround(allocation * n_c)));
  return {n_t, n_c};
}

}  // namespace

std::pair<int, int> sample_size_for_power(double target_power, int p, double alpha, double effect,
                                          double allocation, long long n_cap) {
  if (!(target_power > alpha && target_power < 1.0))
    throw InvalidArgument("sample_size_for_power: target must be in (alpha, 1)");
  if (!(effect > 0.0)) throw InvalidArgument("sample_size_for_power: effect must be > 0");
  if (!(allocation > 0.0)) throw InvalidArgument("sample_size_for_power: allocation must be > 0");

  int n_c = 1;
  while (true) {
    auto [n_t, nc] = design_for(allocation, n_c);
    if (n_t + nc - 1 - p >= 1) break;
    ++n_c;
  }

  // Linear scan over the design lattice; power is monotone in n_C for a
  // fixed ratio, so switch to bisection past 1e4 total.
  constexpr long long kScanLimit = 10000;
  int lo_fail = n_c - 1;
  for (;; ++n_c) {
    auto [n_t, nc] = design_for(allocation, n_c);
    const long long total = static_cast<long long>(n_t) + nc;
    if (total > n_cap) {
      std::ostringstream msg;
      msg << "sample_size_for_power: effect " << effect << " needs more than the cap of " << n_cap
          << " subjects (power at cap not reached)";
      throw Error(ErrorCode::nonconvergence, msg.str());
    }
    if (total > kScanLimit) break;
    if (power_at(n_t, nc, p, alpha, effect) >= target_power) return {n_t, nc};
    lo_fail = n_c;
  }

  // Bisection: lo_fail fails, find a passing upper bound then narrow.
  int hi = n_c;
  while (true) {
    auto [n_t, nc] = design_for(allocation, hi);
    if (static_cast<long long>(n_t) + nc > n_cap) {
      std::ostringstream msg;
      msg << "sample_size_for_power: effect " << effect << " needs more than the cap of " << n_cap
          << " subjects";
      throw Error(ErrorCode::nonconvergence, msg.str());
    }
    if (power_at(n_t, nc, p, alpha, effect) >= target_power) break;
    lo_fail = hi;
    hi = static_cast<int>(std::min<long long>(2LL * hi, n_cap));
    if (hi == lo_fail) {
      throw Error(ErrorCode::nonconvergence, "sample_size_for_power: cap reached without target power");
    }
  }
  while (hi - lo_fail > 1) {
    const int mid = lo_fail + (hi - lo_fail) / 2;
    auto [n_t, nc] = design_for(allocation, mid);
    if (power_at(n_t, nc, p, alpha, effect) >= target_power) {
      hi = mid;
    } else {
      lo_fail = mid;
    }
  }
  return design_for(allocation, hi);
}

LocalAlternative local_alternative_from_cohorts(const stats::Sample& asymptomatic,
                                                const stats::Sample& symptomatic, double rho) {
  if (asymptomatic.size() == 0 || symptomatic.size() == 0)
    throw InvalidArgument("local alternative: cohorts must be non-empty");
  if (asymptomatic.dim() != symptomatic.dim())
    throw InvalidArgument("local alternative: cohort feature dimensions differ");
  if (!(rho >= 0.0 && rho <= 1.0)) throw InvalidArgument("local alternative: rho must be in [0, 1]");
  LocalAlternative alt;
  alt.mu_A = asymptomatic.features.colwise().mean().transpose();
  alt.mu_S = symptomatic.features.colwise().mean().transpose();
  alt.rho = rho;
  return alt;
}

std::string PowerCurve::to_csv() const {
  std::string out = "n_total,n_T,n_C,power\n";
  for (const auto& r : rows) {
    out += std::to_string(r.n_total) + "," + std::to_string(r.n_T) + "," + std::to_string(r.n_C) +
           "," + format_double(r.power) + "\n";
  }
  return out;
}

nlohmann::json PowerCurve::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto& r : rows) {
    rows_json.push_back(
        {{"n_total", r.n_total}, {"n_T", r.n_T}, {"n_C", r.n_C}, {"power", r.power}});
  }
  return nlohmann::json{{"allocation", allocation},
                        {"alpha", alpha},
                        {"dim", dim},
                        {"effect", effect},
                        {"rows", rows_json}};
}

PowerCurve PowerCurve::from_json(const nlohmann::json& j) {
  PowerCurve c;
  c.allocation = j.at("allocation").get<double>();
  c.alpha = j.at("alpha").get<double>();
  c.dim = j.at("dim").get<int>();
  c.effect = j.at("effect").get<double>();
  for (const auto& r : j.at("rows")) {
    c.rows.push_back({r.at("n_total").get<int>(), r.at("n_T").get<int>(), r.at("n_C").get<int>(),
                      r.at("power").get<double>()});
  }
  return c;
}

PowerCurve power_curve(const std::vector<int>& n_totals, int p, double alpha, double effect,
                       double allocation) {
  PowerCurve curve;
  curve.allocation = allocation;
  curve.alpha = alpha;
  curve.dim = p;
  curve.effect = effect;
  for (int n_total : n_totals) {
    int n_c = std::max(1, static_cast<int>(std::llround(n_total / (1.0 + allocation))));
    int n_t = n_total - n_c;
    if (n_t < 1) {
      n_t = 1;
      n_c = n_total - 1;
    }
    curve.rows.push_back({n_total, n_t, n_c, power_at(n_t, n_c, p, alpha, effect)});
  }
  for (std::size_t i = 1; i < curve.rows.size(); ++i) {
    if (curve.rows[i].n_total <= curve.rows[i - 1].n_total)
      throw InvalidArgument("power_curve: n grid must be strictly increasing");
    if (curve.rows[i].power < curve.rows[i - 1].power - 1e-9)
      throw NumericalError("power_curve: power not monotone in n");
  }
  return curve;
}

}  // namespace krct::power
