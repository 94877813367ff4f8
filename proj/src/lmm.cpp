#include "lmm.hpp"

#include <Eigen/Cholesky>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>

#include "errors.hpp"
#include "fmt.hpp"
#include "parallel.hpp"
#include "special.hpp"

namespace krct::lmm {

namespace {

using Mat4 = Eigen::Matrix4d;
using Vec4 = Eigen::Vector4d;

struct SubjectBlock {
  int group = 0;
  std::vector<double> weeks;
  std::vector<double> values;
  int n() const { return static_cast<int>(weeks.size()); }
};

std::vector<SubjectBlock> group_subjects(const LongData& data) {
  std::map<std::string, SubjectBlock> by_id;
  std::vector<std::string> order;
  for (const auto& r : data.rows) {
    auto [it, fresh] = by_id.try_emplace(r.subject_id);
    if (fresh) {
      it->second.group = r.group;
      order.push_back(r.subject_id);
    } else if (it->second.group != r.group) {
      throw InvalidArgument("lmm: subject '" + r.subject_id + "' appears in both groups");
    }
    it->second.weeks.push_back(r.week);
    it->second.values.push_back(r.value);
  }
  std::vector<SubjectBlock> blocks;
  blocks.reserve(order.size());
  for (const auto& id : order) blocks.push_back(std::move(by_id[id]));
  return blocks;
}

Vec4 design_row(double week, int group) {
  return Vec4(1.0, week, static_cast<double>(group), group * week);
}

struct ProfileEval {
  double loglik = -std::numeric_limits<double>::infinity();
  Vec4 beta = Vec4::Zero();
  double sigma2_resid = 0.0;
  Mat4 xtvx = Mat4::Zero();
  bool ok = false;
};

// Marginal ML profile at a fixed variance ratio lambda = s2_subject/s2_resid.
// (I + lambda J)^-1 = I - c J with c = lambda / (1 + lambda n_i).
ProfileEval profile_at(const std::vector<SubjectBlock>& blocks, long long n_total, double lambda) {
  ProfileEval ev;
  Mat4 xtvx = Mat4::Zero();
  Vec4 xtvy = Vec4::Zero();
  for (const auto& b : blocks) {
    const double c = lambda / (1.0 + lambda * b.n());
    Vec4 xsum = Vec4::Zero();
    double ysum = 0.0;
    for (int k = 0; k < b.n(); ++k) {
      const Vec4 x = design_row(b.weeks[k], b.group);
      xtvx.noalias() += x * x.transpose();
      xtvy.noalias() += x * b.values[k];
      xsum += x;
      ysum += b.values[k];
    }
    xtvx.noalias() -= c * (xsum * xsum.transpose());
    xtvy.noalias() -= c * xsum * ysum;
  }
  Eigen::LDLT<Mat4> ldlt(xtvx);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) return ev;
  const Vec4 beta = ldlt.solve(xtvy);

  double rss = 0.0, logdet_v = 0.0;
  for (const auto& b : blocks) {
    const double c = lambda / (1.0 + lambda * b.n());
    double rsum = 0.0, rsq = 0.0;
    for (int k = 0; k < b.n(); ++k) {
      const double r = b.values[k] - design_row(b.weeks[k], b.group).dot(beta);
      rsum += r;
      rsq += r * r;
    }
    rss += rsq - c * rsum * rsum;
    logdet_v += std::log1p(lambda * b.n());
  }
  if (!(rss > 0.0)) return ev;
  const double s2 = rss / static_cast<double>(n_total);
  ev.loglik = -0.5 * n_total * (std::log(2.0 * M_PI * s2) + 1.0) - 0.5 * logdet_v;
  ev.beta = beta;
  ev.sigma2_resid = s2;
  ev.xtvx = xtvx;
  ev.ok = true;
  return ev;
}

}  // namespace

LmmFit fit_lmm(const LongData& data) {
  if (data.rows.empty()) throw InvalidArgument("lmm: empty dataset");
  const auto blocks = group_subjects(data);
  int n_t = 0, n_c = 0;
  long long n_total = 0;
  for (const auto& b : blocks) {
    if (b.n() < 2) throw InvalidArgument("lmm: every subject needs at least 2 time points");
    n_total += b.n();
    (b.group == 1 ? n_t : n_c) += 1;
  }
  if (n_t < 2 || n_c < 2) throw InvalidArgument("lmm: need at least 2 subjects per group");

  // Coarse scan over log lambda, then golden-section refinement. lambda = 0
  // (no random intercept) is evaluated explicitly.
  constexpr double kLogLo = -16.0, kLogHi = 16.0;
  double best_log = kLogLo;
  ProfileEval best = profile_at(blocks, n_total, 0.0);
  bool best_is_zero = best.ok;
  if (!best.ok) throw Error(ErrorCode::numerical, "lmm: design is not identifiable");

  constexpr int kScan = 33;
  for (int i = 0; i < kScan; ++i) {
    const double lg = kLogLo + (kLogHi - kLogLo) * i / (kScan - 1.0);
    const ProfileEval ev = profile_at(blocks, n_total, std::exp(lg));
    if (ev.ok && ev.loglik > best.loglik) {
      best = ev;
      best_log = lg;
      best_is_zero = false;
    }
  }
  double final_lambda = best_is_zero ? 0.0 : std::exp(best_log);
  if (!best_is_zero) {
    const double step = (kLogHi - kLogLo) / (kScan - 1.0);
    double lo = best_log - step, hi = best_log + step;
    const double gr = 0.5 * (std::sqrt(5.0) - 1.0);
    double x1 = hi - gr * (hi - lo), x2 = lo + gr * (hi - lo);
    ProfileEval f1 = profile_at(blocks, n_total, std::exp(x1));
    ProfileEval f2 = profile_at(blocks, n_total, std::exp(x2));
    for (int it = 0; it < 80 && hi - lo > 1e-10; ++it) {
      if (f1.loglik > f2.loglik) {
        hi = x2;
        x2 = x1;
        f2 = f1;
        x1 = hi - gr * (hi - lo);
        f1 = profile_at(blocks, n_total, std::exp(x1));
      } else {
        lo = x1;
        x1 = x2;
        f1 = f2;
        x2 = lo + gr * (hi - lo);
        f2 = profile_at(blocks, n_total, std::exp(x2));
      }
    }
    const double mid = 0.5 * (lo + hi);
    const ProfileEval fm = profile_at(blocks, n_total, std::exp(mid));
    if (fm.ok && fm.loglik >= best.loglik) {
      best = fm;
      best_log = mid;
    }
    final_lambda = std::exp(best_log);
    // Re-check the zero boundary in case the profile is monotone down.
    const ProfileEval zero = profile_at(blocks, n_total, 0.0);
    if (zero.ok && zero.loglik >= best.loglik) {
      best = zero;
      final_lambda = 0.0;
      best_is_zero = true;
    }
  }

  LmmFit fit;
  fit.beta = best.beta;
  fit.sigma2_resid = best.sigma2_resid;
  fit.sigma2_subject = final_lambda * best.sigma2_resid;
  fit.loglik = best.loglik;
  fit.boundary = best_is_zero || best_log <= kLogLo + 1e-9 || best_log >= kLogHi - 1e-9;
  fit.n_subjects_t = n_t;
  fit.n_subjects_c = n_c;
  fit.n_obs = n_total;

  Eigen::LDLT<Mat4> ldlt(best.xtvx);
  const Mat4 cov_beta = fit.sigma2_resid * ldlt.solve(Mat4::Identity());
  const double var_b3 = cov_beta(3, 3);
  if (!(var_b3 > 0.0)) throw Error(ErrorCode::numerical, "lmm: interaction coefficient not identifiable");
  fit.se_beta3 = std::sqrt(var_b3);
  return fit;
}

stats::TestResult lmm_interaction_test(const LmmFit& fit, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw InvalidArgument("lmm test: alpha must be in (0, 1)");
  stats::TestResult res;
  res.method = "LMM-Wald";
  const double z = fit.beta[3] / fit.se_beta3;
  res.statistic = std::abs(z);
  res.threshold = num::normal_quantile(1.0 - 0.5 * alpha);
  res.p_value = 2.0 * (1.0 - num::normal_cdf(std::abs(z)));
  res.reject = res.statistic > res.threshold;
  res.alpha = alpha;
  res.n_T = fit.n_subjects_t;
  res.n_C = fit.n_subjects_c;
  if (fit.boundary) res.notes.push_back("variance component at boundary");
  return res;
}

LmmPower lmm_power_mc(const LongGenerator& generator, double alpha, int n_sims, std::uint64_t seed) {
  if (n_sims < 1) throw InvalidArgument("lmm_power_mc: n_sims must be >= 1");
  Rng master(seed);
  std::vector<int> outcome(n_sims, -1);  // 1 reject, 0 accept, -1 skipped
  parallel_for(n_sims, [&](std::size_t i) {
    Rng rng = master.child(i);
    try {
      const LongData d = generator(rng);
      const LmmFit fit = fit_lmm(d);
      outcome[i] = lmm_interaction_test(fit, alpha).reject ? 1 : 0;
    } catch (const Error&) {
      outcome[i] = -1;
    }
  });
  LmmPower p;
  p.n_sims = n_sims;
  for (int o : outcome) {
    if (o < 0) {
      ++p.n_skipped;
    } else if (o == 1) {
      ++p.n_reject;
    }
  }
  const int valid = n_sims - p.n_skipped;
  p.power = valid > 0 ? static_cast<double>(p.n_reject) / valid : 0.0;
  return p;
}

LongGenerator lmm_truth_generator(const LmmTruth& truth, int n_per_arm, int n_timepoints) {
  return [truth, n_per_arm, n_timepoints](Rng& rng) {
    LongData d;
    d.rows.reserve(static_cast<std::size_t>(2 * n_per_arm) * n_timepoints);
    const double sd_subj = std::sqrt(truth.sigma2_subject);
    const double sd_res = std::sqrt(truth.sigma2_resid);
    for (int g = 0; g < 2; ++g) {
      for (int s = 0; s < n_per_arm; ++s) {
        const double intercept = truth.beta0 + sd_subj * rng.normal();
        const std::string id = (g == 1 ? "T" : "C") + std::to_string(s);
        for (int k = 1; k <= n_timepoints; ++k) {
          const double mean =
              intercept + truth.beta1 * k + truth.beta2 * g + truth.beta3 * g * k;
          d.rows.push_back({id, static_cast<double>(k), g, mean + sd_res * rng.normal()});
        }
      }
    }
    return d;
  };
}

LongData LongData::from_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  LongData d;
  std::string line;
  int line_no = 0;
  std::vector<std::string> problems;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line_no == 1) {
      if (line != "subject_id,week,group,value")
        throw ParseError("'" + path + "': expected header subject_id,week,group,value");
      continue;
    }
    std::stringstream ss(line);
    std::string id, week_s, group_s, value_s;
    if (!std::getline(ss, id, ',') || !std::getline(ss, week_s, ',') ||
        !std::getline(ss, group_s, ',') || !std::getline(ss, value_s)) {
      problems.push_back("line " + std::to_string(line_no) + ": malformed row");
      continue;
    }
    LongRow r;
    r.subject_id = id;
    try {
      r.week = std::stod(week_s);
      r.value = std::stod(value_s);
    } catch (const std::exception&) {
      problems.push_back("line " + std::to_string(line_no) + ": bad number");
      continue;
    }
    if (group_s == "T") {
      r.group = 1;
    } else if (group_s == "C") {
      r.group = 0;
    } else {
      problems.push_back("line " + std::to_string(line_no) + ": group must be T or C");
      continue;
    }
    d.rows.push_back(std::move(r));
  }
  if (!problems.empty()) {
    std::string msg = "'" + path + "': " + std::to_string(problems.size()) + " bad rows";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ParseError(msg);
  }
  return d;
}

std::string LongData::to_csv() const {
  std::string out = "subject_id,week,group,value\n";
  for (const auto& r : rows) {
    out += r.subject_id + "," + format_double(r.week) + "," + (r.group == 1 ? "T" : "C") + "," +
           format_double(r.value) + "\n";
  }
  return out;
}

nlohmann::json LmmFit::to_json() const {
  return nlohmann::json{{"beta", {beta[0], beta[1], beta[2], beta[3]}},
                        {"sigma2_subject", sigma2_subject},
                        {"sigma2_resid", sigma2_resid},
                        {"se_beta3", se_beta3},
                        {"loglik", loglik},
                        {"boundary", boundary},
                        {"n_subjects_T", n_subjects_t},
                        {"n_subjects_C", n_subjects_c},
                        {"n_obs", n_obs}};
}

}  // namespace krct::lmm
