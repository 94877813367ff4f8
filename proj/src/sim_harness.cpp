#include "sim_harness.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "errors.hpp"
#include "fmt.hpp"
#include "lmm.hpp"
#include "parallel.hpp"
#include "rng.hpp"
#include "two_sample.hpp"

namespace krct::sim {

void Scenario::validate() const {
  theta_control.validate();
  theta_treated.validate();
  const auto a = theta_control.to_array();
  const auto b = theta_treated.to_array();
  for (int j = 1; j < 6; ++j) {
    if (a[j] != b[j])
      throw InvalidArgument("scenario: treated and control parameters may differ only in mu");
  }
  if (span <= 0.0) throw InvalidArgument("scenario: span must be positive");
  if (n_list.empty() || t_list.empty()) throw InvalidArgument("scenario: empty n or t grid");
  for (int n : n_list)
    if (n < 2) throw InvalidArgument("scenario: n per arm must be >= 2");
  for (int t : t_list)
    if (t < 2) throw InvalidArgument("scenario: t must be >= 2");
  if (n_sims < 1) throw InvalidArgument("scenario: n_sims must be >= 1");
  if (!(alpha > 0.0 && alpha < 1.0)) throw InvalidArgument("scenario: alpha must be in (0, 1)");
  if (pretrial_n < 2) throw InvalidArgument("scenario: pretrial_n must be >= 2");
}

namespace {

gp::ObservationGrid grid_for(double span, int t) {
  gp::Vec times(t);
  for (int k = 0; k < t; ++k) times[k] = span * (k + 1) / t;
  return gp::ObservationGrid::unit(std::move(times));
}

lmm::LongData long_format(const std::vector<gp::Trajectory>& treated,
                          const std::vector<gp::Trajectory>& control, const gp::Vec& times) {
  lmm::LongData d;
  d.rows.reserve((treated.size() + control.size()) * times.size());
  for (const auto& tr : treated) {
    for (int k = 0; k < tr.values.size(); ++k) {
      if (!gp::is_missing(tr.values[k])) d.rows.push_back({tr.subject_id, times[k], 1, tr.values[k]});
    }
  }
  for (const auto& tr : control) {
    for (int k = 0; k < tr.values.size(); ++k) {
      if (!gp::is_missing(tr.values[k])) d.rows.push_back({tr.subject_id, times[k], 0, tr.values[k]});
    }
  }
  return d;
}

void check_disjoint_ids(const std::vector<gp::Trajectory>& fit_data,
                        const std::vector<gp::Trajectory>& trial_a,
                        const std::vector<gp::Trajectory>& trial_b) {
  std::set<std::string> fit_ids;
  for (const auto& tr : fit_data) fit_ids.insert(tr.subject_id);
  for (const auto* arm : {&trial_a, &trial_b}) {
    for (const auto& tr : *arm) {
      if (fit_ids.count(tr.subject_id))
        throw Error(ErrorCode::invalid_argument,
                    "embedding-fit data and trial data share subject id '" + tr.subject_id + "'");
    }
  }
}

}  // namespace

ExperimentTable run_power_experiment(const Scenario& scenario) {
  scenario.validate();
  ExperimentTable table;
  Rng master(scenario.seed);

  int cell_index = 0;
  for (int n : scenario.n_list) {
    for (int t : scenario.t_list) {
      const gp::ObservationGrid grid = grid_for(scenario.span, t);
      const Rng cell_rng = master.child(cell_index);

      // Pre-trial phase: a fresh asymptomatic cohort, never reused in the
      // trial replicates below.
      const auto pretrial = gp::simulate(scenario.theta_control, grid, scenario.pretrial_n,
                                         cell_rng.child(0).seed(), "pretrial-");
      gp::FitConfig fitcfg = scenario.fit;
      fitcfg.seed = cell_rng.child(1).seed();
      gp::FitResult fit;
      try {
        fit = gp::fit_mle(pretrial, grid, gp::heuristic_init(pretrial, grid), fitcfg);
      } catch (const gp::FitNonConvergence& e) {
        fit = e.best();
      }
      const fisher::FisherEmbedding emb = fisher::build_embedding(fit.params, grid, pretrial);

      std::vector<double> p_fvh(scenario.n_sims), p_lmm(scenario.n_sims);
      parallel_for(scenario.n_sims, [&](std::size_t r) {
        const Rng rep = cell_rng.child(100 + r);
        const std::string tag = "trial-" + std::to_string(cell_index) + "-" + std::to_string(r);
        const auto treated =
            gp::simulate(scenario.theta_treated, grid, n, rep.child(0).seed(), tag + "-T-");
        const auto control =
            gp::simulate(scenario.theta_control, grid, n, rep.child(1).seed(), tag + "-C-");
        if (r == 0) check_disjoint_ids(pretrial, treated, control);

        try {
          stats::Sample st{"T", fisher::fisher_vectors(emb, treated)};
          stats::Sample sc{"C", fisher::fisher_vectors(emb, control)};
          p_fvh[r] = stats::hotelling_t2(st, sc).p_value;
        } catch (const Error&) {
          p_fvh[r] = std::numeric_limits<double>::quiet_NaN();
        }
        try {
          const lmm::LmmFit lf = lmm::fit_lmm(long_format(treated, control, grid.times));
          p_lmm[r] = lmm::lmm_interaction_test(lf, scenario.alpha).p_value;
        } catch (const Error&) {
          p_lmm[r] = std::numeric_limits<double>::quiet_NaN();
        }
      });

      for (const auto& [method, pvals] :
           {std::pair{std::string("FvH"), &p_fvh}, std::pair{std::string("LMM"), &p_lmm}}) {
        CellResult cell;
        cell.method = method;
        cell.n = n;
        cell.t = t;
        cell.p_values = *pvals;
        int rejects = 0, valid = 0;
        for (double p : *pvals) {
          if (std::isnan(p)) {
            ++cell.n_fail;
            continue;
          }
          ++valid;
          if (p <= scenario.alpha) ++rejects;
        }
        cell.powr = valid > 0 ? static_cast<double>(rejects) / valid : 0.0;
        cell.se = valid > 0 ? std::sqrt(cell.powr * (1.0 - cell.powr) / valid) : 0.0;
        table.cells.push_back(std::move(cell));
      }
      ++cell_index;
    }
  }
  return table;
}

std::string ExperimentTable::replicates_csv() const {
  std::string out = "method,n,t,replicate,p_value\n";
  for (const auto& c : cells) {
    for (std::size_t r = 0; r < c.p_values.size(); ++r) {
      out += c.method + "," + std::to_string(c.n) + "," + std::to_string(c.t) + "," +
             std::to_string(r) + ",";
      if (!std::isnan(c.p_values[r])) out += format_double(c.p_values[r]);
      out += "\n";
    }
  }
  return out;
}

std::string ExperimentTable::summary_csv() const {
  std::string out = "method,n,t,power,se\n";
  for (const auto& c : cells) {
    out += c.method + "," + std::to_string(c.n) + "," + std::to_string(c.t) + "," +
           format_double(c.powr) + "," + format_double(c.se) + "\n";
  }
  return out;
}

FoldPlan build_fold_plan(const std::vector<std::string>& cn_ids,
                         const std::vector<std::string>& mci_ids, std::uint64_t seed, int n_folds,
                         int fold_size) {
  if (n_folds < 2 || fold_size < 1) throw InvalidArgument("fold plan: bad fold shape");
  const int slots = n_folds * fold_size;
  const int n_cn = static_cast<int>(cn_ids.size());
  const int repeats = slots - n_cn;
  if (repeats < 0)
    throw InvalidArgument("fold plan: more CN subjects than fold slots (" + std::to_string(n_cn) +
                          " > " + std::to_string(slots) + ")");
  if (repeats >= fold_size)
    throw InvalidArgument("fold plan: too few CN subjects for " + std::to_string(n_folds) + "x" +
                          std::to_string(fold_size) + " folds");
  if (mci_ids.empty()) throw InvalidArgument("fold plan: MCI id list is empty");
  {
    std::set<std::string> uniq(cn_ids.begin(), cn_ids.end());
    if (static_cast<int>(uniq.size()) != n_cn)
      throw InvalidArgument("fold plan: duplicate CN ids");
  }

  std::vector<std::string> shuffled = cn_ids;
  Rng rng(seed);
  rng.shuffle(shuffled);

  FoldPlan plan;
  plan.folds.resize(n_folds);
  for (int f = 0; f < n_folds; ++f) {
    const int lo = f * fold_size;
    const int hi = std::min(lo + fold_size, n_cn);
    for (int i = lo; i < hi; ++i) plan.folds[f].treated.push_back(shuffled[i]);
  }
  // Fill the deficit of the last fold with ids it does not already contain;
  // each filler then appears in exactly two folds.
  auto& last = plan.folds[n_folds - 1].treated;
  std::set<std::string> in_last(last.begin(), last.end());
  std::vector<std::string> candidates;
  for (int i = 0; i < n_cn - static_cast<int>(last.size()); ++i) {
    if (!in_last.count(shuffled[i])) candidates.push_back(shuffled[i]);
  }
  rng.shuffle(candidates);
  for (int r = 0; r < repeats; ++r) last.push_back(candidates[r]);

  for (auto& fold : plan.folds) {
    fold.control = mci_ids;
    std::set<std::string> treated(fold.treated.begin(), fold.treated.end());
    for (const auto& id : cn_ids) {
      if (!treated.count(id)) fold.heldout.push_back(id);
    }
  }
  return plan;
}

nlohmann::json FoldPlan::to_json() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& f : folds) {
    arr.push_back({{"treated", f.treated}, {"control", f.control}, {"heldout", f.heldout}});
  }
  return nlohmann::json{{"folds", arr}};
}

namespace {

// Total n reaching the target power, or -1 when unreachable (for example
// a zero shift under rho = 1).
int n_for_target(double effect, const FoldPowerOptions& opts) {
  if (!(effect > 0.0)) return -1;
  try {
    auto [nt, nc] = power::sample_size_for_power(opts.target_power, 6, opts.alpha, effect);
    return nt + nc;
  } catch (const Error&) {
    return -1;
  }
}

}  // namespace

FoldPowerResult run_fold_power(const FoldPlan& plan, const std::vector<gp::Trajectory>& data,
                               const std::vector<std::string>& cohorts,
                               const gp::ObservationGrid& grid, const FoldPowerOptions& opts) {
  if (data.size() != cohorts.size())
    throw InvalidArgument("fold power: trajectories and cohort labels differ in length");
  if (opts.n_grid.empty()) throw InvalidArgument("fold power: empty n grid");

  std::map<std::string, int> index_of;
  for (std::size_t i = 0; i < data.size(); ++i) index_of[data[i].subject_id] = static_cast<int>(i);
  auto collect = [&](const std::vector<std::string>& ids) {
    std::vector<gp::Trajectory> out;
    out.reserve(ids.size());
    for (const auto& id : ids) {
      auto it = index_of.find(id);
      if (it == index_of.end())
        throw InvalidArgument("fold power: unknown subject id '" + id + "'");
      out.push_back(data[it->second]);
    }
    return out;
  };

  const int n_folds = static_cast<int>(plan.folds.size());
  struct FoldOut {
    bool ok = false;
    std::string error;
    power::Vec shift;
    power::Mat pooled;
    double effect = 0.0;
  };
  std::vector<FoldOut> fold_out(n_folds);

  parallel_for(n_folds, [&](std::size_t f) {
    auto& fo = fold_out[f];
    try {
      const auto& fold = plan.folds[f];
      const auto heldout = collect(fold.heldout);
      const auto treated = collect(fold.treated);
      const auto control = collect(fold.control);
      check_disjoint_ids(heldout, treated, control);

      gp::FitConfig fitcfg = opts.fit;
      fitcfg.seed = opts.fit.seed + f;
      gp::FitResult fit;
      try {
        fit = gp::fit_mle(heldout, grid, gp::heuristic_init(heldout, grid), fitcfg);
      } catch (const gp::FitNonConvergence& e) {
        fit = e.best();
      }
      const auto emb = fisher::build_embedding(fit.params, grid, heldout);

      stats::Sample sample_a{"A", fisher::fisher_vectors(emb, treated)};
      stats::Sample sample_s{"S", fisher::fisher_vectors(emb, control)};
      const auto alt = power::local_alternative_from_cohorts(sample_a, sample_s, opts.rho);

      const int n_a = sample_a.size(), n_s = sample_s.size();
      auto cov_about_mean = [](const stats::Mat& rows) {
        const power::Vec mean = rows.colwise().mean().transpose();
        power::Mat c = power::Mat::Zero(rows.cols(), rows.cols());
        for (int i = 0; i < rows.rows(); ++i) {
          const power::Vec d = rows.row(i).transpose() - mean;
          c += d * d.transpose();
        }
        return c;
      };
      fo.pooled = (cov_about_mean(sample_a.features) + cov_about_mean(sample_s.features)) /
                  static_cast<double>(n_a + n_s - 2);
      fo.shift = alt.shift();
      fo.effect = power::effect_size(fo.shift, fo.pooled);
      fo.ok = true;
    } catch (const std::exception& e) {
      fo.error = e.what();
    }
  });

  FoldPowerResult res;
  power::Vec shift_sum;
  power::Mat pooled_sum;
  int n_ok = 0;
  for (int f = 0; f < n_folds; ++f) {
    const auto& fo = fold_out[f];
    if (!fo.ok) {
      res.skipped.push_back("fold " + std::to_string(f) + ": " + fo.error);
      continue;
    }
    auto curve = power::power_curve(opts.n_grid, 6, opts.alpha, fo.effect);
    res.fold_curves.push_back(std::move(curve));
    res.fold_n_for_target.push_back(n_for_target(fo.effect, opts));
    if (n_ok == 0) {
      shift_sum = fo.shift;
      pooled_sum = fo.pooled;
    } else {
      shift_sum += fo.shift;
      pooled_sum += fo.pooled;
    }
    ++n_ok;
  }
  if (n_ok == 0) throw Error(ErrorCode::numerical, "fold power: every fold failed");

  const power::Vec avg_shift = shift_sum / n_ok;
  const power::Mat avg_pooled = pooled_sum / n_ok;
  const double avg_effect = power::effect_size(avg_shift, avg_pooled);
  res.averaged = power::power_curve(opts.n_grid, 6, opts.alpha, avg_effect);
  res.averaged_n_for_target = n_for_target(avg_effect, opts);
  return res;
}

std::string FoldPowerResult::curves_csv() const {
  std::string out = "fold,n_total,n_T,n_C,power\n";
  for (std::size_t f = 0; f < fold_curves.size(); ++f) {
    for (const auto& r : fold_curves[f].rows) {
      out += std::to_string(f) + "," + std::to_string(r.n_total) + "," + std::to_string(r.n_T) +
             "," + std::to_string(r.n_C) + "," + format_double(r.power) + "\n";
    }
  }
  for (const auto& r : averaged.rows) {
    out += "avg," + std::to_string(r.n_total) + "," + std::to_string(r.n_T) + "," +
           std::to_string(r.n_C) + "," + format_double(r.power) + "\n";
  }
  return out;
}

nlohmann::json FoldPowerResult::to_json() const {
  nlohmann::json folds = nlohmann::json::array();
  for (std::size_t f = 0; f < fold_curves.size(); ++f) {
    nlohmann::json nft =
        fold_n_for_target[f] >= 0 ? nlohmann::json(fold_n_for_target[f]) : nlohmann::json(nullptr);
    folds.push_back({{"curve", fold_curves[f].to_json()}, {"n_for_target", nft}});
  }
  return nlohmann::json{{"folds", folds},
                        {"averaged", averaged.to_json()},
                        {"averaged_n_for_target", averaged_n_for_target},
                        {"skipped", skipped}};
}

}  // namespace krct::sim
