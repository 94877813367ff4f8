#include "kernelrct/kernel_rct.h"

#include <cstdlib>
#include <cstring>
#include <map>
#include <memory>
#include <nlohmann/json.hpp>
#include <string>

#include "errors.hpp"
#include "fisher.hpp"
#include "gp_fit.hpp"
#include "gp_model.hpp"
#include "ingest.hpp"
#include "lmm.hpp"
#include "power.hpp"
#include "sim_harness.hpp"
#include "special.hpp"
#include "two_sample.hpp"

using nlohmann::json;

namespace {

thread_local std::string g_last_error;

krct_status status_of(const krct::Error& e) {
  g_last_error = e.what();
  switch (e.code()) {
    case krct::ErrorCode::invalid_argument:
      return KRCT_ERR_INVALID_ARG;
    case krct::ErrorCode::parse:
      return KRCT_ERR_PARSE;
    case krct::ErrorCode::io:
      return KRCT_ERR_IO;
    case krct::ErrorCode::numerical:
      return KRCT_ERR_NUMERICAL;
    case krct::ErrorCode::nonconvergence:
      return KRCT_ERR_NONCONVERGENCE;
  }
  return KRCT_ERR_NUMERICAL;
}

template <typename Fn>
krct_status guarded(Fn&& fn) {
  try {
    fn();
    return KRCT_OK;
  } catch (const krct::Error& e) {
    return status_of(e);
  } catch (const json::exception& e) {
    g_last_error = e.what();
    return KRCT_ERR_PARSE;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return KRCT_ERR_NUMERICAL;
  }
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

json parse_json(const char* text, const char* what) {
  if (!text) throw krct::InvalidArgument(std::string(what) + ": null JSON");
  return json::parse(text);
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const char* what) {
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) {
      if (key == a) {
        ok = true;
        break;
      }
    }
    if (!ok) throw krct::ParseError(std::string(what) + ": unknown key '" + key + "'");
  }
}

krct::gp::GpParams params_from_text(const char* text, const char* what) {
  const json j = parse_json(text, what);
  check_keys(j, {"mu", "sigma2", "alpha2", "beta", "rho2", "nu", "grid", "fit"}, what);
  return krct::gp::GpParams::from_json(j);
}

krct::gp::FitConfig fit_config_from_json(const json& j) {
  krct::gp::FitConfig cfg;
  check_keys(j, {"max_iter", "grad_tol", "multistarts", "seed", "init"}, "fit options");
  cfg.max_iter = j.value("max_iter", cfg.max_iter);
  cfg.grad_tol = j.value("grad_tol", cfg.grad_tol);
  cfg.multistarts = j.value("multistarts", cfg.multistarts);
  cfg.seed = j.value("seed", cfg.seed);
  return cfg;
}

}  // namespace

struct krct_cohort {
  std::vector<krct::ingest::RawSeries> series;
};

struct krct_dataset {
  std::vector<krct::gp::Trajectory> trajectories;
  std::vector<std::string> labels;
  krct::gp::ObservationGrid grid;
};

struct krct_model {
  krct::gp::FittedModel fitted;
};

struct krct_embedding {
  krct::fisher::FisherEmbedding emb;
};

extern "C" {

const char* krct_version(void) { return "0.1.0"; }

const char* krct_last_error(void) { return g_last_error.c_str(); }

void krct_string_free(char* s) { std::free(s); }

/* ---- ingest ---------------------------------------------------------- */

krct_status krct_cohort_load_csv(const char* path, krct_cohort** out) {
  return guarded([&] {
    if (!path || !out) throw krct::InvalidArgument("load_csv: null argument");
    auto c = std::make_unique<krct_cohort>();
    c->series = krct::ingest::load_csv(path);
    *out = c.release();
  });
}

krct_status krct_cohort_synth(const char* params_cn_json, const char* params_mci_json, int n_cn,
                              int n_mci, uint64_t seed, double missing_rate, krct_cohort** out) {
  return guarded([&] {
    if (!out) throw krct::InvalidArgument("synth: null output");
    const auto cn = params_from_text(params_cn_json, "synth cn params");
    const auto mci = params_from_text(params_mci_json, "synth mci params");
    auto c = std::make_unique<krct_cohort>();
    c->series = krct::ingest::synth_cohort(cn, mci, n_cn, n_mci, seed, missing_rate);
    *out = c.release();
  });
}

krct_status krct_cohort_to_csv(const krct_cohort* cohort, char** csv) {
  return guarded([&] {
    if (!cohort || !csv) throw krct::InvalidArgument("cohort_to_csv: null argument");
    *csv = dup_string(krct::ingest::to_csv(cohort->series));
  });
}

int krct_cohort_size(const krct_cohort* cohort) {
  return cohort ? static_cast<int>(cohort->series.size()) : 0;
}

void krct_cohort_free(krct_cohort* cohort) { delete cohort; }

krct_status krct_cohort_preprocess(const krct_cohort* cohort, int start_lo, int start_hi,
                                   int window, int strict150, krct_dataset** out,
                                   char** exclusion_report_json) {
  return guarded([&] {
    if (!cohort || !out) throw krct::InvalidArgument("preprocess: null argument");
    krct::ingest::PreprocessOptions opts;
    opts.start_lo = start_lo;
    opts.start_hi = start_hi;
    opts.window = window;
    opts.strict150 = strict150 != 0;
    auto res = krct::ingest::preprocess_cohort(cohort->series, opts);
    auto ds = std::make_unique<krct_dataset>();
    ds->trajectories = std::move(res.trajectories);
    ds->labels = std::move(res.cohorts);
    ds->grid = std::move(res.grid);
    if (exclusion_report_json) {
      krct::ingest::PreprocessResult tmp;
      tmp.excluded = res.excluded;
      *exclusion_report_json = dup_string(tmp.exclusion_report().dump(2));
    }
    *out = ds.release();
  });
}

/* ---- datasets -------------------------------------------------------- */

int krct_dataset_size(const krct_dataset* ds) {
  return ds ? static_cast<int>(ds->trajectories.size()) : 0;
}

int krct_dataset_grid_len(const krct_dataset* ds) { return ds ? ds->grid.size() : 0; }

const char* krct_dataset_subject_id(const krct_dataset* ds, int i) {
  if (!ds || i < 0 || i >= static_cast<int>(ds->trajectories.size())) return nullptr;
  return ds->trajectories[i].subject_id.c_str();
}

const char* krct_dataset_label(const krct_dataset* ds, int i) {
  if (!ds || i < 0 || i >= static_cast<int>(ds->labels.size())) return nullptr;
  return ds->labels[i].c_str();
}

krct_status krct_dataset_select(const krct_dataset* ds, const char* label, krct_dataset** out) {
  return guarded([&] {
    if (!ds || !label || !out) throw krct::InvalidArgument("dataset_select: null argument");
    auto sub = std::make_unique<krct_dataset>();
    sub->grid = ds->grid;
    for (std::size_t i = 0; i < ds->trajectories.size(); ++i) {
      if (ds->labels[i] == label) {
        sub->trajectories.push_back(ds->trajectories[i]);
        sub->labels.push_back(ds->labels[i]);
      }
    }
    *out = sub.release();
  });
}

krct_status krct_dataset_select_ids(const krct_dataset* ds, const char* const* ids, int n_ids,
                                    krct_dataset** out) {
  return guarded([&] {
    if (!ds || !ids || !out) throw krct::InvalidArgument("dataset_select_ids: null argument");
    std::map<std::string, int> index_of;
    for (std::size_t i = 0; i < ds->trajectories.size(); ++i)
      index_of[ds->trajectories[i].subject_id] = static_cast<int>(i);
    auto sub = std::make_unique<krct_dataset>();
    sub->grid = ds->grid;
    for (int k = 0; k < n_ids; ++k) {
      const auto it = index_of.find(ids[k]);
      if (it == index_of.end())
        throw krct::InvalidArgument("dataset_select_ids: unknown id '" + std::string(ids[k]) + "'");
      sub->trajectories.push_back(ds->trajectories[it->second]);
      sub->labels.push_back(ds->labels[it->second]);
    }
    *out = sub.release();
  });
}

krct_status krct_dataset_to_csv(const krct_dataset* ds, char** csv) {
  return guarded([&] {
    if (!ds || !csv) throw krct::InvalidArgument("dataset_to_csv: null argument");
    *csv = dup_string(krct::ingest::trajectories_to_csv(ds->trajectories));
  });
}

void krct_dataset_free(krct_dataset* ds) { delete ds; }

/* ---- GP model -------------------------------------------------------- */

krct_status krct_model_fit(const krct_dataset* ds, const char* options_json, krct_model** out) {
  return guarded([&] {
    if (!ds || !out) throw krct::InvalidArgument("model_fit: null argument");
    json opts = options_json ? json::parse(options_json) : json::object();
    const auto cfg = fit_config_from_json(opts);
    krct::gp::GpParams init = opts.contains("init")
                                  ? krct::gp::GpParams::from_json(opts.at("init"))
                                  : krct::gp::heuristic_init(ds->trajectories, ds->grid);
    krct::gp::FitResult res;
    bool nonconv = false;
    std::string nonconv_msg;
    try {
      res = krct::gp::fit_mle(ds->trajectories, ds->grid, init, cfg);
    } catch (const krct::gp::FitNonConvergence& e) {
      res = e.best();
      nonconv = true;
      nonconv_msg = e.what();
    }
    auto m = std::make_unique<krct_model>();
    m->fitted.params = res.params;
    m->fitted.grid = ds->grid;
    m->fitted.loglik = res.loglik;
    m->fitted.converged = res.converged;
    m->fitted.iters = res.iters;
    *out = m.release();
    if (nonconv) throw krct::Error(krct::ErrorCode::nonconvergence, nonconv_msg);
  });
}

krct_status krct_model_from_json(const char* text, krct_model** out) {
  return guarded([&] {
    if (!out) throw krct::InvalidArgument("model_from_json: null output");
    auto m = std::make_unique<krct_model>();
    m->fitted = krct::gp::FittedModel::from_json(parse_json(text, "model"));
    *out = m.release();
  });
}

krct_status krct_model_to_json(const krct_model* model, char** out) {
  return guarded([&] {
    if (!model || !out) throw krct::InvalidArgument("model_to_json: null argument");
    *out = dup_string(model->fitted.to_json().dump(2));
  });
}

int krct_model_converged(const krct_model* model) {
  return model && model->fitted.converged ? 1 : 0;
}

krct_status krct_model_simulate(const krct_model* model, int n_subjects, uint64_t seed,
                                const char* id_prefix, const char* label, krct_dataset** out) {
  return guarded([&] {
    if (!model || !out) throw krct::InvalidArgument("model_simulate: null argument");
    auto ds = std::make_unique<krct_dataset>();
    ds->grid = model->fitted.grid;
    ds->trajectories = krct::gp::simulate(model->fitted.params, model->fitted.grid, n_subjects,
                                          seed, id_prefix ? id_prefix : "sim-");
    ds->labels.assign(ds->trajectories.size(), label ? label : "sim");
    *out = ds.release();
  });
}

krct_status krct_model_loglik(const krct_model* model, const krct_dataset* ds, double* out) {
  return guarded([&] {
    if (!model || !ds || !out) throw krct::InvalidArgument("model_loglik: null argument");
    *out = krct::gp::total_log_likelihood(model->fitted.params, ds->grid, ds->trajectories);
  });
}

void krct_model_free(krct_model* model) { delete model; }

/* ---- Fisher embedding ------------------------------------------------ */

krct_status krct_embedding_build(const krct_model* model, const krct_dataset* ds, double eps,
                                 krct_embedding** out) {
  return guarded([&] {
    if (!model || !ds || !out) throw krct::InvalidArgument("embedding_build: null argument");
    auto e = std::make_unique<krct_embedding>();
    e->emb = krct::fisher::build_embedding(model->fitted.params, ds->grid, ds->trajectories, eps);
    *out = e.release();
  });
}

krct_status krct_embedding_to_json(const krct_embedding* emb, char** out) {
  return guarded([&] {
    if (!emb || !out) throw krct::InvalidArgument("embedding_to_json: null argument");
    *out = dup_string(emb->emb.to_json().dump(2));
  });
}

krct_status krct_embedding_from_json(const char* text, krct_embedding** out) {
  return guarded([&] {
    if (!out) throw krct::InvalidArgument("embedding_from_json: null output");
    auto e = std::make_unique<krct_embedding>();
    e->emb = krct::fisher::FisherEmbedding::from_json(parse_json(text, "embedding"));
    *out = e.release();
  });
}

krct_status krct_embedding_vectors(const krct_embedding* emb, const krct_dataset* ds, double* out) {
  return guarded([&] {
    if (!emb || !ds || !out) throw krct::InvalidArgument("embedding_vectors: null argument");
    const auto m = krct::fisher::fisher_vectors(emb->emb, ds->trajectories);
    for (int i = 0; i < m.rows(); ++i)
      for (int j = 0; j < 6; ++j) out[i * 6 + j] = m(i, j);
  });
}

void krct_embedding_free(krct_embedding* emb) { delete emb; }

/* ---- two-sample tests ------------------------------------------------ */

krct_status krct_test_features(const char* method, const double* feat_t, int n_t,
                               const double* feat_c, int n_c, int dim, const char* options_json,
                               char** result_json) {
  return guarded([&] {
    if (!method || !feat_t || !feat_c || !result_json)
      throw krct::InvalidArgument("test_features: null argument");
    if (n_t < 1 || n_c < 1 || dim < 1) throw krct::InvalidArgument("test_features: bad sizes");
    json opts = options_json ? json::parse(options_json) : json::object();
    check_keys(opts, {"alpha", "n_perm", "seed", "gamma", "pooled_weights", "kernel", "bandwidth"},
               "test options");
    const double alpha = opts.value("alpha", 0.05);

    krct::stats::Sample st{"T", Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic,
                                                               Eigen::Dynamic, Eigen::RowMajor>>(
                                    feat_t, n_t, dim)};
    krct::stats::Sample sc{"C", Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic,
                                                               Eigen::Dynamic, Eigen::RowMajor>>(
                                    feat_c, n_c, dim)};

    krct::stats::TestResult res;
    const std::string m = method;
    if (m == "mmd") {
      const std::string kname = opts.value("kernel", "linear");
      krct::stats::KernelFn kfn;
      if (kname == "linear") {
        kfn = krct::stats::linear_kernel();
      } else if (kname == "gaussian") {
        double bw = opts.value("bandwidth", 0.0);
        if (bw <= 0.0) {
          Eigen::MatrixXd all(n_t + n_c, dim);
          all << st.features, sc.features;
          bw = krct::stats::median_heuristic_bandwidth(all);
        }
        kfn = krct::stats::gaussian_kernel(bw);
      } else {
        throw krct::InvalidArgument("test_features: unknown kernel '" + kname + "'");
      }
      res = krct::stats::mmd_permutation_test(st, sc, kfn, alpha, opts.value("n_perm", 1000),
                                              opts.value("seed", 0ULL));
    } else if (m == "kernel-hotelling") {
      const std::string w = opts.value("pooled_weights", "shifted");
      const auto weights = w == "standard" ? krct::stats::PooledWeights::standard
                                           : krct::stats::PooledWeights::shifted;
      if (w != "standard" && w != "shifted")
        throw krct::InvalidArgument("test_features: pooled_weights must be shifted or standard");
      const auto kh =
          krct::stats::kernel_hotelling_full(st, sc, opts.value("gamma", 0.0), weights);
      res.method = "kernel-Hotelling";
      res.statistic = kh.statistic;
      res.threshold = krct::num::normal_quantile(1.0 - alpha);
      res.p_value = 1.0 - krct::num::normal_cdf(kh.statistic);
      res.reject = res.statistic > res.threshold;
      res.n_T = n_t;
      res.n_C = n_c;
      res.alpha = alpha;
      res.notes.push_back("threshold from the asymptotic standard normal null");
    } else if (m == "hotelling-f") {
      res = krct::stats::hotelling_test(st, sc, alpha);
    } else {
      throw krct::InvalidArgument("test_features: unknown method '" + m +
                                  "' (valid: mmd, kernel-hotelling, hotelling-f)");
    }
    *result_json = dup_string(res.to_json().dump(2));
  });
}

krct_status krct_lmm_fit_csv(const char* path, double alpha, char** fit_json, char** test_json) {
  return guarded([&] {
    if (!path) throw krct::InvalidArgument("lmm_fit_csv: null path");
    const auto data = krct::lmm::LongData::from_csv(path);
    const auto fit = krct::lmm::fit_lmm(data);
    if (fit_json) *fit_json = dup_string(fit.to_json().dump(2));
    if (test_json) {
      const auto res = krct::lmm::lmm_interaction_test(fit, alpha);
      *test_json = dup_string(res.to_json().dump(2));
    }
  });
}

/* ---- power ----------------------------------------------------------- */

krct_status krct_local_alternative(const double* feat_a, int n_a, const double* feat_s, int n_s,
                                   int dim, double rho, double* shift_out, double* pooled_out) {
  return guarded([&] {
    if (!feat_a || !feat_s || !shift_out || !pooled_out)
      throw krct::InvalidArgument("local_alternative: null argument");
    if (n_a < 2 || n_s < 2 || dim < 1)
      throw krct::InvalidArgument("local_alternative: each cohort needs at least 2 rows");
    using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    krct::stats::Sample sa{"A", Eigen::Map<const RowMat>(feat_a, n_a, dim)};
    krct::stats::Sample ss{"S", Eigen::Map<const RowMat>(feat_s, n_s, dim)};
    const auto alt = krct::power::local_alternative_from_cohorts(sa, ss, rho);
    const Eigen::VectorXd shift = alt.shift();
    for (int i = 0; i < dim; ++i) shift_out[i] = shift[i];

    auto scatter = [](const Eigen::MatrixXd& rows) {
      const Eigen::VectorXd mean = rows.colwise().mean().transpose();
      Eigen::MatrixXd c = Eigen::MatrixXd::Zero(rows.cols(), rows.cols());
      for (int i = 0; i < rows.rows(); ++i) {
        const Eigen::VectorXd d = rows.row(i).transpose() - mean;
        c += d * d.transpose();
      }
      return c;
    };
    const Eigen::MatrixXd pooled =
        (scatter(sa.features) + scatter(ss.features)) / static_cast<double>(n_a + n_s - 2);
    for (int i = 0; i < dim; ++i)
      for (int j = 0; j < dim; ++j) pooled_out[i * dim + j] = pooled(i, j);
  });
}

krct_status krct_noncentral_f_cdf(double x, int dof1, int dof2, double delta, double* out) {
  return guarded([&] {
    if (!out) throw krct::InvalidArgument("noncentral_f_cdf: null output");
    *out = krct::power::noncentral_f_cdf(x, dof1, dof2, delta);
  });
}

krct_status krct_effect_size(const double* shift, const double* sigma, int dim, double* out) {
  return guarded([&] {
    if (!shift || !sigma || !out) throw krct::InvalidArgument("effect_size: null argument");
    const Eigen::Map<const Eigen::VectorXd> s(shift, dim);
    const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
        m(sigma, dim, dim);
    *out = krct::power::effect_size(s, m);
  });
}

krct_status krct_power_at(int n_t, int n_c, int p, double alpha, double effect, double* out) {
  return guarded([&] {
    if (!out) throw krct::InvalidArgument("power_at: null output");
    *out = krct::power::power_at(n_t, n_c, p, alpha, effect);
  });
}

krct_status krct_sample_size_for_power(double target_power, int p, double alpha, double effect,
                                       double allocation, long long n_cap, int* n_t, int* n_c) {
  return guarded([&] {
    if (!n_t || !n_c) throw krct::InvalidArgument("sample_size: null output");
    auto [t, c] = krct::power::sample_size_for_power(target_power, p, alpha, effect, allocation,
                                                     n_cap > 0 ? n_cap : 1000000);
    *n_t = t;
    *n_c = c;
  });
}

krct_status krct_power_curve(const int* n_totals, int n_rows, int p, double alpha, double effect,
                             double allocation, char** csv, char** out_json) {
  return guarded([&] {
    if (!n_totals || n_rows < 1) throw krct::InvalidArgument("power_curve: empty n grid");
    const std::vector<int> grid(n_totals, n_totals + n_rows);
    const auto curve = krct::power::power_curve(grid, p, alpha, effect, allocation);
    if (csv) *csv = dup_string(curve.to_csv());
    if (out_json) *out_json = dup_string(curve.to_json().dump(2));
  });
}

/* ---- experiments ----------------------------------------------------- */

krct_status krct_experiment_power_grid(const char* scenario_json, char** replicates_csv,
                                       char** summary_csv) {
  return guarded([&] {
    const json j = parse_json(scenario_json, "scenario");
    check_keys(j,
               {"theta_control", "mu_treated", "span", "n_list", "t_list", "n_sims", "alpha",
                "seed", "pretrial_n", "fit"},
               "scenario");
    krct::sim::Scenario sc;
    sc.theta_control = krct::gp::GpParams::from_json(j.at("theta_control"));
    sc.theta_treated = sc.theta_control;
    sc.theta_treated.mu = j.at("mu_treated").get<double>();
    sc.span = j.value("span", sc.span);
    if (j.contains("n_list")) sc.n_list = j.at("n_list").get<std::vector<int>>();
    if (j.contains("t_list")) sc.t_list = j.at("t_list").get<std::vector<int>>();
    sc.n_sims = j.value("n_sims", sc.n_sims);
    sc.alpha = j.value("alpha", sc.alpha);
    sc.seed = j.value("seed", sc.seed);
    sc.pretrial_n = j.value("pretrial_n", sc.pretrial_n);
    if (j.contains("fit")) sc.fit = fit_config_from_json(j.at("fit"));
    const auto table = krct::sim::run_power_experiment(sc);
    if (replicates_csv) *replicates_csv = dup_string(table.replicates_csv());
    if (summary_csv) *summary_csv = dup_string(table.summary_csv());
  });
}

krct_status krct_experiment_folds(const char* config_json, const krct_dataset* ds,
                                  char** curves_csv, char** result_json) {
  return guarded([&] {
    if (!ds) throw krct::InvalidArgument("experiment_folds: null dataset");
    const json j = parse_json(config_json, "folds config");
    check_keys(j,
               {"seed", "n_folds", "fold_size", "rho", "alpha", "n_grid", "target_power", "fit",
                "cn_label", "mci_label"},
               "folds config");
    const std::string cn_label = j.value("cn_label", "CN");
    const std::string mci_label = j.value("mci_label", "MCI");
    std::vector<std::string> cn_ids, mci_ids;
    for (std::size_t i = 0; i < ds->trajectories.size(); ++i) {
      if (ds->labels[i] == cn_label) cn_ids.push_back(ds->trajectories[i].subject_id);
      if (ds->labels[i] == mci_label) mci_ids.push_back(ds->trajectories[i].subject_id);
    }
    const auto plan = krct::sim::build_fold_plan(cn_ids, mci_ids, j.value("seed", 0ULL),
                                                 j.value("n_folds", 8), j.value("fold_size", 11));
    krct::sim::FoldPowerOptions opts;
    opts.rho = j.value("rho", 0.4);
    opts.alpha = j.value("alpha", 0.05);
    if (j.contains("n_grid")) {
      opts.n_grid = j.at("n_grid").get<std::vector<int>>();
    } else {
      for (int n = 10; n <= 400; n += 10) opts.n_grid.push_back(n);
    }
    opts.target_power = j.value("target_power", 0.8);
    if (j.contains("fit")) opts.fit = fit_config_from_json(j.at("fit"));
    const auto res =
        krct::sim::run_fold_power(plan, ds->trajectories, ds->labels, ds->grid, opts);
    if (curves_csv) *curves_csv = dup_string(res.curves_csv());
    if (result_json) {
      json out = res.to_json();
      out["plan"] = plan.to_json();
      *result_json = dup_string(out.dump(2));
    }
  });
}

}  // extern "C"
