/* kernelrct: kernel-method design and analysis of two-arm RCTs with
 * longitudinal outcomes. C API over the C++ core; every object is an
 * opaque handle, every call returns a status code, and string outputs are
 * heap buffers released with krct_string_free().
 */
#ifndef KERNELRCT_KERNEL_RCT_H
#define KERNELRCT_KERNEL_RCT_H

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum krct_status {
  KRCT_OK = 0,
  KRCT_ERR_INVALID_ARG = 1,
  KRCT_ERR_PARSE = 2,
  KRCT_ERR_IO = 3,
  KRCT_ERR_NUMERICAL = 4,
  KRCT_ERR_NONCONVERGENCE = 5,
} krct_status;

const char* krct_version(void);

/* Message describing the most recent failure on the calling thread. */
const char* krct_last_error(void);

void krct_string_free(char* s);

/* Opaque handles. */
typedef struct krct_cohort krct_cohort;       /* raw weekly series */
typedef struct krct_dataset krct_dataset;     /* trajectories on a grid */
typedef struct krct_model krct_model;         /* fitted GP parameters */
typedef struct krct_embedding krct_embedding; /* Fisher embedding */

/* ---- ingest ---------------------------------------------------------- */

/* CSV schema: subject_id,week,value,cohort (missing weeks simply absent). */
krct_status krct_cohort_load_csv(const char* path, krct_cohort** out);

/* Synthetic 250-week cohort; params are {"mu":..,"sigma2":..,...} JSON. */
krct_status krct_cohort_synth(const char* params_cn_json, const char* params_mci_json, int n_cn,
                              int n_mci, uint64_t seed, double missing_rate, krct_cohort** out);

krct_status krct_cohort_to_csv(const krct_cohort* cohort, char** csv);
int krct_cohort_size(const krct_cohort* cohort);
void krct_cohort_free(krct_cohort* cohort);

/* Baseline anchoring + first-week subtraction + windowing. The exclusion
 * report is a JSON list of {subject_id, reason}. */
krct_status krct_cohort_preprocess(const krct_cohort* cohort, int start_lo, int start_hi,
                                   int window, int strict150, krct_dataset** out,
                                   char** exclusion_report_json);

/* ---- datasets -------------------------------------------------------- */

int krct_dataset_size(const krct_dataset* ds);
int krct_dataset_grid_len(const krct_dataset* ds);
const char* krct_dataset_subject_id(const krct_dataset* ds, int i);
const char* krct_dataset_label(const krct_dataset* ds, int i);
/* Subjects whose cohort label equals `label`. */
krct_status krct_dataset_select(const krct_dataset* ds, const char* label, krct_dataset** out);
/* Subjects with the given ids, in the given order. */
krct_status krct_dataset_select_ids(const krct_dataset* ds, const char* const* ids, int n_ids,
                                    krct_dataset** out);
/* CSV schema: subject_id,offset_week,value (empty value = missing). */
krct_status krct_dataset_to_csv(const krct_dataset* ds, char** csv);
void krct_dataset_free(krct_dataset* ds);

/* ---- GP model -------------------------------------------------------- */

/* options_json keys: max_iter, grad_tol, multistarts, seed, init (params
 * JSON; defaults to a moment heuristic). Non-convergence returns
 * KRCT_ERR_NONCONVERGENCE with *out still set to the best point found. */
krct_status krct_model_fit(const krct_dataset* ds, const char* options_json, krct_model** out);
krct_status krct_model_from_json(const char* json, krct_model** out);
krct_status krct_model_to_json(const krct_model* model, char** json);
int krct_model_converged(const krct_model* model);
krct_status krct_model_simulate(const krct_model* model, int n_subjects, uint64_t seed,
                                const char* id_prefix, const char* label, krct_dataset** out);
krct_status krct_model_loglik(const krct_model* model, const krct_dataset* ds, double* out);
void krct_model_free(krct_model* model);

/* ---- Fisher embedding ------------------------------------------------ */

/* eps < 0 selects the default trace-scaled regularization. */
krct_status krct_embedding_build(const krct_model* model, const krct_dataset* ds, double eps,
                                 krct_embedding** out);
krct_status krct_embedding_to_json(const krct_embedding* emb, char** json);
krct_status krct_embedding_from_json(const char* json, krct_embedding** out);
/* out must hold krct_dataset_size(ds) * 6 doubles (row-major). */
krct_status krct_embedding_vectors(const krct_embedding* emb, const krct_dataset* ds, double* out);
void krct_embedding_free(krct_embedding* emb);

/* ---- two-sample tests ------------------------------------------------ */

/* method: "mmd" | "kernel-hotelling" | "hotelling-f". Features are
 * row-major n x dim. options_json keys: alpha, n_perm, seed, gamma,
 * pooled_weights ("shifted"|"standard"), kernel ("linear"|"gaussian"),
 * bandwidth (<= 0 = median heuristic). Result is the TestResult JSON. */
krct_status krct_test_features(const char* method, const double* feat_t, int n_t,
                               const double* feat_c, int n_c, int dim, const char* options_json,
                               char** result_json);

/* Linear mixed model on a long-format CSV (subject_id,week,group,value,
 * group in {T,C}); returns the fit document and the Wald interaction
 * TestResult. */
krct_status krct_lmm_fit_csv(const char* path, double alpha, char** fit_json, char** test_json);

/* ---- power ----------------------------------------------------------- */

/* Mean embeddings of two historical cohorts (row-major features), the
 * (1 - rho)-scaled shift between them, and their unbiased pooled
 * covariance. shift_out holds dim doubles, pooled_out dim*dim. */
krct_status krct_local_alternative(const double* feat_a, int n_a, const double* feat_s, int n_s,
                                   int dim, double rho, double* shift_out, double* pooled_out);

krct_status krct_noncentral_f_cdf(double x, int dof1, int dof2, double delta, double* out);
krct_status krct_effect_size(const double* shift, const double* sigma, int dim, double* out);
krct_status krct_power_at(int n_t, int n_c, int p, double alpha, double effect, double* out);
krct_status krct_sample_size_for_power(double target_power, int p, double alpha, double effect,
                                       double allocation, long long n_cap, int* n_t, int* n_c);
krct_status krct_power_curve(const int* n_totals, int n_rows, int p, double alpha, double effect,
                             double allocation, char** csv, char** json);

/* ---- experiments ----------------------------------------------------- */

/* Power-vs-(n, t) grid. scenario_json keys: theta_control (params JSON),
 * mu_treated, span, n_list, t_list, n_sims, alpha, seed, pretrial_n, fit
 * (fit options). Outputs the replicate and summary CSVs. */
krct_status krct_experiment_power_grid(const char* scenario_json, char** replicates_csv,
                                       char** summary_csv);

/* Cross-validated pseudo-trial power curves. config_json keys: seed,
 * n_folds, fold_size, rho, alpha, n_grid, target_power, fit, cn_label,
 * mci_label. */
krct_status krct_experiment_folds(const char* config_json, const krct_dataset* ds,
                                  char** curves_csv, char** result_json);

#ifdef __cplusplus
}
#endif

#endif /* KERNELRCT_KERNEL_RCT_H */
