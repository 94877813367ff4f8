// Command-line front end over the kernelrct C API: generative-model
// fitting, Fisher embeddings, two-sample tests, power analysis, and the
// simulation experiments, all driven by a JSON config with flag overrides.

#include <CLI11.hpp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "kernelrct/kernel_rct.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

[[noreturn]] void die(const std::string& msg, int code = 1) {
  std::cerr << "krct: " << msg << "\n";
  std::exit(code);
}

// Nonzero API statuses map onto the exit-code contract: 2 for numerical
// non-convergence, 1 for everything else.
void check(krct_status st, const std::string& what) {
  if (st == KRCT_OK) return;
  const int code = (st == KRCT_ERR_NONCONVERGENCE) ? 2 : 1;
  die(what + ": " + krct_last_error(), code);
}

std::string take_string(char* s) {
  std::string out = s ? s : "";
  krct_string_free(s);
  return out;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) die("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) die("cannot write '" + path.string() + "'");
  out << content;
}

void require_keys(const json& j, std::initializer_list<const char*> allowed,
                  const std::string& what) {
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) {
      if (key == a) {
        ok = true;
        break;
      }
    }
    if (!ok) die(what + ": unknown config key '" + key + "'");
  }
}

// splitmix64; the CLI's only source of randomness (pipeline cohort split).
std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

struct Flags {
  std::string config_path;
  std::string out_dir = ".";
  std::string input;
  std::optional<std::uint64_t> seed;
  std::optional<double> alpha;
  std::optional<double> rho;
  std::string method;
};

json load_config(const Flags& flags) {
  json cfg = json::object();
  if (!flags.config_path.empty()) {
    try {
      cfg = json::parse(read_file(flags.config_path));
    } catch (const json::exception& e) {
      die("config '" + flags.config_path + "': " + e.what());
    }
    if (!cfg.is_object()) die("config must be a JSON object");
  }
  // Flags win over config values.
  if (flags.seed) cfg["seed"] = *flags.seed;
  if (flags.alpha) cfg["alpha"] = *flags.alpha;
  if (flags.rho) cfg["rho"] = *flags.rho;
  if (!flags.method.empty()) cfg["method"] = flags.method;
  if (!flags.input.empty()) cfg["input"] = flags.input;
  return cfg;
}

fs::path prepare_out(const Flags& flags, const json& effective, const std::string& subcommand) {
  fs::path dir(flags.out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec && !fs::exists(dir)) die("cannot create output directory '" + dir.string() + "'");
  json manifest{{"subcommand", subcommand}, {"config", effective}};
  write_file(dir / "run_config.json", manifest.dump(2) + "\n");
  return dir;
}

json default_params_cn() {
  return json{{"mu", -0.1}, {"sigma2", 1.0}, {"alpha2", 0.15},
              {"beta", 0.5}, {"rho2", 72.0}, {"nu", 2.0}};
}

json default_params_mci() {
  json p = default_params_cn();
  p["mu"] = -0.12;
  p["sigma2"] = 1.2;
  p["alpha2"] = 0.2;
  return p;
}

struct Preprocess {
  int start_lo = 5, start_hi = 15, window = 150;
  bool strict150 = false;
};

Preprocess preprocess_of(const json& cfg) {
  Preprocess p;
  if (!cfg.contains("preprocess")) return p;
  const json& j = cfg.at("preprocess");
  require_keys(j, {"start_lo", "start_hi", "window", "strict150"}, "preprocess");
  p.start_lo = j.value("start_lo", p.start_lo);
  p.start_hi = j.value("start_hi", p.start_hi);
  p.window = j.value("window", p.window);
  p.strict150 = j.value("strict150", p.strict150);
  return p;
}

krct_dataset* load_and_preprocess(const std::string& input, const Preprocess& pp,
                                  const fs::path& out_dir, bool write_exclusions = true) {
  krct_cohort* cohort = nullptr;
  check(krct_cohort_load_csv(input.c_str(), &cohort), "load cohort");
  krct_dataset* ds = nullptr;
  char* report = nullptr;
  check(krct_cohort_preprocess(cohort, pp.start_lo, pp.start_hi, pp.window, pp.strict150 ? 1 : 0,
                               &ds, &report),
        "preprocess");
  krct_cohort_free(cohort);
  if (write_exclusions) write_file(out_dir / "exclusions.json", take_string(report) + "\n");
  else krct_string_free(report);
  return ds;
}

std::vector<double> dataset_vectors(const krct_embedding* emb, krct_dataset* ds,
                                    const std::string& what) {
  const int n = krct_dataset_size(ds);
  std::vector<double> out(static_cast<std::size_t>(n) * 6);
  check(krct_embedding_vectors(emb, ds, out.data()), what);
  return out;
}

const char* const kPsiHeader = "subject_id,label,psi_mu,psi_sigma2,psi_alpha2,psi_beta,psi_rho2,psi_nu";

std::string vectors_csv(krct_dataset* ds, const std::vector<double>& psi) {
  std::string out = std::string(kPsiHeader) + "\n";
  char buf[64];
  const int n = krct_dataset_size(ds);
  for (int i = 0; i < n; ++i) {
    out += krct_dataset_subject_id(ds, i);
    out += ",";
    out += krct_dataset_label(ds, i);
    for (int j = 0; j < 6; ++j) {
      std::snprintf(buf, sizeof(buf), ",%.17g", psi[i * 6 + j]);
      out += buf;
    }
    out += "\n";
  }
  return out;
}

json with_config(const std::string& body_json, const json& cfg) {
  json j = json::parse(body_json);
  j["config"] = cfg;
  return j;
}

json fit_options(const json& cfg) {
  json fit = cfg.value("fit", json::object());
  require_keys(fit, {"max_iter", "grad_tol", "multistarts", "seed", "init"}, "fit options");
  if (cfg.contains("seed") && !fit.contains("seed")) fit["seed"] = cfg.at("seed");
  return fit;
}

// ---- subcommands ---------------------------------------------------------

int cmd_synth(const Flags& flags) {
  json cfg = load_config(flags);
  require_keys(cfg,
               {"params_cn", "params_mci", "n_cn", "n_mci", "seed", "missing_rate", "output"},
               "synth");
  const json pcn = cfg.value("params_cn", default_params_cn());
  const json pmci = cfg.value("params_mci", default_params_mci());
  cfg["params_cn"] = pcn;
  cfg["params_mci"] = pmci;
  const fs::path dir = prepare_out(flags, cfg, "synth");

  krct_cohort* cohort = nullptr;
  check(krct_cohort_synth(pcn.dump().c_str(), pmci.dump().c_str(), cfg.value("n_cn", 86),
                          cfg.value("n_mci", 11), cfg.value("seed", 1ULL),
                          cfg.value("missing_rate", 0.05), &cohort),
        "synth");
  char* csv = nullptr;
  check(krct_cohort_to_csv(cohort, &csv), "cohort csv");
  const std::string name = cfg.value("output", "cohort.csv");
  write_file(dir / name, take_string(csv));
  std::cout << "wrote " << (dir / name).string() << " (" << krct_cohort_size(cohort)
            << " subjects)\n";
  krct_cohort_free(cohort);
  return 0;
}

int cmd_fit(const Flags& flags) {
  json cfg = load_config(flags);
  require_keys(cfg, {"input", "label", "preprocess", "fit", "seed"}, "fit");
  if (!cfg.contains("input")) die("fit: missing input cohort CSV (--input or config)");
  const fs::path dir = prepare_out(flags, cfg, "fit");

  krct_dataset* all = load_and_preprocess(cfg.at("input"), preprocess_of(cfg), dir);
  const std::string label = cfg.value("label", "CN");
  krct_dataset* ds = nullptr;
  check(krct_dataset_select(all, label.c_str(), &ds), "select cohort");
  krct_dataset_free(all);
  if (krct_dataset_size(ds) < 2) die("fit: fewer than 2 subjects with label '" + label + "'");

  krct_model* model = nullptr;
  const krct_status st = krct_model_fit(ds, fit_options(cfg).dump().c_str(), &model);
  if (st != KRCT_OK && st != KRCT_ERR_NONCONVERGENCE) check(st, "fit");
  char* mjson = nullptr;
  check(krct_model_to_json(model, &mjson), "model json");
  write_file(dir / "params.json", with_config(take_string(mjson), cfg).dump(2) + "\n");
  std::cout << (krct_model_converged(model) ? "converged" : "did not converge") << "; wrote "
            << (dir / "params.json").string() << "\n";
  const bool converged = krct_model_converged(model) != 0;
  krct_model_free(model);
  krct_dataset_free(ds);
  if (st == KRCT_ERR_NONCONVERGENCE || !converged) {
    std::cerr << "krct: fit did not converge" << (st != KRCT_OK ? std::string(": ") + krct_last_error() : "")
              << "\n";
    return 2;
  }
  return 0;
}

int cmd_embed(const Flags& flags) {
  json cfg = load_config(flags);
  require_keys(cfg, {"input", "params", "label", "preprocess", "eps", "seed"}, "embed");
  if (!cfg.contains("input")) die("embed: missing input cohort CSV");
  if (!cfg.contains("params")) die("embed: missing fitted params JSON path");
  const fs::path dir = prepare_out(flags, cfg, "embed");

  krct_model* model = nullptr;
  check(krct_model_from_json(read_file(cfg.at("params")).c_str(), &model), "params");
  krct_dataset* all = load_and_preprocess(cfg.at("input"), preprocess_of(cfg), dir);
  const std::string label = cfg.value("label", "CN");
  krct_dataset* ds = nullptr;
  check(krct_dataset_select(all, label.c_str(), &ds), "select cohort");
  krct_dataset_free(all);

  krct_embedding* emb = nullptr;
  check(krct_embedding_build(model, ds, cfg.value("eps", -1.0), &emb), "embedding");
  char* ejson = nullptr;
  check(krct_embedding_to_json(emb, &ejson), "embedding json");
  write_file(dir / "embedding.json", with_config(take_string(ejson), cfg).dump(2) + "\n");
  write_file(dir / "vectors.csv", vectors_csv(ds, dataset_vectors(emb, ds, "vectors")));
  std::cout << "wrote " << (dir / "embedding.json").string() << " and vectors.csv ("
            << krct_dataset_size(ds) << " subjects)\n";
  krct_embedding_free(emb);
  krct_model_free(model);
  krct_dataset_free(ds);
  return 0;
}

int cmd_test(const Flags& flags) {
  json cfg = load_config(flags);
  require_keys(cfg,
               {"method", "input", "embedding", "treated_label", "control_label", "preprocess",
                "alpha", "n_perm", "seed", "gamma", "kernel", "pooled_weights"},
               "test");
  const std::string method = cfg.value("method", "hotelling-f");
  if (!cfg.contains("input")) die("test: missing input data CSV");
  const double alpha = cfg.value("alpha", 0.05);
  const fs::path dir = prepare_out(flags, cfg, "test");

  std::string result;
  if (method == "lmm") {
    char *fit_json = nullptr, *test_json = nullptr;
    check(krct_lmm_fit_csv(std::string(cfg.at("input")).c_str(), alpha, &fit_json, &test_json),
          "lmm");
    write_file(dir / "lmm_fit.json", with_config(take_string(fit_json), cfg).dump(2) + "\n");
    result = take_string(test_json);
  } else if (method == "mmd" || method == "kernel-hotelling" || method == "hotelling-f") {
    if (!cfg.contains("embedding")) die("test: missing embedding JSON path");
    krct_embedding* emb = nullptr;
    check(krct_embedding_from_json(read_file(cfg.at("embedding")).c_str(), &emb), "embedding");
    krct_dataset* all = load_and_preprocess(cfg.at("input"), preprocess_of(cfg), dir);
    const std::string lt = cfg.value("treated_label", "T");
    const std::string lc = cfg.value("control_label", "C");
    krct_dataset *dst = nullptr, *dsc = nullptr;
    check(krct_dataset_select(all, lt.c_str(), &dst), "select treated");
    check(krct_dataset_select(all, lc.c_str(), &dsc), "select control");
    krct_dataset_free(all);
    const int nt = krct_dataset_size(dst), nc = krct_dataset_size(dsc);
    if (nt == 0 || nc == 0) die("test: an arm is empty (labels '" + lt + "', '" + lc + "')");

    const auto ft = dataset_vectors(emb, dst, "treated vectors");
    const auto fc = dataset_vectors(emb, dsc, "control vectors");
    json opts{{"alpha", alpha}};
    for (const char* k : {"n_perm", "seed", "gamma", "kernel", "pooled_weights"}) {
      if (cfg.contains(k)) opts[k] = cfg.at(k);
    }
    char* rjson = nullptr;
    check(krct_test_features(method.c_str(), ft.data(), nt, fc.data(), nc, 6, opts.dump().c_str(),
                             &rjson),
          "test");
    result = take_string(rjson);
    krct_embedding_free(emb);
    krct_dataset_free(dst);
    krct_dataset_free(dsc);
  } else {
    die("test: unknown method '" + method + "' (valid: mmd, kernel-hotelling, hotelling-f, lmm)");
  }

  const json rj = json::parse(result);
  write_file(dir / "test_result.json", with_config(result, cfg).dump(2) + "\n");
  std::cout << rj["method"].get<std::string>() << ": "
            << (rj["reject"].get<bool>() ? "reject H0" : "fail to reject H0")
            << " (p = " << rj["p_value"].get<double>() << ", alpha = " << alpha << ")\n";
  return 0;
}

int cmd_power(const Flags& flags) {
  json cfg = load_config(flags);
  require_keys(cfg,
               {"embedding", "input", "asym_label", "sym_label", "preprocess", "rho", "alpha",
                "n_grid", "allocation", "target_power", "seed"},
               "power");
  if (!cfg.contains("input")) die("power: missing historical cohort CSV");
  if (!cfg.contains("embedding")) die("power: missing embedding JSON path");
  const fs::path dir = prepare_out(flags, cfg, "power");

  krct_embedding* emb = nullptr;
  check(krct_embedding_from_json(read_file(cfg.at("embedding")).c_str(), &emb), "embedding");
  krct_dataset* all = load_and_preprocess(cfg.at("input"), preprocess_of(cfg), dir);
  const std::string la = cfg.value("asym_label", "CN");
  const std::string ls = cfg.value("sym_label", "MCI");
  krct_dataset *dsa = nullptr, *dss = nullptr;
  check(krct_dataset_select(all, la.c_str(), &dsa), "select asymptomatic");
  check(krct_dataset_select(all, ls.c_str(), &dss), "select symptomatic");
  krct_dataset_free(all);
  const int na = krct_dataset_size(dsa), ns = krct_dataset_size(dss);
  if (na < 2 || ns < 2) die("power: each historical cohort needs at least 2 subjects");

  const auto fa = dataset_vectors(emb, dsa, "asym vectors");
  const auto fsv = dataset_vectors(emb, dss, "sym vectors");
  const double rho = cfg.value("rho", 0.4);
  std::vector<double> shift(6), pooled(36);
  check(krct_local_alternative(fa.data(), na, fsv.data(), ns, 6, rho, shift.data(), pooled.data()),
        "local alternative");
  double effect = 0.0;
  check(krct_effect_size(shift.data(), pooled.data(), 6, &effect), "effect size");

  std::vector<int> n_grid;
  if (cfg.contains("n_grid")) {
    n_grid = cfg.at("n_grid").get<std::vector<int>>();
  } else {
    for (int n = 10; n <= 400; n += 10) n_grid.push_back(n);
  }
  const double alpha = cfg.value("alpha", 0.05);
  const double allocation = cfg.value("allocation", 1.0);
  char *curve_csv = nullptr, *curve_json = nullptr;
  check(krct_power_curve(n_grid.data(), static_cast<int>(n_grid.size()), 6, alpha, effect,
                         allocation, &curve_csv, &curve_json),
        "power curve");
  write_file(dir / "power_curve.csv", take_string(curve_csv));
  json out = json::parse(take_string(curve_json));
  out["rho"] = rho;
  out["n_asymptomatic"] = na;
  out["n_symptomatic"] = ns;

  int nt = 0, ncq = 0;
  const double target = cfg.value("target_power", 0.8);
  const krct_status st =
      krct_sample_size_for_power(target, 6, alpha, effect, allocation, 1000000, &nt, &ncq);
  if (st == KRCT_OK) {
    out["n_for_target"] = json{{"target_power", target}, {"n_T", nt}, {"n_C", ncq},
                               {"n_total", nt + ncq}};
    std::cout << "effect = " << effect << "; n for " << target << " power: " << nt + ncq << " ("
              << nt << " + " << ncq << ")\n";
  } else {
    out["n_for_target"] = nullptr;
    std::cout << "effect = " << effect << "; target power not reachable below the cap\n";
  }
  out["config"] = cfg;
  write_file(dir / "power_curve.json", out.dump(2) + "\n");
  krct_embedding_free(emb);
  krct_dataset_free(dsa);
  krct_dataset_free(dss);
  return 0;
}

int cmd_simulate(const Flags& flags) {
  json cfg = load_config(flags);
  const std::string experiment = cfg.value("experiment", "power-grid");
  if (experiment == "power-grid") {
    require_keys(cfg,
                 {"experiment", "theta_control", "mu_treated", "span", "n_list", "t_list",
                  "n_sims", "alpha", "seed", "pretrial_n", "fit"},
                 "simulate power-grid");
    json scenario = cfg;
    scenario.erase("experiment");
    if (!scenario.contains("theta_control")) scenario["theta_control"] = default_params_cn();
    if (!scenario.contains("mu_treated")) {
      scenario["mu_treated"] = scenario["theta_control"].value("mu", -0.1) + 0.012;
    }
    cfg = scenario;
    cfg["experiment"] = "power-grid";
    const fs::path dir = prepare_out(flags, cfg, "simulate");
    char *rep = nullptr, *sum = nullptr;
    check(krct_experiment_power_grid(scenario.dump().c_str(), &rep, &sum), "power grid");
    write_file(dir / "replicates.csv", take_string(rep));
    write_file(dir / "summary.csv", take_string(sum));
    std::cout << "wrote " << (dir / "summary.csv").string() << "\n";
    return 0;
  }
  if (experiment == "folds") {
    require_keys(cfg,
                 {"experiment", "input", "preprocess", "seed", "n_folds", "fold_size", "rho",
                  "alpha", "n_grid", "target_power", "fit", "cn_label", "mci_label"},
                 "simulate folds");
    if (!cfg.contains("input")) die("simulate folds: missing input cohort CSV");
    const fs::path dir = prepare_out(flags, cfg, "simulate");
    krct_dataset* ds = load_and_preprocess(cfg.at("input"), preprocess_of(cfg), dir);
    json fold_cfg = cfg;
    fold_cfg.erase("experiment");
    fold_cfg.erase("input");
    fold_cfg.erase("preprocess");
    char *curves = nullptr, *result = nullptr;
    check(krct_experiment_folds(fold_cfg.dump().c_str(), ds, &curves, &result), "folds");
    write_file(dir / "fold_curves.csv", take_string(curves));
    write_file(dir / "fold_power.json", with_config(take_string(result), cfg).dump(2) + "\n");
    std::cout << "wrote " << (dir / "fold_curves.csv").string() << "\n";
    krct_dataset_free(ds);
    return 0;
  }
  die("simulate: unknown experiment '" + experiment + "' (valid: power-grid, folds)");
}

int cmd_pipeline(const Flags& flags) {
  json cfg = load_config(flags);
  require_keys(cfg,
               {"seed", "n_cn", "n_mci", "missing_rate", "params_cn", "params_mci", "preprocess",
                "fit", "rho", "alpha", "n_grid", "method", "eps"},
               "pipeline");
  const std::uint64_t seed = cfg.value("seed", 1ULL);
  cfg["seed"] = seed;
  const json pcn = cfg.value("params_cn", default_params_cn());
  const json pmci = cfg.value("params_mci", default_params_mci());
  cfg["params_cn"] = pcn;
  cfg["params_mci"] = pmci;
  const fs::path dir = prepare_out(flags, cfg, "pipeline");

  // 1. Synthetic cohort (the motivating real cohort is not distributable).
  krct_cohort* cohort = nullptr;
  check(krct_cohort_synth(pcn.dump().c_str(), pmci.dump().c_str(), cfg.value("n_cn", 86),
                          cfg.value("n_mci", 11), seed, cfg.value("missing_rate", 0.05), &cohort),
        "synth");
  char* raw_csv = nullptr;
  check(krct_cohort_to_csv(cohort, &raw_csv), "cohort csv");
  write_file(dir / "cohort.csv", take_string(raw_csv));

  // 2. Preprocess.
  const Preprocess pp = preprocess_of(cfg);
  krct_dataset* all = nullptr;
  char* report = nullptr;
  check(krct_cohort_preprocess(cohort, pp.start_lo, pp.start_hi, pp.window, pp.strict150 ? 1 : 0,
                               &all, &report),
        "preprocess");
  krct_cohort_free(cohort);
  write_file(dir / "exclusions.json", take_string(report) + "\n");
  {
    char* tcsv = nullptr;
    check(krct_dataset_to_csv(all, &tcsv), "trajectory csv");
    write_file(dir / "trajectories.csv", take_string(tcsv));
  }

  // 3. Split CN into a pre-trial fitting half and a pseudo-treated half so
  //    the embedding never sees trial data.
  std::vector<std::string> cn_ids;
  for (int i = 0; i < krct_dataset_size(all); ++i) {
    if (std::string(krct_dataset_label(all, i)) == "CN") cn_ids.push_back(krct_dataset_subject_id(all, i));
  }
  if (cn_ids.size() < 4) die("pipeline: need at least 4 CN subjects after preprocessing");
  for (std::size_t i = cn_ids.size(); i > 1; --i) {
    std::swap(cn_ids[i - 1], cn_ids[mix64(seed ^ (0xabcd1234ULL + i)) % i]);
  }
  const std::size_t half = cn_ids.size() / 2;
  std::vector<const char*> fit_ids, trial_ids;
  for (std::size_t i = 0; i < cn_ids.size(); ++i) {
    (i < half ? fit_ids : trial_ids).push_back(cn_ids[i].c_str());
  }
  krct_dataset *fit_ds = nullptr, *trial_ds = nullptr, *mci_ds = nullptr;
  check(krct_dataset_select_ids(all, fit_ids.data(), static_cast<int>(fit_ids.size()), &fit_ds),
        "select fit half");
  check(krct_dataset_select_ids(all, trial_ids.data(), static_cast<int>(trial_ids.size()),
                                &trial_ds),
        "select trial half");
  check(krct_dataset_select(all, "MCI", &mci_ds), "select MCI");
  krct_dataset_free(all);
  if (krct_dataset_size(mci_ds) < 2) die("pipeline: need at least 2 MCI subjects");

  // 4. Fit the GP on the pre-trial half.
  krct_model* model = nullptr;
  const krct_status fit_st = krct_model_fit(fit_ds, fit_options(cfg).dump().c_str(), &model);
  if (fit_st != KRCT_OK && fit_st != KRCT_ERR_NONCONVERGENCE) check(fit_st, "fit");
  char* mjson = nullptr;
  check(krct_model_to_json(model, &mjson), "model json");
  write_file(dir / "params.json", with_config(take_string(mjson), cfg).dump(2) + "\n");

  // 5. Embedding on the same pre-trial half.
  krct_embedding* emb = nullptr;
  check(krct_embedding_build(model, fit_ds, cfg.value("eps", -1.0), &emb), "embedding");
  char* ejson = nullptr;
  check(krct_embedding_to_json(emb, &ejson), "embedding json");
  write_file(dir / "embedding.json", with_config(take_string(ejson), cfg).dump(2) + "\n");

  // 6. Fisher vectors for the pseudo-trial arms.
  const auto ft = dataset_vectors(emb, trial_ds, "treated vectors");
  const auto fc = dataset_vectors(emb, mci_ds, "control vectors");
  std::string vcsv = vectors_csv(trial_ds, ft);
  {
    const std::string more = vectors_csv(mci_ds, fc);
    vcsv += more.substr(more.find('\n') + 1);
  }
  write_file(dir / "vectors.csv", vcsv);

  // 7. Pseudo-trial test: CN trial half (as treated) vs MCI.
  const double alpha = cfg.value("alpha", 0.05);
  const std::string method = cfg.value("method", "hotelling-f");
  json topts{{"alpha", alpha}, {"seed", seed}};
  char* rjson = nullptr;
  check(krct_test_features(method.c_str(), ft.data(), krct_dataset_size(trial_ds), fc.data(),
                           krct_dataset_size(mci_ds), 6, topts.dump().c_str(), &rjson),
        "test");
  const std::string test_result = take_string(rjson);
  write_file(dir / "test_result.json", with_config(test_result, cfg).dump(2) + "\n");

  // 8. Power curve from the (1 - rho) local alternative.
  const double rho = cfg.value("rho", 0.4);
  std::vector<double> shift(6), pooled(36);
  check(krct_local_alternative(ft.data(), krct_dataset_size(trial_ds), fc.data(),
                               krct_dataset_size(mci_ds), 6, rho, shift.data(), pooled.data()),
        "local alternative");
  double effect = 0.0;
  check(krct_effect_size(shift.data(), pooled.data(), 6, &effect), "effect size");
  std::vector<int> n_grid;
  if (cfg.contains("n_grid")) {
    n_grid = cfg.at("n_grid").get<std::vector<int>>();
  } else {
    for (int n = 10; n <= 400; n += 10) n_grid.push_back(n);
  }
  char *curve_csv = nullptr, *curve_json = nullptr;
  check(krct_power_curve(n_grid.data(), static_cast<int>(n_grid.size()), 6, alpha, effect, 1.0,
                         &curve_csv, &curve_json),
        "power curve");
  write_file(dir / "power_curve.csv", take_string(curve_csv));
  json pout = json::parse(take_string(curve_json));
  pout["rho"] = rho;
  pout["config"] = cfg;
  write_file(dir / "power_curve.json", pout.dump(2) + "\n");

  const json rj = json::parse(test_result);
  std::cout << "pipeline complete: test " << (rj["reject"].get<bool>() ? "rejects" : "does not reject")
            << " (p = " << rj["p_value"].get<double>() << "), effect = " << effect << "\n";
  krct_embedding_free(emb);
  krct_model_free(model);
  krct_dataset_free(fit_ds);
  krct_dataset_free(trial_ds);
  krct_dataset_free(mci_ds);
  return fit_st == KRCT_ERR_NONCONVERGENCE ? 2 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kernel-method design and analysis of two-arm RCTs with longitudinal outcomes"};
  app.require_subcommand(1);
  Flags flags;
  app.add_option("--config", flags.config_path, "JSON config file")->group("Global");
  app.add_option("--out", flags.out_dir, "output directory")->group("Global");
  app.add_option("--input", flags.input, "input data CSV")->group("Global");
  std::uint64_t seed_val = 0;
  double alpha_val = 0.0, rho_val = 0.0;
  auto* seed_opt = app.add_option("--seed", seed_val, "master seed")->group("Global");
  auto* alpha_opt = app.add_option("--alpha", alpha_val, "test level")->group("Global");
  auto* rho_opt = app.add_option("--rho", rho_val, "retained disease fraction")->group("Global");
  app.add_option("--method", flags.method, "test method")->group("Global");

  auto* synth = app.add_subcommand("synth", "generate a synthetic raw cohort CSV");
  auto* fit = app.add_subcommand("fit", "fit the generative model to a cohort");
  auto* embed = app.add_subcommand("embed", "build the Fisher embedding");
  auto* test = app.add_subcommand("test", "run a two-sample test on trial data");
  auto* power = app.add_subcommand("power", "power curve and sample size from historical cohorts");
  auto* simulate = app.add_subcommand("simulate", "run the simulation experiments");
  auto* pipeline = app.add_subcommand("pipeline", "synthetic end-to-end run");
  for (auto* sub : {synth, fit, embed, test, power, simulate, pipeline}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }
  if (*seed_opt) flags.seed = seed_val;
  if (*alpha_opt) flags.alpha = alpha_val;
  if (*rho_opt) flags.rho = rho_val;

  try {
    if (*synth) return cmd_synth(flags);
    if (*fit) return cmd_fit(flags);
    if (*embed) return cmd_embed(flags);
    if (*test) return cmd_test(flags);
    if (*power) return cmd_power(flags);
    if (*simulate) return cmd_simulate(flags);
    if (*pipeline) return cmd_pipeline(flags);
  } catch (const json::exception& e) {
    die(std::string("config error: ") + e.what());
  }
  die("no subcommand");
}
