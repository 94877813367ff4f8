#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>

#include "errors.hpp"
#include "gp_fit.hpp"
#include "ingest.hpp"
#include "rng.hpp"

using namespace krct;

namespace {

ingest::RawSeries linear_series(const std::string& id, int first_week, int last_week) {
  ingest::RawSeries s;
  s.subject_id = id;
  s.cohort = "CN";
  for (int w = first_week; w <= last_week; ++w) s.records.push_back({w, static_cast<double>(w)});
  return s;
}

}  // namespace

TEST_CASE("constant series preprocess to all zeros") {
  ingest::RawSeries s;
  s.subject_id = "c";
  s.cohort = "CN";
  for (int w = 0; w < 200; ++w) s.records.push_back({w, 42.0});
  const auto tr = ingest::preprocess(s, {}, nullptr);
  REQUIRE(tr.has_value());
  CHECK(tr->values.size() == 150);
  for (int k = 0; k < 150; ++k) CHECK(tr->values[k] == 0.0);
}

TEST_CASE("linear series anchored at week 5 yield value k at offset k") {
  const auto s = linear_series("lin", 0, 249);
  const auto tr = ingest::preprocess(s, {}, nullptr);
  REQUIRE(tr.has_value());
  for (int k = 1; k <= 150; ++k) CHECK(tr->values[k - 1] == doctest::Approx(k).epsilon(1e-14));
}

TEST_CASE("anchor skips to the first present week in the range") {
  ingest::RawSeries s = linear_series("gap", 10, 249);  // weeks 5..9 absent
  std::string reason;
  const auto tr = ingest::preprocess(s, {}, &reason);
  REQUIRE(tr.has_value());
  // anchor = 10, value 10; offset k maps to week 10 + k.
  for (int k : {1, 50, 150}) CHECK(tr->values[k - 1] == doctest::Approx(k).epsilon(1e-14));
}

TEST_CASE("subjects without an anchor week are excluded with a reason") {
  ingest::RawSeries s = linear_series("late", 16, 249);
  std::string reason;
  CHECK_FALSE(ingest::preprocess(s, {}, &reason).has_value());
  CHECK(reason == "no complete week in start range");
}

TEST_CASE("short records: trailing missing by default, excluded in strict mode") {
  ingest::RawSeries s = linear_series("short", 0, 100);
  ingest::PreprocessOptions opts;
  std::string reason;
  const auto tr = ingest::preprocess(s, opts, &reason);
  REQUIRE(tr.has_value());
  CHECK_FALSE(gp::is_missing(tr->values[94]));  // week 100 = anchor 5 + offset 95
  CHECK(gp::is_missing(tr->values[96]));
  CHECK(gp::is_missing(tr->values[149]));

  opts.strict150 = true;
  CHECK_FALSE(ingest::preprocess(s, opts, &reason).has_value());
  CHECK(reason.find("strict") != std::string::npos);
}

TEST_CASE("re-anchoring a preprocessed series changes nothing") {
  ingest::RawSeries s;
  s.subject_id = "orig";
  s.cohort = "CN";
  Rng rng(5);
  for (int w = 2; w < 250; ++w) {
    if (rng.uniform() < 0.1) continue;
    s.records.push_back({w, 10.0 + 0.3 * w + rng.normal()});
  }
  const auto tr = ingest::preprocess(s, {}, nullptr);
  REQUIRE(tr.has_value());

  // Feed the output back as a raw series anchored at week 5 with value 0.
  ingest::RawSeries again;
  again.subject_id = "again";
  again.cohort = "CN";
  again.records.push_back({5, 0.0});
  for (int k = 1; k <= 150; ++k) {
    if (!gp::is_missing(tr->values[k - 1])) again.records.push_back({5 + k, tr->values[k - 1]});
  }
  const auto tr2 = ingest::preprocess(again, {}, nullptr);
  REQUIRE(tr2.has_value());
  for (int k = 0; k < 150; ++k) {
    if (gp::is_missing(tr->values[k])) {
      CHECK(gp::is_missing(tr2->values[k]));
    } else {
      CHECK(tr2->values[k] == tr->values[k]);
    }
  }
}

TEST_CASE("csv loading: empty, small, duplicates, malformed") {
  const std::string path = "/tmp/krct_ingest_test.csv";
  {
    std::ofstream out(path);
    out << "subject_id,week,value,cohort\n";
  }
  CHECK(ingest::load_csv(path).empty());

  {
    std::ofstream out(path);
    out << "subject_id,week,value,cohort\n";
    out << "a,5,1.5,CN\na,6,2.5,CN\na,7,3.5,CN\n";
    out << "b,5,0.5,MCI\nb,6,1.0,MCI\nb,8,2.0,MCI\n";
  }
  const auto cohort = ingest::load_csv(path);
  REQUIRE(cohort.size() == 2);
  CHECK(cohort[0].records.size() == 3);
  CHECK(cohort[1].cohort == "MCI");
  CHECK(cohort[1].records[2].week == 8);

  {
    std::ofstream out(path);
    out << "subject_id,week,value,cohort\na,5,1.5,CN\na,5,2.5,CN\n";
  }
  try {
    ingest::load_csv(path);
    FAIL("expected duplicate error");
  } catch (const ParseError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("line 3") != std::string::npos);
    CHECK(msg.find("duplicate") != std::string::npos);
  }

  {
    std::ofstream out(path);
    out << "subject_id,week,value,cohort\na,notanumber,1.5,CN\n";
  }
  CHECK_THROWS_AS(ingest::load_csv(path), ParseError);
  std::remove(path.c_str());
}

TEST_CASE("save and load round trip") {
  gp::GpParams p;
  p.mu = -0.1;
  p.sigma2 = 0.5;
  p.alpha2 = 0.4;
  p.rho2 = 16.0;
  p.nu = 1.0;
  const auto cohort = ingest::synth_cohort(p, p, 5, 3, 99, 0.05);
  const std::string path = "/tmp/krct_roundtrip.csv";
  ingest::save_csv(cohort, path);
  const auto back = ingest::load_csv(path);
  REQUIRE(back.size() == cohort.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].subject_id == cohort[i].subject_id);
    CHECK(back[i].cohort == cohort[i].cohort);
    REQUIRE(back[i].records.size() == cohort[i].records.size());
    for (std::size_t k = 0; k < back[i].records.size(); ++k) {
      CHECK(back[i].records[k].week == cohort[i].records[k].week);
      CHECK(back[i].records[k].value == cohort[i].records[k].value);
    }
  }
  std::remove(path.c_str());
}

TEST_CASE("synthetic cohorts: determinism, sizes, anchors") {
  gp::GpParams p;
  p.mu = -0.2;
  p.sigma2 = 1.0;
  p.alpha2 = 0.5;
  p.rho2 = 9.0;
  p.nu = 1.0;
  const auto a = ingest::synth_cohort(p, p, 6, 4, 7, 0.05);
  const auto b = ingest::synth_cohort(p, p, 6, 4, 7, 0.05);
  REQUIRE(a.size() == 10);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].subject_id == b[i].subject_id);
    REQUIRE(a[i].records.size() == b[i].records.size());
    for (std::size_t k = 0; k < a[i].records.size(); ++k) {
      CHECK(a[i].records[k].value == b[i].records[k].value);
    }
  }

  const auto mci_only = ingest::synth_cohort(p, p, 0, 5, 8, 0.0);
  REQUIRE(mci_only.size() == 5);
  for (const auto& s : mci_only) CHECK(s.cohort == "MCI");

  // Every synthetic subject has an anchor in [5, 15] and at most 250 weeks.
  for (const auto& s : a) {
    CHECK(s.records.size() <= 250);
    bool anchored = false;
    for (const auto& r : s.records) {
      if (r.week >= 5 && r.week <= 15) anchored = true;
      CHECK(r.week < 250);
    }
    CHECK(anchored);
  }
}

TEST_CASE("pipeline round trip recovers the generating slope") {
  gp::GpParams cn;
  cn.mu = -0.12;
  cn.sigma2 = 0.8;
  cn.alpha2 = 0.4;
  cn.beta = 0.2;
  cn.rho2 = 16.0;
  cn.nu = 1.0;
  gp::GpParams mci = cn;
  mci.mu = -0.35;

  const auto raw = ingest::synth_cohort(cn, mci, 40, 5, 12345, 0.03);
  const std::string path = "/tmp/krct_pipeline.csv";
  ingest::save_csv(raw, path);
  const auto loaded = ingest::load_csv(path);
  std::remove(path.c_str());

  ingest::PreprocessOptions opts;
  opts.window = 60;
  const auto res = ingest::preprocess_cohort(loaded, opts);
  CHECK(res.excluded.empty());
  const auto cn_idx = res.with_label("CN");
  REQUIRE(cn_idx.size() == 40);
  std::vector<gp::Trajectory> cn_data;
  for (int i : cn_idx) cn_data.push_back(res.trajectories[i]);

  gp::FitConfig cfg;
  cfg.multistarts = 1;
  cfg.max_iter = 250;
  const auto fit = gp::fit_mle(cn_data, res.grid, gp::heuristic_init(cn_data, res.grid), cfg);
  const double se = gp::mu_standard_error(fit.params, res.grid, cn_data);
  CHECK(std::fabs(fit.params.mu - cn.mu) < 3.0 * se);
}

TEST_CASE("exclusion report and trajectory csv schema") {
  std::vector<ingest::RawSeries> cohort;
  cohort.push_back(linear_series("good", 0, 249));
  cohort.push_back(linear_series("bad", 20, 40));
  const auto res = ingest::preprocess_cohort(cohort, {});
  REQUIRE(res.excluded.size() == 1);
  const auto report = res.exclusion_report();
  REQUIRE(report.size() == 1);
  CHECK(report[0]["subject_id"] == "bad");
  CHECK(report[0].contains("reason"));

  const std::string csv = ingest::trajectories_to_csv(res.trajectories);
  CHECK(csv.rfind("subject_id,offset_week,value\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 151);  // header + 150 offsets
}
