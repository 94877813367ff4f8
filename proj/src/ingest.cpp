#include "ingest.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>

#include "errors.hpp"
#include "fmt.hpp"
#include "rng.hpp"

namespace krct::ingest {

std::vector<RawSeries> load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::map<std::string, RawSeries> by_id;
  std::vector<std::string> order;
  std::vector<std::string> problems;
  std::map<std::pair<std::string, int>, int> seen_week;  // -> line number

  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line_no == 1) {
      if (line != "subject_id,week,value,cohort")
        throw ParseError("'" + path + "': expected header subject_id,week,value,cohort");
      continue;
    }
    std::stringstream ss(line);
    std::string id, week_s, value_s, cohort;
    if (!std::getline(ss, id, ',') || !std::getline(ss, week_s, ',') ||
        !std::getline(ss, value_s, ',') || !std::getline(ss, cohort)) {
      problems.push_back("line " + std::to_string(line_no) + ": malformed row");
      continue;
    }
    int week = 0;
    double value = 0.0;
    try {
      week = std::stoi(week_s);
      value = std::stod(value_s);
    } catch (const std::exception&) {
      problems.push_back("line " + std::to_string(line_no) + ": bad number");
      continue;
    }
    if (week < 0) {
      problems.push_back("line " + std::to_string(line_no) + ": negative week");
      continue;
    }
    if (id.empty() || cohort.empty()) {
      problems.push_back("line " + std::to_string(line_no) + ": empty subject or cohort");
      continue;
    }
    const auto key = std::make_pair(id, week);
    if (auto it = seen_week.find(key); it != seen_week.end()) {
      problems.push_back("line " + std::to_string(line_no) + ": duplicate (subject, week) pair, first at line " +
                         std::to_string(it->second));
      continue;
    }
    seen_week[key] = line_no;
    auto [it, fresh] = by_id.try_emplace(id);
    if (fresh) {
      it->second.subject_id = id;
      it->second.cohort = cohort;
      order.push_back(id);
    } else if (it->second.cohort != cohort) {
      problems.push_back("line " + std::to_string(line_no) + ": subject '" + id +
                         "' has inconsistent cohort labels");
      continue;
    }
    it->second.records.push_back({week, value});
  }
  if (!problems.empty()) {
    std::string msg = "'" + path + "': " + std::to_string(problems.size()) + " bad rows";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ParseError(msg);
  }
  std::vector<RawSeries> out;
  out.reserve(order.size());
  for (const auto& id : order) {
    RawSeries s = std::move(by_id[id]);
    std::sort(s.records.begin(), s.records.end(),
              [](const RawSeries::Record& a, const RawSeries::Record& b) { return a.week < b.week; });
    if (s.records.size() > 250)
      throw ParseError("subject '" + id + "' has more than 250 weekly records");
    out.push_back(std::move(s));
  }
  return out;
}

std::string to_csv(const std::vector<RawSeries>& cohort) {
  std::string out = "subject_id,week,value,cohort\n";
  for (const auto& s : cohort) {
    for (const auto& r : s.records) {
      out += s.subject_id + "," + std::to_string(r.week) + "," + format_double(r.value) + "," +
             s.cohort + "\n";
    }
  }
  return out;
}

void save_csv(const std::vector<RawSeries>& cohort, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << to_csv(cohort);
}

std::optional<gp::Trajectory> preprocess(const RawSeries& raw, const PreprocessOptions& opts,
                                         std::string* reason) {
  std::map<int, double> by_week;
  for (const auto& r : raw.records) by_week[r.week] = r.value;

  int anchor = -1;
  for (int w = opts.start_lo; w <= opts.start_hi; ++w) {
    if (by_week.count(w)) {
      anchor = w;
      break;
    }
  }
  if (anchor < 0) {
    if (reason) *reason = "no complete week in start range";
    return std::nullopt;
  }
  if (opts.strict150 && (raw.records.empty() || raw.records.back().week < anchor + opts.window)) {
    if (reason) *reason = "record ends before the full window (strict mode)";
    return std::nullopt;
  }

  const double base = by_week[anchor];
  gp::Trajectory tr;
  tr.subject_id = raw.subject_id;
  tr.values.resize(opts.window);
  int observed = 0;
  for (int k = 1; k <= opts.window; ++k) {
    auto it = by_week.find(anchor + k);
    if (it == by_week.end()) {
      tr.values[k - 1] = gp::missing_value();
    } else {
      tr.values[k - 1] = it->second - base;
      ++observed;
    }
  }
  if (observed < 2) {
    if (reason) *reason = "fewer than 2 observed values in window";
    return std::nullopt;
  }
  return tr;
}

PreprocessResult preprocess_cohort(const std::vector<RawSeries>& cohort,
                                   const PreprocessOptions& opts) {
  if (opts.window < 1) throw InvalidArgument("preprocess: window must be >= 1");
  if (opts.start_lo < 0 || opts.start_hi < opts.start_lo)
    throw InvalidArgument("preprocess: bad start range");
  PreprocessResult res;
  gp::Vec times(opts.window);
  for (int k = 0; k < opts.window; ++k) times[k] = k + 1;
  res.grid = gp::ObservationGrid::unit(std::move(times));
  for (const auto& s : cohort) {
    std::string reason;
    auto tr = preprocess(s, opts, &reason);
    if (tr) {
      res.trajectories.push_back(std::move(*tr));
      res.cohorts.push_back(s.cohort);
    } else {
      res.excluded.push_back({s.subject_id, reason});
    }
  }
  return res;
}

nlohmann::json PreprocessResult::exclusion_report() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : excluded) arr.push_back({{"subject_id", e.subject_id}, {"reason", e.reason}});
  return arr;
}

std::vector<int> PreprocessResult::with_label(const std::string& label) const {
  std::vector<int> idx;
  for (std::size_t i = 0; i < cohorts.size(); ++i) {
    if (cohorts[i] == label) idx.push_back(static_cast<int>(i));
  }
  return idx;
}

std::vector<RawSeries> synth_cohort(const gp::GpParams& params_cn, const gp::GpParams& params_mci,
                                    int n_cn, int n_mci, std::uint64_t seed, double missing_rate) {
  if (n_cn < 0 || n_mci < 0) throw InvalidArgument("synth_cohort: negative cohort size");
  if (!(missing_rate >= 0.0 && missing_rate < 1.0))
    throw InvalidArgument("synth_cohort: missing_rate must be in [0, 1)");
  params_cn.validate();
  params_mci.validate();

  constexpr int kTotalWeeks = 250;
  Rng master(seed);
  std::vector<RawSeries> out;
  out.reserve(n_cn + n_mci);

  auto make_subject = [&](const gp::GpParams& params, const std::string& id,
                          const std::string& cohort, std::uint64_t child_idx) {
    Rng rng = master.child(child_idx);
    const int anchor = 5 + static_cast<int>(rng.below(11));  // in [5, 15]
    const int horizon = kTotalWeeks - 1 - anchor;
    gp::Vec times(horizon);
    for (int k = 0; k < horizon; ++k) times[k] = k + 1;
    const auto grid = gp::ObservationGrid::unit(std::move(times));
    const auto path = gp::simulate(params, grid, 1, rng.child(1).seed(), id + "-gp-")[0];

    RawSeries s;
    s.subject_id = id;
    s.cohort = cohort;
    const double base = 100.0 + 10.0 * rng.normal();
    const double setup_sd = std::sqrt(std::max(params.sigma2, 1e-8));
    for (int w = 0; w < anchor; ++w) {
      if (rng.uniform() < 0.7) s.records.push_back({w, base + setup_sd * rng.normal()});
    }
    s.records.push_back({anchor, base});
    for (int k = 1; k <= horizon; ++k) {
      if (rng.uniform() < missing_rate) continue;
      s.records.push_back({anchor + k, base + path.values[k - 1]});
    }
    return s;
  };

  for (int i = 0; i < n_cn; ++i) {
    char id[32];
    std::snprintf(id, sizeof(id), "cn-%03d", i);
    out.push_back(make_subject(params_cn, id, "CN", i));
  }
  for (int i = 0; i < n_mci; ++i) {
    char id[32];
    std::snprintf(id, sizeof(id), "mci-%03d", i);
    out.push_back(make_subject(params_mci, id, "MCI", 100000 + i));
  }
  return out;
}

std::string trajectories_to_csv(const std::vector<gp::Trajectory>& trajectories) {
  std::string out = "subject_id,offset_week,value\n";
  for (const auto& tr : trajectories) {
    for (int k = 0; k < tr.values.size(); ++k) {
      out += tr.subject_id + "," + std::to_string(k + 1) + ",";
      if (!gp::is_missing(tr.values[k])) out += format_double(tr.values[k]);
      out += "\n";
    }
  }
  return out;
}

}  // namespace krct::ingest
