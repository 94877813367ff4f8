#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gp_model.hpp"
#include "json_fwd.hpp"

namespace krct::ingest {

/// One subject's raw weekly stream; only present weeks carry records.
struct RawSeries {
  std::string subject_id;
  std::string cohort;  // CN / MCI for historical cohorts, T / C for trial arms
  struct Record {
    int week = 0;
    double value = 0.0;
  };
  std::vector<Record> records;  // strictly increasing weeks, up to 250
};

/// Reads `subject_id,week,value,cohort`. Malformed rows and duplicate
/// (subject, week) pairs are collected and reported with line numbers.
std::vector<RawSeries> load_csv(const std::string& path);
void save_csv(const std::vector<RawSeries>& cohort, const std::string& path);
std::string to_csv(const std::vector<RawSeries>& cohort);

struct PreprocessOptions {
  int start_lo = 5;
  int start_hi = 15;
  int window = 150;
  bool strict150 = false;  // drop subjects whose record ends inside the window
};

struct Exclusion {
  std::string subject_id;
  std::string reason;
};

/// Anchors the series at the first present week in [start_lo, start_hi],
/// subtracts the anchor value, and returns the next `window` weeks on
/// offsets 1..window (missing weeks become NaN). Returns nullopt with a
/// reason when the subject is excluded.
std::optional<gp::Trajectory> preprocess(const RawSeries& raw, const PreprocessOptions& opts,
                                         std::string* reason);

struct PreprocessResult {
  std::vector<gp::Trajectory> trajectories;
  std::vector<std::string> cohorts;  // parallel to trajectories
  gp::ObservationGrid grid;          // unit counts on offsets 1..window
  std::vector<Exclusion> excluded;

  nlohmann::json exclusion_report() const;
  /// Indices of trajectories whose cohort matches the label.
  std::vector<int> with_label(const std::string& label) const;
};

PreprocessResult preprocess_cohort(const std::vector<RawSeries>& cohort,
                                   const PreprocessOptions& opts = {});

/// Synthetic raw cohort in the 250-week format: GP trajectories riding on a
/// subject-specific base level, anchor week in [5, 15], configurable
/// missingness. Deterministic given seed.
std::vector<RawSeries> synth_cohort(const gp::GpParams& params_cn, const gp::GpParams& params_mci,
                                    int n_cn, int n_mci, std::uint64_t seed,
                                    double missing_rate = 0.05);

/// Output schema `subject_id,offset_week,value` with empty value for
/// missing entries.
std::string trajectories_to_csv(const std::vector<gp::Trajectory>& trajectories);

}  // namespace krct::ingest
