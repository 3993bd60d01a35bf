#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "hyperbo/bo.hpp"
#include "hyperbo/dataset.hpp"
#include "hyperbo/objectives.hpp"
#include "hyperbo/training.hpp"

namespace hyperbo {

// One finished run, keyed by (method, task, seed).
struct RunRecord {
  std::string method;
  std::string task_id;
  std::uint64_t seed = 0;
  std::vector<double> best_so_far;  // per iteration, warped units
  std::vector<double> regret;       // same length; NaN when f_max unknown
};

RunRecord make_record(const std::string& method, const std::string& task_id,
                      std::uint64_t seed, const BoTrace& trace);

// Percentile with linear interpolation between order statistics, endpoints
// inclusive. p in [0, 100].
double linear_percentile(std::vector<double> values, double p);

// Per task and method, seeds reduce to the per-iteration median best-so-far.
// The criterion for a task is the median over methods of that value at
// criterion_iteration; fraction[m][t] counts tasks the method strictly beats.
struct ProfileReport {
  int criterion_iteration = 0;
  std::vector<std::string> methods;
  std::vector<std::string> tasks;
  std::vector<double> criterion_by_task;
  std::vector<std::vector<double>> fraction;  // methods x iterations
  int iterations = 0;
};

ProfileReport performance_profile(const std::vector<RunRecord>& records,
                                  int criterion_iteration);

struct PercentileRow {
  std::string method;
  int iteration = 0;  // 1-based
  double p20 = 0.0, p50 = 0.0, p80 = 0.0;
};

// Regret percentiles over all (task, seed) pairs of each method.
std::vector<PercentileRow> regret_percentiles(const std::vector<RunRecord>& records);

struct SpeedupEntry {
  std::string task_id;
  bool reached = false;           // whether B ever matches A's final best
  double ratio = 0.0;             // t_B / t_A when reached
};

// Per task: iterations B needs to reach A's final best value, over iterations
// A needs; censored entries are reported, never averaged. Seeds reduce to the
// per-iteration median series first.
std::vector<SpeedupEntry> speedup_factor(const std::vector<RunRecord>& records_a,
                                         const std::vector<RunRecord>& records_b);

struct DiagnosticsRow {
  std::string model;
  double nll_heldout = 0.0;
  double nll_all = 0.0;
  double divergence = 0.0;
  bool divergence_is_pseudo = false;
};

// Fit-quality table over {untrained init, single-task fit, multi-task fit}.
// The single-task model is fit by NLL on the held-out task alone.
std::vector<DiagnosticsRow> model_diagnostics(const TrainResult& trained,
                                              const TuningDataset& dataset,
                                              const MatchingDataset& matching,
                                              const std::string& heldout_task,
                                              OutputWarp warp);

// Run CSV: iteration, x_0..x_{d-1}, y, raw, best_so_far, regret.
void write_run_csv(const std::string& path, const BoTrace& trace);
// File name layout: <method>__<task>__seed<k>.csv inside a records directory.
std::string run_file_name(const std::string& method, const std::string& task_id,
                          std::uint64_t seed);
RunRecord read_run_csv(const std::string& path);
std::vector<RunRecord> read_records_dir(const std::string& dir);

void write_profile_csv(const std::string& path, const ProfileReport& report);
void write_percentiles_csv(const std::string& path,
                           const std::vector<PercentileRow>& rows);
void write_speedup_csv(const std::string& path,
                       const std::vector<SpeedupEntry>& entries);
void write_diagnostics_csv(const std::string& path,
                           const std::vector<DiagnosticsRow>& rows);

}  // namespace hyperbo
