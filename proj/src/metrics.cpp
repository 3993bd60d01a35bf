#include "hyperbo/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <utility>

#include "hyperbo/errors.hpp"
#include "hyperbo/rng.hpp"

namespace hyperbo {

namespace {

namespace fs = std::filesystem;

[[noreturn]] void fail(const std::string& msg) { throw ValidationError(msg); }

// %.17g round-trips every double exactly.
std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& cell, const std::string& path) {
  char* end = nullptr;
  const double v = std::strtod(cell.c_str(), &end);
  if (end == cell.c_str() || *end != '\0')
    fail("run csv: '" + path + "' holds a malformed number '" + cell + "'");
  return v;
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

int common_length(const std::vector<RunRecord>& records, const char* what) {
  if (records.empty()) fail(std::string(what) + ": no records");
  const std::size_t t = records.front().best_so_far.size();
  for (const RunRecord& r : records)
    if (r.best_so_far.size() != t || r.regret.size() != t)
      fail(std::string(what) + ": runs disagree on iteration count");
  if (t == 0) fail(std::string(what) + ": runs are empty");
  return static_cast<int>(t);
}

double median(std::vector<double> values) {
  return linear_percentile(std::move(values), 50.0);
}

// Per task, the per-iteration median best-so-far over seeds.
std::map<std::string, std::vector<double>> median_series_by_task(
    const std::vector<RunRecord>& records, const char* what) {
  const int t_count = common_length(records, what);
  std::map<std::string, std::vector<const RunRecord*>> by_task;
  for (const RunRecord& r : records) by_task[r.task_id].push_back(&r);
  std::map<std::string, std::vector<double>> out;
  for (const auto& [task, runs] : by_task) {
    std::vector<double> series(t_count);
    for (int i = 0; i < t_count; ++i) {
      std::vector<double> values;
      values.reserve(runs.size());
      for (const RunRecord* run : runs) values.push_back(run->best_so_far[i]);
      series[i] = median(std::move(values));
    }
    out.emplace(task, std::move(series));
  }
  return out;
}

// 1-based first iteration reaching the target; 0 when never reached.
int first_reach(const std::vector<double>& series, double target) {
  for (std::size_t i = 0; i < series.size(); ++i)
    if (series[i] >= target) return static_cast<int>(i) + 1;
  return 0;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out.good()) fail("cannot write '" + path + "'");
  return out;
}

void finish(std::ofstream& out, const std::string& path) {
  out.flush();
  if (!out.good()) fail("write to '" + path + "' failed");
}

}  // namespace

RunRecord make_record(const std::string& method, const std::string& task_id,
                      std::uint64_t seed, const BoTrace& trace) {
  RunRecord r;
  r.method = method;
  r.task_id = task_id;
  r.seed = seed;
  r.best_so_far.reserve(trace.steps.size());
  r.regret.reserve(trace.steps.size());
  for (const BoStep& step : trace.steps) {
    r.best_so_far.push_back(step.best_so_far);
    r.regret.push_back(step.regret);
  }
  return r;
}

double linear_percentile(std::vector<double> values, double p) {
  if (values.empty()) fail("percentile: no values");
  if (!(p >= 0.0 && p <= 100.0)) fail("percentile: level must lie in [0, 100]");
  for (double v : values)
    if (!std::isfinite(v)) fail("percentile: non-finite value");
  std::sort(values.begin(), values.end());
  const double h = static_cast<double>(values.size() - 1) * (p / 100.0);
  const auto lo = static_cast<std::size_t>(h);
  if (lo + 1 >= values.size()) return values.back();
  return values[lo] + (h - static_cast<double>(lo)) * (values[lo + 1] - values[lo]);
}

ProfileReport performance_profile(const std::vector<RunRecord>& records,
                                  int criterion_iteration) {
  const int t_count = common_length(records, "profile");
  if (criterion_iteration < 1 || criterion_iteration > t_count)
    fail("profile: criterion iteration out of range");

  std::map<std::string, std::map<std::string, std::vector<const RunRecord*>>> grouped;
  std::set<std::string> task_set;
  for (const RunRecord& r : records) {
    grouped[r.method][r.task_id].push_back(&r);
    task_set.insert(r.task_id);
  }

  ProfileReport report;
  report.criterion_iteration = criterion_iteration;
  report.iterations = t_count;
  for (const auto& [method, by_task] : grouped) report.methods.push_back(method);
  report.tasks.assign(task_set.begin(), task_set.end());
  const int n_methods = static_cast<int>(report.methods.size());
  const int n_tasks = static_cast<int>(report.tasks.size());

  // median best-so-far series per (method, task)
  std::vector<std::vector<std::vector<double>>> med(
      n_methods, std::vector<std::vector<double>>(n_tasks));
  for (int mi = 0; mi < n_methods; ++mi) {
    const auto& by_task = grouped[report.methods[mi]];
    for (int ti = 0; ti < n_tasks; ++ti) {
      const auto it = by_task.find(report.tasks[ti]);
      if (it == by_task.end())
        fail("profile: method '" + report.methods[mi] + "' has no runs for task '" +
             report.tasks[ti] + "'");
      std::vector<double> series(t_count);
      for (int i = 0; i < t_count; ++i) {
        std::vector<double> values;
        values.reserve(it->second.size());
        for (const RunRecord* run : it->second)
          values.push_back(run->best_so_far[i]);
        series[i] = median(std::move(values));
      }
      med[mi][ti] = std::move(series);
    }
  }

  report.criterion_by_task.resize(n_tasks);
  for (int ti = 0; ti < n_tasks; ++ti) {
    std::vector<double> values(n_methods);
    for (int mi = 0; mi < n_methods; ++mi)
      values[mi] = med[mi][ti][criterion_iteration - 1];
    report.criterion_by_task[ti] = median(std::move(values));
  }

  report.fraction.assign(n_methods, std::vector<double>(t_count, 0.0));
  for (int mi = 0; mi < n_methods; ++mi)
    for (int i = 0; i < t_count; ++i) {
      int beats = 0;
      for (int ti = 0; ti < n_tasks; ++ti)
        if (med[mi][ti][i] > report.criterion_by_task[ti]) ++beats;
      report.fraction[mi][i] = static_cast<double>(beats) / n_tasks;
    }
  return report;
}

std::vector<PercentileRow> regret_percentiles(const std::vector<RunRecord>& records) {
  const int t_count = common_length(records, "percentiles");
  std::map<std::string, std::vector<const RunRecord*>> by_method;
  for (const RunRecord& r : records) by_method[r.method].push_back(&r);

  std::vector<PercentileRow> rows;
  rows.reserve(by_method.size() * t_count);
  for (const auto& [method, runs] : by_method)
    for (int i = 0; i < t_count; ++i) {
      std::vector<double> values;
      values.reserve(runs.size());
      for (const RunRecord* run : runs) values.push_back(run->regret[i]);
      PercentileRow row;
      row.method = method;
      row.iteration = i + 1;
      row.p20 = linear_percentile(values, 20.0);
      row.p50 = linear_percentile(values, 50.0);
      row.p80 = linear_percentile(std::move(values), 80.0);
      rows.push_back(std::move(row));
    }
  return rows;
}

std::vector<SpeedupEntry> speedup_factor(const std::vector<RunRecord>& records_a,
                                         const std::vector<RunRecord>& records_b) {
  const auto series_a = median_series_by_task(records_a, "speedup");
  const auto series_b = median_series_by_task(records_b, "speedup");
  if (series_a.size() != series_b.size())
    fail("speedup: the two record sets cover different tasks");

  std::vector<SpeedupEntry> entries;
  entries.reserve(series_a.size());
  for (const auto& [task, a] : series_a) {
    const auto it = series_b.find(task);
    if (it == series_b.end())
      fail("speedup: the two record sets cover different tasks");
    const double target = a.back();
    const int t_a = first_reach(a, target);  // the last entry always qualifies
    const int t_b = first_reach(it->second, target);
    SpeedupEntry entry;
    entry.task_id = task;
    entry.reached = t_b > 0;
    entry.ratio = entry.reached ? static_cast<double>(t_b) / t_a : 0.0;
    entries.push_back(std::move(entry));
  }
  return entries;
}

std::vector<DiagnosticsRow> model_diagnostics(const TrainResult& trained,
                                              const TuningDataset& dataset,
                                              const MatchingDataset& matching,
                                              const std::string& heldout_task,
                                              OutputWarp warp) {
  const std::vector<WarpedTask> warped = warp_tasks(dataset, warp);
  const WarpedTask* heldout = nullptr;
  for (const WarpedTask& task : warped)
    if (task.task_id == heldout_task) heldout = &task;
  if (!heldout) fail("diagnostics: unknown held-out task '" + heldout_task + "'");
  const std::vector<WarpedTask> heldout_only{*heldout};

  std::optional<MomentEstimates> est;
  if (matching.size() > 0 && matching.n_tasks() >= 2)
    est = moment_estimates(matching);

  TrainConfig single;
  single.objective.kind = ObjectiveSpec::Kind::nll;
  single.steps = 500;
  single.restarts = 2;
  single.seed = 1;
  single.mean_family = {trained.structure.mean};
  single.kernel_family = {trained.structure.kernel};

  std::vector<std::pair<std::string, GPParams>> models;
  models.emplace_back("init",
                      init_params(trained.structure, dataset.space.dim(),
                                  derive_seed(0, {label_hash("diagnostics")})));
  models.emplace_back("single-task",
                      train_gp_warped(heldout_only, nullptr, single).gp);
  models.emplace_back("multi-task", trained.gp);

  std::vector<DiagnosticsRow> rows;
  rows.reserve(models.size());
  for (const auto& [name, gp] : models) {
    DiagnosticsRow row;
    row.model = name;
    row.nll_heldout = multi_task_nll(gp, heldout_only);
    row.nll_all = multi_task_nll(gp, warped);
    if (est) {
      row.divergence = divergence_value(*est, gp, DegenerateMode::pseudo_kl);
      row.divergence_is_pseudo = est->rank < matching.size();
    } else {
      row.divergence = std::numeric_limits<double>::quiet_NaN();
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_run_csv(const std::string& path, const BoTrace& trace) {
  if (trace.steps.empty()) fail("run csv: trace is empty");
  std::ofstream out = open_out(path);
  const int dim = static_cast<int>(trace.steps.front().x.size());
  out << "iteration";
  for (int j = 0; j < dim; ++j) out << ",x" << j;
  out << ",y,raw,best_so_far,regret\n";
  for (std::size_t t = 0; t < trace.steps.size(); ++t) {
    const BoStep& s = trace.steps[t];
    out << (t + 1);
    for (int j = 0; j < dim; ++j) out << ',' << fmt(s.x(static_cast<int>(j)));
    out << ',' << fmt(s.y) << ',' << fmt(s.raw) << ',' << fmt(s.best_so_far)
        << ',' << fmt(s.regret) << '\n';
  }
  finish(out, path);
}

std::string run_file_name(const std::string& method, const std::string& task_id,
                          std::uint64_t seed) {
  return method + "__" + task_id + "__seed" + std::to_string(seed) + ".csv";
}

RunRecord read_run_csv(const std::string& path) {
  RunRecord r;

  // identity lives in the file name: <method>__<task>__seed<k>.csv
  std::string stem = fs::path(path).filename().string();
  const std::string bad =
      "run csv: file name '" + stem + "' must look like <method>__<task>__seed<k>.csv";
  if (stem.size() < 4 || stem.substr(stem.size() - 4) != ".csv") fail(bad);
  stem.resize(stem.size() - 4);
  const auto first = stem.find("__");
  const auto second = first == std::string::npos ? first : stem.find("__", first + 2);
  if (second == std::string::npos) fail(bad);
  r.method = stem.substr(0, first);
  r.task_id = stem.substr(first + 2, second - first - 2);
  const std::string tail = stem.substr(second + 2);
  if (tail.rfind("seed", 0) != 0) fail(bad);
  const std::string digits = tail.substr(4);
  char* end = nullptr;
  r.seed = std::strtoull(digits.c_str(), &end, 10);
  if (digits.empty() || end != digits.c_str() + digits.size()) fail(bad);

  std::ifstream in(path);
  if (!in.good()) fail("run csv: cannot read '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) fail("run csv: '" + path + "' is empty");
  const std::vector<std::string> header = split_line(line);
  int best_at = -1, regret_at = -1;
  for (std::size_t j = 0; j < header.size(); ++j) {
    if (header[j] == "best_so_far") best_at = static_cast<int>(j);
    if (header[j] == "regret") regret_at = static_cast<int>(j);
  }
  if (best_at < 0 || regret_at < 0)
    fail("run csv: '" + path + "' lacks best_so_far/regret columns");

  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::vector<std::string> cells = split_line(line);
    if (static_cast<int>(cells.size()) <= std::max(best_at, regret_at))
      fail("run csv: '" + path + "' holds a short row");
    r.best_so_far.push_back(parse_double(cells[best_at], path));
    r.regret.push_back(parse_double(cells[regret_at], path));
  }
  if (r.best_so_far.empty()) fail("run csv: '" + path + "' holds no data rows");
  return r;
}

std::vector<RunRecord> read_records_dir(const std::string& dir) {
  std::error_code ec;
  if (!fs::is_directory(dir, ec))
    fail("records: '" + dir + "' is not a directory");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".csv")
      files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) fail("records: no run files in '" + dir + "'");

  std::vector<RunRecord> out;
  out.reserve(files.size());
  for (const fs::path& file : files) out.push_back(read_run_csv(file.string()));
  return out;
}

void write_profile_csv(const std::string& path, const ProfileReport& report) {
  std::ofstream out = open_out(path);
  out << "method,iteration,fraction\n";
  for (std::size_t mi = 0; mi < report.methods.size(); ++mi)
    for (int i = 0; i < report.iterations; ++i)
      out << report.methods[mi] << ',' << (i + 1) << ','
          << fmt(report.fraction[mi][i]) << '\n';
  finish(out, path);
}

void write_percentiles_csv(const std::string& path,
                           const std::vector<PercentileRow>& rows) {
  std::ofstream out = open_out(path);
  out << "method,iteration,p20,p50,p80\n";
  for (const PercentileRow& row : rows)
    out << row.method << ',' << row.iteration << ',' << fmt(row.p20) << ','
        << fmt(row.p50) << ',' << fmt(row.p80) << '\n';
  finish(out, path);
}

void write_speedup_csv(const std::string& path,
                       const std::vector<SpeedupEntry>& entries) {
  std::ofstream out = open_out(path);
  out << "task,reached,ratio\n";
  for (const SpeedupEntry& entry : entries)
    out << entry.task_id << ',' << (entry.reached ? 1 : 0) << ','
        << (entry.reached ? fmt(entry.ratio) : "nan") << '\n';
  finish(out, path);
}

void write_diagnostics_csv(const std::string& path,
                           const std::vector<DiagnosticsRow>& rows) {
  std::ofstream out = open_out(path);
  out << "model,nll_heldout,nll_all,divergence,divergence_is_pseudo\n";
  for (const DiagnosticsRow& row : rows)
    out << row.model << ',' << fmt(row.nll_heldout) << ',' << fmt(row.nll_all)
        << ',' << fmt(row.divergence) << ',' << (row.divergence_is_pseudo ? 1 : 0)
        << '\n';
  finish(out, path);
}

}  // namespace hyperbo
