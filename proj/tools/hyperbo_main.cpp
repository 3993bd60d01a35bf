// Command-line surface: fit, bo-offline, bo-online, synth-gen, report.
// Exit codes: 0 on success, 2 on validation errors, 3 on numerical failures.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hyperbo/bo.hpp"
#include "hyperbo/dataset.hpp"
#include "hyperbo/errors.hpp"
#include "hyperbo/gp.hpp"
#include "hyperbo/metrics.hpp"
#include "hyperbo/objectives.hpp"
#include "hyperbo/synth.hpp"
#include "hyperbo/training.hpp"

namespace {

using namespace hyperbo;

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  if (!in.good()) throw ValidationError("cannot read '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spill(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out.good()) throw ValidationError("cannot write '" + path + "'");
  out << text;
  out.flush();
  if (!out.good()) throw ValidationError("write to '" + path + "' failed");
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(item);
  return out;
}

DegenerateMode parse_degenerate(const std::string& text) {
  if (text == "pseudo" || text == "pseudo-kl") return DegenerateMode::pseudo_kl;
  if (text == "jitter" || text == "epsilon-jitter")
    return DegenerateMode::epsilon_jitter;
  throw ValidationError("unknown degenerate mode '" + text + "'");
}

// A model file is either a full fit result or bare GP parameters.
struct LoadedModel {
  GPParams gp;
  int n_tasks = 0;
};

LoadedModel load_model(const std::string& path) {
  const std::string text = slurp(path);
  try {
    const TrainResult result = parse_train_result(text);
    return {result.gp, result.n_tasks};
  } catch (const ValidationError&) {
    return {parse_gp(text), 0};
  }
}

void make_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw ValidationError("cannot create directory '" + dir + "': " + ec.message());
}

// ---------------------------------------------------------------------------
// fit

struct FitOptions {
  std::string study;
  std::string out;
  std::string trace_path;
  std::string objective = "nll";
  std::string means = "constant,linear";
  std::string kernels = "se,m52,dot";
  std::string warp = "none";
  std::string degenerate = "pseudo";
  int steps = 1000;
  int restarts = 4;
  std::uint64_t seed = 0;
  double learning_rate = 1e-2;
  double matching_tol = 1e-9;
  bool unbiased = false;
};

void run_fit(const FitOptions& opt) {
  const TuningDataset study = load_study(opt.study);

  TrainConfig config;
  config.objective = parse_objective(opt.objective);
  config.steps = opt.steps;
  config.restarts = opt.restarts;
  config.seed = opt.seed;
  config.learning_rate = opt.learning_rate;
  config.degenerate_mode = parse_degenerate(opt.degenerate);
  config.unbiased_moments = opt.unbiased;
  config.output_warp = parse_output_warp(opt.warp);
  config.matching_tol = opt.matching_tol;
  config.mean_family.clear();
  for (const std::string& name : split_list(opt.means))
    config.mean_family.push_back(parse_mean(name));
  config.kernel_family.clear();
  for (const std::string& name : split_list(opt.kernels))
    config.kernel_family.push_back(parse_kernel(name));

  const MatchingDataset matching =
      extract_matching(study, config.matching_tol, config.output_warp);
  const TrainResult result = train_gp(study, matching, config);
  spill(opt.out, serialize_train_result(result));

  if (!opt.trace_path.empty()) {
    std::ostringstream csv;
    csv << "mean,kernel,restart,step,objective,best_so_far\n";
    for (const TrainTrace& trace : result.traces)
      for (std::size_t step = 0; step < trace.objective.size(); ++step)
        csv << mean_name(trace.structure.mean) << ','
            << kernel_name(trace.structure.kernel) << ',' << trace.restart << ','
            << step << ',' << fmt(trace.objective[step]) << ','
            << fmt(trace.best_so_far[step]) << '\n';
    spill(opt.trace_path, csv.str());
  }

  std::printf("fit %s: structure %s + %s, final objective %s\n", opt.out.c_str(),
              mean_name(result.structure.mean).c_str(),
              kernel_name(result.structure.kernel).c_str(),
              fmt(result.final_objective).c_str());
}

// ---------------------------------------------------------------------------
// bo-offline / bo-online

struct OfflineOptions {
  std::string study;
  std::string method;
  std::string records;
  std::string model;
  std::string acq = "pi0.1";
  std::string warp = "none";
  int iterations = 30;
  int seeds = 1;
  std::uint64_t seed_base = 0;
  bool dedup = false;
  int n_train_tasks = 0;
};

void run_bo_offline(const OfflineOptions& opt) {
  const TuningDataset study = load_study(opt.study);
  if (study.tasks.empty()) throw ValidationError("study holds no tasks");
  const MethodKind kind = parse_method(opt.method);
  const Acquisition acq = parse_acquisition(opt.acq);
  const OutputWarp warp = parse_output_warp(opt.warp);

  LoadedModel model;
  if (kind == MethodKind::hyperbo) {
    if (opt.model.empty())
      throw ValidationError("method '" + opt.method + "' needs --model");
    model = load_model(opt.model);
  }

  std::vector<OfflinePool> pools;
  pools.reserve(study.tasks.size());
  for (const SubDataset& task : study.tasks)
    pools.push_back(make_pool(study.space, task, warp));

  make_dir(opt.records);
  const int n_tasks = static_cast<int>(study.tasks.size());
  const int n_runs = n_tasks * opt.seeds;
  std::vector<std::exception_ptr> errors(n_runs);
  parallel_runs(n_runs, [&](int j) {
    try {
      const int task = j / opt.seeds;
      const std::uint64_t seed = opt.seed_base + static_cast<std::uint64_t>(j % opt.seeds);
      BoConfig config;
      config.iterations = opt.iterations;
      config.acquisition = acq;
      config.seed = seed;
      config.dedup = opt.dedup;
      config.n_train_tasks = opt.n_train_tasks > 0 ? opt.n_train_tasks : model.n_tasks;
      BoTrace trace;
      switch (kind) {
        case MethodKind::random_search: trace = run_random(pools[task], config); break;
        case MethodKind::stbo: trace = run_stbo(pools[task], config); break;
        case MethodKind::stboh: trace = run_stboh(pools[task], config); break;
        case MethodKind::hyperbo: trace = run_hyperbo(pools[task], model.gp, config); break;
      }
      const std::string name =
          run_file_name(opt.method, study.tasks[task].task_id, seed);
      write_run_csv((std::filesystem::path(opt.records) / name).string(), trace);
    } catch (...) {
      errors[j] = std::current_exception();
    }
  });
  for (const std::exception_ptr& e : errors)
    if (e) std::rethrow_exception(e);

  std::printf("wrote %d runs (%d tasks x %d seeds) to %s\n", n_runs, n_tasks,
              opt.seeds, opt.records.c_str());
}

struct OnlineOptions {
  std::string synth;
  std::string method;
  std::string records;
  std::string model;
  std::string acq = "pi0.1";
  int iterations = 30;
  int seeds = 1;
  std::uint64_t seed_base = 0;
  int candidates = 5000;
  int task_count = 0;  // 0 = every task in the generator config
  int fmax_resolution = 0;
  int n_train_tasks = 0;
};

void run_bo_online(const OnlineOptions& opt) {
  const SynthConfig cfg = parse_synth_config(slurp(opt.synth));
  const MethodKind kind = parse_method(opt.method);
  const Acquisition acq = parse_acquisition(opt.acq);
  const int n_tasks = opt.task_count > 0 ? opt.task_count : cfg.n_tasks;
  if (n_tasks > cfg.n_tasks)
    throw ValidationError("--task-count exceeds the generator's task count");

  LoadedModel model;
  if (kind == MethodKind::hyperbo) {
    if (opt.model.empty())
      throw ValidationError("method '" + opt.method + "' needs --model");
    model = load_model(opt.model);
  }

  // one conditional-sample bound per task, shared by all of its runs
  std::vector<double> f_max(n_tasks,
                            std::numeric_limits<double>::quiet_NaN());
  if (opt.fmax_resolution > 0)
    for (int t = 0; t < n_tasks; ++t)
      f_max[t] = task_max(*rebuild_handle(cfg, t), opt.fmax_resolution);

  make_dir(opt.records);
  const int n_runs = n_tasks * opt.seeds;
  std::vector<std::exception_ptr> errors(n_runs);
  parallel_runs(n_runs, [&](int j) {
    try {
      const int task = j / opt.seeds;
      const std::uint64_t seed = opt.seed_base + static_cast<std::uint64_t>(j % opt.seeds);
      BoConfig config;
      config.mode = BoMode::online;
      config.iterations = opt.iterations;
      config.acquisition = acq;
      config.seed = seed;
      config.candidate_count = opt.candidates;
      config.n_train_tasks = opt.n_train_tasks > 0 ? opt.n_train_tasks : model.n_tasks;

      // each run replays its own function draw
      const std::shared_ptr<TaskHandle> handle = rebuild_handle(cfg, task);
      const OnlineOracle oracle = [handle](const Eigen::RowVectorXd& x) {
        return std::optional<double>(handle->observe(x));
      };
      BoTrace trace;
      switch (kind) {
        case MethodKind::random_search:
          trace = run_random_online(oracle, cfg.dim, config);
          break;
        case MethodKind::stbo: trace = run_stbo_online(oracle, cfg.dim, config); break;
        case MethodKind::stboh: trace = run_stboh_online(oracle, cfg.dim, config); break;
        case MethodKind::hyperbo:
          trace = run_hyperbo_online(oracle, cfg.dim, model.gp, config);
          break;
      }
      if (opt.fmax_resolution > 0) fill_regret(trace, f_max[task]);
      const std::string task_id = "synth-" + std::to_string(task);
      const std::string name = run_file_name(opt.method, task_id, seed);
      write_run_csv((std::filesystem::path(opt.records) / name).string(), trace);
    } catch (...) {
      errors[j] = std::current_exception();
    }
  });
  for (const std::exception_ptr& e : errors)
    if (e) std::rethrow_exception(e);

  std::printf("wrote %d runs (%d tasks x %d seeds) to %s\n", n_runs, n_tasks,
              opt.seeds, opt.records.c_str());
}

// ---------------------------------------------------------------------------
// synth-gen

struct SynthGenOptions {
  std::string config;
  std::string out;
  std::string config_out;
  int dim = 2;
  int tasks = 8;
  int points = 32;
  double matched = 0.0;
  double length_scale = 0.3;
  double amplitude = 1.0;
  double noise = 0.01;
  double mean = 0.0;
  std::uint64_t seed = 0;
};

void run_synth_gen(const SynthGenOptions& opt) {
  SynthConfig cfg;
  if (!opt.config.empty()) {
    cfg = parse_synth_config(slurp(opt.config));
  } else {
    if (!(opt.length_scale > 0.0) || !(opt.amplitude > 0.0) || !(opt.noise > 0.0))
      throw ValidationError("length scale, amplitude, and noise must be positive");
    cfg.truth.mean.kind = MeanKind::constant;
    cfg.truth.mean.constant = opt.mean;
    cfg.truth.kernel.kind = KernelKind::squared_exponential;
    cfg.truth.kernel.log_amplitude = std::log(opt.amplitude);
    cfg.truth.kernel.log_length_scales =
        Eigen::VectorXd::Constant(opt.dim, std::log(opt.length_scale));
    cfg.truth.log_noise_variance = std::log(opt.noise);
    cfg.dim = opt.dim;
    cfg.n_tasks = opt.tasks;
    cfg.points_per_task = opt.points;
    cfg.matched_fraction = opt.matched;
    cfg.seed = opt.seed;
  }

  const SynthResult result = sample_tasks(cfg);
  save_study(result.study, opt.out);
  if (!opt.config_out.empty())
    spill(opt.config_out, serialize_synth_config(cfg));

  std::printf("wrote %d tasks x %d points to %s\n", cfg.n_tasks,
              cfg.points_per_task, opt.out.c_str());
}

// ---------------------------------------------------------------------------
// report

struct ReportOptions {
  std::string records;
  std::string records_b;
  std::string out;
  int criterion_iteration = 1;
  std::string study;
  std::string model;
  std::string heldout;
  std::string warp = "none";
  double matching_tol = 1e-9;
};

void run_report_profile(const ReportOptions& opt) {
  const ProfileReport report =
      performance_profile(read_records_dir(opt.records), opt.criterion_iteration);
  write_profile_csv(opt.out, report);
  std::printf("wrote profile over %zu methods x %zu tasks to %s\n",
              report.methods.size(), report.tasks.size(), opt.out.c_str());
}

void run_report_percentiles(const ReportOptions& opt) {
  const std::vector<PercentileRow> rows =
      regret_percentiles(read_records_dir(opt.records));
  write_percentiles_csv(opt.out, rows);
  std::printf("wrote %zu percentile rows to %s\n", rows.size(), opt.out.c_str());
}

void run_report_speedup(const ReportOptions& opt) {
  const std::vector<SpeedupEntry> entries = speedup_factor(
      read_records_dir(opt.records), read_records_dir(opt.records_b));
  write_speedup_csv(opt.out, entries);
  std::printf("wrote %zu speedup entries to %s\n", entries.size(), opt.out.c_str());
}

void run_report_diagnostics(const ReportOptions& opt) {
  const TuningDataset study = load_study(opt.study);
  const TrainResult trained = parse_train_result(slurp(opt.model));
  const OutputWarp warp = parse_output_warp(opt.warp);
  const MatchingDataset matching =
      extract_matching(study, opt.matching_tol, warp);
  const std::vector<DiagnosticsRow> rows =
      model_diagnostics(trained, study, matching, opt.heldout, warp);
  write_diagnostics_csv(opt.out, rows);
  std::printf("wrote %zu diagnostics rows to %s\n", rows.size(), opt.out.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GP-prior transfer for Bayesian optimization: train priors on "
               "multi-task tuning data, run BO against them, and report metrics"};
  app.require_subcommand(1);

  FitOptions fit;
  CLI::App* fit_cmd =
      app.add_subcommand("fit", "train GP parameters on a tuning study");
  fit_cmd->add_option("--study", fit.study, "study JSON file")->required();
  fit_cmd->add_option("--out", fit.out, "output model JSON file")->required();
  fit_cmd->add_option("--objective", fit.objective, "nll | kl | nllkl[:lambda]");
  fit_cmd->add_option("--steps", fit.steps, "optimizer steps per restart")
      ->check(CLI::PositiveNumber);
  fit_cmd->add_option("--restarts", fit.restarts, "restarts per structure")
      ->check(CLI::PositiveNumber);
  fit_cmd->add_option("--seed", fit.seed, "training seed");
  fit_cmd->add_option("--learning-rate", fit.learning_rate, "optimizer step size")
      ->check(CLI::PositiveNumber);
  fit_cmd->add_option("--means", fit.means, "mean family, comma separated");
  fit_cmd->add_option("--kernels", fit.kernels, "kernel family, comma separated");
  fit_cmd->add_option("--warp", fit.warp, "objective warp: none | error-rate | online");
  fit_cmd->add_option("--matching-tol", fit.matching_tol,
                      "input tolerance for the matching extraction");
  fit_cmd->add_option("--degenerate", fit.degenerate,
                      "rank-deficient moments handling: pseudo | jitter");
  fit_cmd->add_flag("--unbiased", fit.unbiased, "unbiased moment covariance");
  fit_cmd->add_option("--trace", fit.trace_path, "optional per-step trace CSV");
  fit_cmd->callback([&] { run_fit(fit); });

  OfflineOptions off;
  CLI::App* off_cmd = app.add_subcommand(
      "bo-offline", "run BO over the recorded trials of each study task");
  off_cmd->add_option("--study", off.study, "study JSON file")->required();
  off_cmd->add_option("--method", off.method, "rand | stbo | stboh | h-<objective>")
      ->required();
  off_cmd->add_option("--records", off.records, "output directory for run CSVs")
      ->required();
  off_cmd->add_option("--model", off.model, "model JSON for h-* methods");
  off_cmd->add_option("--acq", off.acq, "pi<margin> | ei | ucb:<coef> | ucb-theory:<delta>");
  off_cmd->add_option("--iterations", off.iterations, "BO iterations per run")
      ->check(CLI::PositiveNumber);
  off_cmd->add_option("--seeds", off.seeds, "number of seeds per task")
      ->check(CLI::PositiveNumber);
  off_cmd->add_option("--seed-base", off.seed_base, "first seed value");
  off_cmd->add_flag("--dedup", off.dedup, "drop already-picked pool entries");
  off_cmd->add_option("--n-train-tasks", off.n_train_tasks,
                      "task count behind the prior (ucb-theory); defaults to the model's");
  off_cmd->add_option("--warp", off.warp, "objective warp: none | error-rate | online");
  off_cmd->callback([&] { run_bo_offline(off); });

  OnlineOptions on;
  CLI::App* on_cmd = app.add_subcommand(
      "bo-online", "run BO against synthetic black-box functions");
  on_cmd->add_option("--synth", on.synth, "generator config JSON (see synth-gen --config-out)")
      ->required();
  on_cmd->add_option("--method", on.method, "rand | stbo | stboh | h-<objective>")
      ->required();
  on_cmd->add_option("--records", on.records, "output directory for run CSVs")
      ->required();
  on_cmd->add_option("--model", on.model, "model JSON for h-* methods");
  on_cmd->add_option("--acq", on.acq, "pi<margin> | ei | ucb:<coef> | ucb-theory:<delta>");
  on_cmd->add_option("--iterations", on.iterations, "BO iterations per run")
      ->check(CLI::PositiveNumber);
  on_cmd->add_option("--seeds", on.seeds, "number of seeds per task")
      ->check(CLI::PositiveNumber);
  on_cmd->add_option("--seed-base", on.seed_base, "first seed value");
  on_cmd->add_option("--candidates", on.candidates, "candidate points per iteration")
      ->check(CLI::PositiveNumber);
  on_cmd->add_option("--task-count", on.task_count,
                     "number of generator tasks to run (default: all)");
  on_cmd->add_option("--fmax-resolution", on.fmax_resolution,
                     "grid size for the per-task max estimate filling regret (0 = skip)");
  on_cmd->add_option("--n-train-tasks", on.n_train_tasks,
                     "task count behind the prior (ucb-theory); defaults to the model's");
  on_cmd->callback([&] { run_bo_online(on); });

  SynthGenOptions gen;
  CLI::App* gen_cmd = app.add_subcommand(
      "synth-gen", "sample a multi-task study from a GP generator");
  gen_cmd->add_option("--out", gen.out, "output study JSON file")->required();
  gen_cmd->add_option("--config", gen.config,
                      "generator config JSON (overrides the flags below)");
  gen_cmd->add_option("--config-out", gen.config_out,
                      "write the resolved generator config JSON");
  gen_cmd->add_option("--dim", gen.dim, "input dimension")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--tasks", gen.tasks, "number of tasks")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--points", gen.points, "points per task")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--matched", gen.matched,
                      "leading fraction of points shared across tasks");
  gen_cmd->add_option("--length-scale", gen.length_scale, "generator kernel length scale");
  gen_cmd->add_option("--amplitude", gen.amplitude, "generator kernel amplitude");
  gen_cmd->add_option("--noise", gen.noise, "generator noise variance");
  gen_cmd->add_option("--mean", gen.mean, "generator constant mean");
  gen_cmd->add_option("--seed", gen.seed, "generator seed");
  gen_cmd->callback([&] { run_synth_gen(gen); });

  ReportOptions rep;
  CLI::App* rep_cmd = app.add_subcommand("report", "summarize stored run records");
  rep_cmd->require_subcommand(1);

  CLI::App* prof_cmd = rep_cmd->add_subcommand(
      "profile", "per-iteration fraction of tasks beating the cross-method criterion");
  prof_cmd->add_option("--records", rep.records, "run records directory")->required();
  prof_cmd->add_option("--criterion-iteration", rep.criterion_iteration,
                       "1-based iteration fixing the criterion")
      ->check(CLI::PositiveNumber);
  prof_cmd->add_option("--out", rep.out, "output CSV")->required();
  prof_cmd->callback([&] { run_report_profile(rep); });

  CLI::App* pct_cmd = rep_cmd->add_subcommand(
      "percentiles", "per-iteration 20/50/80 regret percentiles per method");
  pct_cmd->add_option("--records", rep.records, "run records directory")->required();
  pct_cmd->add_option("--out", rep.out, "output CSV")->required();
  pct_cmd->callback([&] { run_report_percentiles(rep); });

  CLI::App* spd_cmd = rep_cmd->add_subcommand(
      "speedup", "per-task iteration ratio until B reaches A's final best");
  spd_cmd->add_option("--records-a", rep.records, "reference records directory")
      ->required();
  spd_cmd->add_option("--records-b", rep.records_b, "compared records directory")
      ->required();
  spd_cmd->add_option("--out", rep.out, "output CSV")->required();
  spd_cmd->callback([&] { run_report_speedup(rep); });

  CLI::App* diag_cmd = rep_cmd->add_subcommand(
      "diagnostics", "model quality of init / single-task / multi-task fits");
  diag_cmd->add_option("--study", rep.study, "study JSON file")->required();
  diag_cmd->add_option("--model", rep.model, "fit result JSON")->required();
  diag_cmd->add_option("--heldout", rep.heldout, "held-out task id")->required();
  diag_cmd->add_option("--warp", rep.warp, "objective warp: none | error-rate | online");
  diag_cmd->add_option("--matching-tol", rep.matching_tol,
                       "input tolerance for the matching extraction");
  diag_cmd->add_option("--out", rep.out, "output CSV")->required();
  diag_cmd->callback([&] { run_report_diagnostics(rep); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
