#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "hyperbo/acquisition.hpp"
#include "hyperbo/bo.hpp"
#include "hyperbo/dataset.hpp"
#include "hyperbo/errors.hpp"
#include "hyperbo/gp.hpp"
#include "hyperbo/metrics.hpp"
#include "hyperbo/objectives.hpp"
#include "hyperbo/synth.hpp"
#include "hyperbo/training.hpp"

namespace py = pybind11;
using namespace hyperbo;

namespace {

TrainConfig build_train_config(const std::string& objective, int steps, int restarts,
                               std::uint64_t seed, double learning_rate,
                               const std::vector<std::string>& means,
                               const std::vector<std::string>& kernels,
                               const std::string& warp, double matching_tol) {
  TrainConfig config;
  config.objective = parse_objective(objective);
  config.steps = steps;
  config.restarts = restarts;
  config.seed = seed;
  config.learning_rate = learning_rate;
  config.output_warp = parse_output_warp(warp);
  config.matching_tol = matching_tol;
  config.mean_family.clear();
  for (const std::string& name : means) config.mean_family.push_back(parse_mean(name));
  config.kernel_family.clear();
  for (const std::string& name : kernels)
    config.kernel_family.push_back(parse_kernel(name));
  return config;
}

BoConfig build_bo_config(int iterations, const std::string& acq, std::uint64_t seed,
                         bool dedup, int candidates, int n_train_tasks, BoMode mode) {
  BoConfig config;
  config.iterations = iterations;
  config.acquisition = parse_acquisition(acq);
  config.seed = seed;
  config.dedup = dedup;
  config.candidate_count = candidates;
  config.n_train_tasks = n_train_tasks;
  config.mode = mode;
  return config;
}

BoTrace dispatch_offline(const OfflinePool& pool, const std::string& method,
                         const std::optional<GPParams>& gp, const BoConfig& config) {
  switch (parse_method(method)) {
    case MethodKind::random_search: return run_random(pool, config);
    case MethodKind::stbo: return run_stbo(pool, config);
    case MethodKind::stboh: return run_stboh(pool, config);
    case MethodKind::hyperbo: break;
  }
  if (!gp) throw ValidationError("method '" + method + "' needs a gp prior");
  return run_hyperbo(pool, *gp, config);
}

BoTrace dispatch_online(const OnlineOracle& oracle, int dim, const std::string& method,
                        const std::optional<GPParams>& gp, const BoConfig& config) {
  switch (parse_method(method)) {
    case MethodKind::random_search: return run_random_online(oracle, dim, config);
    case MethodKind::stbo: return run_stbo_online(oracle, dim, config);
    case MethodKind::stboh: return run_stboh_online(oracle, dim, config);
    case MethodKind::hyperbo: break;
  }
  if (!gp) throw ValidationError("method '" + method + "' needs a gp prior");
  return run_hyperbo_online(oracle, dim, *gp, config);
}

SynthConfig build_synth_config(int dim, int tasks, int points, double matched,
                               std::uint64_t seed, double length_scale,
                               double amplitude, double noise, double mean) {
  if (!(length_scale > 0.0) || !(amplitude > 0.0) || !(noise > 0.0))
    throw ValidationError("length scale, amplitude, and noise must be positive");
  SynthConfig cfg;
  cfg.truth.mean.kind = MeanKind::constant;
  cfg.truth.mean.constant = mean;
  cfg.truth.kernel.kind = KernelKind::squared_exponential;
  cfg.truth.kernel.log_amplitude = std::log(amplitude);
  cfg.truth.kernel.log_length_scales =
      Eigen::VectorXd::Constant(dim, std::log(length_scale));
  cfg.truth.log_noise_variance = std::log(noise);
  cfg.dim = dim;
  cfg.n_tasks = tasks;
  cfg.points_per_task = points;
  cfg.matched_fraction = matched;
  cfg.seed = seed;
  return cfg;
}

Eigen::MatrixXd trace_inputs(const BoTrace& trace) {
  if (trace.steps.empty()) return Eigen::MatrixXd(0, 0);
  Eigen::MatrixXd x(trace.steps.size(), trace.steps.front().x.size());
  for (std::size_t t = 0; t < trace.steps.size(); ++t) x.row(t) = trace.steps[t].x;
  return x;
}

std::vector<double> trace_field(const BoTrace& trace, double BoStep::*field) {
  std::vector<double> out;
  out.reserve(trace.steps.size());
  for (const BoStep& step : trace.steps) out.push_back(step.*field);
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "GP-prior transfer for Bayesian optimization";

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_RuntimeError);

  py::class_<GPParams>(m, "GP")
      .def_static("from_json", [](const std::string& text) { return parse_gp(text); },
                  py::arg("text"))
      .def("to_json", [](const GPParams& gp) { return serialize_gp(gp); })
      .def_property_readonly(
          "mean", [](const GPParams& gp) { return mean_name(gp.mean.kind); })
      .def_property_readonly(
          "kernel", [](const GPParams& gp) { return kernel_name(gp.kernel.kind); })
      .def_property_readonly(
          "log_noise_variance",
          [](const GPParams& gp) { return gp.log_noise_variance; })
      .def("posterior",
           [](const GPParams& gp, const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
              const Eigen::MatrixXd& xq) { return posterior(gp, x, y, xq); },
           py::arg("x"), py::arg("y"), py::arg("xq"),
           "posterior mean vector and latent covariance at the query points")
      .def("nll",
           [](const GPParams& gp, const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
             return nll_subdataset(gp, x, y);
           },
           py::arg("x"), py::arg("y"),
           "negative log marginal likelihood of one task's observations")
      .def("__repr__", [](const GPParams& gp) {
        return "<GP " + mean_name(gp.mean.kind) + " + " + kernel_name(gp.kernel.kind) +
               ">";
      });

  py::class_<TuningDataset>(m, "Study")
      .def_property_readonly(
          "dim", [](const TuningDataset& d) { return d.space.dim(); })
      .def_property_readonly("task_ids",
                             [](const TuningDataset& d) {
                               std::vector<std::string> ids;
                               for (const SubDataset& t : d.tasks)
                                 ids.push_back(t.task_id);
                               return ids;
                             })
      .def("to_json", [](const TuningDataset& d) { return serialize_study(d); })
      .def("__repr__", [](const TuningDataset& d) {
        return "<Study " + std::to_string(d.tasks.size()) + " tasks, dim " +
               std::to_string(d.space.dim()) + ">";
      });

  m.def("parse_study", &parse_study, py::arg("text"));
  m.def("load_study", &load_study, py::arg("path"));
  m.def("save_study", &save_study, py::arg("study"), py::arg("path"));

  py::class_<TrainResult>(m, "FitResult")
      .def_property_readonly("gp", [](const TrainResult& r) { return r.gp; })
      .def_property_readonly("mean",
                             [](const TrainResult& r) { return mean_name(r.structure.mean); })
      .def_property_readonly(
          "kernel", [](const TrainResult& r) { return kernel_name(r.structure.kernel); })
      .def_property_readonly("final_objective",
                             [](const TrainResult& r) { return r.final_objective; })
      .def_property_readonly("n_tasks", [](const TrainResult& r) { return r.n_tasks; })
      .def("to_json", [](const TrainResult& r) { return serialize_train_result(r); })
      .def_static("from_json",
                  [](const std::string& text) { return parse_train_result(text); },
                  py::arg("text"));

  m.def(
      "fit",
      [](const TuningDataset& study, const std::string& objective, int steps,
         int restarts, std::uint64_t seed, double learning_rate,
         const std::vector<std::string>& means, const std::vector<std::string>& kernels,
         const std::string& warp, double matching_tol) {
        const TrainConfig config =
            build_train_config(objective, steps, restarts, seed, learning_rate, means,
                               kernels, warp, matching_tol);
        const MatchingDataset matching =
            extract_matching(study, config.matching_tol, config.output_warp);
        return train_gp(study, matching, config);
      },
      py::arg("study"), py::arg("objective") = "nll", py::arg("steps") = 1000,
      py::arg("restarts") = 4, py::arg("seed") = 0, py::arg("learning_rate") = 1e-2,
      py::arg("means") = std::vector<std::string>{"constant", "linear"},
      py::arg("kernels") = std::vector<std::string>{"se", "m52", "dot"},
      py::arg("warp") = "none", py::arg("matching_tol") = 1e-9,
      "train GP parameters on a study by the selected objective");

  py::class_<OfflinePool>(m, "Pool")
      .def_property_readonly("x", [](const OfflinePool& p) { return p.x; })
      .def_property_readonly("y", [](const OfflinePool& p) { return p.y; })
      .def("max_value", &OfflinePool::max_value)
      .def("__len__", &OfflinePool::size);

  m.def(
      "make_pool",
      [](const TuningDataset& study, int task_index, const std::string& warp) {
        if (task_index < 0 || task_index >= static_cast<int>(study.tasks.size()))
          throw ValidationError("task index out of range");
        return make_pool(study.space, study.tasks[task_index], parse_output_warp(warp));
      },
      py::arg("study"), py::arg("task_index"), py::arg("warp") = "none",
      "candidate pool from one task's recorded trials");

  py::class_<BoTrace>(m, "Trace")
      .def_property_readonly("x", &trace_inputs)
      .def_property_readonly(
          "y", [](const BoTrace& t) { return trace_field(t, &BoStep::y); })
      .def_property_readonly(
          "raw", [](const BoTrace& t) { return trace_field(t, &BoStep::raw); })
      .def_property_readonly(
          "best_so_far",
          [](const BoTrace& t) { return trace_field(t, &BoStep::best_so_far); })
      .def_property_readonly(
          "regret", [](const BoTrace& t) { return trace_field(t, &BoStep::regret); })
      .def_property_readonly("pool_index",
                             [](const BoTrace& t) {
                               std::vector<int> out;
                               for (const BoStep& s : t.steps)
                                 out.push_back(s.pool_index);
                               return out;
                             })
      .def("recommendation", &BoTrace::recommendation)
      .def("__len__", [](const BoTrace& t) { return t.steps.size(); });

  m.def(
      "run_bo",
      [](const OfflinePool& pool, const std::string& method,
         const std::optional<GPParams>& gp, int iterations, const std::string& acq,
         std::uint64_t seed, bool dedup, int n_train_tasks) {
        const BoConfig config = build_bo_config(iterations, acq, seed, dedup, 5000,
                                                n_train_tasks, BoMode::offline);
        return dispatch_offline(pool, method, gp, config);
      },
      py::arg("pool"), py::arg("method"), py::arg("gp") = std::nullopt,
      py::arg("iterations") = 30, py::arg("acq") = "pi0.1", py::arg("seed") = 0,
      py::arg("dedup") = false, py::arg("n_train_tasks") = 0,
      "BO over a recorded pool; gp is the frozen prior for h-* methods");

  m.def(
      "run_bo_online",
      [](const std::function<std::optional<double>(Eigen::RowVectorXd)>& oracle,
         int dim, const std::string& method, const std::optional<GPParams>& gp,
         int iterations, const std::string& acq, std::uint64_t seed, int candidates,
         int n_train_tasks) {
        const BoConfig config = build_bo_config(iterations, acq, seed, false,
                                                candidates, n_train_tasks, BoMode::online);
        const OnlineOracle wrapped = [&oracle](const Eigen::RowVectorXd& x) {
          return oracle(x);
        };
        return dispatch_online(wrapped, dim, method, gp, config);
      },
      py::arg("oracle"), py::arg("dim"), py::arg("method"),
      py::arg("gp") = std::nullopt, py::arg("iterations") = 30,
      py::arg("acq") = "pi0.1", py::arg("seed") = 0, py::arg("candidates") = 5000,
      py::arg("n_train_tasks") = 0,
      "BO against a black-box callable; return None to mark a point infeasible");

  py::class_<TaskHandle, std::shared_ptr<TaskHandle>>(m, "TaskHandle")
      .def_property_readonly("dim", &TaskHandle::dim)
      .def("latent", &TaskHandle::latent, py::arg("x"))
      .def("observe", &TaskHandle::observe, py::arg("x"));

  m.def(
      "sample_synthetic",
      [](int dim, int tasks, int points, double matched, std::uint64_t seed,
         double length_scale, double amplitude, double noise, double mean) {
        return sample_tasks(build_synth_config(dim, tasks, points, matched, seed,
                                               length_scale, amplitude, noise, mean))
            .study;
      },
      py::arg("dim") = 2, py::arg("tasks") = 8, py::arg("points") = 32,
      py::arg("matched") = 0.0, py::arg("seed") = 0, py::arg("length_scale") = 0.3,
      py::arg("amplitude") = 1.0, py::arg("noise") = 0.01, py::arg("mean") = 0.0,
      "sample a multi-task study from a squared-exponential generator");

  m.def(
      "synthetic_config",
      [](int dim, int tasks, int points, double matched, std::uint64_t seed,
         double length_scale, double amplitude, double noise, double mean) {
        return serialize_synth_config(build_synth_config(
            dim, tasks, points, matched, seed, length_scale, amplitude, noise, mean));
      },
      py::arg("dim") = 2, py::arg("tasks") = 8, py::arg("points") = 32,
      py::arg("matched") = 0.0, py::arg("seed") = 0, py::arg("length_scale") = 0.3,
      py::arg("amplitude") = 1.0, py::arg("noise") = 0.01, py::arg("mean") = 0.0,
      "generator description matching sample_synthetic, for rebuild_task");

  m.def(
      "rebuild_task",
      [](const std::string& config_json, int index) {
        return rebuild_handle(parse_synth_config(config_json), index);
      },
      py::arg("config_json"), py::arg("index"),
      "reconstruct one generator task as a queryable black box");

  m.def("quasi_random", &quasi_random, py::arg("count"), py::arg("dim"),
        py::arg("seed"), "rotated low-discrepancy points in the unit cube");
  m.def("theoretical_ucb_zeta", &theoretical_ucb_zeta, py::arg("n_tasks"),
        py::arg("t"), py::arg("delta"));
  m.def("soft_clip", &soft_clip, py::arg("v"), py::arg("low"), py::arg("high"));

  py::class_<RunRecord>(m, "RunRecord")
      .def_property_readonly("method", [](const RunRecord& r) { return r.method; })
      .def_property_readonly("task_id", [](const RunRecord& r) { return r.task_id; })
      .def_property_readonly("seed", [](const RunRecord& r) { return r.seed; })
      .def_property_readonly("best_so_far",
                             [](const RunRecord& r) { return r.best_so_far; })
      .def_property_readonly("regret", [](const RunRecord& r) { return r.regret; });

  m.def("make_record", &make_record, py::arg("method"), py::arg("task_id"),
        py::arg("seed"), py::arg("trace"));
  m.def("read_records_dir", &read_records_dir, py::arg("path"));
  m.def("write_run_csv", &write_run_csv, py::arg("path"), py::arg("trace"));
  m.def("run_file_name", &run_file_name, py::arg("method"), py::arg("task_id"),
        py::arg("seed"));
  m.def("linear_percentile", &linear_percentile, py::arg("values"), py::arg("p"));

  m.def(
      "performance_profile",
      [](const std::vector<RunRecord>& records, int criterion_iteration) {
        const ProfileReport report = performance_profile(records, criterion_iteration);
        py::dict out;
        out["criterion_iteration"] = report.criterion_iteration;
        out["iterations"] = report.iterations;
        out["methods"] = report.methods;
        out["tasks"] = report.tasks;
        out["criterion_by_task"] = report.criterion_by_task;
        out["fraction"] = report.fraction;
        return out;
      },
      py::arg("records"), py::arg("criterion_iteration"));

  m.def(
      "regret_percentiles",
      [](const std::vector<RunRecord>& records) {
        py::list out;
        for (const PercentileRow& row : regret_percentiles(records)) {
          py::dict d;
          d["method"] = row.method;
          d["iteration"] = row.iteration;
          d["p20"] = row.p20;
          d["p50"] = row.p50;
          d["p80"] = row.p80;
          out.append(d);
        }
        return out;
      },
      py::arg("records"));

  m.def(
      "speedup_factor",
      [](const std::vector<RunRecord>& a, const std::vector<RunRecord>& b) {
        py::list out;
        for (const SpeedupEntry& e : speedup_factor(a, b)) {
          py::dict d;
          d["task_id"] = e.task_id;
          d["reached"] = e.reached;
          d["ratio"] = e.ratio;
          out.append(d);
        }
        return out;
      },
      py::arg("records_a"), py::arg("records_b"));
}
