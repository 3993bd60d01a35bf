#include "hyperbo/dataset.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "hyperbo/errors.hpp"

namespace hyperbo {

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr double kObjectiveFloor = 1e-10;

[[noreturn]] void fail(const std::string& msg) { throw ValidationError(msg); }

}  // namespace

void SearchSpace::validate() const {
  if (params.empty()) fail("search space declares no parameters");
  std::set<std::string> names;
  for (const auto& p : params) {
    if (p.name.empty()) fail("search space has an unnamed parameter");
    if (!names.insert(p.name).second)
      fail("duplicate parameter name '" + p.name + "'");
    if (!(p.low < p.high))
      fail("parameter '" + p.name + "' needs low < high");
    if (p.scaling == Scaling::log && !(p.low > 0.0))
      fail("log-scaled parameter '" + p.name + "' needs low > 0");
    if (!std::isfinite(p.low) || !std::isfinite(p.high))
      fail("parameter '" + p.name + "' has non-finite bounds");
  }
}

double warp_input(const ParamSpec& spec, double value) {
  if (!(value >= spec.low && value <= spec.high))
    fail("value " + std::to_string(value) + " for parameter '" + spec.name +
         "' lies outside [" + std::to_string(spec.low) + ", " +
         std::to_string(spec.high) + "]");
  if (spec.scaling == Scaling::log)
    return (std::log(value) - std::log(spec.low)) /
           (std::log(spec.high) - std::log(spec.low));
  return (value - spec.low) / (spec.high - spec.low);
}

Eigen::RowVectorXd warp_point(const SearchSpace& space,
                              const std::vector<double>& values) {
  if (static_cast<int>(values.size()) != space.dim())
    fail("point has " + std::to_string(values.size()) + " values for a " +
         std::to_string(space.dim()) + "-dimensional space");
  Eigen::RowVectorXd out(space.dim());
  for (int j = 0; j < space.dim(); ++j)
    out(j) = warp_input(space.params[j], values[j]);
  return out;
}

double warp_objective(double error_rate) {
  if (!(error_rate >= 0.0))
    fail("error-rate objective must be non-negative, got " +
         std::to_string(error_rate));
  return -std::log(error_rate + kObjectiveFloor);
}

std::vector<double> warp_online(const std::vector<double>& values,
                                const std::vector<bool>& feasible) {
  if (values.size() != feasible.size())
    fail("warp_online: values and feasibility flags differ in length");
  std::vector<double> ok;
  for (size_t i = 0; i < values.size(); ++i)
    if (feasible[i]) {
      if (!std::isfinite(values[i])) fail("warp_online: non-finite feasible value");
      ok.push_back(values[i]);
    }
  if (ok.empty()) fail("warp_online: no feasible values");

  std::sort(ok.begin(), ok.end());
  // lower of the two middles for even counts
  const double med = ok[(ok.size() - 1) / 2];
  const double top = ok.back();
  auto softplus = [](double v) { return std::log1p(std::exp(v)); };
  const double denom = softplus(top - med);

  std::vector<double> out(values.size());
  for (size_t i = 0; i < values.size(); ++i)
    out[i] = feasible[i] ? softplus(values[i] - med) / denom * 4.0 - 2.0 : -2.0;
  return out;
}

OutputWarp parse_output_warp(const std::string& text) {
  if (text == "none" || text == "identity") return OutputWarp::identity;
  if (text == "error-rate" || text == "error_rate") return OutputWarp::error_rate;
  if (text == "online") return OutputWarp::online;
  fail("unknown output warp '" + text + "'");
}

std::string output_warp_name(OutputWarp warp) {
  switch (warp) {
    case OutputWarp::identity: return "none";
    case OutputWarp::error_rate: return "error-rate";
    case OutputWarp::online: return "online";
  }
  return "none";
}

std::vector<WarpedTask> warp_tasks(const TuningDataset& dataset, OutputWarp warp) {
  dataset.space.validate();
  std::vector<WarpedTask> out;
  out.reserve(dataset.tasks.size());
  for (const auto& task : dataset.tasks) {
    std::vector<Eigen::RowVectorXd> xs;
    std::vector<double> ys, raws;
    if (warp == OutputWarp::online) {
      std::vector<double> values(task.trials.size(), 0.0);
      std::vector<bool> feas(task.trials.size());
      for (size_t i = 0; i < task.trials.size(); ++i) {
        feas[i] = task.trials[i].feasible && task.trials[i].objective.has_value();
        if (feas[i]) values[i] = *task.trials[i].objective;
      }
      const auto warped = warp_online(values, feas);
      for (size_t i = 0; i < task.trials.size(); ++i) {
        xs.push_back(warp_point(dataset.space, task.trials[i].params));
        ys.push_back(warped[i]);
        raws.push_back(feas[i] ? values[i]
                               : std::numeric_limits<double>::quiet_NaN());
      }
    } else {
      for (const auto& trial : task.trials) {
        if (!trial.feasible || !trial.objective.has_value()) continue;
        xs.push_back(warp_point(dataset.space, trial.params));
        const double raw = *trial.objective;
        ys.push_back(warp == OutputWarp::error_rate ? warp_objective(raw) : raw);
        raws.push_back(raw);
      }
    }
    if (xs.empty())
      fail("task '" + task.task_id + "' has no usable trials after warping");
    WarpedTask wt;
    wt.task_id = task.task_id;
    wt.x.resize(xs.size(), dataset.space.dim());
    wt.y.resize(ys.size());
    for (size_t i = 0; i < xs.size(); ++i) {
      wt.x.row(i) = xs[i];
      wt.y(i) = ys[i];
    }
    wt.raw = std::move(raws);
    out.push_back(std::move(wt));
  }
  return out;
}

MatchingDataset extract_matching(const TuningDataset& dataset, double tol,
                                 OutputWarp warp) {
  if (tol < 0.0) fail("matching tolerance must be non-negative");
  if (dataset.tasks.empty()) fail("extract_matching: dataset has no tasks");
  const auto tasks = warp_tasks(dataset, warp);
  const int n = static_cast<int>(tasks.size());
  const int d = dataset.space.dim();

  auto close = [tol, d](const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b) {
    for (int j = 0; j < d; ++j)
      if (std::abs(a(j) - b(j)) > tol) return false;
    return true;
  };

  std::vector<Eigen::RowVectorXd> kept;
  std::vector<std::vector<double>> rows;  // per kept input, one value per task
  for (int r = 0; r < tasks[0].x.rows(); ++r) {
    const Eigen::RowVectorXd u = tasks[0].x.row(r);
    bool duplicate = false;
    for (const auto& k : kept)
      if (close(u, k)) {
        duplicate = true;
        break;
      }
    if (duplicate) continue;

    std::vector<double> vals(n);
    vals[0] = tasks[0].y(r);
    bool everywhere = true;
    for (int t = 1; t < n && everywhere; ++t) {
      everywhere = false;
      for (int s = 0; s < tasks[t].x.rows(); ++s)
        if (close(u, tasks[t].x.row(s))) {
          vals[t] = tasks[t].y(s);
          everywhere = true;
          break;
        }
    }
    if (!everywhere) continue;
    kept.push_back(u);
    rows.push_back(std::move(vals));
  }

  MatchingDataset m;
  m.inputs.resize(kept.size(), d);
  m.values.resize(kept.size(), n);
  for (size_t i = 0; i < kept.size(); ++i) {
    m.inputs.row(i) = kept[i];
    for (int t = 0; t < n; ++t) m.values(i, t) = rows[i][t];
  }
  m.task_ids.reserve(n);
  for (const auto& t : tasks) m.task_ids.push_back(t.task_id);
  return m;
}

namespace {

TuningDataset from_json(const ordered_json& j) {
  if (!j.is_object()) fail("study root must be an object");
  if (!j.contains("space") || !j["space"].is_array())
    fail("study is missing the 'space' array");
  if (!j.contains("tasks") || !j["tasks"].is_array())
    fail("study is missing the 'tasks' array");

  TuningDataset d;
  for (const auto& p : j["space"]) {
    if (!p.is_object() || !p.contains("name") || !p.contains("low") ||
        !p.contains("high") || !p.contains("scaling"))
      fail("space entries need name, low, high and scaling");
    ParamSpec spec;
    spec.name = p["name"].get<std::string>();
    spec.low = p["low"].get<double>();
    spec.high = p["high"].get<double>();
    const auto scaling = p["scaling"].get<std::string>();
    if (scaling == "linear") spec.scaling = Scaling::linear;
    else if (scaling == "log") spec.scaling = Scaling::log;
    else fail("parameter '" + spec.name + "' has unknown scaling '" + scaling + "'");
    d.space.params.push_back(std::move(spec));
  }
  d.space.validate();

  if (j.contains("objective_kind")) {
    if (!j["objective_kind"].is_string())
      fail("objective_kind must be a string");
    d.objective_kind = j["objective_kind"].get<std::string>();
  }

  for (const auto& t : j["tasks"]) {
    if (!t.is_object() || !t.contains("task_id") || !t.contains("trials"))
      fail("task entries need task_id and trials");
    SubDataset task;
    task.task_id = t["task_id"].get<std::string>();
    for (const auto& tr : t["trials"]) {
      if (!tr.is_object() || !tr.contains("params"))
        fail("trial in task '" + task.task_id + "' is missing params");
      Trial trial;
      trial.feasible = tr.value("feasible", true);
      if (tr.contains("objective") && !tr["objective"].is_null()) {
        const double v = tr["objective"].get<double>();
        if (!std::isfinite(v))
          fail("non-finite objective in task '" + task.task_id + "'");
        trial.objective = v;
      }
      if (trial.feasible && !trial.objective.has_value())
        fail("feasible trial without an objective in task '" + task.task_id + "'");

      const auto& params = tr["params"];
      if (!params.is_object()) fail("trial params must be an object");
      for (const auto& [key, _] : params.items()) {
        bool known = false;
        for (const auto& spec : d.space.params)
          if (spec.name == key) {
            known = true;
            break;
          }
        if (!known)
          fail("trial in task '" + task.task_id +
               "' references unknown parameter '" + key + "'");
      }
      trial.params.reserve(d.space.dim());
      for (const auto& spec : d.space.params) {
        if (!params.contains(spec.name))
          fail("trial in task '" + task.task_id + "' is missing parameter '" +
               spec.name + "'");
        const double v = params[spec.name].get<double>();
        if (!(v >= spec.low && v <= spec.high))
          fail("trial in task '" + task.task_id + "' sets '" + spec.name +
               "' outside its declared range");
        trial.params.push_back(v);
      }
      task.trials.push_back(std::move(trial));
    }
    d.tasks.push_back(std::move(task));
  }
  return d;
}

ordered_json to_json(const TuningDataset& d) {
  ordered_json j;
  j["space"] = ordered_json::array();
  for (const auto& p : d.space.params) {
    ordered_json spec;
    spec["name"] = p.name;
    spec["low"] = p.low;
    spec["high"] = p.high;
    spec["scaling"] = p.scaling == Scaling::log ? "log" : "linear";
    j["space"].push_back(std::move(spec));
  }
  if (d.objective_kind.has_value()) j["objective_kind"] = *d.objective_kind;
  j["tasks"] = ordered_json::array();
  for (const auto& t : d.tasks) {
    ordered_json task;
    task["task_id"] = t.task_id;
    task["trials"] = ordered_json::array();
    for (const auto& tr : t.trials) {
      ordered_json trial;
      trial["params"] = ordered_json::object();
      for (int k = 0; k < d.space.dim(); ++k)
        trial["params"][d.space.params[k].name] = tr.params[k];
      if (tr.objective.has_value()) trial["objective"] = *tr.objective;
      else trial["objective"] = nullptr;
      trial["feasible"] = tr.feasible;
      task["trials"].push_back(std::move(trial));
    }
    j["tasks"].push_back(std::move(task));
  }
  return j;
}

}  // namespace

TuningDataset parse_study(const std::string& json_text) {
  ordered_json j;
  try {
    j = ordered_json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("study is not valid JSON: ") + e.what());
  }
  try {
    return from_json(j);
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("study does not match the schema: ") + e.what());
  }
}

TuningDataset load_study(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open study file '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_study(buf.str());
}

std::string serialize_study(const TuningDataset& dataset) {
  return to_json(dataset).dump(2) + "\n";
}

void save_study(const TuningDataset& dataset, const std::string& path) {
  std::ofstream out(path);
  if (!out) fail("cannot write study file '" + path + "'");
  out << serialize_study(dataset);
}

}  // namespace hyperbo
