#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

namespace hyperbo {

enum class Scaling { linear, log };

struct ParamSpec {
  std::string name;
  double low = 0.0;
  double high = 1.0;
  Scaling scaling = Scaling::linear;
};

struct SearchSpace {
  std::vector<ParamSpec> params;

  int dim() const { return static_cast<int>(params.size()); }

  // low < high everywhere; log-scaled dimensions need low > 0; names unique.
  void validate() const;
};

struct Trial {
  // One value per search-space dimension, in declaration order.
  std::vector<double> params;
  // Absent only when the trial is infeasible.
  std::optional<double> objective;
  bool feasible = true;
};

struct SubDataset {
  std::string task_id;
  std::vector<Trial> trials;
};

struct TuningDataset {
  SearchSpace space;
  std::vector<SubDataset> tasks;
  // Informational label carried through serialization untouched.
  std::optional<std::string> objective_kind;
};

// Maps a raw parameter value into [0, 1]: linear dims by (v-low)/(high-low),
// log dims by (ln v - ln low)/(ln high - ln low). Out-of-range values are
// rejected.
double warp_input(const ParamSpec& spec, double value);

Eigen::RowVectorXd warp_point(const SearchSpace& space,
                              const std::vector<double>& values);

// Error-rate objective r >= 0 mapped to the maximization scale: -ln(r + 1e-10).
double warp_objective(double error_rate);

// Online preprocessing for a whole task: feasible y maps to
// softplus(y - med) / softplus(max - med) * 4 - 2 where med is the median of
// the feasible values (lower of the two middles for even counts) and max their
// maximum; infeasible entries map to -2. Order among feasible values is
// preserved and every output lies in [-2, 2].
std::vector<double> warp_online(const std::vector<double>& values,
                                const std::vector<bool>& feasible);

// How recorded objectives are mapped onto the scale the GP models.
enum class OutputWarp { identity, error_rate, online };

OutputWarp parse_output_warp(const std::string& text);
std::string output_warp_name(OutputWarp warp);

// One task ready for GP consumption: inputs warped into [0,1]^d, objectives on
// the model scale. `raw` keeps the recorded objective (NaN when infeasible).
struct WarpedTask {
  std::string task_id;
  Eigen::MatrixXd x;
  Eigen::VectorXd y;
  std::vector<double> raw;
};

// identity / error_rate keep feasible trials only; online keeps every trial
// (infeasible ones at -2). A task left without trials is rejected.
std::vector<WarpedTask> warp_tasks(const TuningDataset& dataset, OutputWarp warp);

// Inputs observed (within tol, componentwise, on warped coordinates) in every
// task, with the value each task recorded there.
struct MatchingDataset {
  Eigen::MatrixXd inputs;  // M x d, pairwise distinct rows
  Eigen::MatrixXd values;  // M x N, all cells finite
  std::vector<std::string> task_ids;

  int size() const { return static_cast<int>(inputs.rows()); }
  int n_tasks() const { return static_cast<int>(task_ids.size()); }
};

// Duplicates inside a task resolve to the first occurrence.
MatchingDataset extract_matching(const TuningDataset& dataset, double tol = 1e-9,
                                 OutputWarp warp = OutputWarp::identity);

TuningDataset parse_study(const std::string& json_text);
TuningDataset load_study(const std::string& path);
std::string serialize_study(const TuningDataset& dataset);
void save_study(const TuningDataset& dataset, const std::string& path);

}  // namespace hyperbo
