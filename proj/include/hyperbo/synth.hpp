#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "hyperbo/dataset.hpp"
#include "hyperbo/gp.hpp"
#include "hyperbo/rng.hpp"

namespace hyperbo {

struct SynthConfig {
  GPParams truth;
  int dim = 2;
  int n_tasks = 8;
  int points_per_task = 32;
  // Leading fraction of each task's points shared verbatim across tasks.
  double matched_fraction = 0.0;
  std::uint64_t seed = 0;
};

std::string serialize_synth_config(const SynthConfig& config);
SynthConfig parse_synth_config(const std::string& json_text);

// One sampled task. Stores the latent values drawn so far and answers every
// new query by exact conditioning on them, so repeated use of a handle stays
// consistent with a single function draw.
class TaskHandle {
 public:
  TaskHandle(GPParams truth, int dim, std::uint64_t seed);

  int dim() const { return dim_; }

  // Latent value at x; extends the stored path. Querying a stored input
  // returns its stored value exactly.
  double latent(const Eigen::RowVectorXd& x);
  // latent(x) plus a fresh noise draw.
  double observe(const Eigen::RowVectorXd& x);

  int stored_points() const { return n_; }
  const GPParams& truth() const { return truth_; }

  // Joint conditional sample at `points` given the stored path, without
  // extending it. `stream` picks the substream so repeated peeks agree.
  Eigen::VectorXd peek(const Eigen::MatrixXd& points, std::uint64_t stream) const;

 private:
  void append(const Eigen::MatrixXd& x, const Eigen::VectorXd& f);

  GPParams truth_;
  int dim_;
  Eigen::MatrixXd x_;  // stored inputs
  Eigen::VectorXd f_;  // stored latent values
  int n_ = 0;
  Rng rng_;
  std::uint64_t seed_;

  friend struct SynthSampler;
};

struct SynthResult {
  TuningDataset study;
  std::vector<std::shared_ptr<TaskHandle>> handles;
};

// Draws N tasks from the truth GP: a shared matched block of inputs plus
// per-task fresh uniform points, latents sampled jointly, observations with
// noise. The study uses a [0,1]^d linear space, so warping is the identity.
SynthResult sample_tasks(const SynthConfig& config);

// Rebuilds the handle for task `index` of a config, already conditioned on the
// same latent draws sample_tasks produced for it.
std::shared_ptr<TaskHandle> rebuild_handle(const SynthConfig& config, int index);

// Lower-bound estimate of max_x f(x): the maximum of conditional samples over
// at least `resolution` points of one fixed low-discrepancy sequence, drawn
// independently per 256-point chunk. Finer grids extend coarser ones, so the
// estimate never decreases with resolution. Requires resolution >= 1000.
double task_max(const TaskHandle& handle, int resolution);

}  // namespace hyperbo
