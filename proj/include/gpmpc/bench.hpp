#pragma once

#include <memory>
#include <string>
#include <vector>

#include "gpmpc/config.hpp"
#include "gpmpc/controller.hpp"
#include "gpmpc/quad.hpp"
#include "gpmpc/reference.hpp"
#include "gpmpc/sparse_gp.hpp"

namespace gpmpc {

/// Parameters of one pipeline run (collection, training or benchmark).
struct RunConfig {
  std::string variant = "lpv-mm-precov";  // lpv-{taylor,mm}-{precov,cov} or baseline
  std::string trajectory = "lemniscate";
  double duration = 10.0;
  std::uint64_t seed = 0;
  std::string model_path;
  std::string out_dir = ".";

  // data collection
  double disturbance_var = 0.1;  // Sigma_v diagonal during collection
  bool aero = true;
  bool disturbance_in_eval = false;
  double collect_duration = 30.0;

  // training
  int num_inducing = 4;
  int train_max_points = 900;
  int train_iters = 260;
  bool shared_inducing = false;

  ControllerConfig controller = ControllerConfig::quad_default();
  QuadParams quad = QuadParams::crazyflie();

  static RunConfig from_config(const KeyValueConfig& kv);
  /// Canonical key=value serialization of every field that affects results.
  std::string canonical() const;
  std::uint64_t hash() const;
};

/// Applies the variant tag to the controller flags. Throws on unknown tags.
void apply_variant(const std::string& variant, ControllerConfig* cfg, bool* use_gp);

/// GP input indices into col(x, u) for the quadrotor residual model:
/// velocities, Euler angles and the four inputs (position excluded).
std::vector<int> quad_gp_input_indices();

/// Reference-tracking adapter between GpmpcController and the simulator.
class TrackingController : public OuterController {
public:
  TrackingController(std::unique_ptr<GpmpcController> mpc, std::shared_ptr<Reference> ref);
  VectorXd control(double t, const VectorXd& outer_state) override;
  VectorXd last_reference() const override { return last_ref_; }
  const std::vector<StepDiagnostics>& diagnostics() const { return diags_; }
  GpmpcController& mpc() { return *mpc_; }

private:
  std::unique_ptr<GpmpcController> mpc_;
  std::shared_ptr<Reference> ref_;
  VectorXd last_ref_;
  std::vector<StepDiagnostics> diags_;
};

struct BenchmarkReport {
  std::string variant;
  double rmse_3d_mm = 0.0;  // Eq. of the position RMSE, millimetres
  double rmse_xy_mm = 0.0;
  double avg_step_time_ms = 0.0;
  double avg_qp_time_ms = 0.0;
  double avg_factorization_time_ms = 0.0;
  double avg_iterations = 0.0;     // LPV iterations per step
  double median_iterations = 0.0;
  double avg_qp_admm_iterations = 0.0;
  long constraint_violations = 0;
  bool failed = false;
  std::string fail_reason;
  std::uint64_t config_hash = 0;
  std::uint64_t model_hash = 0;
  std::uint64_t seed = 0;
  std::string git_describe;

  std::string to_json() const;
};

struct BenchResult {
  BenchmarkReport report;
  SimLog log;
  std::vector<StepDiagnostics> diags;
};

/// Runs the baseline controller on the collection trajectory with the
/// process disturbance enabled and assembles the residual dataset.
Dataset collect_dataset(const RunConfig& cfg, SimLog* log = nullptr);

/// Trains the three velocity-residual GPs on a dataset.
SparseGpModel train_models(const Dataset& data, const RunConfig& cfg,
                           SparseTrainReport* report = nullptr);

/// Closed-loop benchmark of one controller variant.
BenchResult run_benchmark(const RunConfig& cfg, const SparseGpModel* model);

struct SweepRow {
  int num_inducing = 0;
  double rmse_3d_mm = 0.0;
  double avg_step_time_ms = 0.0;
  double avg_qp_time_ms = 0.0;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  bool rmse_saturation_ok = false;  // RMSE(8) within 15% above RMSE(4)
  bool time_monotone_ok = false;    // step time nondecreasing up to a noise band
};

/// Trains and benchmarks across inducing-point counts.
SweepResult sweep_inducing(const RunConfig& cfg, const Dataset& data,
                           const std::vector<int>& m_values = {1, 2, 4, 8, 16});

// --- file I/O -------------------------------------------------------------
void write_dataset_csv(const Dataset& data, const std::string& path);
Dataset read_dataset_csv(const std::string& path);
void write_trajectory_csv(const SimLog& log, const std::string& path);
void write_diagnostics_csv(const std::vector<StepDiagnostics>& diags, const std::string& path);

/// Position RMSE (millimetres) of a logged run against its references.
double rmse_3d_mm(const SimLog& log);
double rmse_xy_mm(const SimLog& log);

std::string git_describe_string();

}  // namespace gpmpc
