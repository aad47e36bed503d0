#pragma once

#include <optional>
#include <vector>

#include "gpmpc/ftc_lpv.hpp"
#include "gpmpc/propagation.hpp"
#include "gpmpc/qp.hpp"

namespace gpmpc {

/// One half-space a^T v <= b; rows are normalized to |a|_2 = 1 at load.
struct Halfspace {
  VectorXd a;
  double b = 0.0;
};

enum class CovarianceMode { kPrecomputed, kOptimized };

struct ControllerConfig {
  int horizon = 12;
  MatrixXd q_weight;  // n_x x n_x PSD
  MatrixXd r_weight;  // n_u x n_u PD
  double p_x = 0.95;
  std::vector<Halfspace> state_polytope;
  std::vector<Halfspace> input_polytope;
  PropagationMode propagation = PropagationMode::kMomentMatching;
  CovarianceMode covariance = CovarianceMode::kPrecomputed;
  TaylorCrossMode taylor_cross = TaylorCrossMode::kTaylor;
  double eps_lpv = 0.01;
  int max_iters = 12;
  bool rti = false;
  double t_s = 0.02;
  int quad_nodes = 9;
  double slack_penalty = 1e4;
  /// Per-entry scales of (mu_x, u) for the convergence gap; the vec(Sigma)
  /// block is compared at unit scale. Empty means all ones.
  VectorXd gap_scales;

  void normalize_polytopes();
  void validate(Eigen::Index n_x, Eigen::Index n_u) const;

  /// The quadrotor benchmark configuration: Np=12, the published weight
  /// matrices, 50 Hz sampling, velocity/angle/input boxes.
  static ControllerConfig quad_default();
};

/// Chance-constraint back-off: b - probit(p_x) sqrt(a^T Sigma a).
double tighten_halfspace(const VectorXd& alpha, double b, const MatrixXd& sigma,
                         double p_x);

/// Receding-horizon input shift, last element repeated.
std::vector<VectorXd> shift_inputs(const std::vector<VectorXd>& prev);

/// Expected quadratic cost of a mean/covariance/input trajectory.
double stage_cost(const std::vector<VectorXd>& mu_traj,
                  const std::vector<MatrixXd>& sigma_traj,
                  const std::vector<VectorXd>& inputs,
                  const std::vector<VectorXd>& r_traj, const ControllerConfig& cfg);

struct StepDiagnostics {
  int iterations = 0;      // LPV iterations executed
  int qp_iterations = 0;   // summed ADMM iterations
  double step_time_ms = 0.0;
  double qp_time_ms = 0.0;
  double factorization_time_ms = 0.0;
  double gap = 0.0;        // last scheduling gap
  std::vector<double> gap_history;  // gap after each iteration
  double cost = 0.0;
  bool converged = false;
  bool soft_fallback = false;
  long variance_clamps = 0;
  long psd_clamps = 0;
};

struct ControllerState {
  std::vector<VectorXd> prev_inputs;       // last converged sequence, length Np
  VectorXd last_applied;                   // u(k-1)
  std::optional<QpSolution> prev_solution; // QP warm start
  std::vector<SchedulingPoint> schedule;
  long steps = 0;
};

/// Iterated LPV GP-MPC (per-step schedule initialization, QP iteration,
/// convergence on the scheduling gap). One instance owns its mutable state
/// and serves a single control loop.
class GpmpcController {
public:
  /// `gp` may be null for the nominal-only baseline; it is borrowed and must
  /// outlive the controller.
  GpmpcController(NominalModel nominal, const SparseGpModel* gp, ControllerConfig cfg);

  /// One control update. r_traj must hold horizon()+1 references.
  VectorXd mpc_step(const VectorXd& x_k, const std::vector<VectorXd>& r_traj,
                    StepDiagnostics* diag = nullptr);

  /// Schedule seeding: nonlinear moment rollout under the given inputs (all
  /// zeros on the very first step per the cold-start convention).
  std::vector<SchedulingPoint> init_schedule(const VectorXd& x_k,
                                             const std::vector<VectorXd>& inputs,
                                             std::vector<GaussianBelief>* beliefs) const;

  const ControllerConfig& config() const { return cfg_; }
  const ControllerState& state() const { return state_; }
  const MomentModel& moment_model() const { return model_; }
  int horizon() const { return cfg_.horizon; }
  void reset();

private:
  NominalModel nominal_;
  const SparseGpModel* gp_;
  ControllerConfig cfg_;
  MomentModel model_;
  ControllerState state_;
};

}  // namespace gpmpc
