#pragma once

#include "gpmpc/controller.hpp"

namespace gpmpc {

/// Assembled multi-stage MPC QP plus the decision-vector layout. Decision
/// order: inputs u(0..Np-1), means mu(1..Np), then (optimized-covariance
/// mode) vec Sigma(1..Np), then optional slacks on the tightened rows.
struct MpcQp {
  QpProblem problem;
  Eigen::Index n_x = 0, n_u = 0;
  int horizon = 0;
  bool cov_mode = false;
  int slack_rows = 0;  // tightened state rows carrying slacks

  Eigen::Index u_offset(int i) const { return static_cast<Eigen::Index>(i) * n_u; }
  Eigen::Index mu_offset(int i) const {  // i in 1..Np
    return static_cast<Eigen::Index>(horizon) * n_u +
           static_cast<Eigen::Index>(i - 1) * n_x;
  }
  Eigen::Index sigma_offset(int i) const {  // i in 1..Np, cov mode only
    return static_cast<Eigen::Index>(horizon) * (n_u + n_x) +
           static_cast<Eigen::Index>(i - 1) * n_x * n_x;
  }
};

/// Builds the LPV-MPC quadratic program for one scheduling trajectory.
/// `beliefs` (length Np+1) provides the scheduled covariances: constraint
/// tightening always uses them, and in precomputed-covariance mode the mean
/// dynamics absorb C_theta * vec Sigma_sched as a constant. Pure function of
/// its arguments.
MpcQp qp_assemble_mpc(const std::vector<LpvStep>& steps, const ControllerConfig& cfg,
                      const VectorXd& x0, const VectorXd& u_prev,
                      const std::vector<GaussianBelief>& beliefs,
                      const std::vector<VectorXd>& r_traj, bool with_slacks = false);

}  // namespace gpmpc
