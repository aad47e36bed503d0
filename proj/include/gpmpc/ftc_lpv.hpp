#pragma once

#include <vector>

#include "gpmpc/propagation.hpp"

namespace gpmpc {

/// One point of the scheduling trajectory rho = col(mu_x, u, vec Sigma_x).
struct SchedulingPoint {
  VectorXd mu_x;
  VectorXd u;
  MatrixXd sigma;

  VectorXd rho() const;
  void validate() const;
};

/// The fixed factorization reference: measured state, previously applied
/// input, zero covariance block.
struct AnchorPoint {
  VectorXd x_meas;
  VectorXd u_prev;
};

/// Factorized matrices of one prediction step. The affine terms are the
/// moment maps evaluated at the anchor; every other block is the
/// path-integrated Jacobian over the segment anchor -> query.
struct LpvStep {
  MatrixXd a_theta, b_theta, c_theta;  // n_x x {n_x, n_u, n_x^2}
  MatrixXd a_zeta, b_zeta, c_zeta;     // n_x^2 x {n_x, n_u, n_x^2}
  VectorXd affine_theta;               // n_x
  VectorXd affine_zeta;                // n_x^2 (vec)
  bool has_zeta = false;

  /// theta reconstructed at a scheduling point via the affine identity.
  VectorXd reconstruct_theta(const AnchorPoint& anchor, const SchedulingPoint& p) const;
  VectorXd reconstruct_zeta(const AnchorPoint& anchor, const SchedulingPoint& p) const;
};

struct FtcOptions {
  int quad_nodes = 9;      // composite Simpson 1/3 evaluations, odd, >= 3
  bool want_zeta = true;   // skip the covariance factorization (precov mode)
  double degenerate_tol = 1e-14;
};

/// Path-integrated factorization of the moment maps along the straight
/// segment from the anchor (zero covariance) to the query point.
LpvStep ftc_factorize(const MomentMapBase& maps, const AnchorPoint& anchor,
                      const SchedulingPoint& query, const FtcOptions& opts = {});

/// One LpvStep per scheduling point, all sharing the anchor. Steps are
/// independent and factorized concurrently.
std::vector<LpvStep> factorize_horizon(const MomentMapBase& maps, const AnchorPoint& anchor,
                                       const std::vector<SchedulingPoint>& schedule,
                                       const FtcOptions& opts = {});

/// Wraps arbitrary moment maps with finite-difference Jacobians; used for
/// small analytic maps in tests and as a reference implementation.
class FunctionMomentMap : public MomentMapBase {
public:
  using ThetaFn = std::function<VectorXd(const VectorXd&, const VectorXd&, const MatrixXd&)>;
  using ZetaFn = std::function<MatrixXd(const VectorXd&, const VectorXd&, const MatrixXd&)>;

  FunctionMomentMap(Eigen::Index nx, Eigen::Index nu, ThetaFn theta, ZetaFn zeta,
                    double fd_step = 1e-6);

  Eigen::Index state_dim() const override { return nx_; }
  Eigen::Index control_dim() const override { return nu_; }
  void eval(const VectorXd& mu_x, const VectorXd& u, const MatrixXd& sigma_x,
            VectorXd& theta, MatrixXd& zeta) const override;
  MomentJacobians jacobians(const VectorXd& mu_x, const VectorXd& u,
                            const MatrixXd& sigma_x, bool want_zeta) const override;

private:
  Eigen::Index nx_, nu_;
  ThetaFn theta_;
  ZetaFn zeta_;
  double fd_step_;
};

}  // namespace gpmpc
