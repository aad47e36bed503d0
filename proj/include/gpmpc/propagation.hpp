#pragma once

#include <memory>
#include <vector>

#include "gpmpc/sparse_gp.hpp"

namespace gpmpc {

struct GaussianBelief {
  VectorXd mean;
  MatrixXd cov;

  GaussianBelief() = default;
  GaussianBelief(VectorXd m, MatrixXd c) : mean(std::move(m)), cov(std::move(c)) {}
  static GaussianBelief dirac(const VectorXd& m) {
    return {m, MatrixXd::Zero(m.size(), m.size())};
  }
  void validate() const;
};

/// Discrete nominal model x+ = f_d(x, u) with its Jacobian d f_d / d (x,u)
/// stacked as an n_x x (n_x + n_u) matrix.
struct NominalModel {
  Eigen::Index n_x = 0;
  Eigen::Index n_u = 0;
  std::function<VectorXd(const VectorXd&, const VectorXd&)> dynamics;
  std::function<MatrixXd(const VectorXd&, const VectorXd&)> jacobian;
};

enum class PropagationMode { kTaylor, kMomentMatching };

/// How the GP-side cross term is produced under Taylor propagation: with the
/// Taylor gradient (mode-consistent default) or with the moment-matching
/// auxiliary.
enum class TaylorCrossMode { kTaylor, kMomentMatching };

/// First two moments of the GP output under a Gaussian input, plus the
/// input-output cross term. `kernel_cross` holds V with
/// cross = Sigma_w * V; keeping V separately lets the caller re-lift the
/// cross term through a different (e.g. rectangular) input covariance.
struct GpMoments {
  VectorXd mean;         // n_z
  MatrixXd cov;          // n_z x n_z, symmetric
  MatrixXd cross;        // n_w x n_z
  MatrixXd kernel_cross; // n_w x n_z
  int clamp_events = 0;  // negative predictive variances clamped
};

/// Taylor-linearized GP moments around the input mean (gradients analytic).
GpMoments taylor_gp_moments(const SparseGpModel& m, const GaussianBelief& w);

/// Exact sparse moment matching of mean, covariance and cross-covariance.
GpMoments mm_gp_moments(const SparseGpModel& m, const GaussianBelief& w);

struct PropagationSettings {
  PropagationMode mode = PropagationMode::kMomentMatching;
  double scale = 1.0;         // T_d applied to the GP correction
  MatrixXd output_selector;   // B_z, n_x x n_z; empty means identity
  TaylorCrossMode taylor_cross = TaylorCrossMode::kTaylor;
};

struct PropagationStats {
  long variance_clamps = 0;   // GP diagonal clamps
  long psd_clamps = 0;        // next-state covariance eigenvalue clamps
  double min_eigenvalue = 0.0;
};

/// Jacobian blocks of the one-step moment maps theta (mean) and zeta
/// (covariance) with respect to (mu_x, u, vec Sigma_x).
struct MomentJacobians {
  VectorXd theta;       // n_x
  MatrixXd zeta;        // n_x x n_x
  MatrixXd theta_mu, theta_u, theta_sigma;  // n_x x {n_x, n_u, n_x^2}
  MatrixXd zeta_mu, zeta_u, zeta_sigma;     // n_x^2 x {n_x, n_u, n_x^2}
};

/// Interface the FTC factorizer integrates: a pair of moment maps
/// theta(mu_x, u, Sigma_x) and zeta(...) with Jacobians.
class MomentMapBase {
public:
  virtual ~MomentMapBase() = default;
  virtual Eigen::Index state_dim() const = 0;
  virtual Eigen::Index control_dim() const = 0;
  virtual void eval(const VectorXd& mu_x, const VectorXd& u, const MatrixXd& sigma_x,
                    VectorXd& theta, MatrixXd& zeta) const = 0;
  virtual MomentJacobians jacobians(const VectorXd& mu_x, const VectorXd& u,
                                    const MatrixXd& sigma_x, bool want_zeta) const = 0;
};

/// The GP-augmented one-step moment map: nominal model plus (optionally)
/// a sparse GP correction scaled by T_d through the output selector B_z.
/// Jacobians are analytic directional derivatives sharing one primal
/// evaluation per point; only the second derivative of the nominal model
/// falls back to differencing its analytic Jacobian.
class MomentModel : public MomentMapBase {
public:
  MomentModel(const NominalModel* nominal, const SparseGpModel* gp,
              PropagationSettings settings);

  Eigen::Index state_dim() const override { return nominal_->n_x; }
  Eigen::Index control_dim() const override { return nominal_->n_u; }
  const PropagationSettings& settings() const { return settings_; }
  const SparseGpModel* gp() const { return gp_; }
  const NominalModel* nominal() const { return nominal_; }

  /// One step of the Gaussian moment recursion.
  GaussianBelief step(const GaussianBelief& x_belief, const VectorXd& u,
                      PropagationStats* stats = nullptr) const;

  /// Belief trajectory of length inputs.size()+1 with Sigma(0) = 0.
  std::vector<GaussianBelief> rollout(const VectorXd& x0,
                                      const std::vector<VectorXd>& inputs,
                                      PropagationStats* stats = nullptr) const;

  void eval(const VectorXd& mu_x, const VectorXd& u, const MatrixXd& sigma_x,
            VectorXd& theta, MatrixXd& zeta) const override;
  MomentJacobians jacobians(const VectorXd& mu_x, const VectorXd& u,
                            const MatrixXd& sigma_x, bool want_zeta) const override;

private:
  struct Cache;
  std::unique_ptr<Cache> prepare(const VectorXd& mu_x, const VectorXd& u,
                                 const MatrixXd& sigma_x, bool want_zeta) const;
  const NominalModel* nominal_;
  const SparseGpModel* gp_;
  PropagationSettings settings_;
  std::vector<int> selector_;  // GP input indices into col(x, u)
  MatrixXd b_z_;               // effective output selector
};

/// One-step propagation through the augmented model, spec-level entry point.
GaussianBelief propagate_step(const NominalModel& nominal, const SparseGpModel* gp,
                              const GaussianBelief& x_belief, const VectorXd& u,
                              const PropagationSettings& settings,
                              PropagationStats* stats = nullptr);

std::vector<GaussianBelief> rollout(const NominalModel& nominal, const SparseGpModel* gp,
                                    const VectorXd& x0,
                                    const std::vector<VectorXd>& inputs,
                                    const PropagationSettings& settings,
                                    PropagationStats* stats = nullptr);

/// Central-difference Jacobian helper for nominal models without an
/// analytic one.
std::function<MatrixXd(const VectorXd&, const VectorXd&)> fd_model_jacobian(
    std::function<VectorXd(const VectorXd&, const VectorXd&)> dynamics, double h = 1e-6);

}  // namespace gpmpc
