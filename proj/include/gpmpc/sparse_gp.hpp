#pragma once

#include <string>
#include <vector>

#include "gpmpc/gp.hpp"

namespace gpmpc {

/// One scalar output of a VFE sparse GP: inducing inputs, dual weights and
/// the two cached M x M posterior matrices. All kernel matrices touching
/// inducing points use the noiseless SE kernel; observation noise enters
/// through S = Kuu + nv^-1 Kuw Kuw^T and the predictive-variance diagonal.
struct SparseGpOutput {
  Hyperparams hyper;
  MatrixXd inducing;  // M x n_w
  VectorXd alpha;     // M, dual weights
  MatrixXd kuu_inv;   // M x M
  MatrixXd s_inv;     // M x M
};

struct SparseGpModel {
  std::vector<SparseGpOutput> outputs;
  /// Maps the GP input onto a subset of col(x, u) when the model feeds the
  /// propagation pipeline; empty means the identity map.
  std::vector<int> input_indices;

  Eigen::Index output_dim() const { return static_cast<Eigen::Index>(outputs.size()); }
  Eigen::Index input_dim() const {
    return outputs.empty() ? 0 : outputs.front().hyper.lengthscales.size();
  }
  Eigen::Index inducing_count() const {
    return outputs.empty() ? 0 : outputs.front().inducing.rows();
  }
};

/// Builds the cached posterior for given hyperparameters and inducing
/// inputs (one inducing set per output).
SparseGpModel build_sparse_model(const Dataset& data,
                                 const std::vector<Hyperparams>& hyper,
                                 const std::vector<MatrixXd>& inducing);

GpPrediction sparse_predict(const SparseGpModel& m, const VectorXd& w_star);

/// Negative variational free energy bound (Titsias), evaluated with the
/// M x M Woodbury identities; no N x N matrix is ever formed. theta_breve
/// packs (log sv, log nv, log lengthscales, vec of inducing rows).
double vfe_objective(const Dataset& data, const VectorXd& theta_breve,
                     Eigen::Index num_inducing, int output_index);

struct SparseTrainOptions {
  LbfgsOptions lbfgs;
  bool optimize_hyper = true;
  bool optimize_inducing = true;
  /// Share one inducing set across outputs instead of per-output sets.
  bool shared_inducing = false;
  /// Inducing inputs are penalized outside a box this factor times the
  /// training-input hull, which keeps them from drifting to prior-only
  /// solutions.
  double box_scale = 1.2;
  double box_penalty = 1e3;
  double fd_step = 1e-5;
  std::uint64_t seed = 0;  // k-means++ initialization seed
  /// Cap on training points used in the bound (deterministic stride
  /// subsample); 0 disables.
  int max_train_points = 0;
};

struct SparseTrainReport {
  std::vector<double> final_objective;
  std::vector<int> iterations;
  std::vector<bool> converged;
  std::string message;
};

/// Joint optimization of hyperparameters and inducing inputs, initialized
/// from k-means++ centers of the training inputs.
SparseGpModel train_sparse(const Dataset& data, int num_inducing,
                           const std::vector<Hyperparams>& init,
                           const SparseTrainOptions& opts,
                           SparseTrainReport* report = nullptr);

/// k-means++ seeding followed by Lloyd iterations; rows are points.
MatrixXd kmeans_centers(const MatrixXd& points, int k, std::uint64_t seed,
                        int lloyd_iters = 25);

std::string sparse_gp_to_json(const SparseGpModel& m);
SparseGpModel sparse_gp_from_json(const std::string& text);

}  // namespace gpmpc
