#pragma once

#include <string>
#include <vector>

#include "gpmpc/common.hpp"
#include "gpmpc/optimizer.hpp"

namespace gpmpc {

/// Squared-exponential kernel hyperparameters for one scalar output.
/// `lengthscales` holds the diagonal of Lambda, i.e. squared-lengthscale
/// units, one entry per input dimension.
struct Hyperparams {
  double signal_variance = 1.0;
  double noise_variance = 1e-2;
  VectorXd lengthscales;

  void validate(Eigen::Index input_dim) const;

  /// Packs (log sv, log nv, log lengthscales) for optimization in log space.
  VectorXd to_log() const;
  static Hyperparams from_log(const VectorXd& packed);
};

/// Regression data: inputs are N x n_w, outputs N x n_z (one column per
/// independently modelled output).
struct Dataset {
  MatrixXd inputs;
  MatrixXd outputs;

  Eigen::Index size() const { return inputs.rows(); }
  Eigen::Index input_dim() const { return inputs.cols(); }
  Eigen::Index output_dim() const { return outputs.cols(); }
  void validate() const;
};

/// Exact GP posterior state: per-output Cholesky factor of the
/// noise-augmented Gram matrix and dual weights alpha = K^-1 Z.
struct FullGpModel {
  Dataset data;
  std::vector<Hyperparams> hyper;
  std::vector<VectorXd> alpha;
  std::vector<MatrixXd> chol_gram;  // lower-triangular factors
  double jitter = 0.0;              // jitter actually added to the diagonal

  Eigen::Index input_dim() const { return data.input_dim(); }
  Eigen::Index output_dim() const { return data.output_dim(); }
};

/// SE kernel value. The noise term sigma_v^2 is added iff include_noise and
/// the two inputs are bitwise identical (Kronecker-delta semantics).
double se_kernel(const Hyperparams& h, const VectorXd& w, const VectorXd& w2,
                 bool include_noise);

/// Noiseless SE Gram matrix of two point sets (rows are points).
MatrixXd se_gram(const Hyperparams& h, const MatrixXd& a, const MatrixXd& b);

/// Kernel slice [k]_t = kernel(row t of points, w_star) with the same
/// delta-noise semantics as se_kernel.
VectorXd se_slice(const Hyperparams& h, const MatrixXd& points,
                  const VectorXd& w_star, bool include_noise);

/// Cholesky with escalating diagonal jitter 1e-10..1e-6 (x10 steps).
/// Throws NumericalError carrying the last jitter tried.
Eigen::LLT<MatrixXd> chol_with_jitter(MatrixXd k, double* jitter_used);

FullGpModel gp_fit(const Dataset& data, const std::vector<Hyperparams>& hyper);

struct GpPrediction {
  VectorXd mean;      // n_z
  VectorXd variance;  // n_z, includes the noise term
};

GpPrediction gp_predict(const FullGpModel& m, const VectorXd& w_star);

/// Negative log marginal likelihood of one output column,
/// 1/2 z^T K^-1 z + 1/2 log det K. The constant (N/2) log 2pi is omitted;
/// it shifts the objective but not the minimizer.
double nlml(const Dataset& data, const Hyperparams& h, int output_index);

/// nlml and its analytic gradient with respect to the log-parameters
/// (log sv, log nv, log lengthscales), via the usual trace identities.
double nlml_log_grad(const Dataset& data, const VectorXd& log_params,
                     int output_index, VectorXd* grad);

struct TrainOptions {
  LbfgsOptions lbfgs;
  /// Entries set to false freeze the matching log-parameter at its initial
  /// value. Empty means all parameters are free.
  std::vector<bool> free_mask;
};

struct TrainReport {
  std::vector<double> initial_objective;
  std::vector<double> final_objective;
  std::vector<int> iterations;
  std::vector<bool> converged;
  std::string message;
};

/// Optimizes hyperparameters per output in log space. Never throws on
/// optimizer stagnation: the best iterate is returned and the report says
/// what happened.
std::vector<Hyperparams> train_full(const Dataset& data,
                                    const std::vector<Hyperparams>& init,
                                    const TrainOptions& opts,
                                    TrainReport* report = nullptr);

/// Versioned JSON round trip for the fitted model (dataset inlined).
std::string full_gp_to_json(const FullGpModel& m);
FullGpModel full_gp_from_json(const std::string& text);

}  // namespace gpmpc
