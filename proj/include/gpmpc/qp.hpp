#pragma once

#include <Eigen/Sparse>
#include <string>

#include "gpmpc/common.hpp"

namespace gpmpc {

using SparseMatrix = Eigen::SparseMatrix<double>;

/// Convex QP   min 1/2 x^T P x + q^T x   s.t.  l <= A x <= u.
/// Equality rows are encoded with l = u.
struct QpProblem {
  SparseMatrix p;  // n x n, symmetric PSD, stored full
  VectorXd q;
  SparseMatrix a;  // m x n
  VectorXd l, u;

  Eigen::Index vars() const { return q.size(); }
  Eigen::Index cons() const { return l.size(); }
  void validate() const;
};

enum class QpStatus { kSolved, kMaxIter, kPrimalInfeasible, kDualInfeasible };

std::string to_string(QpStatus s);

struct QpSolution {
  VectorXd x;  // primal
  VectorXd y;  // dual
  VectorXd z;  // constraint values at the solution
  QpStatus status = QpStatus::kMaxIter;
  int iterations = 0;
  double primal_residual = 0.0;
  double dual_residual = 0.0;
  double objective = 0.0;
};

/// Operator-splitting (ADMM) solver with Ruiz equilibration, rho adaptation
/// and warm starting. Termination uses unscaled residuals.
struct AdmmSettings {
  double rho = 0.1;
  double sigma = 1e-6;
  double alpha = 1.6;        // over-relaxation
  double eps_abs = 1e-6;
  double eps_rel = 1e-6;
  double eps_infeasible = 1e-7;
  int max_iter = 20000;
  int check_interval = 1;    // residuals checked every iteration by default
  bool adaptive_rho = true;
  int adaptive_interval = 50;
  double eq_rho_scale = 1e3; // stiffer rho on equality rows
  int scaling_iters = 10;
  /// Active-set refinement after convergence: re-solves the KKT system of
  /// the detected active constraints and keeps the result when it lowers
  /// the residuals.
  bool polish = true;
  double polish_delta = 1e-9;
  int polish_refine = 3;
};

QpSolution qp_solve(const QpProblem& problem, const QpSolution* warm_start = nullptr,
                    const AdmmSettings& settings = {});

/// Writes the problem as a plain-text sparse interchange file (one
/// coordinate triplet per line) for offline debugging.
void dump_qp(const QpProblem& problem, const std::string& path);

}  // namespace gpmpc
