#pragma once

#include <functional>
#include <string>

#include "gpmpc/common.hpp"

namespace gpmpc {

/// Objective callback: returns f(x) and, when grad is non-null, writes the
/// gradient into *grad.
using Objective = std::function<double(const VectorXd& x, VectorXd* grad)>;

struct LbfgsOptions {
  int max_iter = 200;
  int memory = 8;
  double grad_tol = 1e-6;    // stop when |g|_inf below this
  double f_tol = 1e-10;      // stop on relative objective stagnation
  int max_linesearch = 40;
  double armijo_c1 = 1e-4;
};

struct OptimResult {
  VectorXd x;
  double fx = 0.0;
  int iterations = 0;
  bool converged = false;    // tolerance met (vs. iteration/line-search stop)
  std::string message;
};

/// Limited-memory BFGS with Armijo backtracking. Line-search stagnation is
/// not an error: the best iterate found so far is returned with
/// converged=false and a message describing the stop reason.
OptimResult lbfgs_minimize(const Objective& f, const VectorXd& x0,
                           const LbfgsOptions& opts = {});

/// Wraps a gradient-free objective with central finite differences so it can
/// be handed to lbfgs_minimize.
Objective with_fd_gradient(const std::function<double(const VectorXd&)>& f,
                           double h = 1e-5);

}  // namespace gpmpc
