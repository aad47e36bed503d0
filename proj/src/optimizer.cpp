#include "gpmpc/optimizer.hpp"

#include <cmath>
#include <deque>
#include <limits>

namespace gpmpc {

namespace {

bool finite(double v) { return std::isfinite(v); }
bool finite(const VectorXd& v) { return v.allFinite(); }

}  // namespace

OptimResult lbfgs_minimize(const Objective& f, const VectorXd& x0,
                           const LbfgsOptions& opts) {
  OptimResult res;
  VectorXd x = x0;
  VectorXd g(x.size());
  double fx = f(x, &g);
  if (!finite(fx) || !finite(g)) {
    throw std::invalid_argument("lbfgs: objective not finite at the initial point");
  }

  res.x = x;
  res.fx = fx;

  std::deque<VectorXd> s_hist, y_hist;
  std::deque<double> rho_hist;

  for (int iter = 0; iter < opts.max_iter; ++iter) {
    res.iterations = iter + 1;
    if (g.cwiseAbs().maxCoeff() < opts.grad_tol) {
      res.converged = true;
      res.message = "gradient tolerance reached";
      break;
    }

    // Two-loop recursion.
    VectorXd q = g;
    std::vector<double> alpha(s_hist.size());
    for (int i = static_cast<int>(s_hist.size()) - 1; i >= 0; --i) {
      alpha[i] = rho_hist[i] * s_hist[i].dot(q);
      q -= alpha[i] * y_hist[i];
    }
    if (!s_hist.empty()) {
      const double gamma =
          s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
      q *= gamma;
    }
    for (size_t i = 0; i < s_hist.size(); ++i) {
      const double beta = rho_hist[i] * y_hist[i].dot(q);
      q += (alpha[i] - beta) * s_hist[i];
    }
    VectorXd dir = -q;
    double descent = g.dot(dir);
    if (!finite(dir) || descent >= 0.0) {
      // Curvature memory went bad; restart from steepest descent.
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
      dir = -g;
      descent = -g.squaredNorm();
    }

    // Armijo backtracking.
    double step = 1.0;
    double fnew = std::numeric_limits<double>::infinity();
    VectorXd xnew, gnew(g.size());
    bool accepted = false;
    for (int ls = 0; ls < opts.max_linesearch; ++ls) {
      xnew = x + step * dir;
      fnew = f(xnew, &gnew);
      if (finite(fnew) && finite(gnew) &&
          fnew <= fx + opts.armijo_c1 * step * descent) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      res.message = "line search stagnated";
      break;
    }

    const VectorXd s = xnew - x;
    const VectorXd y = gnew - g;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      s_hist.push_back(s);
      y_hist.push_back(y);
      rho_hist.push_back(1.0 / sy);
      if (static_cast<int>(s_hist.size()) > opts.memory) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
    }

    const double df = fx - fnew;
    x = xnew;
    fx = fnew;
    g = gnew;
    if (fx < res.fx) {
      res.x = x;
      res.fx = fx;
    }
    if (df >= 0.0 && df < opts.f_tol * std::max(1.0, std::abs(fx))) {
      res.converged = true;
      res.message = "objective stagnation";
      break;
    }
  }

  if (res.message.empty()) res.message = "max iterations reached";
  return res;
}

Objective with_fd_gradient(const std::function<double(const VectorXd&)>& f,
                           double h) {
  return [f, h](const VectorXd& x, VectorXd* grad) {
    if (grad) *grad = fd_gradient(f, x, h);
    return f(x);
  };
}

}  // namespace gpmpc
