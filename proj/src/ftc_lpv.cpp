#include "gpmpc/ftc_lpv.hpp"

#include <cmath>

namespace gpmpc {

VectorXd SchedulingPoint::rho() const {
  const Eigen::Index nx = mu_x.size();
  VectorXd r(nx + u.size() + nx * nx);
  r.head(nx) = mu_x;
  r.segment(nx, u.size()) = u;
  r.tail(nx * nx) = Eigen::Map<const VectorXd>(sigma.data(), nx * nx);
  return r;
}

void SchedulingPoint::validate() const {
  if (sigma.rows() != mu_x.size() || sigma.cols() != mu_x.size())
    throw std::invalid_argument("SchedulingPoint: sigma shape mismatch");
  const double scale = std::max(1.0, sigma.cwiseAbs().maxCoeff());
  if ((sigma - sigma.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale)
    throw std::invalid_argument("SchedulingPoint: sigma block not symmetric");
}

VectorXd LpvStep::reconstruct_theta(const AnchorPoint& anchor,
                                    const SchedulingPoint& p) const {
  const Eigen::Index nx = p.mu_x.size();
  return affine_theta + a_theta * (p.mu_x - anchor.x_meas) +
         b_theta * (p.u - anchor.u_prev) +
         c_theta * Eigen::Map<const VectorXd>(p.sigma.data(), nx * nx);
}

VectorXd LpvStep::reconstruct_zeta(const AnchorPoint& anchor,
                                   const SchedulingPoint& p) const {
  const Eigen::Index nx = p.mu_x.size();
  return affine_zeta + a_zeta * (p.mu_x - anchor.x_meas) +
         b_zeta * (p.u - anchor.u_prev) +
         c_zeta * Eigen::Map<const VectorXd>(p.sigma.data(), nx * nx);
}

namespace {

std::vector<double> simpson_weights(int nodes) {
  if (nodes < 3 || nodes % 2 == 0)
    throw std::invalid_argument("ftc_factorize: quad_nodes must be odd and >= 3");
  const double h = 1.0 / (nodes - 1);
  std::vector<double> w(nodes, 0.0);
  w.front() = h / 3.0;
  w.back() = h / 3.0;
  for (int s = 1; s + 1 < nodes; ++s) w[s] = (s % 2 == 1 ? 4.0 : 2.0) * h / 3.0;
  return w;
}

LpvStep factorize_with_affine(const MomentMapBase& maps, const AnchorPoint& anchor,
                              const SchedulingPoint& query, const FtcOptions& opts,
                              const VectorXd& affine_theta, const VectorXd& affine_zeta) {
  const Eigen::Index nx = maps.state_dim();
  const Eigen::Index nu = maps.control_dim();
  query.validate();
  if (anchor.x_meas.size() != nx || anchor.u_prev.size() != nu ||
      query.mu_x.size() != nx || query.u.size() != nu)
    throw std::invalid_argument("ftc_factorize: dimension mismatch");

  LpvStep step;
  step.affine_theta = affine_theta;
  step.affine_zeta = affine_zeta;
  step.has_zeta = opts.want_zeta;
  step.a_theta.setZero(nx, nx);
  step.b_theta.setZero(nx, nu);
  step.c_theta.setZero(nx, nx * nx);
  if (opts.want_zeta) {
    step.a_zeta.setZero(nx * nx, nx);
    step.b_zeta.setZero(nx * nx, nu);
    step.c_zeta.setZero(nx * nx, nx * nx);
  }

  const VectorXd dx = query.mu_x - anchor.x_meas;
  const VectorXd du = query.u - anchor.u_prev;
  const double seg =
      std::max({dx.cwiseAbs().maxCoeff(), du.cwiseAbs().maxCoeff(),
                query.sigma.cwiseAbs().maxCoeff()});

  auto accumulate = [&](double w, const MomentJacobians& j) {
    step.a_theta += w * j.theta_mu;
    step.b_theta += w * j.theta_u;
    step.c_theta += w * j.theta_sigma;
    if (opts.want_zeta) {
      step.a_zeta += w * j.zeta_mu;
      step.b_zeta += w * j.zeta_u;
      step.c_zeta += w * j.zeta_sigma;
    }
  };

  if (seg <= opts.degenerate_tol) {
    accumulate(1.0, maps.jacobians(anchor.x_meas, anchor.u_prev,
                                   MatrixXd::Zero(nx, nx), opts.want_zeta));
    return step;
  }

  const auto weights = simpson_weights(opts.quad_nodes);
  for (int s = 0; s < opts.quad_nodes; ++s) {
    const double lambda = static_cast<double>(s) / (opts.quad_nodes - 1);
    const VectorXd mu = anchor.x_meas + lambda * dx;
    const VectorXd u = anchor.u_prev + lambda * du;
    const MatrixXd sigma = lambda * query.sigma;
    try {
      accumulate(weights[s], maps.jacobians(mu, u, sigma, opts.want_zeta));
    } catch (const NumericalError& e) {
      throw NumericalError("ftc_factorize: Jacobian failed at lambda=" +
                           std::to_string(lambda) + ": " + e.what());
    }
  }
  return step;
}

}  // namespace

LpvStep ftc_factorize(const MomentMapBase& maps, const AnchorPoint& anchor,
                      const SchedulingPoint& query, const FtcOptions& opts) {
  const Eigen::Index nx = maps.state_dim();
  VectorXd theta0;
  MatrixXd zeta0;
  maps.eval(anchor.x_meas, anchor.u_prev, MatrixXd::Zero(nx, nx), theta0, zeta0);
  return factorize_with_affine(maps, anchor, query, opts, theta0,
                               Eigen::Map<const VectorXd>(zeta0.data(), nx * nx));
}

std::vector<LpvStep> factorize_horizon(const MomentMapBase& maps, const AnchorPoint& anchor,
                                       const std::vector<SchedulingPoint>& schedule,
                                       const FtcOptions& opts) {
  const Eigen::Index nx = maps.state_dim();
  VectorXd theta0;
  MatrixXd zeta0;
  maps.eval(anchor.x_meas, anchor.u_prev, MatrixXd::Zero(nx, nx), theta0, zeta0);
  const VectorXd zeta0_vec = Eigen::Map<const VectorXd>(zeta0.data(), nx * nx);

  std::vector<LpvStep> steps(schedule.size());
  std::exception_ptr failure;
  std::mutex failure_mutex;
  parallel_for(static_cast<int>(schedule.size()), [&](int i) {
    try {
      steps[i] = factorize_with_affine(maps, anchor, schedule[i], opts, theta0, zeta0_vec);
    } catch (...) {
      std::lock_guard<std::mutex> lock(failure_mutex);
      if (!failure) failure = std::current_exception();
    }
  });
  if (failure) std::rethrow_exception(failure);
  return steps;
}

FunctionMomentMap::FunctionMomentMap(Eigen::Index nx, Eigen::Index nu, ThetaFn theta,
                                     ZetaFn zeta, double fd_step)
    : nx_(nx), nu_(nu), theta_(std::move(theta)), zeta_(std::move(zeta)), fd_step_(fd_step) {}

void FunctionMomentMap::eval(const VectorXd& mu_x, const VectorXd& u,
                             const MatrixXd& sigma_x, VectorXd& theta,
                             MatrixXd& zeta) const {
  theta = theta_(mu_x, u, sigma_x);
  zeta = zeta_ ? zeta_(mu_x, u, sigma_x) : MatrixXd::Zero(nx_, nx_);
}

MomentJacobians FunctionMomentMap::jacobians(const VectorXd& mu_x, const VectorXd& u,
                                             const MatrixXd& sigma_x, bool want_zeta) const {
  MomentJacobians jac;
  eval(mu_x, u, sigma_x, jac.theta, jac.zeta);

  auto pack = [&](const VectorXd& x) {
    // x packs (mu, u, vecSigma)
    const VectorXd mu = x.head(nx_);
    const VectorXd uu = x.segment(nx_, nu_);
    const MatrixXd sig = Eigen::Map<const MatrixXd>(x.tail(nx_ * nx_).data(), nx_, nx_);
    return std::make_tuple(mu, uu, sig);
  };
  VectorXd x0(nx_ + nu_ + nx_ * nx_);
  x0.head(nx_) = mu_x;
  x0.segment(nx_, nu_) = u;
  x0.tail(nx_ * nx_) = Eigen::Map<const VectorXd>(sigma_x.data(), nx_ * nx_);

  const MatrixXd jt = fd_jacobian(
      [&](const VectorXd& x) {
        auto [mu, uu, sig] = pack(x);
        return theta_(mu, uu, sig);
      },
      x0, fd_step_);
  jac.theta_mu = jt.leftCols(nx_);
  jac.theta_u = jt.middleCols(nx_, nu_);
  jac.theta_sigma = jt.rightCols(nx_ * nx_);

  if (want_zeta && zeta_) {
    const MatrixXd jz = fd_jacobian(
        [&](const VectorXd& x) {
          auto [mu, uu, sig] = pack(x);
          const MatrixXd z = zeta_(mu, uu, sig);
          return VectorXd(Eigen::Map<const VectorXd>(z.data(), nx_ * nx_));
        },
        x0, fd_step_);
    jac.zeta_mu = jz.leftCols(nx_);
    jac.zeta_u = jz.middleCols(nx_, nu_);
    jac.zeta_sigma = jz.rightCols(nx_ * nx_);
  } else {
    jac.zeta_mu.setZero(nx_ * nx_, nx_);
    jac.zeta_u.setZero(nx_ * nx_, nu_);
    jac.zeta_sigma.setZero(nx_ * nx_, nx_ * nx_);
  }
  return jac;
}

}  // namespace gpmpc
