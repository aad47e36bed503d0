#include <doctest.h>

#include <cmath>
#include <random>

#include "gpmpc/ftc_lpv.hpp"
#include "gpmpc/quad.hpp"

using namespace gpmpc;

namespace {

std::mt19937_64 rng(41);

VectorXd randn(Eigen::Index n) {
  std::normal_distribution<double> d(0.0, 1.0);
  VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = d(rng);
  return v;
}

MatrixXd randn_mat(Eigen::Index r, Eigen::Index c) {
  MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i) m.row(i) = randn(c).transpose();
  return m;
}

MatrixXd random_psd(Eigen::Index n, double scale) {
  const MatrixXd a = randn_mat(n, n);
  return scale * (a * a.transpose()) / n;
}

// A plausible residual GP over (vel, angles, input): n_w=10, n_z=3, M=4.
SparseGpModel quad_residual_gp() {
  Dataset data;
  const Eigen::Index n = 30;
  data.inputs.resize(n, 10);
  for (Eigen::Index t = 0; t < n; ++t) {
    data.inputs.row(t).segment<3>(0) = (1.5 * randn(3)).transpose();
    data.inputs.row(t).segment<3>(3) = (0.25 * randn(3)).transpose();
    data.inputs(t, 6) = 0.33 + 0.05 * randn(1)[0];
    data.inputs.row(t).segment<3>(7) = (0.6 * randn(3)).transpose();
  }
  data.outputs = 0.4 * randn_mat(n, 3);
  std::vector<Hyperparams> hyper(3);
  std::vector<MatrixXd> inducing;
  for (int i = 0; i < 3; ++i) {
    hyper[i].signal_variance = 0.2 + 0.05 * i;
    hyper[i].noise_variance = 0.02;
    VectorXd ls(10);
    ls << 4.0, 4.0, 4.0, 1.0, 1.0, 1.0, 0.5, 2.0, 2.0, 2.0;
    hyper[i].lengthscales = ls * (1.0 + 0.2 * i);
    inducing.push_back(data.inputs.topRows(4));
  }
  auto model = build_sparse_model(data, hyper, inducing);
  model.input_indices = {3, 4, 5, 6, 7, 8, 9, 10, 11, 12};
  return model;
}

MomentModel quad_moment_model(const SparseGpModel* gp, PropagationMode mode,
                              const NominalModel& nominal) {
  PropagationSettings s;
  s.mode = mode;
  s.scale = 0.02;
  if (gp) {
    MatrixXd bz = MatrixXd::Zero(9, 3);
    bz.block<3, 3>(3, 0).setIdentity();
    s.output_selector = bz;
  }
  return MomentModel(&nominal, gp, s);
}

VectorXd plausible_state() {
  VectorXd x(9);
  x.segment<3>(0) = randn(3) * 0.8;
  x.segment<3>(3) = randn(3) * 1.0;
  x.segment<3>(6) = randn(3) * 0.2;
  return x;
}

VectorXd plausible_input() {
  VectorXd u(4);
  u << 0.33 + 0.04 * randn(1)[0], 0.5 * randn(3);
  return u;
}

}  // namespace

TEST_CASE("scalar quadratic map is integrated exactly by Simpson") {
  FunctionMomentMap map(
      1, 1,
      [](const VectorXd& mu, const VectorXd&, const MatrixXd&) {
        VectorXd out(1);
        out[0] = mu[0] * mu[0];
        return out;
      },
      nullptr);
  AnchorPoint anchor{VectorXd::Constant(1, 1.0), VectorXd::Zero(1)};
  SchedulingPoint query{VectorXd::Constant(1, 3.0), VectorXd::Zero(1), MatrixXd::Zero(1, 1)};
  const LpvStep step = ftc_factorize(map, anchor, query);
  CHECK(step.a_theta(0, 0) == doctest::Approx(4.0).epsilon(1e-9));
  const VectorXd rec = step.reconstruct_theta(anchor, query);
  CHECK(rec[0] == doctest::Approx(9.0).epsilon(1e-9));
}

TEST_CASE("affine maps factorize to constant blocks with exact reconstruction") {
  const MatrixXd a = randn_mat(3, 3);
  const MatrixXd b = randn_mat(3, 2);
  const VectorXd c = randn(3);
  FunctionMomentMap map(
      3, 2,
      [=](const VectorXd& mu, const VectorXd& u, const MatrixXd&) -> VectorXd {
        return a * mu + b * u + c;
      },
      nullptr);
  AnchorPoint anchor{randn(3), randn(2)};
  SchedulingPoint query{randn(3), randn(2), random_psd(3, 0.1)};
  const LpvStep step = ftc_factorize(map, anchor, query);
  CHECK(rel_error(step.a_theta, a) < 1e-9);
  CHECK(rel_error(step.b_theta, b) < 1e-9);
  CHECK(step.c_theta.cwiseAbs().maxCoeff() < 1e-9);
  const VectorXd direct = a * query.mu_x + b * query.u + c;
  CHECK((step.reconstruct_theta(anchor, query) - direct).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("moment-map jacobians match finite differences on the quadrotor") {
  const QuadParams params = QuadParams::crazyflie();
  const NominalModel nominal = make_quad_nominal(params, 0.02);
  const SparseGpModel gp = quad_residual_gp();

  for (PropagationMode mode : {PropagationMode::kMomentMatching, PropagationMode::kTaylor}) {
    const MomentModel model = quad_moment_model(&gp, mode, nominal);
    FunctionMomentMap fd_map(
        9, 4,
        [&](const VectorXd& mu, const VectorXd& u, const MatrixXd& sig) {
          VectorXd theta;
          MatrixXd zeta;
          model.eval(mu, u, sig, theta, zeta);
          return theta;
        },
        [&](const VectorXd& mu, const VectorXd& u, const MatrixXd& sig) {
          VectorXd theta;
          MatrixXd zeta;
          model.eval(mu, u, sig, theta, zeta);
          return zeta;
        },
        1e-5);

    for (int t = 0; t < 4; ++t) {
      const VectorXd x = plausible_state();
      const VectorXd u = plausible_input();
      const MatrixXd sigma = random_psd(9, 0.01);
      const MomentJacobians got = model.jacobians(x, u, sigma, true);
      const MomentJacobians ref = fd_map.jacobians(x, u, sigma, true);
      CHECK(rel_error(got.theta_mu, ref.theta_mu) < 1e-5);
      CHECK(rel_error(got.theta_u, ref.theta_u) < 1e-5);
      CHECK(rel_error(got.theta_sigma, ref.theta_sigma) < 1e-5);
      CHECK(rel_error(got.zeta_mu, ref.zeta_mu) < 1e-5);
      CHECK(rel_error(got.zeta_u, ref.zeta_u) < 1e-5);
      CHECK(rel_error(got.zeta_sigma, ref.zeta_sigma) < 1e-5);
    }
  }
}

TEST_CASE("variance-to-mean coupling appears under MM and vanishes under Taylor") {
  const QuadParams params = QuadParams::crazyflie();
  const NominalModel nominal = make_quad_nominal(params, 0.02);
  const SparseGpModel gp = quad_residual_gp();
  const VectorXd x = plausible_state();
  const VectorXd u = plausible_input();
  const MatrixXd sigma = MatrixXd::Zero(9, 9);

  const MomentModel mm = quad_moment_model(&gp, PropagationMode::kMomentMatching, nominal);
  const MomentModel ty = quad_moment_model(&gp, PropagationMode::kTaylor, nominal);
  CHECK(mm.jacobians(x, u, sigma, false).theta_sigma.cwiseAbs().maxCoeff() > 1e-8);
  CHECK(ty.jacobians(x, u, sigma, false).theta_sigma.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("covariance jacobian of a linear model acts as the Kronecker square") {
  NominalModel lin;
  lin.n_x = 3;
  lin.n_u = 1;
  const MatrixXd a = 0.5 * randn_mat(3, 3);
  const MatrixXd b = randn_mat(3, 1);
  lin.dynamics = [=](const VectorXd& x, const VectorXd& u) -> VectorXd {
    return a * x + b * u;
  };
  lin.jacobian = [=](const VectorXd&, const VectorXd&) {
    MatrixXd j(3, 4);
    j << a, b;
    return j;
  };
  const MomentModel model(&lin, nullptr, PropagationSettings{});
  const MomentJacobians jac =
      model.jacobians(randn(3), randn(1), random_psd(3, 0.2), true);
  // On symmetric perturbations d zeta = A S A^T, the Kronecker-square action.
  for (int t = 0; t < 5; ++t) {
    MatrixXd s = randn_mat(3, 3);
    s = ((s + s.transpose()) * 0.5).eval();
    const VectorXd got = jac.zeta_sigma * Eigen::Map<const VectorXd>(s.data(), 9);
    const MatrixXd expect = a * s * a.transpose();
    CHECK((got - Eigen::Map<const VectorXd>(expect.data(), 9)).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("reconstruction identity on the quadrotor maps") {
  const QuadParams params = QuadParams::crazyflie();
  const NominalModel nominal = make_quad_nominal(params, 0.02);
  const SparseGpModel gp = quad_residual_gp();
  const MomentModel model =
      quad_moment_model(&gp, PropagationMode::kMomentMatching, nominal);

  const VectorXd x0 = plausible_state();
  const VectorXd u0 = plausible_input();
  AnchorPoint anchor{x0, u0};

  double res9_theta = 0.0, res17_theta = 0.0;
  double res9_zeta = 0.0, res17_zeta = 0.0;
  for (int t = 0; t < 3; ++t) {
    SchedulingPoint query{x0 + 0.3 * randn(9), u0 + 0.1 * randn(4), random_psd(9, 0.004)};
    VectorXd theta_direct;
    MatrixXd zeta_direct;
    model.eval(query.mu_x, query.u, query.sigma, theta_direct, zeta_direct);
    const VectorXd zeta_vec = Eigen::Map<const VectorXd>(zeta_direct.data(), 81);

    FtcOptions o9, o17;
    o9.quad_nodes = 9;
    o17.quad_nodes = 17;
    const LpvStep s9 = ftc_factorize(model, anchor, query, o9);
    const LpvStep s17 = ftc_factorize(model, anchor, query, o17);
    res9_theta = std::max(res9_theta,
                          (s9.reconstruct_theta(anchor, query) - theta_direct)
                              .cwiseAbs().maxCoeff());
    res17_theta = std::max(res17_theta,
                           (s17.reconstruct_theta(anchor, query) - theta_direct)
                               .cwiseAbs().maxCoeff());
    res9_zeta = std::max(res9_zeta,
                         (s9.reconstruct_zeta(anchor, query) - zeta_vec)
                             .cwiseAbs().maxCoeff());
    res17_zeta = std::max(res17_zeta,
                          (s17.reconstruct_zeta(anchor, query) - zeta_vec)
                              .cwiseAbs().maxCoeff());
  }
  CHECK(res9_theta < 1e-6);
  CHECK(res9_zeta < 1e-6);
  CHECK(res17_theta < 1e-8);
  CHECK(res17_zeta < 1e-8);
  // Composite Simpson is fourth order: 9 -> 17 nodes contracts the
  // residual by well over 10x.
  CHECK(res9_theta / std::max(res17_theta, 1e-18) > 10.0);
}

TEST_CASE("anchor self-consistency: zero segment keeps only the affine terms") {
  const QuadParams params = QuadParams::crazyflie();
  const NominalModel nominal = make_quad_nominal(params, 0.02);
  const SparseGpModel gp = quad_residual_gp();
  const MomentModel model =
      quad_moment_model(&gp, PropagationMode::kMomentMatching, nominal);
  const VectorXd x0 = plausible_state();
  const VectorXd u0 = plausible_input();
  AnchorPoint anchor{x0, u0};
  SchedulingPoint query{x0, u0, MatrixXd::Zero(9, 9)};
  const LpvStep step = ftc_factorize(model, anchor, query);
  VectorXd theta;
  MatrixXd zeta;
  model.eval(x0, u0, MatrixXd::Zero(9, 9), theta, zeta);
  CHECK((step.reconstruct_theta(anchor, query) - theta).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((step.affine_theta - theta).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("LPV rollout reproduces the nonlinear moment rollout along its schedule") {
  const QuadParams params = QuadParams::crazyflie();
  const NominalModel nominal = make_quad_nominal(params, 0.02);
  const SparseGpModel gp = quad_residual_gp();
  const MomentModel model =
      quad_moment_model(&gp, PropagationMode::kMomentMatching, nominal);

  const VectorXd x0 = plausible_state();
  const VectorXd u_prev = plausible_input();
  std::vector<VectorXd> inputs;
  for (int i = 0; i < 12; ++i) inputs.push_back(u_prev + 0.05 * randn(4));

  const auto traj = model.rollout(x0, inputs);
  std::vector<SchedulingPoint> schedule(12);
  for (int i = 0; i < 12; ++i)
    schedule[i] = SchedulingPoint{traj[i].mean, inputs[i], traj[i].cov};

  AnchorPoint anchor{x0, u_prev};
  const auto steps = factorize_horizon(model, anchor, schedule);

  VectorXd mu = x0;
  MatrixXd sigma = MatrixXd::Zero(9, 9);
  double max_err = 0.0;
  for (int i = 0; i < 12; ++i) {
    const SchedulingPoint p{mu, inputs[i], sigma};
    const VectorXd mu_next = steps[i].reconstruct_theta(anchor, p);
    const VectorXd sig_next = steps[i].reconstruct_zeta(anchor, p);
    mu = mu_next;
    sigma = Eigen::Map<const MatrixXd>(sig_next.data(), 9, 9);
    max_err = std::max(max_err, (mu - traj[i + 1].mean).cwiseAbs().maxCoeff());
    max_err = std::max(max_err, (sigma - traj[i + 1].cov).cwiseAbs().maxCoeff());
  }
  CHECK(max_err < 1e-6);
}

TEST_CASE("quadrature options are validated") {
  FunctionMomentMap map(
      1, 1,
      [](const VectorXd& mu, const VectorXd&, const MatrixXd&) { return mu; }, nullptr);
  AnchorPoint anchor{VectorXd::Zero(1), VectorXd::Zero(1)};
  SchedulingPoint query{VectorXd::Ones(1), VectorXd::Zero(1), MatrixXd::Zero(1, 1)};
  FtcOptions opts;
  opts.quad_nodes = 8;
  CHECK_THROWS_AS(ftc_factorize(map, anchor, query, opts), std::invalid_argument);
}
