// Acceptance suite: every criterion prints one PASS/FAIL line; the process
// exits nonzero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>
#include <vector>

#include "gpmpc/bench.hpp"
#include "gpmpc/ftc_lpv.hpp"
#include "gpmpc/mpc_qp.hpp"

using namespace gpmpc;

namespace {

int g_failures = 0;

void report(int id, const std::string& name, bool pass, const std::string& details) {
  std::printf("[%s] %02d %s: %s\n", pass ? "PASS" : "FAIL", id, name.c_str(),
              details.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

double now_s() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

std::mt19937_64 rng(2024);

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

SparseGpModel random_sparse_model(Eigen::Index nw, Eigen::Index nz, Eigen::Index m) {
  Dataset data;
  data.inputs = randn_mat(25, nw) * 1.2;
  data.outputs = randn_mat(25, nz);
  std::vector<Hyperparams> hyper;
  std::vector<MatrixXd> inducing;
  for (Eigen::Index i = 0; i < nz; ++i) {
    Hyperparams h;
    h.signal_variance = 0.5 + 0.2 * i;
    h.noise_variance = 0.05;
    h.lengthscales = (randn(nw).array().abs() * 0.3 + 1.0).matrix();
    hyper.push_back(h);
    inducing.push_back(randn_mat(m, nw));
  }
  return build_sparse_model(data, hyper, inducing);
}

// ---------------------------------------------------------------------------
// 1. moment matching vs Monte Carlo
void criterion_1() {
  const double t0 = now_s();
  bool pass = true;
  std::ostringstream detail;
  double worst_sigma = 0.0;

  const int n_samples = 1000000;
  std::normal_distribution<double> nd(0.0, 1.0);
  for (int model_idx = 0; model_idx < 20 && pass; ++model_idx) {
    const Eigen::Index nw = 2 + model_idx % 3;
    const Eigen::Index nz = 2;
    const SparseGpModel model = random_sparse_model(nw, nz, 4);
    const VectorXd mu = randn(nw);
    const MatrixXd sigma = random_psd(nw, 0.15);

    const GpMoments mm = mm_gp_moments(model, {mu, sigma});

    std::mt19937_64 gen(9000 + model_idx);
    Eigen::LLT<MatrixXd> llt(sigma + 1e-14 * MatrixXd::Identity(nw, nw));
    const MatrixXd chol = llt.matrixL();
    MatrixXd zs(n_samples, nz), ws(n_samples, nw);
    VectorXd e(nw);
    for (int s = 0; s < n_samples; ++s) {
      for (Eigen::Index i = 0; i < nw; ++i) e[i] = nd(gen);
      const VectorXd w = mu + chol * e;
      ws.row(s) = w.transpose();
      const GpPrediction p = sparse_predict(model, w);
      for (Eigen::Index i = 0; i < nz; ++i)
        zs(s, i) = p.mean[i] + std::sqrt(std::max(p.variance[i], 0.0)) * nd(gen);
    }
    const VectorXd z_mean = zs.colwise().mean().transpose();
    const MatrixXd zc = zs.rowwise() - z_mean.transpose();
    const MatrixXd wc = ws.rowwise() - ws.colwise().mean();
    const MatrixXd z_cov = zc.transpose() * zc / (n_samples - 1.0);
    const MatrixXd wz = wc.transpose() * zc / (n_samples - 1.0);

    auto check = [&](double got, double mc, double se, const char* what) {
      const double sig = std::abs(got - mc) / std::max(se, 1e-15);
      worst_sigma = std::max(worst_sigma, sig);
      if (sig > 3.0) {
        pass = false;
        detail << what << " off by " << sig << " SE on model " << model_idx << "; ";
      }
    };

    for (Eigen::Index i = 0; i < nz; ++i)
      check(mm.mean[i], z_mean[i], std::sqrt(z_cov(i, i) / n_samples), "mean");
    for (Eigen::Index i = 0; i < nz; ++i) {
      for (Eigen::Index j = 0; j < nz; ++j) {
        double m22 = 0.0;
        for (int s = 0; s < n_samples; ++s)
          m22 += zc(s, i) * zc(s, i) * zc(s, j) * zc(s, j);
        m22 /= n_samples;
        const double se =
            std::sqrt(std::max(m22 - z_cov(i, j) * z_cov(i, j), 0.0) / n_samples);
        check(mm.cov(i, j), z_cov(i, j), se, "covariance");
      }
    }
    for (Eigen::Index a = 0; a < nw; ++a) {
      for (Eigen::Index i = 0; i < nz; ++i) {
        double m22 = 0.0;
        for (int s = 0; s < n_samples; ++s)
          m22 += wc(s, a) * wc(s, a) * zc(s, i) * zc(s, i);
        m22 /= n_samples;
        const double se =
            std::sqrt(std::max(m22 - wz(a, i) * wz(a, i), 0.0) / n_samples);
        check(mm.cross(a, i), wz(a, i), se, "cross-covariance");
      }
    }
  }
  const double elapsed = now_s() - t0;
  if (elapsed > 120.0) {
    pass = false;
    detail << "runtime " << elapsed << " s exceeds 120 s; ";
  }
  std::ostringstream ok;
  ok << "20 models, worst deviation " << worst_sigma << " SE, " << elapsed << " s";
  report(1, "moment matching matches the 1e6-sample Monte Carlo oracle", pass,
         pass ? ok.str() : detail.str());
}

// ---------------------------------------------------------------------------
// 2. deterministic-input reduction
void criterion_2() {
  const double t0 = now_s();
  bool pass = true;
  double worst_mean = 0.0, worst_var = 0.0, worst_cross = 0.0;
  for (int t = 0; t < 30; ++t) {
    const Eigen::Index nw = 2 + t % 3;
    const SparseGpModel model = random_sparse_model(nw, 3, 4);
    const VectorXd mu = randn(nw);
    const GpMoments mm = mm_gp_moments(model, {mu, MatrixXd::Zero(nw, nw)});
    const GpPrediction p = sparse_predict(model, mu);
    worst_mean = std::max(worst_mean, (mm.mean - p.mean).cwiseAbs().maxCoeff());
    for (int i = 0; i < 3; ++i)
      worst_var = std::max(worst_var, std::abs(mm.cov(i, i) - p.variance[i]));
    worst_cross = std::max(worst_cross, mm.cross.cwiseAbs().maxCoeff());
  }
  pass = worst_mean < 1e-12 && worst_var < 1e-10 && worst_cross == 0.0;
  std::ostringstream d;
  d << "mean err " << worst_mean << ", var err " << worst_var << ", cross "
    << worst_cross << ", " << now_s() - t0 << " s";
  report(2, "zero input covariance reduces MM to the sparse posterior", pass, d.str());
}

// ---------------------------------------------------------------------------
// 3. VFE exactness at M = N
void criterion_3() {
  bool pass = true;
  std::ostringstream d;
  Hyperparams h;
  h.signal_variance = 1.0;
  h.noise_variance = 0.1;
  h.lengthscales = VectorXd::Constant(2, 0.25);

  Dataset data;
  data.inputs = randn_mat(50, 2) * 1.5;
  MatrixXd k = se_gram(h, data.inputs, data.inputs);
  k.diagonal().array() += 1e-10;
  data.outputs = MatrixXd(Eigen::LLT<MatrixXd>(k).matrixL()) * randn(50) +
                 std::sqrt(h.noise_variance) * randn(50);

  const auto full = gp_fit(data, {h});
  const auto sparse = build_sparse_model(data, {h}, {data.inputs});
  double worst_mean = 0.0, worst_var = 0.0;
  for (int t = 0; t < 40; ++t) {
    const VectorXd star = randn(2) * 1.5;
    const auto pf = gp_predict(full, star);
    const auto ps = sparse_predict(sparse, star);
    worst_mean = std::max(worst_mean, std::abs(ps.mean[0] - pf.mean[0]) /
                                          std::max(1.0, std::abs(pf.mean[0])));
    worst_var = std::max(worst_var, std::abs(ps.variance[0] - pf.variance[0]) /
                                        pf.variance[0]);
  }

  VectorXd theta(2 + 2 + 50 * 2);
  theta.head(4) = h.to_log();
  for (Eigen::Index r = 0; r < 50; ++r)
    theta.segment(4 + r * 2, 2) = data.inputs.row(r).transpose();
  const double bound = vfe_objective(data, theta, 50, 0);
  const double exact = nlml(data, h, 0);

  // The trace term evaluated directly.
  MatrixXd kuu = se_gram(h, data.inputs, data.inputs);
  kuu.diagonal().array() += 1e-10 * h.signal_variance;
  const MatrixXd a = Eigen::LLT<MatrixXd>(kuu).matrixL().solve(
      se_gram(h, data.inputs, data.inputs));
  const double trace_term =
      0.5 / h.noise_variance * (50.0 * h.signal_variance - a.squaredNorm());

  pass = worst_mean < 1e-6 && worst_var < 1e-6 && std::abs(trace_term) < 1e-8 &&
         std::abs(bound - exact) < 1e-6;
  d << "pred rel err (mean " << worst_mean << ", var " << worst_var
    << "), |bound-nlml| " << std::abs(bound - exact) << ", trace " << trace_term;
  report(3, "VFE with inducing = training inputs matches the full GP", pass, d.str());
}

// ---------------------------------------------------------------------------
// quadrotor moment-map fixture shared by criteria 4, 5 and 7
struct QuadMaps {
  QuadParams params = QuadParams::crazyflie();
  NominalModel nominal;
  SparseGpModel gp;
  std::unique_ptr<MomentModel> model;

  QuadMaps() {
    nominal = make_quad_nominal(params, 0.02);
    Dataset data;
    data.inputs.resize(30, 10);
    for (Eigen::Index t = 0; t < 30; ++t) {
      data.inputs.row(t).segment<3>(0) = (1.5 * randn(3)).transpose();
      data.inputs.row(t).segment<3>(3) = (0.25 * randn(3)).transpose();
      data.inputs(t, 6) = 0.33 + 0.05 * randn(1)[0];
      data.inputs.row(t).segment<3>(7) = (0.6 * randn(3)).transpose();
    }
    data.outputs = 0.4 * randn_mat(30, 3);
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
    gp = build_sparse_model(data, hyper, inducing);
    gp.input_indices = quad_gp_input_indices();

    PropagationSettings s;
    s.mode = PropagationMode::kMomentMatching;
    s.scale = 0.02;
    MatrixXd bz = MatrixXd::Zero(9, 3);
    bz.block<3, 3>(3, 0).setIdentity();
    s.output_selector = bz;
    model = std::make_unique<MomentModel>(&nominal, &gp, s);
  }

  VectorXd state() {
    VectorXd x(9);
    x.segment<3>(0) = randn(3) * 0.8;
    x.segment<3>(3) = randn(3) * 1.0;
    x.segment<3>(6) = randn(3) * 0.2;
    return x;
  }
  VectorXd input() {
    VectorXd u(4);
    u << 0.33 + 0.04 * randn(1)[0], 0.5 * randn(3);
    return u;
  }
};

// 4. FTC exactness along a scheduling trajectory
void criterion_4(QuadMaps& q) {
  const VectorXd x0 = q.state();
  const VectorXd u_prev = q.input();
  std::vector<VectorXd> inputs;
  for (int i = 0; i < 12; ++i) inputs.push_back(u_prev + 0.08 * randn(4));
  const auto traj = q.model->rollout(x0, inputs);
  std::vector<SchedulingPoint> schedule(12);
  for (int i = 0; i < 12; ++i)
    schedule[i] = SchedulingPoint{traj[i].mean, inputs[i], traj[i].cov};
  const AnchorPoint anchor{x0, u_prev};

  auto lpv_error = [&](int nodes) {
    FtcOptions o;
    o.quad_nodes = nodes;
    const auto steps = factorize_horizon(*q.model, anchor, schedule, o);
    VectorXd mu = x0;
    MatrixXd sigma = MatrixXd::Zero(9, 9);
    double err = 0.0;
    for (int i = 0; i < 12; ++i) {
      const SchedulingPoint p{mu, inputs[i], sigma};
      const VectorXd mu_next = steps[i].reconstruct_theta(anchor, p);
      const VectorXd sig_next = steps[i].reconstruct_zeta(anchor, p);
      mu = mu_next;
      sigma = Eigen::Map<const MatrixXd>(sig_next.data(), 9, 9);
      err = std::max(err, (mu - traj[i + 1].mean).cwiseAbs().maxCoeff());
      err = std::max(err, (sigma - traj[i + 1].cov).cwiseAbs().maxCoeff());
    }
    return err;
  };

  const double e9 = lpv_error(9);
  const double e17 = lpv_error(17);
  const bool pass = e9 < 1e-6 && e9 / std::max(e17, 1e-18) >= 10.0;
  std::ostringstream d;
  d << "inf-norm error " << e9 << " at 9 nodes, " << e17 << " at 17 (ratio "
    << e9 / std::max(e17, 1e-18) << ")";
  report(4, "LPV rollout matches the nonlinear moment rollout", pass, d.str());
}

// 5. Jacobian correctness
void criterion_5(QuadMaps& q) {
  FunctionMomentMap fd_map(
      9, 4,
      [&](const VectorXd& mu, const VectorXd& u, const MatrixXd& sig) {
        VectorXd theta;
        MatrixXd zeta;
        q.model->eval(mu, u, sig, theta, zeta);
        return theta;
      },
      [&](const VectorXd& mu, const VectorXd& u, const MatrixXd& sig) {
        VectorXd theta;
        MatrixXd zeta;
        q.model->eval(mu, u, sig, theta, zeta);
        return zeta;
      },
      1e-5);
  double worst = 0.0;
  for (int t = 0; t < 20; ++t) {
    const VectorXd x = q.state();
    const VectorXd u = q.input();
    const MatrixXd sigma = random_psd(9, 0.01);
    const MomentJacobians got = q.model->jacobians(x, u, sigma, true);
    const MomentJacobians ref = fd_map.jacobians(x, u, sigma, true);
    worst = std::max({worst, rel_error(got.theta_mu, ref.theta_mu),
                      rel_error(got.theta_u, ref.theta_u),
                      rel_error(got.theta_sigma, ref.theta_sigma),
                      rel_error(got.zeta_mu, ref.zeta_mu),
                      rel_error(got.zeta_u, ref.zeta_u),
                      rel_error(got.zeta_sigma, ref.zeta_sigma)});
  }
  std::ostringstream d;
  d << "worst block rel err " << worst << " over 20 points";
  report(5, "moment-map Jacobians match central finite differences", worst < 1e-5,
         d.str());
}

// ---------------------------------------------------------------------------
// 6. QP solver vs oracles
void criterion_6() {
  bool pass = true;
  std::ostringstream d;
  double worst = 0.0;
  int max_warm_iters = 0;

  for (int t = 0; t < 50 && pass; ++t) {
    const Eigen::Index n = 2 + t % 9;
    const Eigen::Index m = 1 + t % n;
    const MatrixXd pd = randn_mat(n, n);
    const MatrixXd p = pd * pd.transpose() + MatrixXd::Identity(n, n);
    const VectorXd qv = randn(n);
    const MatrixXd a = randn_mat(m, n);
    const VectorXd b = randn(m);
    MatrixXd kkt = MatrixXd::Zero(n + m, n + m);
    kkt.topLeftCorner(n, n) = p;
    kkt.topRightCorner(n, m) = a.transpose();
    kkt.bottomLeftCorner(m, n) = a;
    VectorXd rhs(n + m);
    rhs << -qv, b;
    const VectorXd xstar = kkt.fullPivLu().solve(rhs).head(n);

    QpProblem prob;
    prob.p = p.sparseView();
    prob.q = qv;
    prob.a = a.sparseView();
    prob.l = b;
    prob.u = b;
    const QpSolution sol = qp_solve(prob);
    if (sol.status != QpStatus::kSolved) {
      pass = false;
      d << "equality QP " << t << " not solved; ";
      break;
    }
    worst = std::max(worst, (sol.x - xstar).cwiseAbs().maxCoeff());
    const QpSolution warm = qp_solve(prob, &sol);
    max_warm_iters = std::max(max_warm_iters, warm.iterations);
  }

  for (int t = 0; t < 50 && pass; ++t) {
    const Eigen::Index n = 2 + t % 5;
    const MatrixXd pd = randn_mat(n, n);
    const MatrixXd p = pd * pd.transpose() + MatrixXd::Identity(n, n);
    const VectorXd qv = 2.0 * randn(n);
    const VectorXd l = -randn(n).cwiseAbs();
    const VectorXd u = randn(n).cwiseAbs();

    // Exhaustive active-set oracle.
    VectorXd best;
    double best_obj = std::numeric_limits<double>::infinity();
    const int combos = static_cast<int>(std::pow(3, n));
    for (int code = 0; code < combos; ++code) {
      int c = code;
      std::vector<int> state(n);
      for (Eigen::Index i = 0; i < n; ++i) {
        state[i] = c % 3;
        c /= 3;
      }
      VectorXd x(n);
      std::vector<Eigen::Index> free_idx;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (state[i] == 0) {
          free_idx.push_back(i);
          x[i] = 0.0;
        } else {
          x[i] = state[i] == 1 ? l[i] : u[i];
        }
      }
      if (!free_idx.empty()) {
        const Eigen::Index nf = static_cast<Eigen::Index>(free_idx.size());
        MatrixXd pff(nf, nf);
        VectorXd rhs2(nf);
        for (Eigen::Index aa = 0; aa < nf; ++aa) {
          rhs2[aa] = -qv[free_idx[aa]];
          for (Eigen::Index bb = 0; bb < nf; ++bb)
            pff(aa, bb) = p(free_idx[aa], free_idx[bb]);
          for (Eigen::Index i = 0; i < n; ++i)
            if (state[i] != 0) rhs2[aa] -= p(free_idx[aa], i) * x[i];
        }
        const VectorXd xf = pff.ldlt().solve(rhs2);
        for (Eigen::Index aa = 0; aa < nf; ++aa) x[free_idx[aa]] = xf[aa];
      }
      const VectorXd g = p * x + qv;
      bool ok = true;
      for (Eigen::Index i = 0; i < n && ok; ++i) {
        if (x[i] < l[i] - 1e-9 || x[i] > u[i] + 1e-9) ok = false;
        if (state[i] == 0 && std::abs(g[i]) > 1e-8) ok = false;
        if (state[i] == 1 && g[i] < -1e-8) ok = false;
        if (state[i] == 2 && g[i] > 1e-8) ok = false;
      }
      if (!ok) continue;
      const double obj = 0.5 * x.dot(p * x) + qv.dot(x);
      if (obj < best_obj) {
        best_obj = obj;
        best = x;
      }
    }

    QpProblem prob;
    prob.p = p.sparseView();
    prob.q = qv;
    prob.a = MatrixXd::Identity(n, n).sparseView();
    prob.l = l;
    prob.u = u;
    const QpSolution sol = qp_solve(prob);
    if (sol.status != QpStatus::kSolved || best.size() != n) {
      pass = false;
      d << "box QP " << t << " not solved; ";
      break;
    }
    worst = std::max(worst, (sol.x - best).cwiseAbs().maxCoeff());
    const QpSolution warm = qp_solve(prob, &sol);
    max_warm_iters = std::max(max_warm_iters, warm.iterations);
  }

  pass = pass && worst < 1e-6 && max_warm_iters <= 5;
  std::ostringstream ok;
  ok << "100 problems, worst |x - oracle| " << worst << ", warm re-solve <= "
     << max_warm_iters << " iterations";
  report(6, "QP solutions match KKT/active-set oracles", pass,
         pass ? ok.str() : d.str());
}

// ---------------------------------------------------------------------------
// 7. fixed-point consistency of the iterated LPV scheme
void criterion_7(QuadMaps& q) {
  bool pass = true;
  std::ostringstream d;
  ControllerConfig cfg = ControllerConfig::quad_default();
  cfg.eps_lpv = 1e-8;
  cfg.max_iters = 80;

  for (CovarianceMode cov : {CovarianceMode::kPrecomputed, CovarianceMode::kOptimized}) {
    cfg.covariance = cov;
    GpmpcController ctrl(q.nominal, &q.gp, cfg);
    VectorXd x0 = VectorXd::Zero(9);
    x0[2] = 1.0;
    x0.segment<3>(3) = Vector3d(0.4, -0.3, 0.1);
    std::vector<VectorXd> r(13);
    for (int i = 0; i <= 12; ++i) {
      r[i] = VectorXd::Zero(9);
      r[i].segment<3>(0) = Vector3d(0.2, 0.1, 1.1);
    }
    StepDiagnostics diag;
    ctrl.mpc_step(x0, r, &diag);
    // Second step from a propagated state exercises the warm-started path.
    StepDiagnostics diag2;
    const VectorXd x1 = q.nominal.dynamics(x0, ctrl.state().prev_inputs.front());
    const VectorXd u_anchor = ctrl.state().last_applied;  // u(k-1) of the next step
    ctrl.mpc_step(x1, r, &diag2);
    if (!diag2.converged) {
      pass = false;
      d << "no convergence to 1e-8 (" << (cov == CovarianceMode::kPrecomputed
                                              ? "precov"
                                              : "cov")
        << "); ";
      continue;
    }

    // Factorize at the converged schedule and check that the LPV model and
    // the nonlinear moment rollout coincide along the converged inputs.
    const auto& schedule = ctrl.state().schedule;
    const AnchorPoint anchor{x1, u_anchor};
    FtcOptions fo;
    fo.quad_nodes = cfg.quad_nodes;
    fo.want_zeta = cov == CovarianceMode::kOptimized;
    const auto steps = factorize_horizon(*q.model, anchor, schedule, fo);
    std::vector<VectorXd> u_star(ctrl.state().prev_inputs);
    const auto traj = q.model->rollout(x1, u_star, nullptr);

    // The converged schedule must itself satisfy the nonlinear recursion.
    double err = 0.0;
    for (int i = 0; i < 12; ++i) {
      err = std::max(err, (schedule[i].mu_x - traj[i].mean).cwiseAbs().maxCoeff());
      err = std::max(err, (schedule[i].sigma - traj[i].cov).cwiseAbs().maxCoeff());
    }
    // And the LPV reconstruction along it must agree with the rollout.
    VectorXd mu = x1;
    MatrixXd sigma = MatrixXd::Zero(9, 9);
    for (int i = 0; i < 12; ++i) {
      const SchedulingPoint p{mu, u_star[i], sigma};
      const VectorXd mu_next = steps[i].reconstruct_theta(anchor, p);
      mu = mu_next;
      if (fo.want_zeta) {
        const VectorXd sv = steps[i].reconstruct_zeta(anchor, p);
        sigma = Eigen::Map<const MatrixXd>(sv.data(), 9, 9);
      } else {
        sigma = traj[i + 1].cov;
      }
      err = std::max(err, (mu - traj[i + 1].mean).cwiseAbs().maxCoeff());
    }
    if (err > 1e-5) {
      pass = false;
      d << "nonlinear residual " << err << "; ";
    } else {
      d << (cov == CovarianceMode::kPrecomputed ? "precov" : "cov") << " residual "
        << err << " in " << diag2.iterations << " iterations; ";
    }
  }
  report(7, "converged iterates satisfy the nonlinear recursion", pass, d.str());
}

// ---------------------------------------------------------------------------
// 8-10: full pipeline
struct Pipeline {
  RunConfig cfg;
  Dataset data;
  SparseGpModel model;
  BenchmarkReport baseline, mm_precov;
  double setup_seconds = 0.0;

  Pipeline() {
    const double t0 = now_s();
    cfg.seed = 1;
    cfg.trajectory = "lemniscate";
    cfg.duration = 10.0;
    data = collect_dataset(cfg, nullptr);
    model = train_models(data, cfg, nullptr);
    setup_seconds = now_s() - t0;
  }
};

void criterion_8(Pipeline& pl) {
  const double t0 = now_s();
  RunConfig cfg = pl.cfg;
  cfg.variant = "baseline";
  const BenchResult rb = run_benchmark(cfg, nullptr);
  cfg.variant = "lpv-mm-precov";
  const BenchResult rg = run_benchmark(cfg, &pl.model);
  pl.baseline = rb.report;
  pl.mm_precov = rg.report;

  std::vector<double> iters;
  for (const auto& dd : rg.diags) iters.push_back(dd.iterations);
  std::sort(iters.begin(), iters.end());
  const double median = iters.empty() ? 99.0 : iters[iters.size() / 2];
  const double elapsed = pl.setup_seconds + (now_s() - t0);

  const bool pass = !rb.report.failed && !rg.report.failed &&
                    rg.report.rmse_3d_mm <= rb.report.rmse_3d_mm / 3.0 &&
                    median <= 4.0 && elapsed < 600.0;
  std::ostringstream d;
  d << "baseline " << rb.report.rmse_3d_mm << " mm vs lpv-mm-precov "
    << rg.report.rmse_3d_mm << " mm (ratio "
    << rb.report.rmse_3d_mm / rg.report.rmse_3d_mm << "), median iterations " << median
    << ", pipeline " << elapsed << " s";
  report(8, "closed-loop lemniscate tracking improves 3x over the baseline", pass,
         d.str());
}

void criterion_9(Pipeline& pl) {
  const SweepResult sweep = sweep_inducing(pl.cfg, pl.data, {2, 4, 8, 16});
  double rmse4 = -1.0, rmse16 = -1.0;
  bool monotone = true;
  std::ostringstream d;
  for (size_t i = 0; i < sweep.rows.size(); ++i) {
    const auto& row = sweep.rows[i];
    d << "M=" << row.num_inducing << ": " << row.rmse_3d_mm << " mm, "
      << row.avg_step_time_ms << " ms; ";
    if (row.num_inducing == 4) rmse4 = row.rmse_3d_mm;
    if (row.num_inducing == 16) rmse16 = row.rmse_3d_mm;
    if (i > 0 && row.avg_step_time_ms < 0.85 * sweep.rows[i - 1].avg_step_time_ms)
      monotone = false;
  }
  const bool pass = rmse4 > 0.0 && rmse16 > 0.0 && rmse4 <= 1.2 * rmse16 && monotone;
  report(9, "tracking saturates by four inducing points while cost grows", pass, d.str());
}

void criterion_10(Pipeline& pl) {
  RunConfig cfg = pl.cfg;
  cfg.duration = 2.0;
  auto time_of = [&](const std::string& variant) {
    cfg.variant = variant;
    const BenchResult r = run_benchmark(cfg, &pl.model);
    return r.report.avg_step_time_ms;
  };
  const double tp = time_of("lpv-taylor-precov");
  const double mp = time_of("lpv-mm-precov");
  const double tc = time_of("lpv-taylor-cov");
  const double mc = time_of("lpv-mm-cov");
  const bool pass = tp < tc && mp < mc && tp < mp && tc < mc;
  std::ostringstream d;
  d << "taylor-precov " << tp << " ms, mm-precov " << mp << " ms, taylor-cov " << tc
    << " ms, mm-cov " << mc << " ms";
  report(10, "per-step time orders precov < cov and taylor < mm", pass, d.str());
}

// ---------------------------------------------------------------------------
// 11. chance-constraint tightening
void criterion_11() {
  bool pass = true;
  std::ostringstream d;
  const double sigma2 = 0.36;
  std::mt19937_64 gen(31);
  std::normal_distribution<double> nd(0.0, std::sqrt(sigma2));
  for (double px : {0.8, 0.95, 0.99}) {
    const double b = 0.7;
    const double tightened =
        tighten_halfspace(VectorXd::Ones(1), b, MatrixXd::Constant(1, 1, sigma2), px);
    const int n = 1000000;
    int violations = 0;
    for (int i = 0; i < n; ++i)
      if (tightened + nd(gen) > b) ++violations;
    const double rate = static_cast<double>(violations) / n;
    const double se = std::sqrt(px * (1.0 - px) / n);
    d << "p=" << px << ": rate " << rate << " vs " << 1.0 - px << "; ";
    if (rate > (1.0 - px) + 3.0 * se) pass = false;
  }
  report(11, "tightened boundaries hold the requested violation level", pass, d.str());
}

// ---------------------------------------------------------------------------
// 12. quadrotor sanity
void criterion_12() {
  bool pass = true;
  std::ostringstream d;
  const QuadParams p = QuadParams::crazyflie();

  { // hover regulation over 10 s
    RunConfig cfg;
    cfg.variant = "baseline";
    cfg.trajectory = "hover";
    cfg.duration = 10.0;
    cfg.aero = false;
    const BenchResult r = run_benchmark(cfg, nullptr);
    double worst = 0.0;
    for (Eigen::Index k = 0; k < r.log.size(); ++k)
      worst = std::max(worst, (r.log.outer_state[k].head<3>() -
                               r.log.reference[k].head<3>())
                                  .norm());
    d << "hover max error " << worst * 1000.0 << " mm; ";
    if (r.report.failed || worst > 1e-3) pass = false;
  }
  { // allocation round trip
    double worst = 0.0;
    for (int t = 0; t < 50; ++t) {
      const double thrust = 0.15 + 0.02 * (t % 10);
      const Eigen::Vector3d tau = 1e-4 * Eigen::Vector3d::Random();
      const Allocation a = allocate(thrust, tau, p);
      if (a.saturated) continue;
      Eigen::Vector4d target;
      target << thrust, tau;
      worst = std::max(worst,
                       (allocation_matrix(p) * a.thrusts - target).cwiseAbs().maxCoeff());
    }
    d << "allocation round-trip err " << worst << "; ";
    if (worst > 1e-12) pass = false;
  }
  { // ballistic fall
    TruthState s;
    s.position.z() = 10.0;
    QuadParams noaero = p;
    noaero.k_aero.setZero();
    double t = 0.0;
    for (int i = 0; i < 1000; ++i) {
      truth_rk4_step(s, Eigen::Vector4d::Zero(), noaero, Eigen::Vector3d::Zero(), 5e-4);
      t += 5e-4;
    }
    const double expect = 10.0 - 0.5 * p.gravity * t * t;
    d << "free-fall error " << std::abs(s.position.z() - expect);
    if (std::abs(s.position.z() - expect) > 1e-9) pass = false;
  }
  report(12, "hover regulation, allocation round trip and ballistic fall", pass, d.str());
}

}  // namespace

int main() {
  const double t0 = now_s();
  criterion_1();
  criterion_2();
  criterion_3();
  QuadMaps maps;
  criterion_4(maps);
  criterion_5(maps);
  criterion_6();
  criterion_7(maps);
  Pipeline pipeline;
  criterion_8(pipeline);
  criterion_9(pipeline);
  criterion_10(pipeline);
  criterion_11();
  criterion_12();
  std::printf("acceptance total: %.1f s, %d failure(s)\n", now_s() - t0, g_failures);
  return g_failures == 0 ? 0 : 1;
}
