#include "gpmpc/controller.hpp"

#include <chrono>
#include <cmath>

#include "gpmpc/mpc_qp.hpp"

namespace gpmpc {

namespace {

double ms_since(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
      .count();
}

}  // namespace

void ControllerConfig::normalize_polytopes() {
  for (auto* poly : {&state_polytope, &input_polytope}) {
    for (Halfspace& hs : *poly) {
      const double n = hs.a.norm();
      if (n <= 0.0) throw std::invalid_argument("ControllerConfig: zero half-space normal");
      hs.a /= n;
      hs.b /= n;
    }
  }
}

void ControllerConfig::validate(Eigen::Index n_x, Eigen::Index n_u) const {
  if (horizon < 1) throw std::invalid_argument("ControllerConfig: horizon must be >= 1");
  if (eps_lpv <= 0.0) throw std::invalid_argument("ControllerConfig: eps_lpv must be positive");
  if (!(p_x > 0.0 && p_x < 1.0))
    throw std::invalid_argument("ControllerConfig: p_x must lie in (0,1)");
  if (q_weight.rows() != n_x || q_weight.cols() != n_x)
    throw std::invalid_argument("ControllerConfig: Q shape mismatch");
  if (r_weight.rows() != n_u || r_weight.cols() != n_u)
    throw std::invalid_argument("ControllerConfig: R shape mismatch");
  for (const Halfspace& hs : state_polytope)
    if (hs.a.size() != n_x) throw std::invalid_argument("ControllerConfig: state half-space dim");
  for (const Halfspace& hs : input_polytope)
    if (hs.a.size() != n_u) throw std::invalid_argument("ControllerConfig: input half-space dim");
}

ControllerConfig ControllerConfig::quad_default() {
  ControllerConfig cfg;
  cfg.horizon = 12;
  VectorXd qd(9);
  qd << 100, 100, 400, 40, 10, 10, 0.1, 0.1, 0.1;
  cfg.q_weight = qd.asDiagonal();
  cfg.r_weight = 0.1 * MatrixXd::Identity(4, 4);
  cfg.t_s = 0.02;
  cfg.eps_lpv = 0.01;
  cfg.max_iters = 12;
  cfg.quad_nodes = 9;
  cfg.p_x = 0.95;

  const double deg = M_PI / 180.0;
  auto unit = [](Eigen::Index n, Eigen::Index i, double sign) {
    VectorXd v = VectorXd::Zero(n);
    v[i] = sign;
    return v;
  };
  // Velocity box +-6.5 m/s, Euler angles +-70 deg; position unbounded.
  for (int i = 3; i < 6; ++i) {
    cfg.state_polytope.push_back({unit(9, i, 1.0), 6.5});
    cfg.state_polytope.push_back({unit(9, i, -1.0), 6.5});
  }
  for (int i = 6; i < 9; ++i) {
    cfg.state_polytope.push_back({unit(9, i, 1.0), 70.0 * deg});
    cfg.state_polytope.push_back({unit(9, i, -1.0), 70.0 * deg});
  }
  // Thrust in [0.06, 0.64] N, roll/pitch rates +-180 deg/s, yaw rate +-20 deg/s.
  cfg.input_polytope.push_back({unit(4, 0, 1.0), 0.64});
  cfg.input_polytope.push_back({unit(4, 0, -1.0), -0.06});
  for (int i = 1; i < 3; ++i) {
    cfg.input_polytope.push_back({unit(4, i, 1.0), 180.0 * deg});
    cfg.input_polytope.push_back({unit(4, i, -1.0), 180.0 * deg});
  }
  cfg.input_polytope.push_back({unit(4, 3, 1.0), 20.0 * deg});
  cfg.input_polytope.push_back({unit(4, 3, -1.0), 20.0 * deg});

  // Gap normalization: states at unit scale, inputs by their ranges.
  cfg.gap_scales = VectorXd::Ones(13);
  cfg.gap_scales[9] = 0.64 - 0.06;
  cfg.gap_scales[10] = 2.0 * M_PI;
  cfg.gap_scales[11] = 2.0 * M_PI;
  cfg.gap_scales[12] = 40.0 * deg;
  return cfg;
}

double tighten_halfspace(const VectorXd& alpha, double b, const MatrixXd& sigma,
                         double p_x) {
  double var = alpha.dot(sigma * alpha);
  if (var < -1e-9 * std::max(1.0, sigma.cwiseAbs().maxCoeff()))
    throw NumericalError("tighten_halfspace: negative constraint variance " +
                         std::to_string(var));
  var = std::max(var, 0.0);
  const double c = probit(p_x) * std::sqrt(var);
  if (!std::isfinite(c)) throw NumericalError("tighten_halfspace: non-finite back-off");
  return b - c;
}

std::vector<VectorXd> shift_inputs(const std::vector<VectorXd>& prev) {
  if (prev.empty()) return prev;
  std::vector<VectorXd> out(prev.size());
  for (size_t i = 0; i + 1 < prev.size(); ++i) out[i] = prev[i + 1];
  out.back() = prev.back();
  return out;
}

double stage_cost(const std::vector<VectorXd>& mu_traj,
                  const std::vector<MatrixXd>& sigma_traj,
                  const std::vector<VectorXd>& inputs,
                  const std::vector<VectorXd>& r_traj, const ControllerConfig& cfg) {
  if (mu_traj.size() != sigma_traj.size() || mu_traj.size() != inputs.size() + 1 ||
      r_traj.size() < mu_traj.size())
    throw std::invalid_argument("stage_cost: trajectory lengths inconsistent");
  double cost = 0.0;
  for (size_t i = 0; i < mu_traj.size(); ++i) {
    const VectorXd e = mu_traj[i] - r_traj[i];
    cost += e.dot(cfg.q_weight * e) + (cfg.q_weight * sigma_traj[i]).trace();
  }
  for (const VectorXd& u : inputs) cost += u.dot(cfg.r_weight * u);
  return cost;
}

GpmpcController::GpmpcController(NominalModel nominal, const SparseGpModel* gp,
                                 ControllerConfig cfg)
    : nominal_(std::move(nominal)),
      gp_(gp),
      cfg_(std::move(cfg)),
      model_(&nominal_, gp_, [&] {
        PropagationSettings s;
        s.mode = cfg_.propagation;
        s.scale = cfg_.t_s;
        s.taylor_cross = cfg_.taylor_cross;
        if (gp && gp->output_dim() != nominal_.n_x) {
          // Residuals act on the velocity block; general selectors can be
          // injected through PropagationSettings when the model differs.
          MatrixXd bz = MatrixXd::Zero(nominal_.n_x, gp->output_dim());
          bz.block(3, 0, gp->output_dim(), gp->output_dim()).setIdentity();
          s.output_selector = bz;
        }
        return s;
      }()) {
  cfg_.normalize_polytopes();
  cfg_.validate(nominal_.n_x, nominal_.n_u);
  if (cfg_.gap_scales.size() == 0)
    cfg_.gap_scales = VectorXd::Ones(nominal_.n_x + nominal_.n_u);
  reset();
}

void GpmpcController::reset() {
  state_ = ControllerState{};
  state_.last_applied = VectorXd::Zero(nominal_.n_u);
}

std::vector<SchedulingPoint> GpmpcController::init_schedule(
    const VectorXd& x_k, const std::vector<VectorXd>& inputs,
    std::vector<GaussianBelief>* beliefs) const {
  const auto traj = model_.rollout(x_k, inputs);
  std::vector<SchedulingPoint> schedule(inputs.size());
  for (size_t i = 0; i < inputs.size(); ++i)
    schedule[i] = SchedulingPoint{traj[i].mean, inputs[i], traj[i].cov};
  if (beliefs) *beliefs = traj;
  return schedule;
}

VectorXd GpmpcController::mpc_step(const VectorXd& x_k,
                                   const std::vector<VectorXd>& r_traj,
                                   StepDiagnostics* diag) {
  const auto t_start = std::chrono::steady_clock::now();
  const int np = cfg_.horizon;
  const Eigen::Index nx = nominal_.n_x;
  const Eigen::Index nu = nominal_.n_u;
  if (x_k.size() != nx) throw std::invalid_argument("mpc_step: state dimension mismatch");
  if (static_cast<int>(r_traj.size()) < np + 1)
    throw std::invalid_argument("mpc_step: reference trajectory too short");

  StepDiagnostics d;
  PropagationStats prop_stats;

  // Shifted warm-start input sequence; all zeros on the very first step.
  std::vector<VectorXd> inputs;
  if (state_.prev_inputs.empty()) {
    inputs.assign(np, VectorXd::Zero(nu));
  } else {
    inputs = shift_inputs(state_.prev_inputs);
  }
  const VectorXd u_prev = state_.last_applied;
  const AnchorPoint anchor{x_k, u_prev};

  std::vector<SchedulingPoint> schedule;
  std::vector<GaussianBelief> beliefs;
  if (state_.steps == 0) {
    // Cold start: schedule pinned at the measured state with zero inputs
    // and zero covariance.
    schedule.assign(np, SchedulingPoint{x_k, VectorXd::Zero(nu), MatrixXd::Zero(nx, nx)});
    beliefs.assign(np + 1, GaussianBelief::dirac(x_k));
  } else {
    schedule = init_schedule(x_k, inputs, &beliefs);
  }

  FtcOptions ftc;
  ftc.quad_nodes = cfg_.quad_nodes;
  ftc.want_zeta = cfg_.covariance == CovarianceMode::kOptimized;

  QpSolution sol;
  bool have_solution = false;
  bool beliefs_current = false;
  const int iters = cfg_.rti ? 1 : cfg_.max_iters;

  // Relaxation factor for the schedule update. It stays at 1 (the plain
  // iteration) while the gap contracts, halves when the fixed point stalls
  // or cycles, and extrapolates mildly (secant step, inputs clamped to
  // their box) under steady geometric contraction.
  double relax = 1.0;
  double prev_gap = std::numeric_limits<double>::infinity();
  int good_contractions = 0;

  // Axis-aligned input box for clamping extrapolated inputs.
  VectorXd u_lo = VectorXd::Constant(nu, -std::numeric_limits<double>::infinity());
  VectorXd u_hi = VectorXd::Constant(nu, std::numeric_limits<double>::infinity());
  bool axis_aligned_inputs = true;
  for (const Halfspace& hs : cfg_.input_polytope) {
    Eigen::Index nz = 0, idx = 0;
    for (Eigen::Index i = 0; i < nu; ++i)
      if (hs.a[i] != 0.0) {
        ++nz;
        idx = i;
      }
    if (nz != 1) {
      axis_aligned_inputs = false;
      break;
    }
    if (hs.a[idx] > 0.0) {
      u_hi[idx] = std::min(u_hi[idx], hs.b / hs.a[idx]);
    } else {
      u_lo[idx] = std::max(u_lo[idx], hs.b / hs.a[idx]);
    }
  }

  for (int j = 0; j < iters; ++j) {
    const auto t_fact = std::chrono::steady_clock::now();
    const auto steps = factorize_horizon(model_, anchor, schedule, ftc);
    d.factorization_time_ms += ms_since(t_fact);

    MpcQp qp = qp_assemble_mpc(steps, cfg_, x_k, u_prev, beliefs, r_traj, false);
    const auto t_qp = std::chrono::steady_clock::now();
    const QpSolution* warm =
        (state_.prev_solution && state_.prev_solution->x.size() == qp.problem.vars())
            ? &*state_.prev_solution
            : nullptr;
    QpSolution s = qp_solve(qp.problem, warm);
    if (s.status == QpStatus::kPrimalInfeasible || s.status == QpStatus::kMaxIter) {
      // Soft fallback: slack-penalized tightened rows, inputs stay hard.
      MpcQp soft = qp_assemble_mpc(steps, cfg_, x_k, u_prev, beliefs, r_traj, true);
      s = qp_solve(soft.problem, nullptr);
      d.soft_fallback = true;
    }
    d.qp_time_ms += ms_since(t_qp);
    d.qp_iterations += s.iterations;
    if (s.status != QpStatus::kSolved) {
      // Keep the previous (shifted) inputs; nothing better is available.
      d.converged = false;
      break;
    }

    std::vector<VectorXd> u_new(np);
    for (int i = 0; i < np; ++i) u_new[i] = s.x.segment(qp.u_offset(i), nu);
    sol = s;
    // Warm start both across inner iterations and across time steps.
    if (!d.soft_fallback) state_.prev_solution = s;
    have_solution = true;
    if (relax != 1.0) {
      for (int i = 0; i < np; ++i) {
        u_new[i] = (1.0 - relax) * inputs[i] + relax * u_new[i];
        u_new[i] = u_new[i].cwiseMax(u_lo).cwiseMin(u_hi);
      }
    }
    inputs = u_new;
    ++d.iterations;

    if (cfg_.rti) break;  // one QP per step, no re-simulation

    std::vector<GaussianBelief> new_beliefs;
    const auto new_schedule = init_schedule(x_k, u_new, &new_beliefs);

    double gap = 0.0;
    for (int i = 0; i < np; ++i) {
      const VectorXd dmu = new_schedule[i].mu_x - schedule[i].mu_x;
      const VectorXd du = new_schedule[i].u - schedule[i].u;
      for (Eigen::Index r = 0; r < nx; ++r)
        gap = std::max(gap, std::abs(dmu[r]) / cfg_.gap_scales[r]);
      for (Eigen::Index r = 0; r < nu; ++r)
        gap = std::max(gap, std::abs(du[r]) / cfg_.gap_scales[nx + r]);
      gap = std::max(gap, (new_schedule[i].sigma - schedule[i].sigma).cwiseAbs().maxCoeff());
    }
    schedule = new_schedule;
    beliefs = new_beliefs;
    beliefs_current = true;
    d.gap = gap;
    d.gap_history.push_back(gap);
    if (gap <= cfg_.eps_lpv) {
      d.converged = true;
      break;
    }
    if (j >= 1) {
      const double ratio = gap / prev_gap;
      if (ratio > 0.7) {
        relax = std::max(0.5 * relax, 0.125);
        good_contractions = 0;
      } else if (ratio < 0.45) {
        // Recover only after sustained contraction so a period-two cycle
        // cannot pump the relaxation back up.
        if (++good_contractions >= 2) {
          relax = std::min(relax * 2.0, 1.0);
          good_contractions = 0;
        }
      } else {
        good_contractions = 0;
      }
    }
    prev_gap = gap;
  }
  if (cfg_.rti) d.converged = have_solution;

  // Diagnostics cost of the accepted trajectory; the converged loop already
  // holds its rollout in `beliefs`.
  {
    std::vector<GaussianBelief> traj;
    if (beliefs_current) {
      traj = beliefs;
    } else {
      traj = model_.rollout(x_k, inputs, &prop_stats);
    }
    std::vector<VectorXd> mu(np + 1);
    std::vector<MatrixXd> sig(np + 1);
    for (int i = 0; i <= np; ++i) {
      mu[i] = traj[i].mean;
      sig[i] = traj[i].cov;
    }
    std::vector<VectorXd> refs(r_traj.begin(), r_traj.begin() + np + 1);
    d.cost = stage_cost(mu, sig, inputs, refs, cfg_);
  }

  state_.prev_inputs = inputs;
  state_.schedule = schedule;
  ++state_.steps;
  const VectorXd u_apply = inputs.front();
  state_.last_applied = u_apply;

  d.step_time_ms = ms_since(t_start);
  d.variance_clamps = prop_stats.variance_clamps;
  d.psd_clamps = prop_stats.psd_clamps;
  if (diag) *diag = d;
  return u_apply;
}

}  // namespace gpmpc
