#include "gpmpc/mpc_qp.hpp"

#include <cmath>
#include <limits>

namespace gpmpc {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

MpcQp qp_assemble_mpc(const std::vector<LpvStep>& steps, const ControllerConfig& cfg,
                      const VectorXd& x0, const VectorXd& u_prev,
                      const std::vector<GaussianBelief>& beliefs,
                      const std::vector<VectorXd>& r_traj, bool with_slacks) {
  const int np = cfg.horizon;
  const Eigen::Index nx = x0.size();
  const Eigen::Index nu = u_prev.size();
  const Eigen::Index ns = nx * nx;
  if (static_cast<int>(steps.size()) != np)
    throw std::invalid_argument("qp_assemble_mpc: need one LpvStep per prediction step");
  if (static_cast<int>(beliefs.size()) != np + 1)
    throw std::invalid_argument("qp_assemble_mpc: need Np+1 scheduled beliefs");
  if (static_cast<int>(r_traj.size()) < np + 1)
    throw std::invalid_argument("qp_assemble_mpc: need Np+1 references");

  MpcQp out;
  out.n_x = nx;
  out.n_u = nu;
  out.horizon = np;
  out.cov_mode = cfg.covariance == CovarianceMode::kOptimized;

  const Eigen::Index n_state_rows = static_cast<Eigen::Index>(cfg.state_polytope.size());
  const Eigen::Index n_input_rows = static_cast<Eigen::Index>(cfg.input_polytope.size());
  out.slack_rows = with_slacks ? static_cast<int>(np * n_state_rows) : 0;

  Eigen::Index nvar = np * (nu + nx);
  if (out.cov_mode) nvar += np * ns;
  const Eigen::Index slack0 = nvar;
  nvar += out.slack_rows;

  // Rows: mean dynamics, then (cov mode) covariance dynamics + symmetry,
  // then tightened state rows, input rows, slack nonnegativity.
  const Eigen::Index rows_mean = np * nx;
  const Eigen::Index rows_cov = out.cov_mode ? np * ns : 0;
  const Eigen::Index rows_sym = out.cov_mode ? np * (nx * (nx - 1) / 2) : 0;
  const Eigen::Index rows_state = np * n_state_rows;
  const Eigen::Index rows_input = np * n_input_rows;
  const Eigen::Index rows_slack = out.slack_rows;
  const Eigen::Index mrows = rows_mean + rows_cov + rows_sym + rows_state + rows_input + rows_slack;

  std::vector<Eigen::Triplet<double>> pt, at;
  VectorXd q = VectorXd::Zero(nvar);
  VectorXd l = VectorXd::Constant(mrows, -kInf);
  VectorXd u = VectorXd::Constant(mrows, kInf);

  // ----- cost -----
  for (int i = 0; i < np; ++i) {
    const Eigen::Index uo = out.u_offset(i);
    for (Eigen::Index r = 0; r < nu; ++r)
      for (Eigen::Index c = 0; c < nu; ++c)
        if (cfg.r_weight(r, c) != 0.0)
          pt.emplace_back(uo + r, uo + c, 2.0 * cfg.r_weight(r, c));
  }
  for (int i = 1; i <= np; ++i) {
    const Eigen::Index xo = out.mu_offset(i);
    for (Eigen::Index r = 0; r < nx; ++r) {
      for (Eigen::Index c = 0; c < nx; ++c)
        if (cfg.q_weight(r, c) != 0.0)
          pt.emplace_back(xo + r, xo + c, 2.0 * cfg.q_weight(r, c));
    }
    q.segment(xo, nx) = -2.0 * cfg.q_weight * r_traj[i];
  }
  if (out.cov_mode) {
    // Tr(Q Sigma(i)) is linear in the vec Sigma decisions.
    for (int i = 1; i <= np; ++i) {
      const Eigen::Index so = out.sigma_offset(i);
      for (Eigen::Index c = 0; c < nx; ++c)
        for (Eigen::Index r = 0; r < nx; ++r)
          q[so + c * nx + r] += cfg.q_weight(r, c);
    }
  }
  for (int s = 0; s < out.slack_rows; ++s) q[slack0 + s] = cfg.slack_penalty;

  // ----- mean dynamics rows -----
  Eigen::Index row = 0;
  for (int i = 0; i < np; ++i) {
    const LpvStep& st = steps[i];
    VectorXd rhs = st.affine_theta - st.b_theta * u_prev;
    if (i >= 1) rhs -= st.a_theta * x0;
    if (!out.cov_mode) {
      // Scheduled covariance enters the mean dynamics as a constant.
      const MatrixXd& sig = beliefs[i].cov;
      rhs += st.c_theta * Eigen::Map<const VectorXd>(sig.data(), ns);
    }
    for (Eigen::Index r = 0; r < nx; ++r) {
      const Eigen::Index rr = row + r;
      at.emplace_back(rr, out.mu_offset(i + 1) + r, 1.0);
      for (Eigen::Index c = 0; c < nu; ++c)
        if (st.b_theta(r, c) != 0.0) at.emplace_back(rr, out.u_offset(i) + c, -st.b_theta(r, c));
      if (i >= 1) {
        for (Eigen::Index c = 0; c < nx; ++c)
          if (st.a_theta(r, c) != 0.0) at.emplace_back(rr, out.mu_offset(i) + c, -st.a_theta(r, c));
        if (out.cov_mode) {
          for (Eigen::Index c = 0; c < ns; ++c)
            if (st.c_theta(r, c) != 0.0)
              at.emplace_back(rr, out.sigma_offset(i) + c, -st.c_theta(r, c));
        }
      }
      l[rr] = rhs[r];
      u[rr] = rhs[r];
    }
    row += nx;
  }

  // ----- covariance dynamics + symmetry rows (cov mode) -----
  if (out.cov_mode) {
    for (int i = 0; i < np; ++i) {
      const LpvStep& st = steps[i];
      if (!st.has_zeta)
        throw std::invalid_argument("qp_assemble_mpc: covariance mode needs zeta factorization");
      VectorXd rhs = st.affine_zeta - st.b_zeta * u_prev;
      if (i >= 1) rhs -= st.a_zeta * x0;
      for (Eigen::Index r = 0; r < ns; ++r) {
        const Eigen::Index rr = row + r;
        at.emplace_back(rr, out.sigma_offset(i + 1) + r, 1.0);
        for (Eigen::Index c = 0; c < nu; ++c)
          if (st.b_zeta(r, c) != 0.0) at.emplace_back(rr, out.u_offset(i) + c, -st.b_zeta(r, c));
        if (i >= 1) {
          for (Eigen::Index c = 0; c < nx; ++c)
            if (st.a_zeta(r, c) != 0.0) at.emplace_back(rr, out.mu_offset(i) + c, -st.a_zeta(r, c));
          for (Eigen::Index c = 0; c < ns; ++c)
            if (st.c_zeta(r, c) != 0.0)
              at.emplace_back(rr, out.sigma_offset(i) + c, -st.c_zeta(r, c));
        }
        l[rr] = rhs[r];
        u[rr] = rhs[r];
      }
      row += ns;
    }
    for (int i = 1; i <= np; ++i) {
      const Eigen::Index so = out.sigma_offset(i);
      for (Eigen::Index a = 0; a < nx; ++a) {
        for (Eigen::Index b = a + 1; b < nx; ++b) {
          at.emplace_back(row, so + b * nx + a, 1.0);
          at.emplace_back(row, so + a * nx + b, -1.0);
          l[row] = 0.0;
          u[row] = 0.0;
          ++row;
        }
      }
    }
  }

  // ----- tightened state rows -----
  int slack_idx = 0;
  for (int i = 1; i <= np; ++i) {
    for (Eigen::Index j = 0; j < n_state_rows; ++j) {
      const Halfspace& hs = cfg.state_polytope[j];
      double bound;
      try {
        bound = tighten_halfspace(hs.a, hs.b, beliefs[i].cov, cfg.p_x);
      } catch (const NumericalError& e) {
        throw NumericalError("qp_assemble_mpc: tightening failed at step " + std::to_string(i) +
                             ", half-space " + std::to_string(j) + ": " + e.what());
      }
      for (Eigen::Index c = 0; c < nx; ++c)
        if (hs.a[c] != 0.0) at.emplace_back(row, out.mu_offset(i) + c, hs.a[c]);
      if (with_slacks) {
        at.emplace_back(row, slack0 + slack_idx, -1.0);
        ++slack_idx;
      }
      u[row] = bound;
      ++row;
    }
  }

  // ----- input rows -----
  for (int i = 0; i < np; ++i) {
    for (const Halfspace& hs : cfg.input_polytope) {
      for (Eigen::Index c = 0; c < nu; ++c)
        if (hs.a[c] != 0.0) at.emplace_back(row, out.u_offset(i) + c, hs.a[c]);
      u[row] = hs.b;
      ++row;
    }
  }

  // ----- slack nonnegativity -----
  for (int s = 0; s < out.slack_rows; ++s) {
    at.emplace_back(row, slack0 + s, 1.0);
    l[row] = 0.0;
    ++row;
  }

  out.problem.p.resize(nvar, nvar);
  out.problem.p.setFromTriplets(pt.begin(), pt.end());
  out.problem.a.resize(mrows, nvar);
  out.problem.a.setFromTriplets(at.begin(), at.end());
  out.problem.q = q;
  out.problem.l = l;
  out.problem.u = u;
  out.problem.validate();
  return out;
}

}  // namespace gpmpc
