#include "gpmpc/qp.hpp"

#include <Eigen/SparseCholesky>
#include <cmath>
#include <fstream>
#include <limits>

namespace gpmpc {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

void QpProblem::validate() const {
  if (p.rows() != p.cols() || p.rows() != q.size())
    throw std::invalid_argument("QpProblem: P/q dimensions inconsistent");
  if (a.cols() != q.size() || a.rows() != l.size() || l.size() != u.size())
    throw std::invalid_argument("QpProblem: constraint dimensions inconsistent");
  for (Eigen::Index i = 0; i < l.size(); ++i)
    if (l[i] > u[i])
      throw std::invalid_argument("QpProblem: l > u at row " + std::to_string(i));
}

std::string to_string(QpStatus s) {
  switch (s) {
    case QpStatus::kSolved: return "solved";
    case QpStatus::kMaxIter: return "max_iter";
    case QpStatus::kPrimalInfeasible: return "primal_infeasible";
    case QpStatus::kDualInfeasible: return "dual_infeasible";
  }
  return "unknown";
}

namespace {

double inf_norm(const VectorXd& v) {
  return v.size() == 0 ? 0.0 : v.cwiseAbs().maxCoeff();
}

// Column-wise infinity norms of a sparse matrix.
VectorXd col_norms(const SparseMatrix& m) {
  VectorXd n = VectorXd::Zero(m.cols());
  for (int k = 0; k < m.outerSize(); ++k)
    for (SparseMatrix::InnerIterator it(m, k); it; ++it)
      n[it.col()] = std::max(n[it.col()], std::abs(it.value()));
  return n;
}

VectorXd row_norms(const SparseMatrix& m) {
  VectorXd n = VectorXd::Zero(m.rows());
  for (int k = 0; k < m.outerSize(); ++k)
    for (SparseMatrix::InnerIterator it(m, k); it; ++it)
      n[it.row()] = std::max(n[it.row()], std::abs(it.value()));
  return n;
}

struct Scaling {
  VectorXd d;     // primal scaling
  VectorXd e;     // dual (row) scaling
  double c = 1.0; // cost scaling
};

// Modified Ruiz equilibration of [[P, A^T], [A, 0]].
Scaling ruiz(SparseMatrix& p, VectorXd& q, SparseMatrix& a, VectorXd& l, VectorXd& u,
             int iters) {
  const Eigen::Index n = q.size();
  const Eigen::Index m = l.size();
  Scaling s;
  s.d = VectorXd::Ones(n);
  s.e = VectorXd::Ones(m);

  for (int it = 0; it < iters; ++it) {
    VectorXd dn = col_norms(p).cwiseMax(col_norms(a));
    VectorXd en = row_norms(a);
    for (Eigen::Index i = 0; i < n; ++i)
      dn[i] = dn[i] > 1e-12 ? 1.0 / std::sqrt(dn[i]) : 1.0;
    for (Eigen::Index i = 0; i < m; ++i)
      en[i] = en[i] > 1e-12 ? 1.0 / std::sqrt(en[i]) : 1.0;

    p = dn.asDiagonal() * p * dn.asDiagonal();
    a = en.asDiagonal() * a * dn.asDiagonal();
    q = dn.cwiseProduct(q);
    for (Eigen::Index i = 0; i < m; ++i) {
      if (std::isfinite(l[i])) l[i] *= en[i];
      if (std::isfinite(u[i])) u[i] *= en[i];
    }
    s.d = s.d.cwiseProduct(dn);
    s.e = s.e.cwiseProduct(en);

    // Cost normalization.
    const VectorXd pc = col_norms(p);
    const double pmean = n > 0 ? pc.mean() : 1.0;
    double cost = std::max(pmean, inf_norm(q));
    cost = cost > 1e-12 ? 1.0 / cost : 1.0;
    p *= cost;
    q *= cost;
    s.c *= cost;
  }
  return s;
}

class Admm {
public:
  Admm(const QpProblem& prob, const AdmmSettings& st) : settings_(st) {
    n_ = prob.vars();
    m_ = prob.cons();
    p_ = prob.p;
    q_ = prob.q;
    a_ = prob.a;
    l_ = prob.l;
    u_ = prob.u;
    scaling_ = ruiz(p_, q_, a_, l_, u_, st.scaling_iters);

    eq_row_.assign(m_, false);
    for (Eigen::Index i = 0; i < m_; ++i)
      eq_row_[i] = std::isfinite(l_[i]) && std::isfinite(u_[i]) && u_[i] - l_[i] < 1e-12;

    rho_bar_ = st.rho;
    build_rho();
    factorize();
  }

  QpSolution solve(const QpProblem& prob, const QpSolution* warm) {
    VectorXd x = VectorXd::Zero(n_);
    VectorXd z = VectorXd::Zero(m_);
    VectorXd y = VectorXd::Zero(m_);
    if (warm && warm->x.size() == n_ && warm->y.size() == m_) {
      x = scaling_.d.cwiseInverse().cwiseProduct(warm->x);
      y = scaling_.c * scaling_.e.cwiseInverse().cwiseProduct(warm->y);
      z = warm->z.size() == m_ ? VectorXd(scaling_.e.cwiseProduct(warm->z))
                               : VectorXd(a_ * x);
    }

    QpSolution sol;
    VectorXd rhs(n_ + m_), xz(n_ + m_);
    for (int iter = 1; iter <= settings_.max_iter; ++iter) {
      const VectorXd x_prev = x;
      const VectorXd y_prev = y;

      rhs.head(n_) = settings_.sigma * x - q_;
      rhs.tail(m_) = z - rho_inv_.cwiseProduct(y);
      xz = ldlt_.solve(rhs);
      const VectorXd x_tilde = xz.head(n_);
      const VectorXd nu = xz.tail(m_);
      const VectorXd z_tilde = z + rho_inv_.cwiseProduct(nu - y);

      x = settings_.alpha * x_tilde + (1.0 - settings_.alpha) * x;
      const VectorXd z_relax = settings_.alpha * z_tilde + (1.0 - settings_.alpha) * z;
      z = (z_relax + rho_inv_.cwiseProduct(y)).cwiseMax(l_).cwiseMin(u_);
      y = y + rho_.cwiseProduct(z_relax - z);

      if (iter % settings_.check_interval == 0 || iter == settings_.max_iter) {
        // Unscaled iterates and residuals.
        const VectorXd xu = scaling_.d.cwiseProduct(x);
        const VectorXd zu = scaling_.e.cwiseInverse().cwiseProduct(z);
        const VectorXd yu = scaling_.e.cwiseProduct(y) / scaling_.c;
        const VectorXd ax = a_ * x;
        const VectorXd axu = scaling_.e.cwiseInverse().cwiseProduct(ax);
        const VectorXd px = p_ * x;
        const VectorXd aty = a_.transpose() * y;
        const VectorXd dual_vec =
            scaling_.d.cwiseInverse().cwiseProduct(px + q_ + aty) / scaling_.c;

        const double r_prim = inf_norm(axu - zu);
        const double r_dual = inf_norm(dual_vec);
        const double eps_prim =
            settings_.eps_abs +
            settings_.eps_rel * std::max(inf_norm(axu), inf_norm(zu));
        const VectorXd pxu = scaling_.d.cwiseInverse().cwiseProduct(px) / scaling_.c;
        const VectorXd atyu = scaling_.d.cwiseInverse().cwiseProduct(aty) / scaling_.c;
        const VectorXd qu = scaling_.d.cwiseInverse().cwiseProduct(q_) / scaling_.c;
        const double eps_dual =
            settings_.eps_abs + settings_.eps_rel * std::max({inf_norm(pxu),
                                                              inf_norm(atyu),
                                                              inf_norm(qu)});

        if (r_prim <= eps_prim && r_dual <= eps_dual) {
          sol.status = QpStatus::kSolved;
          finish(sol, xu, yu, zu, iter, r_prim, r_dual);
          if (settings_.polish) polish(prob, sol);
          return sol;
        }

        if (check_primal_infeasible(y - y_prev)) {
          sol.status = QpStatus::kPrimalInfeasible;
          finish(sol, xu, yu, zu, iter, r_prim, r_dual);
          return sol;
        }
        if (check_dual_infeasible(x - x_prev)) {
          sol.status = QpStatus::kDualInfeasible;
          finish(sol, xu, yu, zu, iter, r_prim, r_dual);
          return sol;
        }

        if (settings_.adaptive_rho && iter % settings_.adaptive_interval == 0) {
          const double prim_rel = r_prim / std::max(1e-12, std::max(inf_norm(axu), inf_norm(zu)));
          const double dual_rel =
              r_dual / std::max(1e-12, std::max({inf_norm(pxu), inf_norm(atyu), inf_norm(qu)}));
          const double ratio = std::sqrt(prim_rel / std::max(dual_rel, 1e-16));
          if (std::isfinite(ratio) && (ratio > 5.0 || ratio < 0.2)) {
            rho_bar_ = std::clamp(rho_bar_ * ratio, 1e-6, 1e6);
            build_rho();
            factorize();
          }
        }
      }
    }

    const VectorXd xu = scaling_.d.cwiseProduct(x);
    const VectorXd zu = scaling_.e.cwiseInverse().cwiseProduct(z);
    const VectorXd yu = scaling_.e.cwiseProduct(y) / scaling_.c;
    sol.status = QpStatus::kMaxIter;
    finish(sol, xu, yu, zu, settings_.max_iter, sol.primal_residual, sol.dual_residual);
    // Residuals from the last check may be stale; recompute for the report.
    sol.primal_residual = inf_norm(scaling_.e.cwiseInverse().cwiseProduct(a_ * x) - zu);
    sol.dual_residual = inf_norm(
        scaling_.d.cwiseInverse().cwiseProduct(p_ * x + q_ + a_.transpose() * y) / scaling_.c);
    return sol;
  }

  const Scaling& scaling() const { return scaling_; }

private:
  void build_rho() {
    rho_.resize(m_);
    for (Eigen::Index i = 0; i < m_; ++i)
      rho_[i] = eq_row_[i] ? rho_bar_ * settings_.eq_rho_scale : rho_bar_;
    rho_inv_ = rho_.cwiseInverse();
  }

  void factorize() {
    SparseMatrix kkt(n_ + m_, n_ + m_);
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(p_.nonZeros() + 2 * a_.nonZeros() + n_ + m_);
    for (int k = 0; k < p_.outerSize(); ++k)
      for (SparseMatrix::InnerIterator it(p_, k); it; ++it)
        trip.emplace_back(it.row(), it.col(), it.value());
    for (Eigen::Index i = 0; i < n_; ++i)
      trip.emplace_back(i, i, settings_.sigma);
    for (int k = 0; k < a_.outerSize(); ++k)
      for (SparseMatrix::InnerIterator it(a_, k); it; ++it) {
        trip.emplace_back(n_ + it.row(), it.col(), it.value());
        trip.emplace_back(it.col(), n_ + it.row(), it.value());
      }
    for (Eigen::Index i = 0; i < m_; ++i)
      trip.emplace_back(n_ + i, n_ + i, -rho_inv_[i]);
    kkt.setFromTriplets(trip.begin(), trip.end());
    ldlt_.compute(kkt);
    if (ldlt_.info() != Eigen::Success)
      throw NumericalError("qp_solve: KKT factorization failed");
  }

  bool check_primal_infeasible(const VectorXd& dy) const {
    const VectorXd dyu = scaling_.e.cwiseProduct(dy) / scaling_.c;
    const double norm = inf_norm(dyu);
    if (norm < 1e-14) return false;
    const VectorXd atdy =
        scaling_.d.cwiseInverse().cwiseProduct(a_.transpose() * dy) / scaling_.c;
    if (inf_norm(atdy) > settings_.eps_infeasible * norm) return false;
    double support = 0.0;
    for (Eigen::Index i = 0; i < m_; ++i) {
      const double v = dyu[i];
      const double lo = std::isfinite(l_[i]) ? l_[i] / scaling_.e[i] : -kInf;
      const double hi = std::isfinite(u_[i]) ? u_[i] / scaling_.e[i] : kInf;
      if (v > 0.0) {
        if (!std::isfinite(hi)) return false;
        support += hi * v;
      } else if (v < 0.0) {
        if (!std::isfinite(lo)) return false;
        support += lo * v;
      }
    }
    return support <= -settings_.eps_infeasible * norm;
  }

  bool check_dual_infeasible(const VectorXd& dx) const {
    const VectorXd dxu = scaling_.d.cwiseProduct(dx);
    const double norm = inf_norm(dxu);
    if (norm < 1e-14) return false;
    const double eps = settings_.eps_infeasible * norm;
    const VectorXd pdx = scaling_.d.cwiseInverse().cwiseProduct(p_ * dx) / scaling_.c;
    if (inf_norm(pdx) > eps) return false;
    const double qdx = q_.dot(dx) / scaling_.c;
    if (qdx > -eps) return false;
    const VectorXd adx = scaling_.e.cwiseInverse().cwiseProduct(a_ * dx);
    for (Eigen::Index i = 0; i < m_; ++i) {
      const bool lo = std::isfinite(l_[i]);
      const bool hi = std::isfinite(u_[i]);
      if (hi && adx[i] > eps) return false;
      if (lo && adx[i] < -eps) return false;
    }
    return true;
  }

  void finish(QpSolution& sol, const VectorXd& xu, const VectorXd& yu, const VectorXd& zu,
              int iter, double rp, double rd) const {
    sol.x = xu;
    sol.y = yu;
    sol.z = zu;
    sol.iterations = iter;
    sol.primal_residual = rp;
    sol.dual_residual = rd;
  }

  // Unscaled residual pair of a candidate (x, y).
  static std::pair<double, double> residuals(const QpProblem& prob, const VectorXd& x,
                                             const VectorXd& y) {
    const VectorXd ax = prob.a * x;
    double rp = 0.0;
    for (Eigen::Index i = 0; i < prob.cons(); ++i) {
      if (std::isfinite(prob.u[i])) rp = std::max(rp, ax[i] - prob.u[i]);
      if (std::isfinite(prob.l[i])) rp = std::max(rp, prob.l[i] - ax[i]);
    }
    const double rd = inf_norm(prob.p * x + prob.q + prob.a.transpose() * y);
    return {rp, rd};
  }

  void polish(const QpProblem& prob, QpSolution& sol) const {
    const Eigen::Index n = prob.vars();
    std::vector<Eigen::Index> act;
    std::vector<double> rhs_act;
    for (Eigen::Index i = 0; i < prob.cons(); ++i) {
      const bool eq = eq_row_[i];
      const bool lo = std::isfinite(prob.l[i]) &&
                      (sol.y[i] < -1e-12 || sol.z[i] - prob.l[i] < 1e-6);
      const bool up = std::isfinite(prob.u[i]) &&
                      (sol.y[i] > 1e-12 || prob.u[i] - sol.z[i] < 1e-6);
      if (eq || lo || up) {
        act.push_back(i);
        rhs_act.push_back(eq ? prob.l[i] : (lo && !up ? prob.l[i] : prob.u[i]));
      }
    }
    const Eigen::Index na = static_cast<Eigen::Index>(act.size());

    SparseMatrix kkt(n + na, n + na);
    std::vector<Eigen::Triplet<double>> trip;
    for (int k = 0; k < prob.p.outerSize(); ++k)
      for (SparseMatrix::InnerIterator it(prob.p, k); it; ++it)
        trip.emplace_back(it.row(), it.col(), it.value());
    for (Eigen::Index i = 0; i < n; ++i)
      trip.emplace_back(i, i, settings_.polish_delta);
    // Row-wise selection of the active rows of A (stored column-major).
    for (int k = 0; k < prob.a.outerSize(); ++k) {
      for (SparseMatrix::InnerIterator it(prob.a, k); it; ++it) {
        const auto pos = std::lower_bound(act.begin(), act.end(), it.row());
        if (pos != act.end() && *pos == it.row()) {
          const Eigen::Index r = pos - act.begin();
          trip.emplace_back(n + r, it.col(), it.value());
          trip.emplace_back(it.col(), n + r, it.value());
        }
      }
    }
    for (Eigen::Index r = 0; r < na; ++r)
      trip.emplace_back(n + r, n + r, -settings_.polish_delta);
    kkt.setFromTriplets(trip.begin(), trip.end());

    Eigen::SimplicialLDLT<SparseMatrix> ldlt(kkt);
    if (ldlt.info() != Eigen::Success) return;

    VectorXd rhs(n + na);
    rhs.head(n) = -prob.q;
    for (Eigen::Index r = 0; r < na; ++r) rhs[n + r] = rhs_act[r];
    VectorXd sol_kkt = ldlt.solve(rhs);
    for (int refine = 0; refine < settings_.polish_refine; ++refine) {
      // One step of iterative refinement against the unregularized system.
      VectorXd resid = rhs;
      resid.head(n) -= prob.p * sol_kkt.head(n);
      const VectorXd ax_full = prob.a * sol_kkt.head(n);
      VectorXd nu = VectorXd::Zero(prob.cons());
      for (Eigen::Index r = 0; r < na; ++r) nu[act[r]] = sol_kkt[n + r];
      resid.head(n) -= prob.a.transpose() * nu;
      for (Eigen::Index r = 0; r < na; ++r) resid[n + r] -= ax_full[act[r]];
      sol_kkt += ldlt.solve(resid);
    }

    VectorXd x_new = sol_kkt.head(n);
    VectorXd y_new = VectorXd::Zero(prob.cons());
    for (Eigen::Index r = 0; r < na; ++r) y_new[act[r]] = sol_kkt[n + r];

    const auto [rp_new, rd_new] = residuals(prob, x_new, y_new);
    const auto [rp_old, rd_old] = residuals(prob, sol.x, sol.y);
    if (std::max(rp_new, rd_new) < std::max(rp_old, rd_old)) {
      sol.x = x_new;
      sol.y = y_new;
      sol.z = prob.a * x_new;
      sol.primal_residual = rp_new;
      sol.dual_residual = rd_new;
    }
  }

  AdmmSettings settings_;
  Eigen::Index n_ = 0, m_ = 0;
  SparseMatrix p_, a_;
  VectorXd q_, l_, u_;
  Scaling scaling_;
  std::vector<bool> eq_row_;
  double rho_bar_;
  VectorXd rho_, rho_inv_;
  Eigen::SimplicialLDLT<SparseMatrix> ldlt_;
};

}  // namespace

QpSolution qp_solve(const QpProblem& problem, const QpSolution* warm_start,
                    const AdmmSettings& settings) {
  problem.validate();

  if (problem.cons() == 0) {
    // Unconstrained problem: direct regularized solve.
    SparseMatrix preg = problem.p;
    SparseMatrix eye(problem.vars(), problem.vars());
    eye.setIdentity();
    preg += settings.sigma * eye;
    Eigen::SimplicialLDLT<SparseMatrix> ldlt(preg);
    if (ldlt.info() != Eigen::Success)
      throw NumericalError("qp_solve: factorization of unconstrained problem failed");
    QpSolution sol;
    sol.x = ldlt.solve(-problem.q);
    sol.y.resize(0);
    sol.z.resize(0);
    sol.status = QpStatus::kSolved;
    sol.iterations = 1;
    sol.dual_residual = inf_norm(problem.p * sol.x + problem.q);
    sol.objective = 0.5 * sol.x.dot(problem.p * sol.x) + problem.q.dot(sol.x);
    return sol;
  }

  Admm admm(problem, settings);
  QpSolution sol = admm.solve(problem, warm_start);
  sol.objective = 0.5 * sol.x.dot(problem.p * sol.x) + problem.q.dot(sol.x);
  return sol;
}

void dump_qp(const QpProblem& problem, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("dump_qp: cannot open " + path);
  out.precision(17);
  out << "# gpmpc qp dump v1\n";
  out << "# P " << problem.p.rows() << " " << problem.p.cols() << " "
      << problem.p.nonZeros() << "\n";
  for (int k = 0; k < problem.p.outerSize(); ++k)
    for (SparseMatrix::InnerIterator it(problem.p, k); it; ++it)
      out << "P " << it.row() << " " << it.col() << " " << it.value() << "\n";
  out << "# q " << problem.q.size() << "\n";
  for (Eigen::Index i = 0; i < problem.q.size(); ++i) out << "q " << i << " " << problem.q[i] << "\n";
  out << "# A " << problem.a.rows() << " " << problem.a.cols() << " "
      << problem.a.nonZeros() << "\n";
  for (int k = 0; k < problem.a.outerSize(); ++k)
    for (SparseMatrix::InnerIterator it(problem.a, k); it; ++it)
      out << "A " << it.row() << " " << it.col() << " " << it.value() << "\n";
  out << "# bounds " << problem.l.size() << "\n";
  for (Eigen::Index i = 0; i < problem.l.size(); ++i)
    out << "b " << i << " " << problem.l[i] << " " << problem.u[i] << "\n";
}

}  // namespace gpmpc
