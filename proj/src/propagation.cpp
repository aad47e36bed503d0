#include "gpmpc/propagation.hpp"

#include <cmath>

namespace gpmpc {

void GaussianBelief::validate() const {
  if (cov.rows() != mean.size() || cov.cols() != mean.size())
    throw std::invalid_argument("GaussianBelief: covariance shape mismatch");
  if (!mean.allFinite() || !cov.allFinite())
    throw std::invalid_argument("GaussianBelief: non-finite entries");
  if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, cov.cwiseAbs().maxCoeff()))
    throw std::invalid_argument("GaussianBelief: covariance not symmetric");
}

namespace {

inline Eigen::Index pair_index(Eigen::Index i, Eigen::Index j, Eigen::Index nz) {
  // flat index over i <= j
  return i * nz - i * (i - 1) / 2 + (j - i);
}

// ----- moment-matching primal quantities -----------------------------------

struct MmOutput {
  MatrixXd P;      // (Lambda + Sigma)^-1
  MatrixXd C;      // columns c_t = P (mu - w_t)
  VectorXd l;      // expected kernel slice
  MatrixXd vdiff;  // kuu_inv - s_inv
};

struct MmPair {
  MatrixXd R;  // ((Li^-1 + Lj^-1)^-1 + Sigma)^-1
  MatrixXd L;  // M x M expected kernel product
  MatrixXd H;  // n_g x (M*M), column t*M+tt holds R (q - mu)
};

struct MmPrimal {
  std::vector<MmOutput> out;
  std::vector<MmPair> pair;
  VectorXd mu;      // n_z
  MatrixXd cov;     // n_z x n_z, diagonal clamped
  MatrixXd V;       // n_g x n_z kernel-side cross term
  int clamp_events = 0;
};

MmPrimal mm_primal(const SparseGpModel& gp, const VectorXd& mu_g, const MatrixXd& sigma_g) {
  const Eigen::Index nz = gp.output_dim();
  const Eigen::Index ng = gp.input_dim();
  const Eigen::Index m = gp.inducing_count();
  MmPrimal pr;
  pr.out.resize(nz);
  pr.mu.resize(nz);
  pr.V.setZero(ng, nz);

  for (Eigen::Index i = 0; i < nz; ++i) {
    const SparseGpOutput& o = gp.outputs[i];
    MmOutput& po = pr.out[i];
    const VectorXd& lam = o.hyper.lengthscales;
    MatrixXd a = sigma_g;
    a.diagonal() += lam;
    Eigen::LLT<MatrixXd> llt(a);
    if (llt.info() != Eigen::Success)
      throw NumericalError("mm_gp_moments: Lambda + Sigma_w not positive definite for output " +
                           std::to_string(i));
    po.P = llt.solve(MatrixXd::Identity(ng, ng));
    const double logdet_a = 2.0 * MatrixXd(llt.matrixL()).diagonal().array().log().sum();
    const double logdet_lam = lam.array().log().sum();
    const double detfac = std::exp(-0.5 * (logdet_a - logdet_lam));

    MatrixXd d(ng, m);
    for (Eigen::Index t = 0; t < m; ++t) d.col(t) = mu_g - o.inducing.row(t).transpose();
    po.C = po.P * d;
    po.l.resize(m);
    for (Eigen::Index t = 0; t < m; ++t)
      po.l[t] = o.hyper.signal_variance * detfac * std::exp(-0.5 * d.col(t).dot(po.C.col(t)));
    po.vdiff = o.kuu_inv - o.s_inv;
    pr.mu[i] = o.alpha.dot(po.l);
    pr.V.col(i) = -(po.C * o.alpha.cwiseProduct(po.l));
  }

  pr.pair.resize(static_cast<size_t>(nz * (nz + 1) / 2));
  for (Eigen::Index i = 0; i < nz; ++i) {
    for (Eigen::Index j = i; j < nz; ++j) {
      const SparseGpOutput& oi = gp.outputs[i];
      const SparseGpOutput& oj = gp.outputs[j];
      MmPair& pp = pr.pair[pair_index(i, j, nz)];
      const VectorXd& li = oi.hyper.lengthscales;
      const VectorXd& lj = oj.hyper.lengthscales;
      const VectorXd sum_l = li + lj;
      const VectorXd cdiag = li.cwiseProduct(lj).cwiseQuotient(sum_l);
      MatrixXd f = sigma_g;
      f.diagonal() += cdiag;
      Eigen::LLT<MatrixXd> llt(f);
      if (llt.info() != Eigen::Success)
        throw NumericalError("mm_gp_moments: pair covariance not positive definite");
      pp.R = llt.solve(MatrixXd::Identity(ng, ng));
      const double logdet_f = 2.0 * MatrixXd(llt.matrixL()).diagonal().array().log().sum();
      const double coeff = std::exp(-0.5 * (logdet_f - cdiag.array().log().sum()));
      const double s2 = oi.hyper.signal_variance * oj.hyper.signal_variance;

      pp.L.resize(m, m);
      pp.H.resize(ng, m * m);
      for (Eigen::Index t = 0; t < m; ++t) {
        const VectorXd wi = oi.inducing.row(t).transpose();
        for (Eigen::Index tt = 0; tt < m; ++tt) {
          const VectorXd wj = oj.inducing.row(tt).transpose();
          const double a_tt =
              ((wi - wj).array().square() / sum_l.array()).sum();
          const VectorXd q =
              (lj.cwiseProduct(wi) + li.cwiseProduct(wj)).cwiseQuotient(sum_l);
          const VectorXd g = q - mu_g;
          const VectorXd h = pp.R * g;
          pp.H.col(t * m + tt) = h;
          pp.L(t, tt) = s2 * coeff * std::exp(-0.5 * a_tt - 0.5 * g.dot(h));
        }
      }
    }
  }

  pr.cov.resize(nz, nz);
  for (Eigen::Index i = 0; i < nz; ++i) {
    const SparseGpOutput& oi = gp.outputs[i];
    const MmPair& pii = pr.pair[pair_index(i, i, nz)];
    double v = oi.hyper.signal_variance + oi.hyper.noise_variance +
               oi.alpha.dot(pii.L * oi.alpha) - pr.mu[i] * pr.mu[i] -
               pr.out[i].vdiff.cwiseProduct(pii.L).sum();
    if (v < 0.0) {
      v = oi.hyper.noise_variance;
      ++pr.clamp_events;
    }
    pr.cov(i, i) = v;
    for (Eigen::Index j = i + 1; j < nz; ++j) {
      const MmPair& pij = pr.pair[pair_index(i, j, nz)];
      const double c = gp.outputs[i].alpha.dot(pij.L * gp.outputs[j].alpha) -
                       pr.mu[i] * pr.mu[j];
      pr.cov(i, j) = c;
      pr.cov(j, i) = c;
    }
  }
  return pr;
}

// Direction descriptor for a symmetric perturbation of Sigma in GP space.
struct SigmaDir {
  bool none = true;
  bool elementary = false;
  Eigen::Index a = -1, b = -1;  // GP coordinates of (E_ab + E_ba)/2
  const MatrixXd* dense = nullptr;
};

// Directional derivative of the MM outputs. dmu_g may be empty (treated as
// zero). Outputs dV only when want_cross.
void mm_tangent(const SparseGpModel& gp, const MmPrimal& pr, const VectorXd& dmu_g,
                const SigmaDir& ds, bool want_cross, VectorXd& dmu, MatrixXd& dcov,
                MatrixXd& dV) {
  const Eigen::Index nz = gp.output_dim();
  const Eigen::Index ng = gp.input_dim();
  const Eigen::Index m = gp.inducing_count();
  const bool has_mu = dmu_g.size() > 0;

  dmu.setZero(nz);
  dcov.setZero(nz, nz);
  if (want_cross) dV.setZero(ng, nz);

  std::vector<VectorXd> dl(nz);
  for (Eigen::Index i = 0; i < nz; ++i) {
    const MmOutput& po = pr.out[i];
    const SparseGpOutput& o = gp.outputs[i];
    VectorXd factor = VectorXd::Zero(m);
    if (has_mu) factor -= po.C.transpose() * dmu_g;
    if (!ds.none) {
      if (ds.elementary) {
        const double pab = po.P(ds.a, ds.b);
        for (Eigen::Index t = 0; t < m; ++t)
          factor[t] += 0.5 * (po.C(ds.a, t) * po.C(ds.b, t) - pab);
      } else {
        const double tr = po.P.cwiseProduct(*ds.dense).sum();
        for (Eigen::Index t = 0; t < m; ++t) {
          const VectorXd sc = (*ds.dense) * po.C.col(t);
          factor[t] += 0.5 * (po.C.col(t).dot(sc) - tr);
        }
      }
    }
    dl[i] = po.l.cwiseProduct(factor);
    dmu[i] = o.alpha.dot(dl[i]);

    if (want_cross) {
      // dV = -sum alpha (dl c + l dc), dc = P dmu - P dSigma c
      VectorXd col = -(po.C * o.alpha.cwiseProduct(dl[i]));
      if (has_mu) col -= pr.mu[i] * (po.P * dmu_g);
      if (!ds.none) {
        const VectorXd vbar = -pr.V.col(i);  // sum alpha l c
        if (ds.elementary) {
          col += 0.5 * (po.P.col(ds.a) * vbar[ds.b] + po.P.col(ds.b) * vbar[ds.a]);
        } else {
          col += po.P * ((*ds.dense) * vbar);
        }
      }
      dV.col(i) = col;
    }
  }

  for (Eigen::Index i = 0; i < nz; ++i) {
    for (Eigen::Index j = i; j < nz; ++j) {
      const MmPair& pp = pr.pair[pair_index(i, j, nz)];
      MatrixXd dL(m, m);
      for (Eigen::Index t = 0; t < m; ++t) {
        for (Eigen::Index tt = 0; tt < m; ++tt) {
          const auto h = pp.H.col(t * m + tt);
          double fac = 0.0;
          if (has_mu) fac += h.dot(dmu_g);
          if (!ds.none) {
            if (ds.elementary) {
              fac += 0.5 * (h[ds.a] * h[ds.b] - pp.R(ds.a, ds.b));
            } else {
              fac += 0.5 * (h.dot((*ds.dense) * h) - pp.R.cwiseProduct(*ds.dense).sum());
            }
          }
          dL(t, tt) = pp.L(t, tt) * fac;
        }
      }
      const VectorXd& ai = gp.outputs[i].alpha;
      const VectorXd& aj = gp.outputs[j].alpha;
      if (i == j) {
        dcov(i, i) = ai.dot(dL * ai) - 2.0 * pr.mu[i] * dmu[i] -
                     pr.out[i].vdiff.cwiseProduct(dL).sum();
      } else {
        const double c = ai.dot(dL * aj) - dmu[i] * pr.mu[j] - pr.mu[i] * dmu[j];
        dcov(i, j) = c;
        dcov(j, i) = c;
      }
    }
  }
}

// ----- Taylor primal quantities ---------------------------------------------

struct TaylorPrimal {
  MatrixXd J;                   // n_z x n_g mean gradient
  std::vector<MatrixXd> hess;   // n_g x n_g mean Hessians
  VectorXd svar;                // predictive variance at the mean
  MatrixXd grad_svar;           // n_z x n_g
  VectorXd mu;
  MatrixXd cov;
};

TaylorPrimal taylor_primal(const SparseGpModel& gp, const VectorXd& mu_g,
                           const MatrixXd& sigma_g) {
  const Eigen::Index nz = gp.output_dim();
  const Eigen::Index ng = gp.input_dim();
  const Eigen::Index m = gp.inducing_count();
  TaylorPrimal pr;
  pr.J.resize(nz, ng);
  pr.hess.resize(nz);
  pr.svar.resize(nz);
  pr.grad_svar.resize(nz, ng);
  pr.mu.resize(nz);

  for (Eigen::Index i = 0; i < nz; ++i) {
    const SparseGpOutput& o = gp.outputs[i];
    const VectorXd inv_lam = o.hyper.lengthscales.cwiseInverse();
    MatrixXd d(ng, m);
    VectorXd k(m);
    for (Eigen::Index t = 0; t < m; ++t) {
      d.col(t) = mu_g - o.inducing.row(t).transpose();
      k[t] = o.hyper.signal_variance *
             std::exp(-0.5 * (d.col(t).array().square() * inv_lam.array()).sum());
    }
    pr.mu[i] = k.dot(o.alpha);
    const VectorXd ak = o.alpha.cwiseProduct(k);
    pr.J.row(i) = -(inv_lam.asDiagonal() * (d * ak)).transpose();

    MatrixXd h = MatrixXd::Zero(ng, ng);
    for (Eigen::Index t = 0; t < m; ++t) {
      const VectorXd ld = inv_lam.cwiseProduct(d.col(t));
      h += ak[t] * (ld * ld.transpose());
    }
    h -= ak.sum() * MatrixXd(inv_lam.asDiagonal());
    pr.hess[i] = h;

    const MatrixXd vdiff = o.kuu_inv - o.s_inv;
    const VectorXd vk = vdiff * k;
    pr.svar[i] = o.hyper.signal_variance + o.hyper.noise_variance - k.dot(vk);
    pr.grad_svar.row(i) =
        (2.0 * (inv_lam.asDiagonal() * (d * vk.cwiseProduct(k)))).transpose();
  }

  pr.cov = MatrixXd(pr.svar.asDiagonal()) + pr.J * sigma_g * pr.J.transpose();
  symmetrize(pr.cov);
  return pr;
}

void taylor_tangent(const TaylorPrimal& pr, const MatrixXd& sigma_g,
                    const VectorXd& dmu_g, const SigmaDir& ds, bool want_cross,
                    VectorXd& dmu, MatrixXd& dcov, MatrixXd& dV) {
  const Eigen::Index nz = pr.J.rows();
  const Eigen::Index ng = pr.J.cols();
  const bool has_mu = dmu_g.size() > 0;

  dmu.setZero(nz);
  dcov.setZero(nz, nz);
  if (want_cross) dV.setZero(ng, nz);

  if (has_mu) {
    dmu = pr.J * dmu_g;
    MatrixXd dJ(nz, ng);
    for (Eigen::Index i = 0; i < nz; ++i) dJ.row(i) = (pr.hess[i] * dmu_g).transpose();
    MatrixXd t = dJ * sigma_g * pr.J.transpose();
    dcov += t + t.transpose();
    dcov += MatrixXd((pr.grad_svar * dmu_g).asDiagonal());
    if (want_cross) dV += dJ.transpose();
  }
  if (!ds.none) {
    if (ds.elementary) {
      const MatrixXd t =
          0.5 * (pr.J.col(ds.a) * pr.J.col(ds.b).transpose() +
                 pr.J.col(ds.b) * pr.J.col(ds.a).transpose());
      dcov += t;
    } else {
      dcov += pr.J * (*ds.dense) * pr.J.transpose();
    }
  }
}

}  // namespace

GpMoments taylor_gp_moments(const SparseGpModel& m, const GaussianBelief& w) {
  w.validate();
  if (w.mean.size() != m.input_dim())
    throw std::invalid_argument("taylor_gp_moments: input dimension mismatch");
  MatrixXd sig = w.cov;
  symmetrize(sig);
  const TaylorPrimal pr = taylor_primal(m, w.mean, sig);
  GpMoments out;
  out.mean = pr.mu;
  out.cov = pr.cov;
  out.kernel_cross = pr.J.transpose();
  out.cross = sig * out.kernel_cross;
  return out;
}

GpMoments mm_gp_moments(const SparseGpModel& m, const GaussianBelief& w) {
  w.validate();
  if (w.mean.size() != m.input_dim())
    throw std::invalid_argument("mm_gp_moments: input dimension mismatch");
  MatrixXd sig = w.cov;
  symmetrize(sig);
  const MmPrimal pr = mm_primal(m, w.mean, sig);
  GpMoments out;
  out.mean = pr.mu;
  out.cov = pr.cov;
  out.kernel_cross = pr.V;
  out.cross = sig * pr.V;
  out.clamp_events = pr.clamp_events;
  return out;
}

// ----- MomentModel -----------------------------------------------------------

struct MomentModel::Cache {
  VectorXd mu_x, u;
  MatrixXd sigma_x;  // symmetrized input
  VectorXd f_val;
  MatrixXd G;  // n_x x (n_x+n_u)

  bool has_gp = false;
  VectorXd mu_g;
  MatrixXd sigma_g;
  std::unique_ptr<MmPrimal> mm;
  std::unique_ptr<TaylorPrimal> taylor;
  std::unique_ptr<MmPrimal> mm_for_cross;  // Taylor mode with MM cross term

  VectorXd gp_mu;    // n_z
  MatrixXd gp_cov;   // n_z x n_z
  MatrixXd gp_V;     // n_g x n_z
  MatrixXd gp_Gm;    // n_z x n_g  gradient of the propagated mean
  int clamp_events = 0;

  MatrixXd sf_sel;   // Sigma_F(:, sel): (n_x+n_u) x n_g
  MatrixXd c_lift;   // (n_x+n_u) x n_x
  MatrixXd d_block;  // n_x x n_x
  VectorXd theta;
  MatrixXd zeta;
  MatrixXd n1;       // M_joint * Abar^T, (n_w+n_x) x n_x
};

MomentModel::MomentModel(const NominalModel* nominal, const SparseGpModel* gp,
                         PropagationSettings settings)
    : nominal_(nominal), gp_(gp), settings_(std::move(settings)) {
  if (!nominal_ || !nominal_->dynamics || !nominal_->jacobian)
    throw std::invalid_argument("MomentModel: nominal model with jacobian required");
  const Eigen::Index nwf = nominal_->n_x + nominal_->n_u;
  if (gp_) {
    if (!gp_->input_indices.empty()) {
      selector_ = gp_->input_indices;
      for (int idx : selector_)
        if (idx < 0 || idx >= nwf)
          throw std::invalid_argument("MomentModel: GP input index out of range");
    } else {
      selector_.resize(nwf);
      for (Eigen::Index i = 0; i < nwf; ++i) selector_[i] = static_cast<int>(i);
    }
    if (static_cast<Eigen::Index>(selector_.size()) != gp_->input_dim())
      throw std::invalid_argument("MomentModel: GP input dimension does not match selector");
    if (settings_.output_selector.size() == 0) {
      if (gp_->output_dim() != nominal_->n_x)
        throw std::invalid_argument("MomentModel: output selector required when n_z != n_x");
      b_z_ = MatrixXd::Identity(nominal_->n_x, nominal_->n_x);
    } else {
      if (settings_.output_selector.rows() != nominal_->n_x ||
          settings_.output_selector.cols() != gp_->output_dim())
        throw std::invalid_argument("MomentModel: output selector shape mismatch");
      b_z_ = settings_.output_selector;
    }
  }
}

std::unique_ptr<MomentModel::Cache> MomentModel::prepare(const VectorXd& mu_x,
                                                         const VectorXd& u,
                                                         const MatrixXd& sigma_x,
                                                         bool want_zeta) const {
  const Eigen::Index nx = nominal_->n_x;
  const Eigen::Index nu = nominal_->n_u;
  if (mu_x.size() != nx || u.size() != nu || sigma_x.rows() != nx || sigma_x.cols() != nx)
    throw std::invalid_argument("MomentModel: dimension mismatch");

  auto c = std::make_unique<Cache>();
  c->mu_x = mu_x;
  c->u = u;
  c->sigma_x = 0.5 * (sigma_x + sigma_x.transpose());
  c->f_val = nominal_->dynamics(mu_x, u);
  c->G = nominal_->jacobian(mu_x, u);

  c->theta = c->f_val;
  if (want_zeta) c->zeta = c->G.leftCols(nx) * c->sigma_x * c->G.leftCols(nx).transpose();

  if (gp_) {
    c->has_gp = true;
    const Eigen::Index ng = gp_->input_dim();
    c->mu_g.resize(ng);
    c->sigma_g.setZero(ng, ng);
    for (Eigen::Index a = 0; a < ng; ++a) {
      const int ia = selector_[a];
      c->mu_g[a] = ia < nx ? mu_x[ia] : u[ia - nx];
      for (Eigen::Index b = 0; b < ng; ++b) {
        const int ib = selector_[b];
        if (ia < nx && ib < nx) c->sigma_g(a, b) = c->sigma_x(ia, ib);
      }
    }

    if (settings_.mode == PropagationMode::kMomentMatching) {
      c->mm = std::make_unique<MmPrimal>(mm_primal(*gp_, c->mu_g, c->sigma_g));
      c->gp_mu = c->mm->mu;
      c->gp_cov = c->mm->cov;
      c->gp_V = c->mm->V;
      c->gp_Gm = c->mm->V.transpose();
      c->clamp_events = c->mm->clamp_events;
    } else {
      c->taylor = std::make_unique<TaylorPrimal>(taylor_primal(*gp_, c->mu_g, c->sigma_g));
      c->gp_mu = c->taylor->mu;
      c->gp_cov = c->taylor->cov;
      c->gp_Gm = c->taylor->J;
      if (settings_.taylor_cross == TaylorCrossMode::kMomentMatching) {
        c->mm_for_cross = std::make_unique<MmPrimal>(mm_primal(*gp_, c->mu_g, c->sigma_g));
        c->gp_V = c->mm_for_cross->V;
      } else {
        c->gp_V = c->taylor->J.transpose();
      }
    }

    const double s = settings_.scale;
    c->theta += s * (b_z_ * c->gp_mu);

    if (want_zeta) {
      const Eigen::Index nwf = nx + nu;
      c->sf_sel.setZero(nwf, ng);
      for (Eigen::Index a = 0; a < ng; ++a) {
        const int ia = selector_[a];
        if (ia < nx) c->sf_sel.col(a).head(nx) = c->sigma_x.col(ia);
      }
      c->c_lift = s * (c->sf_sel * (c->gp_V * b_z_.transpose()));
      c->d_block = s * s * (b_z_ * c->gp_cov * b_z_.transpose());
      // zeta = [G I] [[Sigma_F, C],[C^T, D]] [G I]^T
      const MatrixXd gc = c->G * c->c_lift;
      c->zeta += gc + gc.transpose() + c->d_block;
      symmetrize(c->zeta);
    }
  }
  return c;
}

void MomentModel::eval(const VectorXd& mu_x, const VectorXd& u, const MatrixXd& sigma_x,
                       VectorXd& theta, MatrixXd& zeta) const {
  auto c = prepare(mu_x, u, sigma_x, true);
  theta = c->theta;
  zeta = c->zeta;
}

GaussianBelief MomentModel::step(const GaussianBelief& x_belief, const VectorXd& u,
                                 PropagationStats* stats) const {
  auto c = prepare(x_belief.mean, u, x_belief.cov, true);
  GaussianBelief next;
  next.mean = c->theta;
  next.cov = c->zeta;
  const double min_eig = clamp_psd(next.cov);
  if (stats) {
    stats->variance_clamps += c->clamp_events;
    if (min_eig < -1e-12) ++stats->psd_clamps;
    stats->min_eigenvalue = std::min(stats->min_eigenvalue, min_eig);
  }
  return next;
}

std::vector<GaussianBelief> MomentModel::rollout(const VectorXd& x0,
                                                 const std::vector<VectorXd>& inputs,
                                                 PropagationStats* stats) const {
  if (!x0.allFinite()) throw std::invalid_argument("rollout: non-finite initial state");
  std::vector<GaussianBelief> traj;
  traj.reserve(inputs.size() + 1);
  traj.push_back(GaussianBelief::dirac(x0));
  for (const VectorXd& u : inputs) {
    if (!u.allFinite()) throw std::invalid_argument("rollout: non-finite input");
    traj.push_back(step(traj.back(), u, stats));
  }
  return traj;
}

MomentJacobians MomentModel::jacobians(const VectorXd& mu_x, const VectorXd& u,
                                       const MatrixXd& sigma_x, bool want_zeta) const {
  const Eigen::Index nx = nominal_->n_x;
  const Eigen::Index nu = nominal_->n_u;
  const Eigen::Index nwf = nx + nu;
  auto c = prepare(mu_x, u, sigma_x, true);

  MomentJacobians jac;
  jac.theta = c->theta;
  jac.zeta = c->zeta;
  jac.theta_mu.setZero(nx, nx);
  jac.theta_u.setZero(nx, nu);
  jac.theta_sigma.setZero(nx, nx * nx);
  if (want_zeta) {
    jac.zeta_mu.setZero(nx * nx, nx);
    jac.zeta_u.setZero(nx * nx, nu);
    jac.zeta_sigma.setZero(nx * nx, nx * nx);
  }

  const Eigen::Index ng = gp_ ? gp_->input_dim() : 0;
  const double s = settings_.scale;

  // Position of each col(x,u) coordinate inside the GP input, -1 if absent.
  std::vector<Eigen::Index> gp_pos(nwf, -1);
  if (c->has_gp)
    for (Eigen::Index a = 0; a < ng; ++a) gp_pos[selector_[a]] = a;

  // --- theta blocks ---
  jac.theta_mu = c->G.leftCols(nx);
  jac.theta_u = c->G.rightCols(nu);
  if (c->has_gp) {
    MatrixXd gm_full = MatrixXd::Zero(gp_->output_dim(), nwf);
    for (Eigen::Index a = 0; a < ng; ++a) gm_full.col(selector_[a]) = c->gp_Gm.col(a);
    jac.theta_mu += s * b_z_ * gm_full.leftCols(nx);
    jac.theta_u += s * b_z_ * gm_full.rightCols(nu);

    if (settings_.mode == PropagationMode::kMomentMatching) {
      // d mu_bar / d Sigma_ab = (W_i[a,b] - mu_i P_i[a,b]) / 2 with
      // W_i = C diag(alpha l) C^T.
      const Eigen::Index nz = gp_->output_dim();
      std::vector<MatrixXd> w(nz);
      for (Eigen::Index i = 0; i < nz; ++i) {
        const auto& po = c->mm->out[i];
        w[i] = po.C * gp_->outputs[i].alpha.cwiseProduct(po.l).asDiagonal() * po.C.transpose();
      }
      for (Eigen::Index a = 0; a < nx; ++a) {
        for (Eigen::Index b = a; b < nx; ++b) {
          const Eigen::Index ga = gp_pos[a], gb = gp_pos[b];
          if (ga < 0 || gb < 0) continue;
          VectorXd dmu(nz);
          for (Eigen::Index i = 0; i < nz; ++i)
            dmu[i] = 0.5 * (w[i](ga, gb) - c->mm->mu[i] * c->mm->out[i].P(ga, gb));
          const VectorXd col = s * (b_z_ * dmu);
          jac.theta_sigma.col(b * nx + a) = col;
          if (a != b) jac.theta_sigma.col(a * nx + b) = col;
        }
      }
    }
    // Taylor propagated mean does not depend on Sigma: theta_sigma stays 0.
  }

  if (!want_zeta) return jac;

  // --- zeta blocks ---
  // N1 = M_joint Abar^T with Abar = [G I].
  MatrixXd n1(nwf + nx, nx);
  {
    MatrixXd sigma_f = MatrixXd::Zero(nwf, nwf);
    sigma_f.topLeftCorner(nx, nx) = c->sigma_x;
    const MatrixXd cl = c->has_gp ? c->c_lift : MatrixXd::Zero(nwf, nx);
    const MatrixXd db = c->has_gp ? c->d_block : MatrixXd::Zero(nx, nx);
    n1.topRows(nwf) = sigma_f * c->G.transpose() + cl;
    n1.bottomRows(nx) = cl.transpose() * c->G.transpose() + db;
  }

  auto add_vec = [nx](MatrixXd& dst, Eigen::Index col, const MatrixXd& dzeta) {
    dst.col(col) = Eigen::Map<const VectorXd>(dzeta.data(), nx * nx);
  };

  // Directions along mu_x and u: the nominal Jacobian changes, so its
  // directional second derivative comes from differencing the analytic G.
  const double fd_h = 1e-5;
  for (Eigen::Index r = 0; r < nwf; ++r) {
    VectorXd xp = c->mu_x, up = c->u;
    VectorXd xm = c->mu_x, um = c->u;
    double h;
    if (r < nx) {
      h = fd_h * std::max(1.0, std::abs(c->mu_x[r]));
      xp[r] += h;
      xm[r] -= h;
    } else {
      h = fd_h * std::max(1.0, std::abs(c->u[r - nx]));
      up[r - nx] += h;
      um[r - nx] -= h;
    }
    const MatrixXd dg = (nominal_->jacobian(xp, up) - nominal_->jacobian(xm, um)) / (2.0 * h);

    MatrixXd dzeta = dg * n1.topRows(nwf);  // dAbar * N1 with dAbar = [dG 0]
    dzeta += dzeta.transpose().eval();

    if (c->has_gp) {
      const Eigen::Index gr = gp_pos[r];
      if (gr >= 0) {
        VectorXd dmu_g = VectorXd::Zero(ng);
        dmu_g[gr] = 1.0;
        SigmaDir none;
        VectorXd dmu;
        MatrixXd dcov, dv;
        if (settings_.mode == PropagationMode::kMomentMatching) {
          mm_tangent(*gp_, *c->mm, dmu_g, none, true, dmu, dcov, dv);
        } else {
          taylor_tangent(*c->taylor, c->sigma_g, dmu_g, none,
                         settings_.taylor_cross == TaylorCrossMode::kTaylor, dmu, dcov, dv);
          if (settings_.taylor_cross == TaylorCrossMode::kMomentMatching) {
            VectorXd dmu2;
            MatrixXd dcov2;
            mm_tangent(*gp_, *c->mm_for_cross, dmu_g, none, true, dmu2, dcov2, dv);
          }
        }
        const MatrixXd dc = s * (c->sf_sel * (dv * b_z_.transpose()));
        const MatrixXd dd = s * s * (b_z_ * dcov * b_z_.transpose());
        MatrixXd t = c->G * dc;
        dzeta += t + t.transpose() + dd;
      }
    }
    if (r < nx) {
      add_vec(jac.zeta_mu, r, dzeta);
    } else {
      add_vec(jac.zeta_u, r - nx, dzeta);
    }
  }

  // Directions along vec(Sigma): symmetric elementary perturbations.
  for (Eigen::Index a = 0; a < nx; ++a) {
    for (Eigen::Index b = a; b < nx; ++b) {
      // G_x E_sym G_x^T
      const VectorXd ga_col = c->G.col(a);
      const VectorXd gb_col = c->G.col(b);
      MatrixXd dzeta = 0.5 * (ga_col * gb_col.transpose() + gb_col * ga_col.transpose());

      if (c->has_gp) {
        const Eigen::Index gga = gp_pos[a], ggb = gp_pos[b];
        VectorXd dmu;
        MatrixXd dcov, dv;
        bool gp_active = (gga >= 0 && ggb >= 0);
        if (gp_active) {
          SigmaDir ds;
          ds.none = false;
          ds.elementary = true;
          ds.a = gga;
          ds.b = ggb;
          VectorXd no_mu;
          if (settings_.mode == PropagationMode::kMomentMatching) {
            mm_tangent(*gp_, *c->mm, no_mu, ds, true, dmu, dcov, dv);
          } else {
            taylor_tangent(*c->taylor, c->sigma_g, no_mu, ds,
                           settings_.taylor_cross == TaylorCrossMode::kTaylor, dmu, dcov, dv);
            if (settings_.taylor_cross == TaylorCrossMode::kMomentMatching) {
              VectorXd dmu2;
              MatrixXd dcov2;
              mm_tangent(*gp_, *c->mm_for_cross, no_mu, ds, true, dmu2, dcov2, dv);
            }
          }
        }
        // dC has two parts: dSigma_F(:, sel) V and Sigma_F(:, sel) dV.
        MatrixXd dsf_v = MatrixXd::Zero(nwf, gp_->output_dim());
        if (ggb >= 0) dsf_v.row(a) += 0.5 * c->gp_V.row(ggb);
        if (gga >= 0) dsf_v.row(b) += 0.5 * c->gp_V.row(gga);
        MatrixXd dc = s * (dsf_v * b_z_.transpose());
        if (gp_active) dc += s * (c->sf_sel * (dv * b_z_.transpose()));
        MatrixXd t = c->G * dc;
        dzeta += t + t.transpose();
        if (gp_active) dzeta += s * s * (b_z_ * dcov * b_z_.transpose());
      }

      add_vec(jac.zeta_sigma, b * nx + a, dzeta);
      if (a != b) add_vec(jac.zeta_sigma, a * nx + b, dzeta);
    }
  }

  return jac;
}

GaussianBelief propagate_step(const NominalModel& nominal, const SparseGpModel* gp,
                              const GaussianBelief& x_belief, const VectorXd& u,
                              const PropagationSettings& settings, PropagationStats* stats) {
  MomentModel model(&nominal, gp, settings);
  return model.step(x_belief, u, stats);
}

std::vector<GaussianBelief> rollout(const NominalModel& nominal, const SparseGpModel* gp,
                                    const VectorXd& x0, const std::vector<VectorXd>& inputs,
                                    const PropagationSettings& settings,
                                    PropagationStats* stats) {
  MomentModel model(&nominal, gp, settings);
  return model.rollout(x0, inputs, stats);
}

std::function<MatrixXd(const VectorXd&, const VectorXd&)> fd_model_jacobian(
    std::function<VectorXd(const VectorXd&, const VectorXd&)> dynamics, double h) {
  return [dynamics, h](const VectorXd& x, const VectorXd& u) {
    const VectorXd f0 = dynamics(x, u);
    MatrixXd jac(f0.size(), x.size() + u.size());
    VectorXd xp = x, up = u;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const double hi = h * std::max(1.0, std::abs(x[i]));
      xp[i] = x[i] + hi;
      const VectorXd fp = dynamics(xp, u);
      xp[i] = x[i] - hi;
      const VectorXd fm = dynamics(xp, u);
      xp[i] = x[i];
      jac.col(i) = (fp - fm) / (2.0 * hi);
    }
    for (Eigen::Index i = 0; i < u.size(); ++i) {
      const double hi = h * std::max(1.0, std::abs(u[i]));
      up[i] = u[i] + hi;
      const VectorXd fp = dynamics(x, up);
      up[i] = u[i] - hi;
      const VectorXd fm = dynamics(x, up);
      up[i] = u[i];
      jac.col(x.size() + i) = (fp - fm) / (2.0 * hi);
    }
    return jac;
  };
}

}  // namespace gpmpc
