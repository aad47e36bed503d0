#include "gpmpc/quad.hpp"

#include <cmath>
#include <random>

namespace gpmpc {

QuadParams QuadParams::crazyflie() {
  QuadParams p;
  p.inertia = Vector3d(1.395e-5, 1.436e-5, 2.173e-5).asDiagonal();
  // Drag-model gains in the lineage of the published Crazyflie system
  // identifications, scaled up as the desk calibration constant of this
  // simulator so the unmodeled-drag residual dominates the baseline error.
  p.k_aero = Vector3d(5.5e-6, 5.5e-6, 6.2e-6).asDiagonal();
  return p;
}

TruthDerivative truth_derivative(const TruthState& s, const Vector4d& rotor_thrusts,
                                 const QuadParams& p, const Vector3d& disturbance) {
  if ((rotor_thrusts.array() < 0.0).any())
    throw std::invalid_argument("truth_derivative: rotor thrusts must be nonnegative");

  const Matrix3d r_ib = s.attitude.toRotationMatrix();  // body -> inertial
  const double total = rotor_thrusts.sum();
  Vector3d f_body(0.0, 0.0, total);

  if (p.k_aero.cwiseAbs().sum() > 0.0) {
    double omega_sum = 0.0;
    for (int j = 0; j < 4; ++j) omega_sum += std::sqrt(rotor_thrusts[j] / p.thrust_coeff);
    f_body -= omega_sum * (p.k_aero * (r_ib.transpose() * s.velocity));
  }

  TruthDerivative d;
  d.position_dot = s.velocity;
  d.velocity_dot = Vector3d(0.0, 0.0, -p.gravity) + r_ib * f_body / p.mass + disturbance;

  // Torques from the allocation map.
  const double dlev = p.arm_lever;
  const double r = p.drag_coeff / p.thrust_coeff;
  const Vector4d& t = rotor_thrusts;
  const Vector3d tau(dlev * (-t[0] - t[1] + t[2] + t[3]),
                     dlev * (-t[0] + t[1] + t[2] - t[3]),
                     r * (-t[0] + t[1] - t[2] + t[3]));

  const Vector3d& w = s.body_rates;
  d.body_rates_dot = p.inertia.inverse() * (tau - w.cross(p.inertia * w));

  // qdot = 1/2 q (x) (0, w)
  const Quaterniond omega_q(0.0, w.x(), w.y(), w.z());
  const Quaterniond qd = s.attitude * omega_q;
  d.attitude_dot = 0.5 * Eigen::Vector4d(qd.w(), qd.x(), qd.y(), qd.z());
  return d;
}

Eigen::Matrix4d allocation_matrix(const QuadParams& p) {
  const double d = p.arm_lever;
  const double r = p.drag_coeff / p.thrust_coeff;
  Eigen::Matrix4d a;
  a << 1, 1, 1, 1,
      -d, -d, d, d,
      -d, d, d, -d,
      -r, r, -r, r;
  return a;
}

Allocation allocate(double total_thrust, const Vector3d& tau, const QuadParams& p) {
  Eigen::Vector4d rhs;
  rhs << total_thrust, tau.x(), tau.y(), tau.z();
  Allocation out;
  out.thrusts = allocation_matrix(p).partialPivLu().solve(rhs);
  for (int j = 0; j < 4; ++j) {
    if (out.thrusts[j] < 0.0 || out.thrusts[j] > p.rotor_max()) {
      out.thrusts[j] = std::clamp(out.thrusts[j], 0.0, p.rotor_max());
      out.saturated = true;
    }
  }
  return out;
}

Vector3d RatePid::step(const Vector3d& rate_ref, const Vector3d& rate_meas, double dt) {
  const Vector3d err = rate_ref - rate_meas;
  integral_ += err * dt;
  for (int i = 0; i < 3; ++i)
    integral_[i] = std::clamp(integral_[i] * params_.rate_ki[i], -params_.integral_limit,
                              params_.integral_limit) /
                   std::max(params_.rate_ki[i], 1e-12);
  Vector3d deriv = Vector3d::Zero();
  if (has_prev_ && dt > 0.0) deriv = (err - prev_error_) / dt;
  prev_error_ = err;
  has_prev_ = true;
  return params_.rate_kp.cwiseProduct(err) + params_.rate_ki.cwiseProduct(integral_) +
         params_.rate_kd.cwiseProduct(deriv);
}

void RatePid::reset() {
  integral_.setZero();
  prev_error_.setZero();
  has_prev_ = false;
}

namespace {

inline Vector3d rot_e3(double phi, double theta, double psi) {
  const double cf = std::cos(phi), sf = std::sin(phi);
  const double ct = std::cos(theta), st = std::sin(theta);
  const double cp = std::cos(psi), sp = std::sin(psi);
  return Vector3d(cp * st * cf + sp * sf, sp * st * cf - cp * sf, ct * cf);
}

}  // namespace

VectorXd nominal_continuous(const VectorXd& x, const VectorXd& u, const QuadParams& p) {
  if (x.size() != 9 || u.size() != 4)
    throw std::invalid_argument("nominal_continuous: expects 9 states, 4 inputs");
  const double phi = x[6], theta = x[7], psi = x[8];
  if (std::abs(theta) >= M_PI / 2.0 - 1e-3)
    throw NumericalError("nominal_continuous: pitch too close to the Euler singularity");
  const double thrust = u[0], pr = u[1], qr = u[2], rr = u[3];
  const double sf = std::sin(phi), cf = std::cos(phi);
  const double tt = std::tan(theta), sec = 1.0 / std::cos(theta);

  VectorXd dx(9);
  dx.segment<3>(0) = x.segment<3>(3);
  dx.segment<3>(3) =
      Vector3d(0.0, 0.0, -p.gravity) + (thrust / p.mass) * rot_e3(phi, theta, psi);
  dx[6] = pr + tt * (sf * qr + cf * rr);
  dx[7] = cf * qr - sf * rr;
  dx[8] = sec * (sf * qr + cf * rr);
  return dx;
}

MatrixXd nominal_jacobian_continuous(const VectorXd& x, const VectorXd& u,
                                     const QuadParams& p) {
  const double phi = x[6], theta = x[7], psi = x[8];
  const double thrust = u[0], qr = u[2], rr = u[3];
  const double sf = std::sin(phi), cf = std::cos(phi);
  const double st = std::sin(theta), ct = std::cos(theta);
  const double sp = std::sin(psi), cp = std::cos(psi);
  const double tt = st / ct, sec = 1.0 / ct;

  MatrixXd jac = MatrixXd::Zero(9, 13);
  jac.block<3, 3>(0, 3).setIdentity();

  const double tm = thrust / p.mass;
  // d(R e3)/d(phi, theta, psi)
  const Vector3d d_phi(-cp * st * sf + sp * cf, -sp * st * sf - cp * cf, -ct * sf);
  const Vector3d d_theta(cp * ct * cf, sp * ct * cf, -st * cf);
  const Vector3d d_psi(-sp * st * cf + cp * sf, cp * st * cf + sp * sf, 0.0);
  jac.block<3, 1>(3, 6) = tm * d_phi;
  jac.block<3, 1>(3, 7) = tm * d_theta;
  jac.block<3, 1>(3, 8) = tm * d_psi;
  jac.block<3, 1>(3, 9) = rot_e3(phi, theta, psi) / p.mass;

  const double sqcr = sf * qr + cf * rr;
  const double cqsr = cf * qr - sf * rr;
  jac(6, 6) = tt * cqsr;
  jac(6, 7) = sec * sec * sqcr;
  jac(6, 10) = 1.0;
  jac(6, 11) = tt * sf;
  jac(6, 12) = tt * cf;
  jac(7, 6) = -sqcr;
  jac(7, 11) = cf;
  jac(7, 12) = -sf;
  jac(8, 6) = sec * cqsr;
  jac(8, 7) = sec * tt * sqcr;
  jac(8, 11) = sec * sf;
  jac(8, 12) = sec * cf;
  return jac;
}

VectorXd rk4_step(const std::function<VectorXd(const VectorXd&, const VectorXd&)>& field,
                  const VectorXd& x, const VectorXd& u, double dt) {
  const VectorXd k1 = field(x, u);
  const VectorXd k2 = field(x + 0.5 * dt * k1, u);
  const VectorXd k3 = field(x + 0.5 * dt * k2, u);
  const VectorXd k4 = field(x + dt * k3, u);
  return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

VectorXd rk4_step_with_jacobian(
    const std::function<VectorXd(const VectorXd&, const VectorXd&)>& field,
    const std::function<MatrixXd(const VectorXd&, const VectorXd&)>& field_jacobian,
    const VectorXd& x, const VectorXd& u, double dt, MatrixXd* jac) {
  const Eigen::Index nx = x.size();
  const Eigen::Index nu = u.size();

  const VectorXd k1 = field(x, u);
  const VectorXd x2 = x + 0.5 * dt * k1;
  const VectorXd k2 = field(x2, u);
  const VectorXd x3 = x + 0.5 * dt * k2;
  const VectorXd k3 = field(x3, u);
  const VectorXd x4 = x + dt * k3;
  const VectorXd k4 = field(x4, u);
  const VectorXd next = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);

  if (jac) {
    const MatrixXd j1 = field_jacobian(x, u);
    const MatrixXd j2 = field_jacobian(x2, u);
    const MatrixXd j3 = field_jacobian(x3, u);
    const MatrixXd j4 = field_jacobian(x4, u);
    const auto ax = [nx](const MatrixXd& j) { return j.leftCols(nx); };
    const auto au = [nx, nu](const MatrixXd& j) { return j.rightCols(nu); };

    // Stage sensitivities dki/dx and dki/du.
    const MatrixXd k1x = ax(j1);
    const MatrixXd k1u = au(j1);
    const MatrixXd k2x = ax(j2) * (MatrixXd::Identity(nx, nx) + 0.5 * dt * k1x);
    const MatrixXd k2u = ax(j2) * (0.5 * dt * k1u) + au(j2);
    const MatrixXd k3x = ax(j3) * (MatrixXd::Identity(nx, nx) + 0.5 * dt * k2x);
    const MatrixXd k3u = ax(j3) * (0.5 * dt * k2u) + au(j3);
    const MatrixXd k4x = ax(j4) * (MatrixXd::Identity(nx, nx) + dt * k3x);
    const MatrixXd k4u = ax(j4) * (dt * k3u) + au(j4);

    jac->resize(nx, nx + nu);
    jac->leftCols(nx) = MatrixXd::Identity(nx, nx) +
                        dt / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x);
    jac->rightCols(nu) = dt / 6.0 * (k1u + 2.0 * k2u + 2.0 * k3u + k4u);
  }
  return next;
}

NominalModel make_quad_nominal(const QuadParams& p, double ts) {
  NominalModel m;
  m.n_x = 9;
  m.n_u = 4;
  auto field = [p](const VectorXd& x, const VectorXd& u) {
    return nominal_continuous(x, u, p);
  };
  auto field_jac = [p](const VectorXd& x, const VectorXd& u) {
    return nominal_jacobian_continuous(x, u, p);
  };
  m.dynamics = [field, ts](const VectorXd& x, const VectorXd& u) {
    return rk4_step(field, x, u, ts);
  };
  m.jacobian = [field, field_jac, ts](const VectorXd& x, const VectorXd& u) {
    MatrixXd jac;
    rk4_step_with_jacobian(field, field_jac, x, u, ts, &jac);
    return jac;
  };
  return m;
}

Vector3d quat_to_euler_zyx(const Quaterniond& q) {
  const Matrix3d r = q.normalized().toRotationMatrix();
  const double theta = -std::asin(std::clamp(r(2, 0), -1.0, 1.0));
  const double phi = std::atan2(r(2, 1), r(2, 2));
  const double psi = std::atan2(r(1, 0), r(0, 0));
  return Vector3d(phi, theta, psi);
}

Quaterniond euler_zyx_to_quat(const Vector3d& e) {
  return Quaterniond(Eigen::AngleAxisd(e.z(), Vector3d::UnitZ()) *
                     Eigen::AngleAxisd(e.y(), Vector3d::UnitY()) *
                     Eigen::AngleAxisd(e.x(), Vector3d::UnitX()));
}

VectorXd truth_to_outer(const TruthState& s) {
  VectorXd x(9);
  x.segment<3>(0) = s.position;
  x.segment<3>(3) = s.velocity;
  x.segment<3>(6) = quat_to_euler_zyx(s.attitude);
  return x;
}

TruthState outer_to_truth(const VectorXd& outer) {
  TruthState s;
  s.position = outer.segment<3>(0);
  s.velocity = outer.segment<3>(3);
  s.attitude = euler_zyx_to_quat(outer.segment<3>(6));
  s.body_rates.setZero();
  return s;
}

void truth_rk4_step(TruthState& s, const Vector4d& thrusts, const QuadParams& p,
                    const Vector3d& disturbance, double dt) {
  // RK4 on the packed 13-vector (pos, vel, quat wxyz, rates).
  auto pack = [](const TruthState& st) {
    VectorXd v(13);
    v.segment<3>(0) = st.position;
    v.segment<3>(3) = st.velocity;
    v[6] = st.attitude.w();
    v[7] = st.attitude.x();
    v[8] = st.attitude.y();
    v[9] = st.attitude.z();
    v.segment<3>(10) = st.body_rates;
    return v;
  };
  auto unpack = [](const VectorXd& v) {
    TruthState st;
    st.position = v.segment<3>(0);
    st.velocity = v.segment<3>(3);
    st.attitude = Quaterniond(v[6], v[7], v[8], v[9]);
    st.body_rates = v.segment<3>(10);
    return st;
  };
  auto deriv = [&](const VectorXd& v) {
    const TruthState st = unpack(v);
    const TruthDerivative d = truth_derivative(st, thrusts, p, disturbance);
    VectorXd dv(13);
    dv.segment<3>(0) = d.position_dot;
    dv.segment<3>(3) = d.velocity_dot;
    dv.segment<4>(6) = d.attitude_dot;
    dv.segment<3>(10) = d.body_rates_dot;
    return dv;
  };

  VectorXd y = pack(s);
  const VectorXd k1 = deriv(y);
  const VectorXd k2 = deriv(y + 0.5 * dt * k1);
  const VectorXd k3 = deriv(y + 0.5 * dt * k2);
  const VectorXd k4 = deriv(y + dt * k3);
  y += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  s = unpack(y);
  s.attitude.normalize();
}

SimLog simulate_closed_loop(OuterController& controller, const QuadParams& p,
                            const SimOptions& opts, const VectorXd& x0_outer) {
  SimLog log;
  QuadParams params = p;
  if (!opts.aero) params.k_aero.setZero();

  TruthState truth = outer_to_truth(x0_outer);
  RatePid pid(params);
  std::mt19937_64 rng(opts.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  const int n_outer = static_cast<int>(std::llround(opts.duration / opts.dt_outer));
  const int inner_per_outer = static_cast<int>(std::llround(opts.dt_outer / opts.dt_inner));
  const int sim_per_inner = static_cast<int>(std::llround(opts.dt_inner / opts.dt_sim));
  const double dist_std = std::sqrt(std::max(0.0, opts.disturbance_var));

  for (int k = 0; k < n_outer; ++k) {
    const double t = k * opts.dt_outer;
    const VectorXd x_meas = truth_to_outer(truth);

    if (!x_meas.allFinite()) {
      log.aborted = true;
      log.abort_reason = "non-finite state at t=" + std::to_string(t);
      break;
    }
    if (std::abs(x_meas[7]) > 80.0 * M_PI / 180.0) {
      log.aborted = true;
      log.abort_reason = "pitch singularity at t=" + std::to_string(t);
      break;
    }

    VectorXd u;
    try {
      u = controller.control(t, x_meas);
    } catch (const std::exception& e) {
      log.aborted = true;
      log.abort_reason = std::string("controller failure: ") + e.what();
      break;
    }

    log.t.push_back(t);
    log.outer_state.push_back(x_meas);
    log.input.push_back(u);
    log.reference.push_back(controller.last_reference());

    Vector3d disturbance = Vector3d::Zero();
    if (dist_std > 0.0)
      disturbance = dist_std * Vector3d(normal(rng), normal(rng), normal(rng));

    const Vector3d rate_ref = u.segment<3>(1);
    for (int i = 0; i < inner_per_outer; ++i) {
      const Vector3d tau = pid.step(rate_ref, truth.body_rates, opts.dt_inner);
      const Allocation alloc = allocate(u[0], tau, params);
      for (int s = 0; s < sim_per_inner; ++s)
        truth_rk4_step(truth, alloc.thrusts, params, disturbance, opts.dt_sim);
    }
  }
  return log;
}

}  // namespace gpmpc
