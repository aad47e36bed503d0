#pragma once

#include <Eigen/Geometry>
#include <cstdint>
#include <string>
#include <vector>

#include "gpmpc/propagation.hpp"

namespace gpmpc {

using Eigen::Matrix3d;
using Eigen::Quaterniond;
using Eigen::Vector3d;
using Eigen::Vector4d;

/// Physical and firmware-derived constants of the simulated vehicle.
/// The shipped defaults (crazyflie()) mirror the public Crazyflie 2.1
/// firmware parameters; K_aero is a calibration constant of the drag model.
struct QuadParams {
  double mass = 0.033;                  // kg
  Matrix3d inertia = Matrix3d::Zero();  // kg m^2
  double arm_lever = 0.046 / std::numbers::sqrt2;  // d = l/sqrt(2), m
  double thrust_coeff = 2.88e-8;        // N per (rad/s)^2
  double drag_coeff = 1.728e-10;        // N m per (rad/s)^2
  double gravity = 9.81;
  Matrix3d k_aero = Matrix3d::Zero();   // N per ((rad/s) * (m/s))
  double thrust_min = 0.06;             // total, N
  double thrust_max = 0.64;             // total, N
  Vector3d rate_kp = Vector3d(1.2e-3, 1.2e-3, 1.5e-3);
  Vector3d rate_ki = Vector3d(6e-3, 6e-3, 7.5e-3);
  Vector3d rate_kd = Vector3d::Zero();
  double integral_limit = 2e-3;         // N m, anti-windup clamp

  double rotor_max() const { return thrust_max / 4.0; }
  static QuadParams crazyflie();
};

/// Full rigid-body truth state; attitude kept as a unit quaternion.
struct TruthState {
  Vector3d position = Vector3d::Zero();
  Vector3d velocity = Vector3d::Zero();
  Quaterniond attitude = Quaterniond::Identity();
  Vector3d body_rates = Vector3d::Zero();  // p, q, r in the body frame
};

struct TruthDerivative {
  Vector3d position_dot;
  Vector3d velocity_dot;
  Eigen::Vector4d attitude_dot;  // quaternion coefficients (w, x, y, z)
  Vector3d body_rates_dot;
};

/// Newton-Euler dynamics with body-frame aero drag and an optional inertial
/// acceleration disturbance.
TruthDerivative truth_derivative(const TruthState& s, const Vector4d& rotor_thrusts,
                                 const QuadParams& p, const Vector3d& disturbance);

/// Map from rotor thrusts to col(T, tau) for the "X" layout.
Eigen::Matrix4d allocation_matrix(const QuadParams& p);

struct Allocation {
  Vector4d thrusts;
  bool saturated = false;
};

/// Inverts the allocation map and clips each rotor at [0, thrust_max/4].
Allocation allocate(double total_thrust, const Vector3d& tau, const QuadParams& p);

/// Per-axis rate PID with anti-windup, run at the inner-loop rate.
class RatePid {
public:
  explicit RatePid(const QuadParams& p) : params_(p) {}
  Vector3d step(const Vector3d& rate_ref, const Vector3d& rate_meas, double dt);
  void reset();

private:
  QuadParams params_;
  Vector3d integral_ = Vector3d::Zero();
  Vector3d prev_error_ = Vector3d::Zero();
  bool has_prev_ = false;
};

/// Reduced-order outer-loop model, state col(xi, xi_dot, phi, theta, psi),
/// input col(T, p, q, r).
VectorXd nominal_continuous(const VectorXd& x, const VectorXd& u, const QuadParams& p);

/// Analytic Jacobian of nominal_continuous with respect to col(x, u), 9 x 13.
MatrixXd nominal_jacobian_continuous(const VectorXd& x, const VectorXd& u,
                                     const QuadParams& p);

/// Classical RK4 with zero-order-held input.
VectorXd rk4_step(const std::function<VectorXd(const VectorXd&, const VectorXd&)>& field,
                  const VectorXd& x, const VectorXd& u, double dt);

/// RK4 step together with its exact discrete Jacobian, obtained by chaining
/// the analytic continuous Jacobian through the stages.
VectorXd rk4_step_with_jacobian(
    const std::function<VectorXd(const VectorXd&, const VectorXd&)>& field,
    const std::function<MatrixXd(const VectorXd&, const VectorXd&)>& field_jacobian,
    const VectorXd& x, const VectorXd& u, double dt, MatrixXd* jac);

/// ZOH discretization of the reduced-order model at sampling time ts.
NominalModel make_quad_nominal(const QuadParams& p, double ts);

/// One RK4 step of the rigid-body truth dynamics with held rotor thrusts;
/// renormalizes the attitude quaternion afterwards.
void truth_rk4_step(TruthState& s, const Vector4d& rotor_thrusts, const QuadParams& p,
                    const Vector3d& disturbance, double dt);

Vector3d quat_to_euler_zyx(const Quaterniond& q);  // (phi, theta, psi)
Quaterniond euler_zyx_to_quat(const Vector3d& euler);

/// Projects the truth state onto the controller-visible 9-state.
VectorXd truth_to_outer(const TruthState& s);
TruthState outer_to_truth(const VectorXd& outer);

/// Outer-loop controller interface for the cascaded simulation: called at
/// the outer rate with the measured 9-state, returns col(T, p, q, r).
class OuterController {
public:
  virtual ~OuterController() = default;
  virtual VectorXd control(double t, const VectorXd& outer_state) = 0;
  /// Reference used at the last control call, for logging; may be empty.
  virtual VectorXd last_reference() const { return VectorXd(); }
};

struct SimOptions {
  double duration = 10.0;
  double dt_sim = 5e-4;    // truth integration step
  double dt_inner = 2e-3;  // rate PID update
  double dt_outer = 0.02;  // controller update
  bool aero = true;
  double disturbance_var = 0.0;  // Sigma_v diagonal, (m/s^2)^2, 0 disables
  std::uint64_t seed = 0;
};

struct SimLog {
  std::vector<double> t;
  std::vector<VectorXd> outer_state;  // measured 9-state per outer tick
  std::vector<VectorXd> input;        // applied col(T, p, q, r)
  std::vector<VectorXd> reference;    // controller reference, may be empty rows
  bool aborted = false;
  std::string abort_reason;

  Eigen::Index size() const { return static_cast<Eigen::Index>(t.size()); }
};

/// Cascaded closed-loop simulation: controller at 50 Hz, rate PID + mixer at
/// 500 Hz, rigid-body truth integration at 2 kHz. The optional disturbance
/// is white Gaussian acceleration noise redrawn each outer tick.
SimLog simulate_closed_loop(OuterController& controller, const QuadParams& p,
                            const SimOptions& opts, const VectorXd& x0_outer);

}  // namespace gpmpc
