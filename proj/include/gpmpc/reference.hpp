#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "gpmpc/common.hpp"

namespace gpmpc {

/// Reference trajectory for the 9-state outer loop: position, velocity and
/// Euler angles (angles are reference-zero for all shipped trajectories).
class Reference {
public:
  virtual ~Reference() = default;
  virtual VectorXd state(double t) const = 0;
};

class HoverReference : public Reference {
public:
  explicit HoverReference(const Eigen::Vector3d& position) : position_(position) {}
  VectorXd state(double t) const override;

private:
  Eigen::Vector3d position_;
};

/// Figure-eight evaluation trajectory. `time_scale` multiplies the phase
/// rates; the argument of the trigonometric terms is continuous time in
/// seconds.
class LemniscateReference : public Reference {
public:
  explicit LemniscateReference(double time_scale = 1.0) : time_scale_(time_scale) {}
  VectorXd state(double t) const override;

private:
  double time_scale_;
};

/// Seeded smooth polynomial trajectory through waypoints sampled uniformly
/// in a flight box; quintic Hermite segments with Catmull-Rom velocities
/// and zero knot accelerations.
class PolynomialReference : public Reference {
public:
  PolynomialReference(std::uint64_t seed, double duration, double segment_time = 1.2);
  VectorXd state(double t) const override;

private:
  double segment_time_;
  std::vector<Eigen::Vector3d> waypoints_;
  std::vector<Eigen::Vector3d> velocities_;
};

/// Factory over the trajectory ids used by the CLI: "lemniscate", "hover",
/// "random-poly".
std::unique_ptr<Reference> make_reference(const std::string& id, std::uint64_t seed,
                                          double duration);

}  // namespace gpmpc
