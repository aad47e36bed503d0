#include "gpmpc/reference.hpp"

#include <cmath>
#include <random>

namespace gpmpc {

VectorXd HoverReference::state(double) const {
  VectorXd r = VectorXd::Zero(9);
  r.segment<3>(0) = position_;
  return r;
}

VectorXd LemniscateReference::state(double t) const {
  const double w1 = 1.3 * std::numbers::sqrt2 * time_scale_;
  const double w2 = 0.77 * std::numbers::sqrt2 * time_scale_;
  VectorXd r = VectorXd::Zero(9);
  r[0] = 1.2 * std::cos(w1 * t);
  r[1] = 1.2 * std::sin(w1 * t) * std::cos(w2 * t);
  r[2] = 1.2 + 0.02 * std::sin(w1 * t);
  r[3] = -1.2 * w1 * std::sin(w1 * t);
  r[4] = 1.2 * (w1 * std::cos(w1 * t) * std::cos(w2 * t) -
                w2 * std::sin(w1 * t) * std::sin(w2 * t));
  r[5] = 0.02 * w1 * std::cos(w1 * t);
  return r;
}

PolynomialReference::PolynomialReference(std::uint64_t seed, double duration,
                                         double segment_time)
    : segment_time_(segment_time) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ux(-1.1, 1.1);
  std::uniform_real_distribution<double> uz(0.7, 1.7);
  const int segments = std::max(2, static_cast<int>(std::ceil(duration / segment_time_)) + 1);
  waypoints_.resize(segments + 1);
  for (auto& w : waypoints_) w = Eigen::Vector3d(ux(rng), ux(rng), uz(rng));

  velocities_.assign(waypoints_.size(), Eigen::Vector3d::Zero());
  for (size_t k = 1; k + 1 < waypoints_.size(); ++k)
    velocities_[k] = (waypoints_[k + 1] - waypoints_[k - 1]) / (2.0 * segment_time_);
}

VectorXd PolynomialReference::state(double t) const {
  const double tt = std::max(0.0, t);
  size_t seg = static_cast<size_t>(tt / segment_time_);
  if (seg + 1 >= waypoints_.size()) seg = waypoints_.size() - 2;
  const double s = std::clamp((tt - seg * segment_time_) / segment_time_, 0.0, 1.0);

  const Eigen::Vector3d& p0 = waypoints_[seg];
  const Eigen::Vector3d& p1 = waypoints_[seg + 1];
  const Eigen::Vector3d v0 = velocities_[seg] * segment_time_;
  const Eigen::Vector3d v1 = velocities_[seg + 1] * segment_time_;

  const double s2 = s * s, s3 = s2 * s, s4 = s3 * s, s5 = s4 * s;
  // Quintic Hermite with zero endpoint accelerations.
  const double h0 = 1.0 - 10.0 * s3 + 15.0 * s4 - 6.0 * s5;
  const double h1 = s - 6.0 * s3 + 8.0 * s4 - 3.0 * s5;
  const double h4 = -4.0 * s3 + 7.0 * s4 - 3.0 * s5;
  const double h5 = 10.0 * s3 - 15.0 * s4 + 6.0 * s5;
  const double d0 = (-30.0 * s2 + 60.0 * s3 - 30.0 * s4) / segment_time_;
  const double d1 = (1.0 - 18.0 * s2 + 32.0 * s3 - 15.0 * s4) / segment_time_;
  const double d4 = (-12.0 * s2 + 28.0 * s3 - 15.0 * s4) / segment_time_;
  const double d5 = (30.0 * s2 - 60.0 * s3 + 30.0 * s4) / segment_time_;

  VectorXd r = VectorXd::Zero(9);
  r.segment<3>(0) = h0 * p0 + h1 * v0 + h4 * v1 + h5 * p1;
  r.segment<3>(3) = d0 * p0 + d1 * v0 + d4 * v1 + d5 * p1;
  return r;
}

std::unique_ptr<Reference> make_reference(const std::string& id, std::uint64_t seed,
                                          double duration) {
  if (id == "lemniscate") return std::make_unique<LemniscateReference>();
  if (id == "hover")
    return std::make_unique<HoverReference>(Eigen::Vector3d(0.0, 0.0, 1.0));
  if (id == "random-poly")
    return std::make_unique<PolynomialReference>(seed, duration);
  throw std::invalid_argument("unknown trajectory id: " + id);
}

}  // namespace gpmpc
