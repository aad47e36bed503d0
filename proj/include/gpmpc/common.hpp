#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace gpmpc {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Thrown when a linear-algebra or quadrature step fails beyond recovery
/// (e.g. Cholesky failure after jitter escalation, singular solve at a
/// quadrature node). The message carries the numeric context.
class NumericalError : public std::runtime_error {
public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

/// Inverse CDF of the standard normal distribution, rational approximation
/// accurate to |err| < 1.2e-9 on p in [1e-6, 1-1e-6].
double probit(double p);

/// FNV-1a 64-bit hash, used for config/model provenance fingerprints.
std::uint64_t fnv1a64(std::string_view bytes);

/// Runs fn(i) for i in [0, n). Iterations must be independent; each writes
/// only its own output slot, so the result does not depend on scheduling.
void parallel_for(int n, const std::function<void(int)>& fn);

/// In-place (A + A^T)/2.
inline void symmetrize(MatrixXd& a) { a = ((a + a.transpose()) * 0.5).eval(); }

/// Projects a symmetric matrix onto the PSD cone by clamping negative
/// eigenvalues at zero. Returns the most negative eigenvalue encountered.
double clamp_psd(MatrixXd& a, double tol = 0.0);

/// Central finite-difference gradient of a scalar function.
VectorXd fd_gradient(const std::function<double(const VectorXd&)>& f,
                     const VectorXd& x, double h = 1e-6);

/// Central finite-difference Jacobian of a vector function.
MatrixXd fd_jacobian(const std::function<VectorXd(const VectorXd&)>& f,
                     const VectorXd& x, double h = 1e-6);

/// Largest relative deviation max|a-b| / max(1, |b|_inf), used by the
/// gradient cross-checks.
double rel_error(const MatrixXd& a, const MatrixXd& b);

}  // namespace gpmpc
