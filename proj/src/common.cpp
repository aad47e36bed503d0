#include "gpmpc/common.hpp"

#include <cmath>
#include <thread>
#include <vector>

namespace gpmpc {

double probit(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    throw std::invalid_argument("probit: p must lie in (0,1), got " + std::to_string(p));
  }
  // Acklam's rational approximation with the usual three-region split.
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                             2.445134137142996e+00, 3.754408661907416e+00};
  const double plow = 0.02425;
  double q, r, x;
  if (p < plow) {
    q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - plow) {
    q = p - 0.5;
    r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  // One Halley refinement step pushes the error to ~1e-15.
  const double e = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
  const double u = e * std::sqrt(2.0 * M_PI) * std::exp(x * x / 2.0);
  return x - u / (1.0 + x * u / 2.0);
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

void parallel_for(int n, const std::function<void(int)>& fn) {
  if (n <= 0) return;
  const int hw = static_cast<int>(std::thread::hardware_concurrency());
  const int workers = std::max(1, std::min(hw, n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w]() {
      for (int i = w; i < n; i += workers) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

double clamp_psd(MatrixXd& a, double tol) {
  symmetrize(a);
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(a);
  const double min_eig = es.eigenvalues().minCoeff();
  if (min_eig >= -tol) return min_eig;
  VectorXd ev = es.eigenvalues().cwiseMax(0.0);
  a = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
  symmetrize(a);
  return min_eig;
}

VectorXd fd_gradient(const std::function<double(const VectorXd&)>& f,
                     const VectorXd& x, double h) {
  VectorXd g(x.size());
  VectorXd xp = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double hi = h * std::max(1.0, std::abs(x[i]));
    xp[i] = x[i] + hi;
    const double fp = f(xp);
    xp[i] = x[i] - hi;
    const double fm = f(xp);
    xp[i] = x[i];
    g[i] = (fp - fm) / (2.0 * hi);
  }
  return g;
}

MatrixXd fd_jacobian(const std::function<VectorXd(const VectorXd&)>& f,
                     const VectorXd& x, double h) {
  VectorXd xp = x;
  MatrixXd jac;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double hi = h * std::max(1.0, std::abs(x[i]));
    xp[i] = x[i] + hi;
    const VectorXd fp = f(xp);
    xp[i] = x[i] - hi;
    const VectorXd fm = f(xp);
    xp[i] = x[i];
    if (jac.size() == 0) jac.resize(fp.size(), x.size());
    jac.col(i) = (fp - fm) / (2.0 * hi);
  }
  return jac;
}

double rel_error(const MatrixXd& a, const MatrixXd& b) {
  const double scale = std::max(1.0, b.cwiseAbs().maxCoeff());
  return (a - b).cwiseAbs().maxCoeff() / scale;
}

}  // namespace gpmpc
