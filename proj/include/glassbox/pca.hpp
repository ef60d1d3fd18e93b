#pragma once

#include "glassbox/core.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace glassbox {

struct SymmetricEigen {
  std::vector<double> values;  // descending
  MatD vectors;                // column i pairs with values[i]
};

// Cyclic Jacobi rotations; converges to machine precision for the small dense
// covariance matrices used here.
inline SymmetricEigen jacobi_eigen(MatD a, int max_sweeps = 100) {
  require(a.rows() == a.cols(), errc::kInvalidArgument, "jacobi_eigen: matrix must be square");
  const Eigen::Index n = a.rows();
  MatD v = MatD::Identity(n, n);
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (Eigen::Index p = 0; p < n; ++p)
      for (Eigen::Index q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    const double scale = a.diagonal().squaredNorm() + 2.0 * off;
    if (off <= 1e-30 * std::max(scale, 1e-300)) break;
    for (Eigen::Index p = 0; p < n; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = std::copysign(1.0, theta) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (Eigen::Index k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index x, Eigen::Index y) { return a(x, x) > a(y, y); });
  SymmetricEigen out;
  out.vectors.resize(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    out.values.push_back(a(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(i)]));
    out.vectors.col(i) = v.col(order[static_cast<std::size_t>(i)]);
  }
  return out;
}

// Flips `v` so its largest-magnitude coordinate (first on ties) is positive.
inline void fix_sign(Eigen::Ref<Eigen::VectorXd> v) {
  Eigen::Index arg = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i)
    if (std::abs(v(i)) > std::abs(v(arg))) arg = i;
  if (v(arg) < 0.0) v = -v;
}

}  // namespace glassbox
