#include "icepilot/dls.hpp"

namespace icepilot::detail {

DlsResult damped_least_squares(const ResidualFn& residual, const ProjectFn& project,
                               Eigen::VectorXd x0, const DlsOptions& options) {
  Eigen::VectorXd x = project(x0);
  Eigen::VectorXd r = residual(x);
  double cost = r.squaredNorm();
  double lambda = options.initial_damping;
  const Eigen::Index n = x.size();

  int it = 0;
  for (; it < options.max_iterations && cost > options.stop_cost; ++it) {
    Eigen::MatrixXd jac(r.size(), n);
    for (Eigen::Index k = 0; k < n; ++k) {
      Eigen::VectorXd xp = x, xm = x;
      xp[k] += options.jacobian_step;
      xm[k] -= options.jacobian_step;
      jac.col(k) = (residual(xp) - residual(xm)) / (2.0 * options.jacobian_step);
    }
    const Eigen::MatrixXd jtj = jac.transpose() * jac;
    const Eigen::VectorXd g = jac.transpose() * r;

    bool improved = false;
    while (lambda < 1e10) {
      Eigen::MatrixXd h = jtj;
      h.diagonal().array() += lambda * (1.0 + jtj.diagonal().array());
      const Eigen::VectorXd step = h.ldlt().solve(-g);
      const Eigen::VectorXd xn = project(x + step);
      const Eigen::VectorXd rn = residual(xn);
      const double cn = rn.squaredNorm();
      if (cn < cost) {
        const double moved = (xn - x).norm();
        x = xn;
        r = rn;
        cost = cn;
        lambda = std::max(lambda / 5.0, 1e-12);
        improved = moved > 1e-15;
        break;
      }
      lambda *= 4.0;
    }
    if (!improved) break;
  }
  return {x, cost, it};
}

}  // namespace icepilot::detail
