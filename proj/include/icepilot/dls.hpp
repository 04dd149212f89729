#pragma once

#include <functional>

#include <Eigen/Dense>

namespace icepilot::detail {

struct DlsOptions {
  int max_iterations = 200;
  double initial_damping = 1e-3;
  double jacobian_step = 1e-5;
  double stop_cost = 1e-24;
};

struct DlsResult {
  Eigen::VectorXd x;
  double cost = 0.0;  // squared residual norm
  int iterations = 0;
};

using ResidualFn = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;
using ProjectFn = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

/// Levenberg-style damped least squares with a central-difference Jacobian.
/// `project` maps every trial point back onto the feasible set.
DlsResult damped_least_squares(const ResidualFn& residual, const ProjectFn& project,
                               Eigen::VectorXd x0, const DlsOptions& options);

}  // namespace icepilot::detail
