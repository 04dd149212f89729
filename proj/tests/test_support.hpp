#pragma once

#include <cmath>
#include <numbers>
#include <random>

#include "icepilot/se3.hpp"

namespace testing {

inline icepilot::Vec3 random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  icepilot::Vec3 v(n(rng), n(rng), n(rng));
  return v.normalized();
}

/// Rotation vector with magnitude uniform in [0, max_angle).
inline icepilot::Vec3 random_rotvec(std::mt19937_64& rng, double max_angle) {
  std::uniform_real_distribution<double> u(0.0, max_angle);
  return random_unit(rng) * u(rng);
}

inline icepilot::RigidTransform random_transform(std::mt19937_64& rng, double max_translation = 100.0) {
  std::uniform_real_distribution<double> t(-max_translation, max_translation);
  return {icepilot::rotation_from_vector(random_rotvec(rng, std::numbers::pi - 1e-3)),
          icepilot::Vec3(t(rng), t(rng), t(rng))};
}

inline double max_abs_diff(const icepilot::RigidTransform& a, const icepilot::RigidTransform& b) {
  return std::max((a.rotation() - b.rotation()).cwiseAbs().maxCoeff(),
                  (a.translation() - b.translation()).cwiseAbs().maxCoeff());
}

}  // namespace testing
