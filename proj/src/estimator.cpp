#include "icepilot/estimator.hpp"

#include <bit>
#include <random>

#include "icepilot/errors.hpp"

namespace icepilot {

RigidTransform true_relative_pose(const SceneBundle& bundle, const RigidTransform& current_home, ViewClass target) {
  const auto it = bundle.targets.find(target);
  if (it == bundle.targets.end()) throw EstimatorFailure("scene has no target for " + to_string(target));
  return relative_to_frame(current_home, pose_to_transform(it->second.pose));
}

QuantilePrediction OracleEstimator::estimate(const EstimatorQuery& query) const {
  if (!query.bundle) throw EstimatorFailure("oracle estimator needs the scene");
  const Pose q50 = transform_to_pose(true_relative_pose(*query.bundle, query.current_home, query.target));
  Vec3 dp = Vec3::Zero(), dr = Vec3::Zero();
  if (params_.noise_mm > 0 || params_.noise_rad > 0) {
    std::uint64_t h = params_.seed ^ (0x9e3779b97f4a7c15ULL * (class_index(query.target) + 1));
    const Vec3 t = query.current_home.translation();
    const Mat3& r = query.current_home.rotation();
    for (int i = 0; i < 3; ++i) {
      h = derive_seed(h, std::bit_cast<std::uint64_t>(t[i]));
      h = derive_seed(h, std::bit_cast<std::uint64_t>(r(i, 0) + 2 * r(i, 1) + 3 * r(i, 2)));
    }
    std::mt19937_64 rng(h);
    std::normal_distribution<double> n(0.0, 1.0);
    for (int i = 0; i < 3; ++i) dp[i] = params_.noise_mm * n(rng);
    for (int i = 0; i < 3; ++i) dr[i] = params_.noise_rad * n(rng);
  }
  QuantilePrediction out;
  for (int a = 0; a < 3; ++a) {
    const double p = q50.position[a] + dp[a], o = q50.orientation[a] + dr[a];
    out.position[a] = {p - params_.margin_mm, p, p + params_.margin_mm};
    out.orientation[a] = {o - params_.margin_rad, o, o + params_.margin_rad};
  }
  return out;
}

QuantilePrediction LearnedEstimator::estimate(const EstimatorQuery& query) const {
  if (!query.image) throw EstimatorFailure("learned estimator needs a slice");
  try {
    return net_->predict(*query.image, query.target);
  } catch (const Error& e) {
    throw EstimatorFailure(std::string("model error: ") + e.what());
  }
}

}  // namespace icepilot
