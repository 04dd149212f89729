#pragma once

#include <memory>
#include <optional>
#include <string>

#include "icepilot/dataset.hpp"
#include "icepilot/network.hpp"

namespace icepilot {

/// Everything an estimator may look at. The learned model reads only the
/// image; the oracle reads the ground truth.
struct EstimatorQuery {
  const SceneBundle* bundle = nullptr;
  RigidTransform current_home;  // true transducer pose in the home frame
  const SliceImage* image = nullptr;
  ViewClass target = ViewClass::HOME;
};

/// Maps (image, query class) to quantile estimates of the query view's pose
/// relative to the current transducer frame. Implementations are immutable
/// and safe to share across threads.
class Estimator {
 public:
  virtual ~Estimator() = default;
  /// Throws EstimatorFailure.
  virtual QuantilePrediction estimate(const EstimatorQuery& query) const = 0;
  virtual std::string name() const = 0;
  /// Required slice side length, if any.
  virtual std::optional<int> input_size() const { return std::nullopt; }
};

struct OracleParams {
  double margin_mm = 2.0;
  double margin_rad = 0.05;
  double noise_mm = 0.0;
  double noise_rad = 0.0;
  std::uint64_t seed = 0;
};

/// Ground-truth relative pose with fixed bands. Noise, when enabled, is a
/// deterministic function of (seed, query pose, class).
class OracleEstimator final : public Estimator {
 public:
  explicit OracleEstimator(OracleParams params = {}) : params_(params) {}
  QuantilePrediction estimate(const EstimatorQuery& query) const override;
  std::string name() const override { return "oracle"; }
  const OracleParams& params() const { return params_; }

 private:
  OracleParams params_;
};

class LearnedEstimator final : public Estimator {
 public:
  explicit LearnedEstimator(std::shared_ptr<const Network<float>> net) : net_(std::move(net)) {}
  QuantilePrediction estimate(const EstimatorQuery& query) const override;
  std::string name() const override { return "learned"; }
  std::optional<int> input_size() const override { return net_->config().input_size; }
  const Network<float>& network() const { return *net_; }

 private:
  std::shared_ptr<const Network<float>> net_;
};

/// Exact relative pose of the query view from `current_home`.
RigidTransform true_relative_pose(const SceneBundle& bundle, const RigidTransform& current_home, ViewClass target);

}  // namespace icepilot
