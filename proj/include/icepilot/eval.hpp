#pragma once

#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "icepilot/guidance.hpp"

namespace icepilot {

/// One (image, goal) evaluation case.
struct EvalCase {
  const SliceRecord* record = nullptr;
  ViewClass goal = ViewClass::RV;
};

/// Goals assigned round-robin over the records, or every goal per record.
std::vector<EvalCase> make_cases(const Dataset& data, bool all_goals = false);

struct EvalSample {
  int scene_index = 0;
  std::uint64_t scene_seed = 0;
  ViewClass view = ViewClass::RV;
  JointState joints;
  FanMetrics metrics;             // q50 fan against the goal mesh
  bool out_of_boundary = false;   // q50 fan not in volume
  bool all_quantiles_in_volume = false;
  std::array<bool, 6> covered{};  // label inside [q02, q98]: position xyz, orientation xyz
};

/// Bins of equal width partitioning [0, bin_width * counts.size()), plus an
/// explicit out-of-boundary bin.
struct Histogram {
  double bin_width = 0.05;
  std::vector<long> counts;
  long oob = 0;

  long total() const;
  double upper() const { return bin_width * static_cast<double>(counts.size()); }
};

/// Values of in-boundary samples must be non-negative. `min_upper` sets the
/// smallest covered range; it grows to hold the largest in-boundary value.
Histogram make_histogram(std::span<const double> values, std::span<const std::uint8_t> oob, double bin_width,
                         double min_upper);

struct ViewBreakdown {
  long count = 0;
  long correct = 0;
  double accuracy = 0.0;
  Histogram normalized;
};

struct NearbyPair {
  int scene_index = 0;
  JointState a, b;
  std::uint64_t noise_a = 0, noise_b = 0;
};

/// Pairs whose true transducer poses differ by at most max_mm and max_rad.
std::vector<NearbyPair> make_nearby_pairs(int count, int scenes, const CatheterModel& catheter, const StartBox& box,
                                          double max_mm, double max_rad, std::mt19937_64& rng);

/// Difference of the two q50 goal predictions, both expressed in the home frame.
struct NearbyCell {
  int pair = 0;
  ViewClass view = ViewClass::RV;
  double position_mm = 0.0;
  Vec3 orientation_rad = Vec3::Zero();  // per-axis |difference| of rotation vectors
};

struct NearbyTable {
  std::vector<NearbyCell> cells;
  double fraction_within(double max_mm, double max_rad) const;
};

struct DispersionEllipse {
  Vec3 mean = Vec3::Zero();
  Vec3 std = Vec3::Zero();          // per axis
  Vec3 semi_axes = Vec3::Zero();    // principal standard deviations, descending
  Mat3 axes = Mat3::Identity();     // columns: principal directions
};

DispersionEllipse dispersion_ellipse(std::span<const Vec3> points);

struct StabilityEntry {
  int trajectory = 0;
  ViewClass view = ViewClass::RV;
  DispersionEllipse apex;
  DispersionEllipse endpoint;
};

struct StabilityReport {
  std::vector<StabilityEntry> entries;
  double max_endpoint_std() const;
};

struct EvalOptions {
  FanParams fan{};
  RenderParams render{};
  bool parallel = true;
};

struct EvalReport {
  std::string estimator;
  long total = 0;
  long correct = 0;
  double accuracy = 0.0;
  double all_quantile_fraction = 0.0;
  std::array<double, 6> coverage{};
  std::vector<EvalSample> samples;
  Histogram normalized;
  Histogram real;
  std::map<ViewClass, ViewBreakdown> per_view;
  std::optional<NearbyTable> nearby;
  std::optional<StabilityReport> stability;
  nlohmann::json config = nlohmann::json::object();
  std::string dataset_hash;
};

/// Throws EmptyDatasetError without cases.
EvalReport evaluate(std::span<const SceneBundle> scenes, std::span<const EvalCase> cases, const CatheterModel& catheter,
                    const Estimator& estimator, const EvalOptions& options = {});

NearbyTable nearby_view_test(std::span<const SceneBundle> scenes, std::span<const NearbyPair> pairs,
                             const CatheterModel& catheter, const Estimator& estimator,
                             const EvalOptions& options = {});

/// Straight joint-space trajectories of `points` states between two start-box samples.
std::vector<std::vector<JointState>> make_trajectories(int count, int points, const StartBox& box, std::mt19937_64& rng);

StabilityReport stability_test(const SceneBundle& bundle, const CatheterModel& catheter, const Estimator& estimator,
                               std::span<const std::vector<JointState>> trajectories, std::span<const ViewClass> goals,
                               const GuidanceConfig& config = {});

nlohmann::json to_json(const Histogram& h);
Histogram histogram_from_json(const nlohmann::json& j);
nlohmann::json to_json(const EvalReport& r);
EvalReport eval_report_from_json(const nlohmann::json& j);

/// Histogram rows: histogram,view,lower,upper,count (OOB rows have empty bounds).
std::string histograms_csv(const EvalReport& r);
/// Static bar charts of the normalized-distance histograms.
std::string histogram_svg(const EvalReport& r);

}  // namespace icepilot
