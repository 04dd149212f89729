#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "icepilot/fan.hpp"
#include "icepilot/phantom.hpp"
#include "icepilot/se3.hpp"

namespace icepilot {

struct ModelConfig {
  int input_size = 224;
  std::array<int, 4> extractor_channels{8, 16, 16, 16};
  std::array<int, 4> extractor_strides{2, 2, 2, 1};
  int embed_channels = 4;
  std::array<int, 4> stage_depths{2, 2, 4, 2};
  std::array<int, 4> stage_dims{16, 32, 48, 64};
  int state_dim = 8;
  std::array<double, 3> quantiles{0.02, 0.50, 0.98};
  double lambda = 10.0;
  double position_scale = 30.0;     // mm per unit head output
  double orientation_scale = 0.5;   // rad per unit head output
  double input_mean = 0.3;
  double input_std = 0.2;

  /// Reduced-resolution setup used for CPU training.
  static ModelConfig desk();
  void validate() const;
  /// Side of the feature map leaving the conv extractor.
  int feature_size() const;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Relative pose label: translation (mm) and rotation vector (rad).
struct PoseLabel {
  Vec3 position = Vec3::Zero();
  Vec3 orientation = Vec3::Zero();

  static PoseLabel from_transform(const RigidTransform& t);
};

/// Per axis, three quantile levels in increasing order.
struct QuantilePrediction {
  std::array<std::array<double, 3>, 3> position{};
  std::array<std::array<double, 3>, 3> orientation{};

  /// Pose made of quantile level `level` on every axis (0 = q02, 1 = q50, 2 = q98).
  Pose at(int level) const;
  Pose q50() const { return at(1); }
  bool sorted() const;
};

nlohmann::json to_json(const QuantilePrediction& q);

/// Pinball loss of one element.
double quantile_loss(double y, double y_hat, double alpha);
/// Derivative of quantile_loss with respect to y_hat (0 at the kink from the left).
double quantile_loss_grad(double y, double y_hat, double alpha);

struct LossBreakdown {
  double position = 0.0;
  double orientation = 0.0;
  double total = 0.0;
};

/// Position pinball summed over axes and levels, plus lambda times the same
/// for orientation.
LossBreakdown total_loss(const PoseLabel& label, const QuantilePrediction& pred, const ModelConfig& cfg);

/// Class row of the embedding: the six targets, then HOME.
inline int class_index(ViewClass v) { return static_cast<int>(v); }

struct ParamInfo {
  std::string name;
  std::size_t offset = 0;
  std::vector<int> shape;
  std::size_t size() const;
};

/// Image + view class -> quantile pose prediction. Parameters live in one
/// flat array described by layout(); gradients use the same layout.
template <class T>
class Network {
 public:
  explicit Network(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const std::vector<ParamInfo>& layout() const { return layout_; }
  std::vector<T>& parameters() { return params_; }
  const std::vector<T>& parameters() const { return params_; }
  std::size_t parameter_count() const { return params_.size(); }

  void initialize(std::uint64_t seed);

  /// Outputs in physical units, sorted per axis: position (3 axes x 3
  /// levels) then orientation. image is input_size^2 intensities.
  std::array<T, 18> forward(const T* image, int class_index) const;
  /// Loss of one sample; parameter gradients are accumulated into grad.
  LossBreakdown backward(const T* image, int class_index, const PoseLabel& label, T* grad) const;

  /// Throws ShapeMismatchError when the slice size differs from input_size.
  QuantilePrediction predict(const SliceImage& image, ViewClass view) const;

  struct Trace;

 private:
  struct Conv {
    std::size_t w, b;
    int cin, cout, stride;
  };
  struct Linear {
    std::size_t w, b;
    int cin, cout;
  };
  struct Norm {
    std::size_t g, b;
    int c;
  };
  struct Direction {
    std::size_t w_dt, b_dt, w_b, w_c, a_log, d_skip;
  };
  struct Block {
    int dim;
    Conv conv1, conv2;
    Norm norm;
    Linear in, out;
    std::array<Direction, 4> dirs;
  };
  struct Merge {
    Norm norm;
    Linear proj;
  };

  std::size_t add(const std::string& name, std::vector<int> shape);
  Conv add_conv(const std::string& name, int cin, int cout, int stride);
  Linear add_linear(const std::string& name, int cin, int cout);
  Norm add_norm(const std::string& name, int c);

  std::array<T, 18> run(const T* image, int cls, Trace* trace) const;

  ModelConfig config_;
  std::vector<ParamInfo> layout_;
  std::vector<T> params_;
  std::array<Conv, 4> extractor_{};
  Linear embed_{};
  Linear mix_{};
  std::vector<std::vector<Block>> stages_;
  std::array<Merge, 3> merges_{};
  Linear head_pos_{}, head_ori_{};
  int mix_in_ = 0;
};

extern template class Network<float>;
extern template class Network<double>;

/// Converts a slice to network input order (row-major intensities).
template <class T>
std::vector<T> image_input(const SliceImage& image);

}  // namespace icepilot
