#pragma once

#include <functional>
#include <span>
#include <vector>

#include "icepilot/network.hpp"

namespace icepilot {

/// One training case: an image, the query class and its label.
struct Sample {
  const float* image = nullptr;
  int class_index = 0;
  PoseLabel label;
};

struct TrainConfig {
  double learning_rate = 1e-4;
  int batch_size = 32;
  int max_epochs = 50;
  int patience = 5;          // epochs without validation improvement
  double grad_clip = 0.0;    // global-norm clip, 0 = off
  std::uint64_t seed = 1;
  bool parallel = true;
  std::size_t min_records = 100;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_position = 0.0;
  double val_orientation = 0.0;
  double seconds = 0.0;
};

nlohmann::json to_json(const EpochLog& e);

struct TrainResult {
  double initial_val_loss = 0.0;
  double best_val_loss = 0.0;
  int best_epoch = 0;
  std::vector<EpochLog> epochs;
};

nlohmann::json to_json(const TrainResult& r);

/// Mean total loss over the batch; the mean gradient is written to grad.
/// Per-sample gradients are summed in index order, so the parallel kernel and
/// the serial path give identical results.
template <class T>
double batch_gradient(const Network<T>& net, std::span<const Sample> batch, std::vector<T>& grad, bool parallel);

/// Mean loss components over a sample set (no gradients).
template <class T>
LossBreakdown mean_loss(const Network<T>& net, std::span<const Sample> samples, bool parallel = true);

class Adam {
 public:
  explicit Adam(std::size_t n, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(std::vector<float>& params, const std::vector<float>& grad);
  void set_learning_rate(double lr) { lr_ = lr; }

 private:
  std::vector<double> m_, v_;
  double lr_, b1_, b2_, eps_;
  long t_ = 0;
};

/// Training images come with all query labels; each epoch draws one class
/// per image from a seeded stream. Validation samples are fixed. Keeps the
/// parameters of the best validation epoch. Throws DataUnderrunError below
/// min_records images.
struct TrainingImage {
  const float* image;
  std::array<PoseLabel, kQueryClassCount> labels;
};

TrainResult train(Network<float>& net, std::span<const TrainingImage> train_set,
                  std::span<const Sample> validation, const TrainConfig& config,
                  const std::function<void(const EpochLog&)>& on_epoch = {});

}  // namespace icepilot
