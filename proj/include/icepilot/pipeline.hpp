#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "icepilot/dataset.hpp"
#include "icepilot/train.hpp"

namespace icepilot {

/// Views into a dataset's images; the dataset must outlive them.
std::vector<TrainingImage> training_images(const Dataset& data);
/// Every record paired with every query class.
std::vector<Sample> validation_samples(const Dataset& data);

/// Splits off the last ceil(fraction * scenes) scenes, renumbering scene indices.
std::pair<Dataset, Dataset> split_by_scene(const Dataset& data, double fraction);

struct TrainedModel {
  std::shared_ptr<Network<float>> network;
  TrainResult result;
};

/// Fresh network seeded from config.seed, trained on `train_data` with early
/// stopping on `val_data`. Throws ShapeMismatchError when the renders do not
/// match the model input.
TrainedModel train_model(const ModelConfig& model, const TrainConfig& config, const Dataset& train_data,
                         const Dataset& val_data, const std::function<void(const EpochLog&)>& on_epoch = {});

}  // namespace icepilot
