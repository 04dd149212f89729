#include "icepilot/pipeline.hpp"

#include <algorithm>
#include <cmath>

#include "icepilot/errors.hpp"

namespace icepilot {

std::vector<TrainingImage> training_images(const Dataset& data) {
  std::vector<TrainingImage> out;
  out.reserve(data.records.size());
  for (const auto& r : data.records) out.push_back({r.image.intensity.data(), r.labels});
  return out;
}

std::vector<Sample> validation_samples(const Dataset& data) {
  std::vector<Sample> out;
  out.reserve(data.records.size() * kQueryClassCount);
  for (const auto& r : data.records)
    for (int k = 0; k < kQueryClassCount; ++k) out.push_back({r.image.intensity.data(), k, r.labels[k]});
  return out;
}

std::pair<Dataset, Dataset> split_by_scene(const Dataset& data, double fraction) {
  const int n = static_cast<int>(data.scenes.size());
  if (n < 2) throw DataUnderrunError("split_by_scene: need at least two scenes");
  const int held = std::clamp(static_cast<int>(std::ceil(fraction * n)), 1, n - 1);
  const int cut = n - held;
  Dataset a, b;
  a.scenes.assign(data.scenes.begin(), data.scenes.begin() + cut);
  b.scenes.assign(data.scenes.begin() + cut, data.scenes.end());
  for (const auto& r : data.records) {
    if (r.scene_index < cut) {
      a.records.push_back(r);
    } else {
      b.records.push_back(r);
      b.records.back().scene_index -= cut;
    }
  }
  return {std::move(a), std::move(b)};
}

namespace {

void check_shapes(const Dataset& d, int side) {
  for (const auto& r : d.records)
    if (r.image.width != side || r.image.height != side)
      throw ShapeMismatchError("training: renders are " + std::to_string(r.image.width) + "x" +
                               std::to_string(r.image.height) + ", model expects " + std::to_string(side));
}

}  // namespace

TrainedModel train_model(const ModelConfig& model, const TrainConfig& config, const Dataset& train_data,
                         const Dataset& val_data, const std::function<void(const EpochLog&)>& on_epoch) {
  check_shapes(train_data, model.input_size);
  check_shapes(val_data, model.input_size);
  if (val_data.records.empty()) throw DataUnderrunError("training: empty validation set");
  auto net = std::make_shared<Network<float>>(model);
  net->initialize(config.seed);
  const auto images = training_images(train_data);
  const auto val = validation_samples(val_data);
  TrainedModel out{net, train(*net, images, val, config, on_epoch)};
  return out;
}

}  // namespace icepilot
