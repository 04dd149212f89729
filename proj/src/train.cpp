#include "icepilot/train.hpp"

#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

#include "icepilot/errors.hpp"

namespace icepilot {

nlohmann::json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size}, {"max_epochs", c.max_epochs},
          {"patience", c.patience},           {"grad_clip", c.grad_clip},   {"seed", c.seed},
          {"min_records", c.min_records}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.patience = j.value("patience", c.patience);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.seed = j.value("seed", c.seed);
  c.min_records = j.value("min_records", c.min_records);
  if (c.learning_rate <= 0 || c.batch_size < 1 || c.max_epochs < 1 || c.patience < 1)
    throw ConfigError("invalid training configuration");
  return c;
}

nlohmann::json to_json(const EpochLog& e) {
  return {{"epoch", e.epoch},
          {"train_loss", e.train_loss},
          {"val_loss", e.val_loss},
          {"val_position", e.val_position},
          {"val_orientation", e.val_orientation},
          {"seconds", e.seconds}};
}

nlohmann::json to_json(const TrainResult& r) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const EpochLog& e : r.epochs) epochs.push_back(to_json(e));
  return {{"initial_val_loss", r.initial_val_loss},
          {"best_val_loss", r.best_val_loss},
          {"best_epoch", r.best_epoch},
          {"epochs", epochs}};
}

template <class T>
double batch_gradient(const Network<T>& net, std::span<const Sample> batch, std::vector<T>& grad, bool parallel) {
  const std::size_t n = net.parameter_count(), b = batch.size();
  std::vector<T> per_sample(n * b, T(0));
  std::vector<double> losses(b, 0.0);
  auto one = [&](std::size_t i) {
    std::vector<T> img(batch[i].image, batch[i].image + static_cast<std::size_t>(net.config().input_size) *
                                                               net.config().input_size);
    losses[i] = net.backward(img.data(), batch[i].class_index, batch[i].label, per_sample.data() + i * n).total;
  };
  if (parallel) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(b); ++i) one(static_cast<std::size_t>(i));
  } else {
    for (std::size_t i = 0; i < b; ++i) one(i);
  }
  grad.assign(n, T(0));
  for (std::size_t i = 0; i < b; ++i) {
    const T* g = per_sample.data() + i * n;
    for (std::size_t k = 0; k < n; ++k) grad[k] += g[k];
  }
  const T inv = T(1) / static_cast<T>(b);
  for (T& g : grad) g *= inv;
  return std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(b);
}

template <class T>
LossBreakdown mean_loss(const Network<T>& net, std::span<const Sample> samples, bool parallel) {
  std::vector<LossBreakdown> parts(samples.size());
  const std::size_t pixels = static_cast<std::size_t>(net.config().input_size) * net.config().input_size;
  auto one = [&](std::size_t i) {
    std::vector<T> img(samples[i].image, samples[i].image + pixels);
    const std::array<T, 18> out = net.forward(img.data(), samples[i].class_index);
    QuantilePrediction q;
    for (int a = 0; a < 3; ++a)
      for (int l = 0; l < 3; ++l) {
        q.position[a][l] = out[a * 3 + l];
        q.orientation[a][l] = out[9 + a * 3 + l];
      }
    parts[i] = total_loss(samples[i].label, q, net.config());
  };
  if (parallel) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(samples.size()); ++i) one(static_cast<std::size_t>(i));
  } else {
    for (std::size_t i = 0; i < samples.size(); ++i) one(i);
  }
  LossBreakdown sum;
  for (const LossBreakdown& p : parts) {
    sum.position += p.position;
    sum.orientation += p.orientation;
    sum.total += p.total;
  }
  const double n = std::max<std::size_t>(samples.size(), 1);
  return {sum.position / n, sum.orientation / n, sum.total / n};
}

Adam::Adam(std::size_t n, double lr, double beta1, double beta2, double eps)
    : m_(n, 0.0), v_(n, 0.0), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

void Adam::step(std::vector<float>& params, const std::vector<float>& grad) {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grad[i];
    m_[i] = b1_ * m_[i] + (1.0 - b1_) * g;
    v_[i] = b2_ * v_[i] + (1.0 - b2_) * g * g;
    params[i] -= static_cast<float>(lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_));
  }
}

TrainResult train(Network<float>& net, std::span<const TrainingImage> train_set, std::span<const Sample> validation,
                  const TrainConfig& config, const std::function<void(const EpochLog&)>& on_epoch) {
  if (train_set.size() < config.min_records)
    throw DataUnderrunError("training needs at least " + std::to_string(config.min_records) + " records, got " +
                            std::to_string(train_set.size()));
  if (validation.empty()) throw EmptyDatasetError("validation set is empty");
  std::mt19937_64 rng(config.seed);
  Adam adam(net.parameter_count(), config.learning_rate);
  TrainResult result;
  result.initial_val_loss = mean_loss(net, validation, config.parallel).total;
  result.best_val_loss = result.initial_val_loss;
  std::vector<float> best = net.parameters();
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<float> grad;
  int since_best = 0;
  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    std::uniform_int_distribution<int> cls(0, kQueryClassCount - 1);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    std::vector<Sample> batch;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      batch.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + config.batch_size); ++i) {
        const TrainingImage& img = train_set[order[i]];
        const int c = cls(rng);
        batch.push_back({img.image, c, img.labels[c]});
      }
      loss_sum += batch_gradient(net, std::span<const Sample>(batch), grad, config.parallel);
      if (config.grad_clip > 0) {
        double norm = 0;
        for (float g : grad) norm += static_cast<double>(g) * g;
        norm = std::sqrt(norm);
        if (norm > config.grad_clip)
          for (float& g : grad) g = static_cast<float>(g * config.grad_clip / norm);
      }
      adam.step(net.parameters(), grad);
      ++batches;
    }
    const LossBreakdown val = mean_loss(net, validation, config.parallel);
    EpochLog log;
    log.epoch = epoch;
    log.train_loss = loss_sum / static_cast<double>(std::max<std::size_t>(batches, 1));
    log.val_loss = val.total;
    log.val_position = val.position;
    log.val_orientation = val.orientation;
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.epochs.push_back(log);
    if (on_epoch) on_epoch(log);
    if (val.total < result.best_val_loss) {
      result.best_val_loss = val.total;
      result.best_epoch = epoch;
      best = net.parameters();
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }
  net.parameters() = best;
  return result;
}

template double batch_gradient<float>(const Network<float>&, std::span<const Sample>, std::vector<float>&, bool);
template double batch_gradient<double>(const Network<double>&, std::span<const Sample>, std::vector<double>&, bool);
template LossBreakdown mean_loss<float>(const Network<float>&, std::span<const Sample>, bool);
template LossBreakdown mean_loss<double>(const Network<double>&, std::span<const Sample>, bool);

}  // namespace icepilot
