#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "needlebench/nn/model.hpp"
#include "needlebench/sensor.hpp"

namespace needlebench::nn {

struct TrainConfig {
  int epochs = 50;
  double lr = 5e-4;
  int batch = 128;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::uint64_t seed = 0;
  double val_fraction = 0.1;
  /// Windows drawn per epoch (without replacement); 0 uses every window.
  std::size_t windows_per_epoch = 0;
  /// Validation windows, evenly spaced; 0 uses every window.
  std::size_t max_val_windows = 0;

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  void validate() const;
};

class Adam {
 public:
  Adam(std::size_t n, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(std::span<float> params, std::span<const float> grad);
  std::size_t steps() const { return t_; }

 private:
  double lr_, b1_, b2_, eps_;
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

struct EpochStats {
  int epoch = 0;
  double train_mse = 0.0;
  double val_mse = 0.0;
  double val_mae = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  std::vector<EpochStats> history;
  int best_epoch = 0;
  double best_val_mae = 0.0;
};

/// Contiguous train/validation split over window start indices.
struct WindowSplit {
  std::vector<std::size_t> train, val;
};
WindowSplit split_windows(std::size_t frames, int seq_len, double val_fraction);

using ProgressFn = std::function<void(const EpochStats&)>;

/// MSE training with Adam. Per-sample gradients are computed in parallel and
/// summed in sample order, so results do not depend on the thread count.
/// Keeps the parameters of the epoch with the lowest validation MAE.
TrainResult train(ForceModel& model, const sensor::Dataset& ds, const TrainConfig& cfg, ProgressFn progress = {});

/// Mean squared error gradient of one batch of windows; `grad` is overwritten.
double batch_gradient(const ForceModel& model, const sensor::Dataset& ds, std::span<const std::size_t> starts,
                      std::span<float> grad);

struct EvalReport {
  double mae = 0.0;
  std::optional<double> pcc;  // null when either series has zero variance
  double it_ms = 0.0;         // median single-frame streaming inference
  double it_p99_ms = 0.0;
  double tt_ms = 0.0;         // median forward + backward per window
  std::size_t frames = 0;
  std::size_t warmup = 0;
  std::vector<float> predictions;  // one per frame, including warm-up

  nlohmann::json to_json() const;
};

/// Streams every frame through the model; metrics skip the first seq_len - 1 frames.
EvalReport evaluate(const ForceModel& model, const sensor::Dataset& test, int timing_samples = 32);

double mean_absolute_error(std::span<const double> pred, std::span<const double> truth);
std::optional<double> pearson(std::span<const double> a, std::span<const double> b);

/// Window-level validation metrics (cold start per window), used for model selection.
struct WindowMetrics {
  double mse = 0.0, mae = 0.0;
};
WindowMetrics evaluate_windows(const ForceModel& model, const sensor::Dataset& ds, std::span<const std::size_t> starts);

void save_checkpoint(const std::string& path, const ForceModel& model, const nlohmann::json& extra = {});
struct Checkpoint {
  ForceModel model;
  nlohmann::json manifest;
};
Checkpoint load_checkpoint(const std::string& path);

}  // namespace needlebench::nn
