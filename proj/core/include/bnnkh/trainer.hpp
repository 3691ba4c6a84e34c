#pragma once

// Straight-through-estimator training of the binarized MLP.

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "bnnkh/bnn.hpp"
#include "bnnkh/dataset.hpp"

namespace bnnkh {

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 128;
  std::uint64_t seed = 1;
  double learning_rate = 1e-3;
  double latent_clip = 1.0;
  double bn_momentum = 0.9;
  double bn_epsilon = 1e-5;
  std::vector<std::size_t> hidden = {512, 512, 512};

  void validate() const;
};

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct LatentLayer {
  RowMatrix weights;  // in x out latent reals in [-clip, clip]
  Eigen::VectorXf gamma, beta;
  Eigen::VectorXf running_mean, running_var;
  bool binarized_output = true;
};

struct LatentModel {
  std::vector<LatentLayer> layers;
};

/// Glorot-uniform latent weights, gamma = 1, beta = 0, running stats (0, 1).
LatentModel init_latent(std::size_t input_dim, std::span<const std::size_t> hidden,
                        std::size_t classes, std::uint64_t seed);

struct LayerGradients {
  RowMatrix weights;
  Eigen::VectorXf gamma, beta;
};

struct BatchStats {
  std::vector<Eigen::VectorXf> mean, var;
};

struct StepResult {
  double loss = 0.0;
  std::vector<LayerGradients> grads;
  BatchStats stats;
};

/// Forward in training mode (batch statistics) and STE backward pass for one
/// batch. `inputs` rows are ±1 binarized images. Weight gradients are zero
/// wherever |latent| > latent_clip.
StepResult compute_gradients(const LatentModel& model, const RowMatrix& inputs,
                             std::span<const std::uint8_t> labels, const TrainConfig& cfg);

/// Adam state plus the update rule; clips latent weights after each step.
class Optimizer {
 public:
  Optimizer(const LatentModel& model, const TrainConfig& cfg);
  void step(LatentModel& model, const StepResult& result);

 private:
  struct Moments {
    RowMatrix mw, vw;
    Eigen::VectorXf mg, vg, mb, vb;
  };
  TrainConfig cfg_;
  std::vector<Moments> moments_;
  std::size_t t_ = 0;
};

/// sign(latent) weights (sign(0) = +1) with frozen running statistics.
BnnModel binarize_latent(const LatentModel& latent, const TrainConfig& cfg);

RowMatrix binarized_batch(const LabeledDataset& data, std::span<const std::size_t> indices);

struct TrainResult {
  BnnModel model;
  std::vector<double> epoch_loss;  // mean batch loss per epoch
};

using EpochCallback = std::function<void(std::size_t epoch, double mean_loss)>;

TrainResult train_model(const LabeledDataset& train_set, const TrainConfig& cfg,
                        const EpochCallback& on_epoch = {});

struct BaselineResult {
  BnnModel model;
  Accuracy held_out;
  std::vector<double> epoch_loss;
};

/// Trains from scratch on the attacker's samples only and scores the result on
/// the test samples the attacker was not given.
BaselineResult reverse_engineer_baseline(const LabeledDataset& attacker_set,
                                         const LabeledDataset& held_out, const TrainConfig& cfg,
                                         const EpochCallback& on_epoch = {});

inline constexpr std::size_t kThreatModelSamples = 5000;

}  // namespace bnnkh
