#include "bnnkh/trainer.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "bnnkh/error.hpp"
#include "bnnkh/random.hpp"

namespace bnnkh {
namespace {

RowMatrix sign_of(const RowMatrix& m) {
  return m.unaryExpr([](float v) { return v >= 0.0F ? 1.0F : -1.0F; });
}

struct LayerCache {
  RowMatrix input;     // B x in
  RowMatrix binary_w;  // in x out
  RowMatrix xhat;      // B x out
  RowMatrix y;         // B x out, BN output
  Eigen::VectorXf inv_std;
};

}  // namespace

void TrainConfig::validate() const {
  if (batch_size == 0) throw ArgumentError("batch size must be at least 1");
  if (!(learning_rate > 0.0)) throw ArgumentError("learning rate must be positive");
  if (!(latent_clip > 0.0)) throw ArgumentError("latent clip must be positive");
  if (!(bn_momentum >= 0.0 && bn_momentum < 1.0)) throw ArgumentError("BN momentum must be in [0, 1)");
  if (!(bn_epsilon > 0.0)) throw ArgumentError("BN epsilon must be positive");
  for (std::size_t h : hidden) {
    if (h == 0 || h % 2 != 0) throw ArgumentError("hidden widths must be positive and even");
  }
}

LatentModel init_latent(std::size_t input_dim, std::span<const std::size_t> hidden,
                        std::size_t classes, std::uint64_t seed) {
  Rng rng(seed);
  LatentModel model;
  std::size_t in = input_dim;
  for (std::size_t l = 0; l <= hidden.size(); ++l) {
    const bool last = l == hidden.size();
    const std::size_t out = last ? classes : hidden[l];
    LatentLayer layer;
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    layer.weights.resize(static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(out));
    for (Eigen::Index i = 0; i < layer.weights.size(); ++i) {
      layer.weights.data()[i] = static_cast<float>(rng.uniform(-limit, limit));
    }
    const auto n = static_cast<Eigen::Index>(out);
    layer.gamma = Eigen::VectorXf::Ones(n);
    layer.beta = Eigen::VectorXf::Zero(n);
    layer.running_mean = Eigen::VectorXf::Zero(n);
    layer.running_var = Eigen::VectorXf::Ones(n);
    layer.binarized_output = !last;
    model.layers.push_back(std::move(layer));
    in = out;
  }
  return model;
}

RowMatrix binarized_batch(const LabeledDataset& data, std::span<const std::size_t> indices) {
  const auto dim = static_cast<Eigen::Index>(data.image_size());
  RowMatrix x(static_cast<Eigen::Index>(indices.size()), dim);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const auto img = data.image(indices[r]);
    for (Eigen::Index c = 0; c < dim; ++c) {
      x(static_cast<Eigen::Index>(r), c) = img[static_cast<std::size_t>(c)] >= 128 ? 1.0F : -1.0F;
    }
  }
  return x;
}

StepResult compute_gradients(const LatentModel& model, const RowMatrix& inputs,
                             std::span<const std::uint8_t> labels, const TrainConfig& cfg) {
  const Eigen::Index batch = inputs.rows();
  if (batch == 0 || static_cast<std::size_t>(batch) != labels.size()) {
    throw ArgumentError("batch inputs and labels disagree");
  }
  const float eps = static_cast<float>(cfg.bn_epsilon);
  std::vector<LayerCache> caches(model.layers.size());
  StepResult result;

  RowMatrix x = inputs;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& layer = model.layers[l];
    auto& c = caches[l];
    c.input = x;
    c.binary_w = sign_of(layer.weights);
    RowMatrix z = c.input * c.binary_w;
    const Eigen::VectorXf mu = z.colwise().mean().transpose();
    RowMatrix centered = z.rowwise() - mu.transpose();
    const Eigen::VectorXf var = centered.array().square().colwise().mean().transpose();
    c.inv_std = (var.array() + eps).rsqrt().matrix();
    c.xhat = centered.array().rowwise() * c.inv_std.transpose().array();
    c.y = (c.xhat.array().rowwise() * layer.gamma.transpose().array()).rowwise() +
          layer.beta.transpose().array();
    result.stats.mean.push_back(mu);
    result.stats.var.push_back(var);
    if (layer.binarized_output) x = sign_of(c.y);
  }

  // Softmax cross-entropy on the output BN scores.
  const RowMatrix& scores = caches.back().y;
  RowMatrix dy(scores.rows(), scores.cols());
  double loss = 0.0;
  for (Eigen::Index r = 0; r < batch; ++r) {
    const float peak = scores.row(r).maxCoeff();
    const Eigen::RowVectorXf e = (scores.row(r).array() - peak).exp().matrix();
    const float total = e.sum();
    dy.row(r) = e / total;
    const auto label = static_cast<Eigen::Index>(labels[static_cast<std::size_t>(r)]);
    loss -= std::log(static_cast<double>(e(label)) / static_cast<double>(total));
    dy(r, label) -= 1.0F;
  }
  dy /= static_cast<float>(batch);
  result.loss = loss / static_cast<double>(batch);

  result.grads.resize(model.layers.size());
  const float clip = static_cast<float>(cfg.latent_clip);
  for (std::size_t l = model.layers.size(); l-- > 0;) {
    const auto& layer = model.layers[l];
    auto& c = caches[l];
    auto& g = result.grads[l];
    g.gamma = (dy.array() * c.xhat.array()).colwise().sum().transpose();
    g.beta = dy.colwise().sum().transpose();
    const RowMatrix dxhat = dy.array().rowwise() * layer.gamma.transpose().array();
    const Eigen::RowVectorXf sum_dxhat = dxhat.colwise().sum();
    const Eigen::RowVectorXf sum_dxhat_xhat = (dxhat.array() * c.xhat.array()).colwise().sum();
    const float inv_b = 1.0F / static_cast<float>(batch);
    RowMatrix dz = ((dxhat * static_cast<float>(batch)).rowwise() - sum_dxhat).array() -
                   c.xhat.array().rowwise() * sum_dxhat_xhat.array();
    dz = (dz.array().rowwise() * (c.inv_std.transpose().array() * inv_b)).matrix();

    g.weights = c.input.transpose() * dz;
    g.weights = (layer.weights.array().abs() <= clip).select(g.weights, 0.0F);
    if (l == 0) break;
    RowMatrix dx = dz * c.binary_w.transpose();
    // Straight-through sign: pass the gradient where the pre-sign value is in [-1, 1].
    const RowMatrix& prev_y = caches[l - 1].y;
    dy = (prev_y.array().abs() <= 1.0F).select(dx, 0.0F);
  }
  return result;
}

Optimizer::Optimizer(const LatentModel& model, const TrainConfig& cfg) : cfg_(cfg) {
  for (const auto& layer : model.layers) {
    Moments m;
    m.mw = RowMatrix::Zero(layer.weights.rows(), layer.weights.cols());
    m.vw = m.mw;
    m.mg = Eigen::VectorXf::Zero(layer.gamma.size());
    m.vg = m.mg;
    m.mb = m.mg;
    m.vb = m.mg;
    moments_.push_back(std::move(m));
  }
}

void Optimizer::step(LatentModel& model, const StepResult& result) {
  constexpr double kBeta1 = 0.9;
  constexpr double kBeta2 = 0.999;
  constexpr float kAdamEps = 1e-7F;
  ++t_;
  const double correction1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
  const double correction2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
  const auto lr = static_cast<float>(cfg_.learning_rate * std::sqrt(correction2) / correction1);
  const float b1 = kBeta1;
  const float b2 = kBeta2;
  const float clip = static_cast<float>(cfg_.latent_clip);
  const float momentum = static_cast<float>(cfg_.bn_momentum);

  auto update = [&](auto& param, auto& m, auto& v, const auto& grad) {
    m = b1 * m + (1.0F - b1) * grad;
    v = b2 * v + (1.0F - b2) * grad.cwiseProduct(grad);
    param.array() -= lr * m.array() / (v.array().sqrt() + kAdamEps);
  };

  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    auto& layer = model.layers[l];
    auto& mom = moments_[l];
    const auto& g = result.grads[l];
    update(layer.weights, mom.mw, mom.vw, g.weights);
    layer.weights = layer.weights.cwiseMax(-clip).cwiseMin(clip);
    update(layer.gamma, mom.mg, mom.vg, g.gamma);
    update(layer.beta, mom.mb, mom.vb, g.beta);
    layer.running_mean = momentum * layer.running_mean + (1.0F - momentum) * result.stats.mean[l];
    layer.running_var = momentum * layer.running_var + (1.0F - momentum) * result.stats.var[l];
  }
}

BnnModel binarize_latent(const LatentModel& latent, const TrainConfig& cfg) {
  BnnModel model;
  for (const auto& src : latent.layers) {
    const auto in = static_cast<std::size_t>(src.weights.rows());
    const auto out = static_cast<std::size_t>(src.weights.cols());
    BnnLayer layer;
    layer.weights = PackedBitMatrix(in, out);
    for (std::size_t j = 0; j < out; ++j) {
      for (std::size_t i = 0; i < in; ++i) {
        if (src.weights(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) >= 0.0F) {
          layer.weights.set_weight(j, i, 1);
        }
      }
    }
    BatchNormParams bn;
    bn.gamma.assign(src.gamma.data(), src.gamma.data() + src.gamma.size());
    bn.beta.assign(src.beta.data(), src.beta.data() + src.beta.size());
    bn.mean.assign(src.running_mean.data(), src.running_mean.data() + src.running_mean.size());
    bn.variance.assign(src.running_var.data(), src.running_var.data() + src.running_var.size());
    bn.epsilon = static_cast<float>(cfg.bn_epsilon);
    layer.bn = std::move(bn);
    layer.binarized_output = src.binarized_output;
    model.layers.push_back(std::move(layer));
  }
  std::ostringstream prov;
  prov << "ste-trainer seed=" << cfg.seed << " epochs=" << cfg.epochs << " batch=" << cfg.batch_size
       << " lr=" << cfg.learning_rate << " clip=" << cfg.latent_clip
       << " bn_momentum=" << cfg.bn_momentum << " bn_epsilon=" << cfg.bn_epsilon;
  model.provenance = prov.str();
  model.validate();
  return model;
}

TrainResult train_model(const LabeledDataset& train_set, const TrainConfig& cfg,
                        const EpochCallback& on_epoch) {
  cfg.validate();
  if (train_set.empty()) throw ArgumentError("cannot train on an empty dataset");

  LatentModel latent = init_latent(train_set.image_size(), cfg.hidden, kClassCount, cfg.seed);
  Optimizer optimizer(latent, cfg);
  Rng shuffle_rng(mix_seed(cfg.seed, 0x5348));
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainResult result;
  std::vector<std::uint8_t> labels;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      // A single-sample batch has zero variance everywhere; drop it.
      if (end - start < 2 && batches > 0) break;
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      const RowMatrix x = binarized_batch(train_set, idx);
      labels.resize(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) labels[i] = train_set.labels[idx[i]];
      const StepResult step = compute_gradients(latent, x, labels, cfg);
      optimizer.step(latent, step);
      loss_sum += step.loss;
      ++batches;
    }
    const double mean_loss = batches == 0 ? 0.0 : loss_sum / static_cast<double>(batches);
    result.epoch_loss.push_back(mean_loss);
    if (on_epoch) on_epoch(epoch, mean_loss);
  }
  result.model = binarize_latent(latent, cfg);
  return result;
}

BaselineResult reverse_engineer_baseline(const LabeledDataset& attacker_set,
                                         const LabeledDataset& held_out, const TrainConfig& cfg,
                                         const EpochCallback& on_epoch) {
  if (attacker_set.empty()) throw ArgumentError("attacker set is empty");
  if (attacker_set.size() > kThreatModelSamples) {
    throw ArgumentError("attacker set of " + std::to_string(attacker_set.size()) +
                        " samples exceeds the threat-model bound of " +
                        std::to_string(kThreatModelSamples));
  }
  auto trained = train_model(attacker_set, cfg, on_epoch);
  BaselineResult result;
  result.held_out = evaluate_accuracy(trained.model, held_out);
  result.model = std::move(trained.model);
  result.epoch_loss = std::move(trained.epoch_loss);
  return result;
}

}  // namespace bnnkh
