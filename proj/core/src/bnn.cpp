#include "bnnkh/bnn.hpp"

#include <algorithm>
#include <limits>

#include "bnnkh/error.hpp"
#include "bnnkh/parallel.hpp"

namespace bnnkh {

PackedBitMatrix::PackedBitMatrix(std::size_t in_dim, std::size_t out_dim)
    : in_dim_(in_dim), out_dim_(out_dim), words_(words_for_bits(in_dim)), bits_(out_dim * words_, 0) {}

void PackedBitMatrix::set_weight(std::size_t out, std::size_t in, int w) noexcept {
  auto& word = bits_[out * words_ + in / 64];
  const std::uint64_t mask = std::uint64_t{1} << (in % 64);
  word = w > 0 ? (word | mask) : (word & ~mask);
}

void PackedBitMatrix::swap_rows(std::size_t a, std::size_t b) noexcept {
  if (a == b) return;
  std::swap_ranges(bits_.begin() + static_cast<std::ptrdiff_t>(a * words_),
                   bits_.begin() + static_cast<std::ptrdiff_t>((a + 1) * words_),
                   bits_.begin() + static_cast<std::ptrdiff_t>(b * words_));
}

bool PackedBitMatrix::padding_clear() const noexcept {
  const std::size_t tail = in_dim_ % 64;
  if (tail == 0 || words_ == 0) return true;
  const std::uint64_t pad_mask = ~((std::uint64_t{1} << tail) - 1);
  for (std::size_t j = 0; j < out_dim_; ++j) {
    if (bits_[j * words_ + words_ - 1] & pad_mask) return false;
  }
  return true;
}

std::vector<std::size_t> BnnModel::hidden_layers() const {
  std::vector<std::size_t> out;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (layers[l].binarized_output) out.push_back(l);
  }
  return out;
}

void BnnModel::validate() const {
  if (layers.empty()) throw InvariantError("model has no layers");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& layer = layers[l];
    const std::string where = "layer " + std::to_string(l);
    if (layer.in_dim() == 0 || layer.out_dim() == 0) throw InvariantError(where + ": empty dimension");
    if (!layer.weights.padding_clear()) throw InvariantError(where + ": nonzero padding bits");
    if (l + 1 < layers.size() && layer.out_dim() != layers[l + 1].in_dim()) {
      throw InvariantError(where + ": out_dim " + std::to_string(layer.out_dim()) +
                           " does not chain to next in_dim " +
                           std::to_string(layers[l + 1].in_dim()));
    }
    const bool last = l + 1 == layers.size();
    if (last == layer.binarized_output) {
      throw InvariantError(where + (last ? ": output layer must not binarize"
                                         : ": hidden layer must binarize"));
    }
    if (!layer.bn) continue;
    const auto& bn = *layer.bn;
    const std::size_t n = layer.out_dim();
    if (bn.gamma.size() != n || bn.beta.size() != n || bn.mean.size() != n ||
        bn.variance.size() != n) {
      throw InvariantError(where + ": batch-norm arrays not sized to out_dim");
    }
    if (!(bn.epsilon > 0.0F)) throw InvariantError(where + ": epsilon must be positive");
    for (std::size_t k = 0; k < n; ++k) {
      if (!(bn.variance[k] >= 0.0F)) {
        throw InvariantError(where + ": variance[" + std::to_string(k) + "] = " +
                             std::to_string(bn.variance[k]) + " is negative");
      }
      if (!std::isfinite(bn.gamma[k]) || !std::isfinite(bn.beta[k]) || !std::isfinite(bn.mean[k]) ||
          !std::isfinite(bn.variance[k])) {
        throw InvariantError(where + ": non-finite batch-norm entry at index " + std::to_string(k));
      }
    }
  }
}

PackedBits binarize_input(std::span<const std::uint8_t> pixels) {
  PackedBits bits(pixels.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    if (pixels[i] >= 128) bits.words[i / 64] |= std::uint64_t{1} << (i % 64);
  }
  return bits;
}

void layer_preactivation(const PackedBitMatrix& weights, const PackedBits& x,
                         std::span<std::int32_t> out) {
  if (x.size != weights.in_dim() || out.size() != weights.out_dim()) {
    throw ArgumentError("preactivation dimension mismatch: input " + std::to_string(x.size) +
                        " vs in_dim " + std::to_string(weights.in_dim()));
  }
  for (std::size_t j = 0; j < weights.out_dim(); ++j) {
    out[j] = xnor_dot(weights.row(j), x.words, weights.in_dim());
  }
}

std::vector<std::int32_t> layer_preactivation(const PackedBitMatrix& weights, const PackedBits& x) {
  std::vector<std::int32_t> out(weights.out_dim());
  layer_preactivation(weights, x, out);
  return out;
}

int bn_sign(std::int32_t a, double gamma, double beta, double mean, double variance,
            double epsilon) noexcept {
  return bn_affine(a, gamma, beta, mean, variance, epsilon) >= 0.0 ? 1 : -1;
}

NeuronThreshold fuse_threshold(double gamma, double beta, double mean, double variance,
                               double epsilon, std::int32_t in_dim) {
  constexpr std::int32_t kMin = std::numeric_limits<std::int32_t>::min();
  constexpr std::int32_t kMax = std::numeric_limits<std::int32_t>::max();
  auto sign_at = [&](std::int32_t a) { return bn_sign(a, gamma, beta, mean, variance, epsilon); };
  const std::int32_t low = -in_dim;
  const std::int32_t high = in_dim;

  NeuronThreshold t;
  t.reference = std::abs(gamma) < 1e-12;
  // bn_affine is monotone in `a` (each floating-point step is a monotone
  // rounding), so the +1 region within [low, high] is a prefix or a suffix.
  const bool increasing = gamma >= 0.0;

  // Smallest a in [low, high + 1] satisfying a monotone predicate on the sign.
  auto boundary_search = [&](auto is_plus) {
    std::int32_t lo = low;
    std::int32_t hi = high + 1;
    while (lo < hi) {
      const std::int32_t mid = lo + (hi - lo) / 2;
      if (is_plus(sign_at(mid))) {
        hi = mid;
      } else {
        lo = mid + 1;
      }
    }
    return lo;
  };

  if (t.reference) {
    if (increasing) {
      const std::int32_t first_plus = boundary_search([](int s) { return s > 0; });
      if (first_plus > high) {
        t.lo = 0;
        t.hi = -1;
      } else {
        t.lo = first_plus == low ? kMin : first_plus;
        t.hi = kMax;
      }
    } else {
      const std::int32_t first_minus = boundary_search([](int s) { return s < 0; });
      if (first_minus == low) {
        t.lo = 0;
        t.hi = -1;
      } else {
        t.lo = kMin;
        t.hi = first_minus > high ? kMax : first_minus - 1;
      }
    }
    return t;
  }

  // Closed form: gamma * (a - mean) / s + beta >= 0  <=>  a >= mean - beta * s / gamma (gamma > 0).
  const double cut = mean - beta * std::sqrt(variance + epsilon) / gamma;
  const double clamped = std::clamp(cut, static_cast<double>(low) - 1.0, static_cast<double>(high) + 1.0);
  std::int32_t edge = increasing ? static_cast<std::int32_t>(std::ceil(clamped))
                                 : static_cast<std::int32_t>(std::floor(clamped));
  edge = std::clamp(edge, low - 1, high + 1);
  if (increasing) {
    // edge := smallest a in [low, high + 1] with sign +1 (high + 1 if none).
    edge = std::max(edge, low);
    while (edge > low && sign_at(edge - 1) > 0) --edge;
    while (edge <= high && sign_at(edge) < 0) ++edge;
    if (edge > high) {
      t.lo = 0;
      t.hi = -1;
    } else {
      t.lo = edge == low ? kMin : edge;
      t.hi = kMax;
    }
  } else {
    // edge := largest a in [low - 1, high] with sign +1 (low - 1 if none).
    edge = std::min(edge, high);
    while (edge < high && sign_at(edge + 1) > 0) ++edge;
    while (edge >= low && sign_at(edge) < 0) --edge;
    if (edge < low) {
      t.lo = 0;
      t.hi = -1;
    } else {
      t.lo = kMin;
      t.hi = edge == high ? kMax : edge;
    }
  }
  return t;
}

std::vector<NeuronThreshold> compile_thresholds(const BnnLayer& layer) {
  const auto in_dim = static_cast<std::int32_t>(layer.in_dim());
  std::vector<NeuronThreshold> out(layer.out_dim());
  for (std::size_t k = 0; k < out.size(); ++k) {
    if (layer.bn) {
      const auto& bn = *layer.bn;
      out[k] = fuse_threshold(bn.gamma[k], bn.beta[k], bn.mean[k], bn.variance[k], bn.epsilon, in_dim);
    } else {
      out[k].lo = 0;
      out[k].hi = std::numeric_limits<std::int32_t>::max();
    }
  }
  return out;
}

double output_score(const BnnLayer& layer, std::size_t k, std::int32_t a) noexcept {
  if (!layer.bn) return static_cast<double>(a);
  const auto& bn = *layer.bn;
  return bn_affine(a, bn.gamma[k], bn.beta[k], bn.mean[k], bn.variance[k], bn.epsilon);
}

std::size_t argmax_lowest(std::span<const double> scores) noexcept {
  std::size_t best = 0;
  for (std::size_t k = 1; k < scores.size(); ++k) {
    if (scores[k] > scores[best]) best = k;
  }
  return best;
}

CompiledModel::CompiledModel(BnnModel model) : model_(std::move(model)) {
  model_.validate();
  thresholds_.resize(model_.layers.size());
  for (std::size_t l = 0; l < model_.layers.size(); ++l) {
    if (model_.layers[l].binarized_output) thresholds_[l] = compile_thresholds(model_.layers[l]);
  }
}

std::size_t CompiledModel::predict(std::span<const std::uint8_t> image) const {
  if (image.size() != model_.input_dim()) {
    throw ArgumentError("image has " + std::to_string(image.size()) + " pixels, model expects " +
                        std::to_string(model_.input_dim()));
  }
  return predict_bits(binarize_input(image));
}

std::size_t CompiledModel::predict_bits(const PackedBits& input) const {
  PackedBits x = input;
  std::vector<std::int32_t> pre;
  std::vector<double> scores;
  for (std::size_t l = 0; l < model_.layers.size(); ++l) {
    const auto& layer = model_.layers[l];
    pre.resize(layer.out_dim());
    layer_preactivation(layer.weights, x, pre);
    if (!layer.binarized_output) {
      scores.resize(layer.out_dim());
      for (std::size_t k = 0; k < scores.size(); ++k) scores[k] = output_score(layer, k, pre[k]);
      return argmax_lowest(scores);
    }
    PackedBits next(layer.out_dim());
    const auto& th = thresholds_[l];
    for (std::size_t k = 0; k < pre.size(); ++k) next.set(k, th[k].apply(pre[k]));
    x = std::move(next);
  }
  return 0;  // unreachable for validated models
}

std::size_t model_predict(const BnnModel& model, std::span<const std::uint8_t> image) {
  return CompiledModel(model).predict(image);
}

Accuracy evaluate_accuracy(const CompiledModel& model, const LabeledDataset& data,
                           std::size_t threads) {
  if (data.empty()) throw ArgumentError("cannot evaluate accuracy on an empty dataset");
  constexpr std::size_t kShard = 512;
  const std::size_t shards = (data.size() + kShard - 1) / kShard;
  std::vector<std::size_t> correct(shards, 0);
  parallel_for(shards, threads, [&](std::size_t, std::size_t s) {
    const std::size_t end = std::min(data.size(), (s + 1) * kShard);
    std::size_t hits = 0;
    for (std::size_t i = s * kShard; i < end; ++i) {
      hits += model.predict(data.image(i)) == data.labels[i];
    }
    correct[s] = hits;
  });
  Accuracy acc;
  acc.total = data.size();
  for (std::size_t c : correct) acc.correct += c;
  return acc;
}

Accuracy evaluate_accuracy(const BnnModel& model, const LabeledDataset& data, std::size_t threads) {
  return evaluate_accuracy(CompiledModel(model), data, threads);
}

}  // namespace bnnkh
