#pragma once

// Bit-packed binarized MLP: XNOR-popcount preactivations, batch norm folded
// into per-neuron thresholds, and the "BNNM" model file.

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bnnkh/dataset.hpp"

namespace bnnkh {

constexpr std::size_t words_for_bits(std::size_t bits) noexcept { return (bits + 63) / 64; }

/// Bit-packed ±1 vector; bit set means +1. Padding bits are zero.
struct PackedBits {
  std::size_t size = 0;
  std::vector<std::uint64_t> words;

  PackedBits() = default;
  explicit PackedBits(std::size_t n) : size(n), words(words_for_bits(n), 0) {}

  int value(std::size_t i) const noexcept { return (words[i / 64] >> (i % 64)) & 1U ? 1 : -1; }
  void set(std::size_t i, int v) noexcept {
    const std::uint64_t mask = std::uint64_t{1} << (i % 64);
    if (v > 0) {
      words[i / 64] |= mask;
    } else {
      words[i / 64] &= ~mask;
    }
  }
  bool operator==(const PackedBits&) const = default;
};

/// Weight matrix stored one bit-row per output neuron: bit i of row j is the
/// weight from input i to output j. A column swap of the in x out matrix is a
/// swap of two rows here.
class PackedBitMatrix {
 public:
  PackedBitMatrix() = default;
  /// All weights -1.
  PackedBitMatrix(std::size_t in_dim, std::size_t out_dim);

  std::size_t in_dim() const noexcept { return in_dim_; }
  std::size_t out_dim() const noexcept { return out_dim_; }
  std::size_t words_per_row() const noexcept { return words_; }

  std::span<const std::uint64_t> row(std::size_t j) const noexcept {
    return {bits_.data() + j * words_, words_};
  }
  std::span<std::uint64_t> row(std::size_t j) noexcept { return {bits_.data() + j * words_, words_}; }
  std::span<const std::uint64_t> words() const noexcept { return bits_; }
  std::span<std::uint64_t> words() noexcept { return bits_; }

  int weight(std::size_t out, std::size_t in) const noexcept {
    return (bits_[out * words_ + in / 64] >> (in % 64)) & 1U ? 1 : -1;
  }
  void set_weight(std::size_t out, std::size_t in, int w) noexcept;

  void swap_rows(std::size_t a, std::size_t b) noexcept;
  bool padding_clear() const noexcept;

  bool operator==(const PackedBitMatrix&) const = default;

 private:
  std::size_t in_dim_ = 0;
  std::size_t out_dim_ = 0;
  std::size_t words_ = 0;
  std::vector<std::uint64_t> bits_;
};

struct BatchNormParams {
  std::vector<float> gamma;
  std::vector<float> beta;
  std::vector<float> mean;
  std::vector<float> variance;
  float epsilon = 1e-5F;

  std::size_t size() const noexcept { return gamma.size(); }
  bool operator==(const BatchNormParams&) const = default;
};

struct BnnLayer {
  PackedBitMatrix weights;
  std::optional<BatchNormParams> bn;
  bool binarized_output = true;

  std::size_t in_dim() const noexcept { return weights.in_dim(); }
  std::size_t out_dim() const noexcept { return weights.out_dim(); }
  bool operator==(const BnnLayer&) const = default;
};

struct BnnModel {
  std::vector<BnnLayer> layers;
  std::string provenance;

  std::size_t input_dim() const noexcept { return layers.empty() ? 0 : layers.front().in_dim(); }
  std::size_t class_count() const noexcept { return layers.empty() ? 0 : layers.back().out_dim(); }
  /// Indices of the hidden (binarized-output) layers, i.e. the encryptable ones.
  std::vector<std::size_t> hidden_layers() const;

  /// Throws InvariantError naming the first violated invariant.
  void validate() const;
  bool operator==(const BnnModel&) const = default;
};

/// Bit i set iff pixel_i / 255 >= 0.5, i.e. pixel >= 128.
PackedBits binarize_input(std::span<const std::uint8_t> pixels);

/// a[j] = in_dim - 2 * popcount(row_j XOR x).
void layer_preactivation(const PackedBitMatrix& weights, const PackedBits& x,
                         std::span<std::int32_t> out);
std::vector<std::int32_t> layer_preactivation(const PackedBitMatrix& weights, const PackedBits& x);

inline int xnor_dot(std::span<const std::uint64_t> row, std::span<const std::uint64_t> x,
                    std::size_t in_dim) noexcept {
  int mismatches = 0;
  for (std::size_t w = 0; w < row.size(); ++w) mismatches += std::popcount(row[w] ^ x[w]);
  return static_cast<int>(in_dim) - 2 * mismatches;
}

/// Batch-norm affine output in double precision; the single definition shared
/// by every inference path.
inline double bn_affine(std::int32_t a, double gamma, double beta, double mean, double variance,
                        double epsilon) noexcept {
  return gamma * (static_cast<double>(a) - mean) / std::sqrt(variance + epsilon) + beta;
}

/// sign(gamma * (a - mean) / sqrt(var + eps) + beta), sign(0) = +1.
int bn_sign(std::int32_t a, double gamma, double beta, double mean, double variance,
            double epsilon) noexcept;

/// Fused form of bn_sign for one neuron: output +1 iff lo <= a <= hi. Built from
/// a closed-form threshold and verified against bn_sign at the boundary so the
/// two agree on every integer preactivation in [-in_dim, in_dim].
struct NeuronThreshold {
  std::int32_t lo = 0;
  std::int32_t hi = 0;
  bool reference = false;  // |gamma| < 1e-12: compiled by direct evaluation

  int apply(std::int32_t a) const noexcept { return a >= lo && a <= hi ? 1 : -1; }
};

NeuronThreshold fuse_threshold(double gamma, double beta, double mean, double variance,
                               double epsilon, std::int32_t in_dim);

/// Thresholds for every neuron of a hidden layer (plain sign when it has no BN).
std::vector<NeuronThreshold> compile_thresholds(const BnnLayer& layer);

/// Output-layer score of neuron k from its preactivation.
double output_score(const BnnLayer& layer, std::size_t k, std::int32_t a) noexcept;

/// Lowest index wins ties.
std::size_t argmax_lowest(std::span<const double> scores) noexcept;

/// Inference-ready view of a model: thresholds precompiled. Holds a copy of
/// the layers so it stays valid independently of the source model.
class CompiledModel {
 public:
  explicit CompiledModel(BnnModel model);

  const BnnModel& model() const noexcept { return model_; }
  const std::vector<NeuronThreshold>& thresholds(std::size_t layer) const {
    return thresholds_[layer];
  }

  std::size_t predict(std::span<const std::uint8_t> image) const;
  std::size_t predict_bits(const PackedBits& input) const;

 private:
  BnnModel model_;
  std::vector<std::vector<NeuronThreshold>> thresholds_;
};

std::size_t model_predict(const BnnModel& model, std::span<const std::uint8_t> image);

/// Accuracy as an exact rational.
struct Accuracy {
  std::size_t correct = 0;
  std::size_t total = 0;

  double fraction() const noexcept {
    return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
  }
  bool operator==(const Accuracy&) const = default;
};

/// Sample shards are summed as integers, so the result does not depend on
/// `threads` or on dataset order.
Accuracy evaluate_accuracy(const BnnModel& model, const LabeledDataset& data, std::size_t threads = 1);
Accuracy evaluate_accuracy(const CompiledModel& model, const LabeledDataset& data,
                           std::size_t threads = 1);

inline constexpr std::uint32_t kModelFileVersion = 1;

std::vector<std::uint8_t> serialize_model(const BnnModel& model);
BnnModel deserialize_model(std::span<const std::uint8_t> bytes);
void save_model(const BnnModel& model, const std::filesystem::path& path);
BnnModel load_model(const std::filesystem::path& path);

}  // namespace bnnkh
