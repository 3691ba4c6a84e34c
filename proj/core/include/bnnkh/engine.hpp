#pragma once

// Incremental candidate evaluation for key search.
//
// The evaluator caches, for every sample, the forward-pass state of the
// encrypted model decrypted under a base guess. A candidate guess is given as
// the key bits that differ from the base. Swapping pair k of hidden layer l
// permutes two entries of that layer's output, so only the sign changes it
// causes need to be propagated downstream: each changed input i adds
// 2 * x'[i] * W[:, i] to the next layer's preactivations. Layers with many
// changed inputs fall back to a full XNOR-popcount recompute.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "bnnkh/bnn.hpp"
#include "bnnkh/dataset.hpp"
#include "bnnkh/transform.hpp"

namespace bnnkh {

/// Key bit `pair` of hidden layer `layer` (index into BnnModel::hidden_layers()).
struct KeyFlip {
  std::uint32_t layer = 0;
  std::uint32_t pair = 0;

  auto operator<=>(const KeyFlip&) const = default;
};

class CandidateEvaluator {
 public:
  /// Per-worker scratch buffers.
  class Workspace {
   public:
    explicit Workspace(const CandidateEvaluator& owner);

   private:
    friend class CandidateEvaluator;
    std::vector<std::int16_t> pre;
    std::vector<std::int8_t> act;
    std::vector<std::int8_t> dense;
    std::vector<std::uint16_t> changed_index, next_index;
    std::vector<std::int8_t> changed_value, next_value;
    std::vector<std::vector<std::uint8_t>> flip_mask;
    std::vector<std::vector<std::uint32_t>> flipped;  // pairs flipped per layer
    PackedBits packed;
    std::vector<double> scores;
  };

  /// `data` is copied in binarized form; the model must validate and have all
  /// hidden layers before the single output layer.
  CandidateEvaluator(const BnnModel& encrypted, const LabeledDataset& data, const KeySet& base);

  std::size_t sample_count() const noexcept { return labels_.size(); }
  std::size_t hidden_count() const noexcept { return base_bits_.size(); }
  std::size_t key_length(std::size_t hidden) const noexcept { return base_bits_[hidden].size(); }

  KeySet base_keys() const;
  Accuracy base_accuracy() const;

  /// Correct predictions on samples [begin, end) for the base guess with
  /// `flips` toggled. `flips` must be sorted and free of duplicates.
  std::size_t count_correct(std::span<const KeyFlip> flips, std::size_t begin, std::size_t end,
                            Workspace& ws) const;

  /// Accuracy of each candidate on all samples. Work is split into
  /// (candidate, sample shard) items; integer shard counts make the result
  /// independent of `threads`.
  std::vector<Accuracy> evaluate(std::span<const std::vector<KeyFlip>> candidates,
                                 std::size_t threads) const;

  /// Moves the base guess to base XOR flips, updating cached state in place.
  void commit(std::span<const KeyFlip> flips, std::size_t threads);

  /// Rebuilds the cached state from scratch for the current base guess.
  void rebuild(std::size_t threads);

  /// True when the cached state equals a from-scratch rebuild.
  bool state_consistent() const;

 private:
  struct Layer {
    PackedBitMatrix weights;
    std::vector<std::int16_t> lo, hi;     // hidden: output +1 iff lo <= a <= hi
    std::vector<std::int16_t> delta2;     // in x stride, 2 * W[out][in]
    std::size_t stride = 0;
    BnnLayer source;                      // for output scores
    std::vector<double> out_denominator;  // sqrt(var + eps) per output neuron
    std::size_t in = 0, out = 0;
    bool hidden = true;
  };

  struct SampleState {
    std::vector<std::vector<std::int16_t>> pre;  // per layer, N x out
    std::vector<std::vector<std::int8_t>> act;   // per hidden layer, N x out (encrypted order)
    std::vector<std::vector<std::int8_t>> x;     // per layer >= 1, N x in (decrypted order)
    std::vector<std::uint8_t> correct;
    bool operator==(const SampleState&) const = default;
  };

  void output_scores(const Layer& layer, const std::int16_t* pre, std::vector<double>& scores) const;
  void prepare_masks(std::span<const KeyFlip> flips, Workspace& ws) const;
  void clear_masks(std::span<const KeyFlip> flips, Workspace& ws) const;
  // Whether sample s is classified correctly under base ^ flips. A non-null
  // `commit` receives the new state (it may alias `state`).
  bool run_sample(std::size_t s, std::uint32_t last_flip_layer, Workspace& ws,
                  const SampleState& state, SampleState* commit) const;
  void full_forward(std::size_t s, SampleState& state, Workspace& ws) const;
  SampleState fresh_state() const;

  std::vector<Layer> layers_;
  std::size_t input_words_ = 0;
  std::vector<std::uint64_t> inputs_;  // N x input_words_
  std::vector<std::uint8_t> labels_;
  std::vector<std::vector<std::uint8_t>> base_bits_;
  std::size_t max_dim_ = 0;
  SampleState state_;
};

}  // namespace bnnkh
