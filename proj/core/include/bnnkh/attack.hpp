#pragma once

// Accuracy-guided key recovery against the column-swap transform.
//
// Both searches start from the all-zero guess and walk the key in ascending
// order, fixing G bits at a time to the pattern that maximizes accuracy on the
// attacker's labeled samples while every other bit keeps its current value.
// Single-bit recovery is the G = 1 case. Accuracy comparisons use exact
// correct-counts; ties go to the numerically smallest pattern, read
// big-endian over [R_b .. R_{b+G-1}].

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

#include "bnnkh/bnn.hpp"
#include "bnnkh/dataset.hpp"
#include "bnnkh/transform.hpp"

namespace bnnkh {

enum class Method { single_bit, block };
enum class KeyMode { per_layer, shared };

std::string_view method_name(Method m) noexcept;
std::string_view key_mode_name(KeyMode m) noexcept;
Method parse_method(std::string_view text);
KeyMode parse_key_mode(std::string_view text);

struct AttackConfig {
  Method method = Method::block;
  std::size_t block_size = 4;
  std::size_t passes = 1;
  std::size_t eval_samples = 5000;
  std::vector<std::size_t> layer_order;  // hidden-layer indices; empty means 0, 1, 2, ...
  KeyMode key_mode = KeyMode::per_layer;
  std::size_t threads = 1;  // 0 = all hardware threads
  std::uint64_t seed = 0;   // echoed in reports; the search itself is deterministic

  /// Block size actually searched: 1 for single_bit.
  std::size_t effective_block() const noexcept { return method == Method::single_bit ? 1 : block_size; }
  /// Throws ArgumentError for an inconsistent config or one that does not fit `model`.
  void validate(const BnnModel& model) const;
};

/// Running best accuracy after one block decision.
struct TrajectoryPoint {
  std::size_t unit = 0;  // hidden layer index, or 0 in shared mode
  std::size_t pass = 0;
  std::size_t block = 0;
  Accuracy best;
};

struct LayerOutcome {
  std::size_t layer = 0;         // hidden-layer index
  std::uint64_t evaluations = 0; // candidate evaluations spent on this layer's key
  std::optional<double> bit_match;
};

struct AttackReport {
  AttackConfig config;
  KeySet recovered;
  std::vector<LayerOutcome> layers;
  Accuracy encrypted;  // eval set, all-zero guess
  Accuracy recovered_accuracy;  // eval set, recovered guess
  std::optional<Accuracy> original;
  std::uint64_t evaluations = 0;  // total candidate evaluations
  double wall_clock_s = 0.0;
  std::vector<TrajectoryPoint> trajectory;
};

/// Accuracy of the encrypted model after applying `guess` as a trial
/// decryption. Reference route: materializes the decrypted model.
Accuracy evaluate_candidate(const BnnModel& encrypted, const KeySet& guess,
                            const LabeledDataset& data, std::size_t threads = 1);

AttackReport recover_single_bit(const BnnModel& encrypted, const LabeledDataset& data,
                                const AttackConfig& cfg);
AttackReport recover_block(const BnnModel& encrypted, const LabeledDataset& data,
                           const AttackConfig& cfg);
/// Dispatches on cfg.method.
AttackReport recover_key(const BnnModel& encrypted, const LabeledDataset& data,
                         const AttackConfig& cfg);

struct BruteForceResult {
  KeySet keys;
  Accuracy accuracy;
  std::uint64_t evaluations = 0;
};

inline constexpr std::uint64_t kDefaultBruteForceLimit = std::uint64_t{1} << 20;

/// Evaluates every key (one shared key, or the concatenation of all layer keys
/// in per-layer mode) and returns the most accurate; ties go to the
/// numerically smallest key, layer 0 bit 0 being the most significant bit.
BruteForceResult brute_force_key(const BnnModel& encrypted, const LabeledDataset& data,
                                 KeyMode mode = KeyMode::shared,
                                 std::uint64_t limit = kDefaultBruteForceLimit,
                                 std::size_t threads = 1);

}  // namespace bnnkh
