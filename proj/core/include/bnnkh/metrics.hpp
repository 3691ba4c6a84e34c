#pragma once

// Key-match scoring, multi-variant experiments and JSON/CSV reports.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "bnnkh/attack.hpp"

namespace bnnkh {

/// (L - Hamming distance) / L. Throws ArgumentError on a length mismatch or
/// empty keys.
double key_bit_match(const PufKey& truth, const PufKey& recovered);

/// Fills report.layers[i].bit_match from `truth`.
void score_report(AttackReport& report, const KeySet& truth);

/// Mean of the per-layer bit matches, if all are known.
std::optional<double> mean_bit_match(const AttackReport& report);

/// Accuracies of one variant on a second (usually the full test) split.
struct SplitAccuracy {
  Accuracy encrypted;
  Accuracy recovered;
  std::optional<Accuracy> original;
};

struct VariantRecord {
  std::size_t index = 0;
  std::uint64_t key_seed = 0;
  std::optional<KeySet> true_keys;
  std::optional<AttackReport> report;
  std::optional<SplitAccuracy> test;
  std::string error;  // nonempty when the variant failed

  bool ok() const noexcept { return report.has_value() && error.empty(); }
};

struct ExperimentConfig {
  std::size_t variant_count = 10;
  std::string model_label;  // echoed in the report
  AttackConfig attack;
  std::uint64_t seed_base = 0;
  bool shared_keys = true;

  void validate() const;
};

/// Mean and population standard deviation over successful variants.
struct Aggregate {
  std::string name;
  std::size_t count = 0;
  double mean = 0.0;
  double stddev = 0.0;
};

struct ExperimentSummary {
  ExperimentConfig config;
  std::vector<VariantRecord> variants;
  std::vector<Aggregate> aggregates;
};

/// Variant v's true keys come from generate_keyset(base, mix_seed(seed_base, v), shared_keys).
std::uint64_t variant_key_seed(std::uint64_t seed_base, std::size_t variant) noexcept;

/// Recomputes summary.aggregates from summary.variants.
void summarize(ExperimentSummary& summary);

/// Runs every variant in index order. A failing variant is recorded with its
/// error and the run continues. `on_variant` sees the summary after each
/// variant, with aggregates refreshed, so callers can flush partial results.
/// `test` may be null.
ExperimentSummary run_experiment(const BnnModel& base, const LabeledDataset& attack_set,
                                 const LabeledDataset* test, const ExperimentConfig& cfg,
                                 const std::function<void(const ExperimentSummary&)>& on_variant = {});

/// JSON object for one attack run; `test` adds an "accuracy_test" block.
std::string report_json(const AttackReport& report, const std::optional<SplitAccuracy>& test = std::nullopt);
std::string summary_json(const ExperimentSummary& summary);

/// Header of summary_csv, one column per hidden layer for bit match.
std::string csv_header(std::size_t hidden_layers);
/// Header plus one row per variant. Numbers use %.17g; failed variants have
/// empty numeric fields.
std::string summary_csv(const ExperimentSummary& summary);

/// Writes through a temporary file and a rename.
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace bnnkh
