#include "bnnkh/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "bnnkh/error.hpp"
#include "bnnkh/random.hpp"
#include "json.hpp"

namespace bnnkh {
namespace {

using nlohmann::ordered_json;

ordered_json accuracy_value(const std::optional<Accuracy>& a) {
  return a ? ordered_json(a->fraction()) : ordered_json(nullptr);
}

ordered_json count_value(const std::optional<Accuracy>& a) {
  return a ? ordered_json(a->correct) : ordered_json(nullptr);
}

ordered_json report_object(const AttackReport& r, const std::optional<SplitAccuracy>& test) {
  const AttackConfig& cfg = r.config;
  ordered_json j;
  j["method"] = method_name(cfg.method);
  j["G"] = cfg.effective_block();
  j["passes"] = cfg.passes;
  j["samples"] = r.encrypted.total;
  j["key_mode"] = key_mode_name(cfg.key_mode);
  j["layer_order"] = cfg.layer_order;
  ordered_json layers = ordered_json::array();
  for (const auto& l : r.layers) {
    layers.push_back({{"layer", l.layer},
                      {"bit_match", l.bit_match ? ordered_json(*l.bit_match) : ordered_json(nullptr)},
                      {"evaluations", l.evaluations}});
  }
  j["per_layer"] = layers;
  const auto mean = mean_bit_match(r);
  j["bit_match_mean"] = mean ? ordered_json(*mean) : ordered_json(nullptr);
  j["accuracy"] = {{"encrypted", r.encrypted.fraction()},
                   {"recovered", r.recovered_accuracy.fraction()},
                   {"original_if_known", accuracy_value(r.original)}};
  j["correct"] = {{"encrypted", r.encrypted.correct},
                  {"recovered", r.recovered_accuracy.correct},
                  {"original_if_known", count_value(r.original)},
                  {"total", r.encrypted.total}};
  if (test) {
    j["accuracy_test"] = {{"encrypted", test->encrypted.fraction()},
                          {"recovered", test->recovered.fraction()},
                          {"original_if_known", accuracy_value(test->original)},
                          {"total", test->encrypted.total}};
  }
  j["evaluations"] = r.evaluations;
  j["wall_clock_s"] = r.wall_clock_s;
  j["threads"] = cfg.threads;
  j["seed"] = cfg.seed;
  ordered_json keys = ordered_json::array();
  for (const auto& k : r.recovered.keys) keys.push_back(key_to_text(k));
  j["recovered_keys"] = keys;
  ordered_json trajectory = ordered_json::array();
  for (const auto& t : r.trajectory) trajectory.push_back(t.best.correct);
  j["trajectory_correct"] = trajectory;
  return j;
}

// Named per-variant values, in CSV column order after the fixed leading fields.
std::vector<std::pair<std::string, std::optional<double>>> variant_values(const VariantRecord& v,
                                                                          std::size_t hidden) {
  std::vector<std::pair<std::string, std::optional<double>>> out;
  const AttackReport* r = v.ok() ? &*v.report : nullptr;
  auto frac = [](const std::optional<Accuracy>& a) -> std::optional<double> {
    return a ? std::optional<double>(a->fraction()) : std::nullopt;
  };
  out.emplace_back("bit_match_mean", r ? mean_bit_match(*r) : std::nullopt);
  for (std::size_t h = 0; h < hidden; ++h) {
    std::optional<double> value;
    if (r && h < r->layers.size()) value = r->layers[h].bit_match;
    out.emplace_back("bit_match_layer" + std::to_string(h), value);
  }
  const bool has_test = r && v.test.has_value();
  out.emplace_back("encrypted_accuracy", r ? frac(r->encrypted) : std::nullopt);
  out.emplace_back("recovered_accuracy", r ? frac(r->recovered_accuracy) : std::nullopt);
  out.emplace_back("original_accuracy", r ? frac(r->original) : std::nullopt);
  out.emplace_back("encrypted_accuracy_test", has_test ? frac(v.test->encrypted) : std::nullopt);
  out.emplace_back("recovered_accuracy_test", has_test ? frac(v.test->recovered) : std::nullopt);
  out.emplace_back("original_accuracy_test", has_test ? frac(v.test->original) : std::nullopt);
  out.emplace_back("evaluations",
                   r ? std::optional<double>(static_cast<double>(r->evaluations)) : std::nullopt);
  out.emplace_back("wall_clock_s", r ? std::optional<double>(r->wall_clock_s) : std::nullopt);
  return out;
}

std::size_t hidden_of(const ExperimentSummary& s) {
  std::size_t hidden = 0;
  for (const auto& v : s.variants) {
    if (v.report) hidden = std::max(hidden, v.report->layers.size());
  }
  return hidden;
}

std::string format_double(double value) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  return buf;
}

LabeledDataset prefix_of(const LabeledDataset& data, std::size_t n) {
  if (n >= data.size()) return data;
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return data.subset(idx, data.split);
}

}  // namespace

double key_bit_match(const PufKey& truth, const PufKey& recovered) {
  if (truth.size() != recovered.size()) {
    throw ArgumentError("key length mismatch: " + std::to_string(truth.size()) + " vs " +
                        std::to_string(recovered.size()));
  }
  if (truth.size() == 0) throw ArgumentError("cannot score empty keys");
  std::size_t distance = 0;
  for (std::size_t k = 0; k < truth.size(); ++k) distance += truth[k] != recovered[k];
  return static_cast<double>(truth.size() - distance) / static_cast<double>(truth.size());
}

void score_report(AttackReport& report, const KeySet& truth) {
  if (truth.size() != report.recovered.size() || truth.size() != report.layers.size()) {
    throw ArgumentError("true keys cover " + std::to_string(truth.size()) + " layers, report has " +
                        std::to_string(report.layers.size()));
  }
  for (std::size_t h = 0; h < truth.size(); ++h) {
    report.layers[h].bit_match = key_bit_match(truth.keys[h], report.recovered.keys[h]);
  }
}

std::optional<double> mean_bit_match(const AttackReport& report) {
  if (report.layers.empty()) return std::nullopt;
  double sum = 0.0;
  for (const auto& l : report.layers) {
    if (!l.bit_match) return std::nullopt;
    sum += *l.bit_match;
  }
  return sum / static_cast<double>(report.layers.size());
}

void ExperimentConfig::validate() const {
  if (variant_count == 0) throw ArgumentError("variant count must be at least 1");
}

std::uint64_t variant_key_seed(std::uint64_t seed_base, std::size_t variant) noexcept {
  return mix_seed(seed_base, variant);
}

void summarize(ExperimentSummary& summary) {
  summary.aggregates.clear();
  const std::size_t hidden = hidden_of(summary);
  std::vector<std::string> names;
  std::vector<std::vector<double>> columns;
  for (const auto& v : summary.variants) {
    const auto values = variant_values(v, hidden);
    if (names.empty()) {
      for (const auto& [name, _] : values) names.push_back(name);
      columns.resize(names.size());
    }
    for (std::size_t c = 0; c < values.size(); ++c) {
      if (values[c].second) columns[c].push_back(*values[c].second);
    }
  }
  for (std::size_t c = 0; c < names.size(); ++c) {
    const auto& xs = columns[c];
    if (xs.empty()) continue;
    Aggregate a;
    a.name = names[c];
    a.count = xs.size();
    double sum = 0.0;
    for (double x : xs) sum += x;
    a.mean = sum / static_cast<double>(xs.size());
    double sq = 0.0;
    for (double x : xs) sq += (x - a.mean) * (x - a.mean);
    a.stddev = std::sqrt(sq / static_cast<double>(xs.size()));
    summary.aggregates.push_back(a);
  }
}

ExperimentSummary run_experiment(const BnnModel& base, const LabeledDataset& attack_set,
                                 const LabeledDataset* test, const ExperimentConfig& cfg,
                                 const std::function<void(const ExperimentSummary&)>& on_variant) {
  cfg.validate();
  cfg.attack.validate(base);
  if (attack_set.empty()) throw ArgumentError("attack set is empty");
  const LabeledDataset eval_set = prefix_of(attack_set, cfg.attack.eval_samples);
  const std::size_t threads = cfg.attack.threads;
  const CompiledModel base_compiled(base);
  const Accuracy original = evaluate_accuracy(base_compiled, eval_set, threads);
  std::optional<Accuracy> original_test;
  if (test) original_test = evaluate_accuracy(base_compiled, *test, threads);

  ExperimentSummary summary;
  summary.config = cfg;
  for (std::size_t v = 0; v < cfg.variant_count; ++v) {
    VariantRecord record;
    record.index = v;
    record.key_seed = variant_key_seed(cfg.seed_base, v);
    try {
      const KeySet truth = generate_keyset(base, record.key_seed, cfg.shared_keys);
      record.true_keys = truth;
      const BnnModel encrypted = encrypt_model(base, truth);
      AttackReport report = recover_key(encrypted, eval_set, cfg.attack);
      report.original = original;
      score_report(report, truth);
      if (test) {
        SplitAccuracy split;
        split.encrypted = evaluate_accuracy(CompiledModel(encrypted), *test, threads);
        split.recovered =
            evaluate_accuracy(CompiledModel(encrypt_model(encrypted, report.recovered)), *test, threads);
        split.original = original_test;
        record.test = split;
      }
      record.report = std::move(report);
    } catch (const std::exception& e) {
      record.report.reset();
      record.error = e.what();
    }
    summary.variants.push_back(std::move(record));
    summarize(summary);
    if (on_variant) on_variant(summary);
  }
  return summary;
}

std::string report_json(const AttackReport& report, const std::optional<SplitAccuracy>& test) {
  return report_object(report, test).dump(2) + "\n";
}

std::string summary_json(const ExperimentSummary& summary) {
  const ExperimentConfig& cfg = summary.config;
  ordered_json j;
  j["experiment"] = {{"variants", cfg.variant_count},
                     {"model", cfg.model_label},
                     {"seed_base", cfg.seed_base},
                     {"shared_keys", cfg.shared_keys},
                     {"method", method_name(cfg.attack.method)},
                     {"G", cfg.attack.effective_block()},
                     {"passes", cfg.attack.passes},
                     {"samples", cfg.attack.eval_samples},
                     {"key_mode", key_mode_name(cfg.attack.key_mode)},
                     {"threads", cfg.attack.threads},
                     {"stddev", "population"}};
  ordered_json variants = ordered_json::array();
  for (const auto& v : summary.variants) {
    ordered_json rec;
    rec["variant"] = v.index;
    rec["key_seed"] = v.key_seed;
    rec["status"] = v.ok() ? "ok" : "failed";
    if (!v.error.empty()) rec["error"] = v.error;
    if (v.true_keys) {
      ordered_json keys = ordered_json::array();
      for (const auto& k : v.true_keys->keys) keys.push_back(key_to_text(k));
      rec["true_keys"] = keys;
    }
    if (v.ok()) rec["report"] = report_object(*v.report, v.test);
    variants.push_back(rec);
  }
  j["records"] = variants;
  ordered_json aggregates = ordered_json::object();
  for (const auto& a : summary.aggregates) {
    aggregates[a.name] = {{"count", a.count}, {"mean", a.mean}, {"stddev", a.stddev}};
  }
  j["aggregates"] = aggregates;
  return j.dump(2) + "\n";
}

std::string csv_header(std::size_t hidden_layers) {
  std::string header = "variant,key_seed,status,bit_match_mean";
  for (std::size_t h = 0; h < hidden_layers; ++h) header += ",bit_match_layer" + std::to_string(h);
  header +=
      ",encrypted_accuracy,recovered_accuracy,original_accuracy,encrypted_accuracy_test,"
      "recovered_accuracy_test,original_accuracy_test,evaluations,wall_clock_s";
  return header;
}

std::string summary_csv(const ExperimentSummary& summary) {
  const std::size_t hidden = hidden_of(summary);
  std::string out = csv_header(hidden) + "\n";
  for (const auto& v : summary.variants) {
    out += std::to_string(v.index) + "," + std::to_string(v.key_seed) + "," + (v.ok() ? "ok" : "failed");
    for (const auto& [_, value] : variant_values(v, hidden)) {
      out += ",";
      if (value) out += format_double(*value);
    }
    out += "\n";
  }
  return out;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  auto partial = path;
  partial += ".partial";
  {
    std::ofstream out(partial, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out << text;
    if (!out.flush()) throw Error("cannot write " + path.string());
  }
  std::error_code ec;
  std::filesystem::rename(partial, path, ec);
  if (ec) throw Error("cannot write " + path.string() + ": " + ec.message());
}

}  // namespace bnnkh
