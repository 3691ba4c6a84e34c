#include "bnnkh/attack.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>

#include "bnnkh/engine.hpp"
#include "bnnkh/error.hpp"

namespace bnnkh {
namespace {

std::vector<std::size_t> resolved_order(const AttackConfig& cfg, std::size_t hidden) {
  if (cfg.key_mode == KeyMode::shared) return {0};
  if (!cfg.layer_order.empty()) return cfg.layer_order;
  std::vector<std::size_t> order(hidden);
  std::iota(order.begin(), order.end(), std::size_t{0});
  return order;
}

LabeledDataset eval_prefix(const LabeledDataset& data, std::size_t samples) {
  if (samples >= data.size()) return data;
  std::vector<std::size_t> idx(samples);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return data.subset(idx, data.split);
}

// Flips that turn the current bits of `layers` at [first, first + width) into `pattern`.
std::vector<KeyFlip> pattern_flips(const std::vector<std::size_t>& layers, const KeySet& current,
                                   std::size_t first, std::size_t width,
                                   std::uint64_t pattern) {
  std::vector<KeyFlip> flips;
  for (std::size_t layer : layers) {
    for (std::size_t t = 0; t < width; ++t) {
      const bool want = (pattern >> (width - 1 - t)) & 1U;
      if (want != current.keys[layer][first + t]) {
        flips.push_back({static_cast<std::uint32_t>(layer), static_cast<std::uint32_t>(first + t)});
      }
    }
  }
  std::sort(flips.begin(), flips.end());
  return flips;
}

AttackReport run_search(const BnnModel& encrypted, const LabeledDataset& data, const AttackConfig& cfg) {
  cfg.validate(encrypted);
  if (data.empty()) throw ArgumentError("attack needs a nonempty labeled dataset");
  const auto start = std::chrono::steady_clock::now();
  const auto eval_data = eval_prefix(data, cfg.eval_samples);
  const std::size_t hidden = encrypted.hidden_layers().size();
  CandidateEvaluator eval(encrypted, eval_data, zero_keyset(encrypted));

  AttackReport report;
  report.config = cfg;
  report.encrypted = eval.base_accuracy();
  for (std::size_t h = 0; h < hidden; ++h) report.layers.push_back({h, 0, std::nullopt});

  const std::size_t g = cfg.effective_block();
  const std::uint64_t patterns = std::uint64_t{1} << g;
  for (std::size_t unit : resolved_order(cfg, hidden)) {
    std::vector<std::size_t> unit_layers;
    if (cfg.key_mode == KeyMode::shared) {
      unit_layers.resize(hidden);
      std::iota(unit_layers.begin(), unit_layers.end(), std::size_t{0});
    } else {
      unit_layers = {unit};
    }
    const std::size_t key_len = eval.key_length(unit_layers.front());
    std::uint64_t unit_evals = 0;
    for (std::size_t pass = 0; pass < cfg.passes; ++pass) {
      for (std::size_t block = 0; block < key_len / g; ++block) {
        const KeySet current = eval.base_keys();
        std::vector<std::vector<KeyFlip>> candidates;
        candidates.reserve(patterns);
        for (std::uint64_t p = 0; p < patterns; ++p) {
          candidates.push_back(pattern_flips(unit_layers, current, block * g, g, p));
        }
        const auto scores = eval.evaluate(candidates, cfg.threads);
        unit_evals += patterns;
        std::size_t best = 0;
        for (std::size_t p = 1; p < scores.size(); ++p) {
          if (scores[p].correct > scores[best].correct) best = p;
        }
        eval.commit(candidates[best], cfg.threads);
        report.trajectory.push_back({unit, pass, block, scores[best]});
      }
    }
    for (std::size_t layer : unit_layers) report.layers[layer].evaluations += unit_evals;
    report.evaluations += unit_evals;
  }

  report.recovered = eval.base_keys();
  if (cfg.key_mode == KeyMode::shared) report.recovered.shared = true;
  report.recovered_accuracy = eval.base_accuracy();
  report.wall_clock_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace

std::string_view method_name(Method m) noexcept {
  return m == Method::single_bit ? "single_bit" : "block";
}

std::string_view key_mode_name(KeyMode m) noexcept {
  return m == KeyMode::shared ? "shared" : "per_layer";
}

Method parse_method(std::string_view text) {
  if (text == "single_bit" || text == "single-bit" || text == "single") return Method::single_bit;
  if (text == "block") return Method::block;
  throw ArgumentError("unknown attack method '" + std::string(text) + "'");
}

KeyMode parse_key_mode(std::string_view text) {
  if (text == "per_layer" || text == "per-layer") return KeyMode::per_layer;
  if (text == "shared") return KeyMode::shared;
  throw ArgumentError("unknown key mode '" + std::string(text) + "'");
}

void AttackConfig::validate(const BnnModel& model) const {
  if (passes == 0) throw ArgumentError("passes must be at least 1");
  if (eval_samples == 0) throw ArgumentError("eval_samples must be at least 1");
  const std::size_t g = effective_block();
  if (g == 0 || g > 16) throw ArgumentError("block size must divide key length");
  const auto hidden = model.hidden_layers();
  if (hidden.empty()) throw ArgumentError("model has no encryptable layers");
  for (std::size_t h = 0; h < hidden.size(); ++h) {
    if (hidden[h] != h) throw ArgumentError("hidden layers must precede the output layer");
    const std::size_t len = model.layers[h].out_dim() / 2;
    if (len % g != 0) throw ArgumentError("block size must divide key length");
    if (key_mode == KeyMode::shared && len != model.layers[0].out_dim() / 2) {
      throw ArgumentError("shared key mode needs equal hidden widths");
    }
  }
  std::vector<bool> seen(hidden.size(), false);
  for (std::size_t layer : layer_order) {
    if (layer >= hidden.size() || seen[layer]) throw ArgumentError("invalid layer order");
    seen[layer] = true;
  }
}

Accuracy evaluate_candidate(const BnnModel& encrypted, const KeySet& guess,
                            const LabeledDataset& data, std::size_t threads) {
  return evaluate_accuracy(encrypt_model(encrypted, guess), data, threads);
}

AttackReport recover_single_bit(const BnnModel& encrypted, const LabeledDataset& data,
                                const AttackConfig& cfg) {
  if (cfg.method != Method::single_bit) throw ArgumentError("recover_single_bit needs method single_bit");
  return run_search(encrypted, data, cfg);
}

AttackReport recover_block(const BnnModel& encrypted, const LabeledDataset& data,
                           const AttackConfig& cfg) {
  if (cfg.method != Method::block) throw ArgumentError("recover_block needs method block");
  return run_search(encrypted, data, cfg);
}

AttackReport recover_key(const BnnModel& encrypted, const LabeledDataset& data,
                         const AttackConfig& cfg) {
  return run_search(encrypted, data, cfg);
}

BruteForceResult brute_force_key(const BnnModel& encrypted, const LabeledDataset& data,
                                 KeyMode mode, std::uint64_t limit, std::size_t threads) {
  encrypted.validate();
  const auto hidden = encrypted.hidden_layers();
  if (hidden.empty()) throw ArgumentError("model has no encryptable layers");
  std::vector<std::size_t> lengths;
  for (std::size_t h : hidden) lengths.push_back(encrypted.layers[h].out_dim() / 2);
  if (mode == KeyMode::shared &&
      std::any_of(lengths.begin(), lengths.end(), [&](std::size_t n) { return n != lengths.front(); })) {
    throw ArgumentError("shared key mode needs equal hidden widths");
  }
  const std::size_t bits = mode == KeyMode::shared
                               ? lengths.front()
                               : std::accumulate(lengths.begin(), lengths.end(), std::size_t{0});
  if (bits >= 63 || (std::uint64_t{1} << bits) > limit) {
    throw ArgumentError("key space of 2^" + std::to_string(bits) + " exceeds the brute-force limit of " +
                        std::to_string(limit));
  }
  const std::uint64_t space = std::uint64_t{1} << bits;

  CandidateEvaluator eval(encrypted, data, zero_keyset(encrypted));
  // Key value v: bit (bits - 1 - position) of v is the key bit at `position`
  // of the concatenated key; shared mode applies it to every layer.
  auto flips_for = [&](std::uint64_t v) {
    std::vector<KeyFlip> flips;
    if (mode == KeyMode::shared) {
      for (std::size_t layer = 0; layer < lengths.size(); ++layer) {
        for (std::size_t k = 0; k < bits; ++k) {
          if ((v >> (bits - 1 - k)) & 1U) {
            flips.push_back({static_cast<std::uint32_t>(layer), static_cast<std::uint32_t>(k)});
          }
        }
      }
    } else {
      std::size_t position = 0;
      for (std::size_t layer = 0; layer < lengths.size(); ++layer) {
        for (std::size_t k = 0; k < lengths[layer]; ++k, ++position) {
          if ((v >> (bits - 1 - position)) & 1U) {
            flips.push_back({static_cast<std::uint32_t>(layer), static_cast<std::uint32_t>(k)});
          }
        }
      }
    }
    return flips;
  };

  constexpr std::uint64_t kChunk = 4096;
  BruteForceResult result;
  std::uint64_t best_value = 0;
  std::size_t best_correct = 0;
  bool have_best = false;
  for (std::uint64_t first = 0; first < space; first += kChunk) {
    const std::uint64_t last = std::min(space, first + kChunk);
    std::vector<std::vector<KeyFlip>> candidates;
    for (std::uint64_t v = first; v < last; ++v) candidates.push_back(flips_for(v));
    const auto scores = eval.evaluate(candidates, threads);
    for (std::uint64_t v = first; v < last; ++v) {
      const std::size_t c = scores[v - first].correct;
      if (!have_best || c > best_correct) {
        best_correct = c;
        best_value = v;
        have_best = true;
      }
    }
    result.evaluations += last - first;
  }
  eval.commit(flips_for(best_value), threads);
  result.keys = eval.base_keys();
  if (mode == KeyMode::shared) result.keys.shared = true;
  result.accuracy = eval.base_accuracy();
  return result;
}

}  // namespace bnnkh
