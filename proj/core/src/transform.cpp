#include "bnnkh/transform.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <sstream>

#include "bnnkh/error.hpp"
#include "bnnkh/random.hpp"

namespace bnnkh {

PufKey::PufKey(std::vector<std::uint8_t> bits) : bits_(std::move(bits)) {
  for (auto& b : bits_) {
    if (b > 1) throw ArgumentError("key bits must be 0 or 1");
  }
}

std::size_t PufKey::popcount() const noexcept {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

PufKey generate_key(std::size_t length, std::uint64_t seed) {
  if (length == 0) throw ArgumentError("key length must be at least 1");
  std::mt19937_64 engine(seed);
  PufKey key(length);
  std::uint64_t word = 0;
  for (std::size_t k = 0; k < length; ++k) {
    if (k % 64 == 0) word = engine();
    key.set(k, (word >> (k % 64)) & 1U);
  }
  return key;
}

KeySet generate_keyset(const BnnModel& model, std::uint64_t seed, bool shared) {
  KeySet set;
  set.shared = shared;
  const auto hidden = model.hidden_layers();
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    const std::size_t out = model.layers[hidden[i]].out_dim();
    if (out % 2 != 0) throw ArgumentError("hidden layer with odd width cannot be keyed");
    set.keys.push_back(generate_key(out / 2, shared ? seed : mix_seed(seed, i)));
  }
  if (shared && !set.keys.empty()) {
    for (const auto& k : set.keys) {
      if (k.size() != set.keys.front().size()) {
        throw ArgumentError("shared key requires equal hidden widths");
      }
    }
  }
  return set;
}

KeySet zero_keyset(const BnnModel& model) {
  KeySet set;
  for (std::size_t l : model.hidden_layers()) set.keys.emplace_back(model.layers[l].out_dim() / 2);
  return set;
}

void apply_swap_in_place(BnnLayer& layer, const PufKey& key) {
  const std::size_t out = layer.out_dim();
  if (out % 2 != 0) throw ArgumentError("cannot swap columns of a layer with odd width " + std::to_string(out));
  if (key.size() != out / 2) {
    throw ArgumentError("key length " + std::to_string(key.size()) + " does not match " +
                        std::to_string(out / 2) + " column pairs");
  }
  for (std::size_t k = 0; k < key.size(); ++k) {
    if (!key[k]) continue;
    layer.weights.swap_rows(2 * k, 2 * k + 1);
    if (layer.bn) {
      auto& bn = *layer.bn;
      std::swap(bn.gamma[2 * k], bn.gamma[2 * k + 1]);
      std::swap(bn.beta[2 * k], bn.beta[2 * k + 1]);
      std::swap(bn.mean[2 * k], bn.mean[2 * k + 1]);
      std::swap(bn.variance[2 * k], bn.variance[2 * k + 1]);
    }
  }
}

BnnLayer apply_swap(const BnnLayer& layer, const PufKey& key) {
  BnnLayer out = layer;
  apply_swap_in_place(out, key);
  return out;
}

BnnModel encrypt_model(const BnnModel& model, const KeySet& keys) {
  const auto hidden = model.hidden_layers();
  if (keys.size() != hidden.size()) {
    throw ArgumentError("key set has " + std::to_string(keys.size()) + " keys for " +
                        std::to_string(hidden.size()) + " hidden layers");
  }
  BnnModel out = model;
  for (std::size_t i = 0; i < hidden.size(); ++i) apply_swap_in_place(out.layers[hidden[i]], keys.keys[i]);
  return out;
}

std::string key_to_text(const PufKey& key) {
  std::string text(key.size(), '0');
  for (std::size_t k = 0; k < key.size(); ++k) {
    if (key[k]) text[k] = '1';
  }
  return text;
}

PufKey key_from_text(std::string_view text) {
  if (!text.empty() && text.back() == '\n') text.remove_suffix(1);
  if (!text.empty() && text.back() == '\r') text.remove_suffix(1);
  if (text.empty()) throw FormatError("empty key text");
  std::vector<std::uint8_t> bits(text.size());
  for (std::size_t k = 0; k < text.size(); ++k) {
    if (text[k] != '0' && text[k] != '1') {
      throw FormatError("invalid key character '" + std::string(1, text[k]) + "' at index " +
                        std::to_string(k));
    }
    bits[k] = text[k] == '1';
  }
  return PufKey(std::move(bits));
}

std::string keyset_to_text(const KeySet& keys) {
  std::string out;
  for (const auto& k : keys.keys) {
    out += key_to_text(k);
    out += '\n';
  }
  return out;
}

KeySet keyset_from_text(std::string_view text) {
  KeySet set;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const std::size_t nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    try {
      set.keys.push_back(key_from_text(line));
    } catch (const FormatError& e) {
      throw FormatError("key line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (set.keys.empty()) throw FormatError("key file holds no keys");
  set.shared = std::all_of(set.keys.begin(), set.keys.end(),
                           [&](const PufKey& k) { return k == set.keys.front(); });
  return set;
}

void save_keyset(const KeySet& keys, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << keyset_to_text(keys);
  if (!out) throw Error("cannot write " + path.string());
}

KeySet load_keyset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return keyset_from_text(buffer.str());
}

}  // namespace bnnkh
