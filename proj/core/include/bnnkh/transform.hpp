#pragma once

// Keyed adjacent-column-swap transform. Key bit k set exchanges output
// neurons 2k and 2k+1 of a hidden layer: their weight rows and all four
// batch-norm entries. The transform is an involution, so encryption and
// decryption are the same call.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bnnkh/bnn.hpp"

namespace bnnkh {

class PufKey {
 public:
  PufKey() = default;
  explicit PufKey(std::size_t length) : bits_(length, 0) {}
  explicit PufKey(std::vector<std::uint8_t> bits);

  std::size_t size() const noexcept { return bits_.size(); }
  bool operator[](std::size_t k) const noexcept { return bits_[k] != 0; }
  void set(std::size_t k, bool value) noexcept { bits_[k] = value ? 1 : 0; }
  void flip(std::size_t k) noexcept { bits_[k] ^= 1; }
  std::span<const std::uint8_t> bits() const noexcept { return bits_; }
  std::size_t popcount() const noexcept;

  auto operator<=>(const PufKey&) const = default;

 private:
  std::vector<std::uint8_t> bits_;
};

/// One key per hidden layer, in layer order.
struct KeySet {
  std::vector<PufKey> keys;
  bool shared = false;  // all keys bit-identical

  std::size_t size() const noexcept { return keys.size(); }
  bool operator==(const KeySet&) const = default;
};

/// Uniform bits from mt19937_64(seed), least-significant bit of each 64-bit
/// output first. Fixed by the standard, so portable across platforms.
PufKey generate_key(std::size_t length, std::uint64_t seed);

/// Keys sized to every hidden layer of `model`. Shared: one key from `seed`
/// repeated; otherwise layer i uses mix_seed(seed, i).
KeySet generate_keyset(const BnnModel& model, std::uint64_t seed, bool shared);

KeySet zero_keyset(const BnnModel& model);

void apply_swap_in_place(BnnLayer& layer, const PufKey& key);
BnnLayer apply_swap(const BnnLayer& layer, const PufKey& key);

/// Applies keys.keys[i] to the i-th hidden layer; the output layer is untouched.
BnnModel encrypt_model(const BnnModel& model, const KeySet& keys);

std::string key_to_text(const PufKey& key);
/// '0'/'1' characters with an optional trailing newline.
PufKey key_from_text(std::string_view text);

/// One key per line.
std::string keyset_to_text(const KeySet& keys);
KeySet keyset_from_text(std::string_view text);

void save_keyset(const KeySet& keys, const std::filesystem::path& path);
KeySet load_keyset(const std::filesystem::path& path);

}  // namespace bnnkh
