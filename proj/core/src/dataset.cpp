#include "bnnkh/dataset.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <iterator>
#include <numeric>

#include "bnnkh/error.hpp"
#include "bnnkh/random.hpp"

namespace bnnkh {
namespace {

std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset) {
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void write_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

void check_magic(std::span<const std::uint8_t> bytes, std::size_t header_size,
                 std::uint32_t expected) {
  if (bytes.size() < header_size) {
    throw FormatError("IDX stream truncated: " + std::to_string(bytes.size()) +
                      " bytes, header needs " + std::to_string(header_size));
  }
  const std::uint32_t magic = read_be32(bytes, 0);
  if (magic != expected) {
    throw FormatError("wrong magic: expected " + std::to_string(expected) + ", found " +
                      std::to_string(magic));
  }
}

}  // namespace

std::string_view split_name(Split split) noexcept {
  switch (split) {
    case Split::train: return "train";
    case Split::test: return "test";
    case Split::attacker: return "attacker";
    case Split::held_out: return "held_out";
  }
  return "unknown";
}

ImageArray parse_idx_images(std::span<const std::uint8_t> bytes) {
  constexpr std::size_t kHeader = 16;
  check_magic(bytes, kHeader, kIdxImageMagic);
  ImageArray images;
  images.count = read_be32(bytes, 4);
  images.rows = read_be32(bytes, 8);
  images.cols = read_be32(bytes, 12);
  // Divide the payload rather than multiply declared dimensions, which may overflow.
  const std::size_t payload = bytes.size() - kHeader;
  const std::size_t per_image = images.rows * images.cols;
  const bool consistent = per_image == 0 ? payload == 0
                                         : payload % per_image == 0 &&
                                               payload / per_image == images.count;
  if (!consistent) {
    throw FormatError("IDX image count " + std::to_string(images.count) + " of " +
                      std::to_string(images.rows) + "x" + std::to_string(images.cols) +
                      " inconsistent with payload of " + std::to_string(payload) + " bytes");
  }
  images.pixels.assign(bytes.begin() + kHeader, bytes.end());
  return images;
}

std::vector<std::uint8_t> parse_idx_labels(std::span<const std::uint8_t> bytes) {
  constexpr std::size_t kHeader = 8;
  check_magic(bytes, kHeader, kIdxLabelMagic);
  const std::size_t count = read_be32(bytes, 4);
  const std::size_t payload = bytes.size() - kHeader;
  if (payload != count) {
    throw FormatError("IDX label count " + std::to_string(count) +
                      " inconsistent with payload of " + std::to_string(payload) + " bytes");
  }
  std::vector<std::uint8_t> labels(bytes.begin() + kHeader, bytes.end());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= kClassCount) {
      throw FormatError("label " + std::to_string(labels[i]) + " at index " + std::to_string(i) +
                        " out of range [0, 9]");
    }
  }
  return labels;
}

std::vector<std::uint8_t> serialize_idx_images(const ImageArray& images) {
  std::vector<std::uint8_t> out;
  out.reserve(16 + images.pixels.size());
  write_be32(out, kIdxImageMagic);
  write_be32(out, static_cast<std::uint32_t>(images.count));
  write_be32(out, static_cast<std::uint32_t>(images.rows));
  write_be32(out, static_cast<std::uint32_t>(images.cols));
  out.insert(out.end(), images.pixels.begin(), images.pixels.end());
  return out;
}

std::vector<std::uint8_t> serialize_idx_labels(std::span<const std::uint8_t> labels) {
  std::vector<std::uint8_t> out;
  out.reserve(8 + labels.size());
  write_be32(out, kIdxLabelMagic);
  write_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.insert(out.end(), labels.begin(), labels.end());
  return out;
}

void LabeledDataset::validate() const {
  if (pixels.size() != labels.size() * image_size()) {
    throw InvariantError("dataset has " + std::to_string(labels.size()) + " labels but " +
                         std::to_string(pixels.size()) + " pixel bytes");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= kClassCount) {
      throw InvariantError("label at index " + std::to_string(i) + " out of range");
    }
  }
}

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> indices, Split tag) const {
  LabeledDataset out;
  out.split = tag;
  out.rows = rows;
  out.cols = cols;
  out.pixels.reserve(indices.size() * image_size());
  out.labels.reserve(indices.size());
  for (std::size_t idx : indices) {
    if (idx >= size()) throw ArgumentError("subset index out of range");
    const auto img = image(idx);
    out.pixels.insert(out.pixels.end(), img.begin(), img.end());
    out.labels.push_back(labels[idx]);
  }
  return out;
}

LabeledDataset make_dataset(ImageArray images, std::vector<std::uint8_t> labels, Split split) {
  if (images.count != labels.size()) {
    throw InvariantError("image count " + std::to_string(images.count) +
                         " differs from label count " + std::to_string(labels.size()));
  }
  LabeledDataset data;
  data.split = split;
  data.rows = images.rows;
  data.cols = images.cols;
  data.pixels = std::move(images.pixels);
  data.labels = std::move(labels);
  data.validate();
  return data;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0, std::ios::beg);
  std::vector<std::uint8_t> bytes(size);
  if (size > 0 && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size))) {
    throw Error("cannot read " + path.string());
  }
  return bytes;
}

bool mnist_cached(const std::filesystem::path& dir) {
  for (auto name : {MnistFiles::train_images, MnistFiles::train_labels, MnistFiles::test_images,
                    MnistFiles::test_labels}) {
    if (!std::filesystem::is_regular_file(dir / name)) return false;
  }
  return true;
}

LabeledDataset load_mnist(const std::filesystem::path& dir, Split split) {
  if (split != Split::train && split != Split::test) {
    throw ArgumentError("load_mnist loads only the train or test split");
  }
  const bool train = split == Split::train;
  const auto images_path = dir / (train ? MnistFiles::train_images : MnistFiles::test_images);
  const auto labels_path = dir / (train ? MnistFiles::train_labels : MnistFiles::test_labels);
  try {
    auto images = parse_idx_images(read_file_bytes(images_path));
    auto labels = parse_idx_labels(read_file_bytes(labels_path));
    return make_dataset(std::move(images), std::move(labels), split);
  } catch (const FormatError& e) {
    throw FormatError(std::string(split_name(split)) + " split in " + dir.string() + ": " +
                      e.what());
  }
}

std::vector<std::size_t> attacker_indices(const LabeledDataset& test, std::size_t n,
                                          std::uint64_t seed, bool class_balanced) {
  if (n == 0) throw ArgumentError("attacker subset size must be at least 1");
  if (n > test.size()) {
    throw ArgumentError("attacker subset of " + std::to_string(n) + " exceeds " +
                        std::to_string(test.size()) + " available samples");
  }
  std::vector<std::size_t> order(test.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));
  if (!class_balanced) {
    order.resize(n);
    return order;
  }

  std::array<std::size_t, kClassCount> quota{};
  for (std::size_t c = 0; c < kClassCount; ++c) quota[c] = n / kClassCount + (c < n % kClassCount);
  std::vector<std::size_t> picked;
  picked.reserve(n);
  for (std::size_t idx : order) {
    auto& q = quota[test.labels[idx]];
    if (q == 0) continue;
    --q;
    picked.push_back(idx);
    if (picked.size() == n) return picked;
  }
  throw ArgumentError("not enough samples per class for a balanced subset of " +
                      std::to_string(n));
}

LabeledDataset attacker_subset(const LabeledDataset& test, std::size_t n, std::uint64_t seed,
                               bool class_balanced) {
  const auto idx = attacker_indices(test, n, seed, class_balanced);
  return test.subset(idx, Split::attacker);
}

AttackerSplit split_attacker(const LabeledDataset& test, std::size_t n, std::uint64_t seed,
                             bool class_balanced) {
  const auto idx = attacker_indices(test, n, seed, class_balanced);
  std::vector<bool> taken(test.size(), false);
  for (std::size_t i : idx) taken[i] = true;
  std::vector<std::size_t> rest;
  rest.reserve(test.size() - idx.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (!taken[i]) rest.push_back(i);
  }
  return {test.subset(idx, Split::attacker), test.subset(rest, Split::held_out)};
}

}  // namespace bnnkh
