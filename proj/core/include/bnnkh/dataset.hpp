#pragma once

// MNIST ingestion: IDX parsing/serialization, cached download, attacker subsets.
//
// IDX layout (all integers big-endian):
//   images: u32 magic 2051, u32 count, u32 rows, u32 cols, count*rows*cols bytes
//   labels: u32 magic 2049, u32 count, count bytes

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace bnnkh {

inline constexpr std::uint32_t kIdxImageMagic = 2051;
inline constexpr std::uint32_t kIdxLabelMagic = 2049;
inline constexpr std::size_t kClassCount = 10;

enum class Split { train, test, attacker, held_out };

std::string_view split_name(Split split) noexcept;

struct ImageArray {
  std::size_t count = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> pixels;  // count * rows * cols, row-major per image
};

/// Images with labels. Immutable after construction by convention; safe to
/// share read-only across threads.
struct LabeledDataset {
  Split split = Split::test;
  std::size_t rows = 28;
  std::size_t cols = 28;
  std::vector<std::uint8_t> pixels;
  std::vector<std::uint8_t> labels;

  std::size_t size() const noexcept { return labels.size(); }
  bool empty() const noexcept { return labels.empty(); }
  std::size_t image_size() const noexcept { return rows * cols; }
  std::span<const std::uint8_t> image(std::size_t i) const {
    return {pixels.data() + i * image_size(), image_size()};
  }

  LabeledDataset subset(std::span<const std::size_t> indices, Split tag) const;
  /// Checks count agreement and label range; throws InvariantError.
  void validate() const;
};

ImageArray parse_idx_images(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> parse_idx_labels(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> serialize_idx_images(const ImageArray& images);
std::vector<std::uint8_t> serialize_idx_labels(std::span<const std::uint8_t> labels);

LabeledDataset make_dataset(ImageArray images, std::vector<std::uint8_t> labels, Split split);

/// File names of the canonical distribution, without the .gz suffix.
struct MnistFiles {
  static constexpr std::string_view train_images = "train-images-idx3-ubyte";
  static constexpr std::string_view train_labels = "train-labels-idx1-ubyte";
  static constexpr std::string_view test_images = "t10k-images-idx3-ubyte";
  static constexpr std::string_view test_labels = "t10k-labels-idx1-ubyte";
};

/// Loads the train or test split from decompressed IDX files in `dir`.
LabeledDataset load_mnist(const std::filesystem::path& dir, Split split);

bool mnist_cached(const std::filesystem::path& dir);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);

inline constexpr std::string_view kDefaultMnistMirror =
    "https://ossci-datasets.s3.amazonaws.com/mnist/";

struct FetchResult {
  std::vector<std::filesystem::path> files;
  std::vector<std::string> downloaded;  // names fetched over the network; empty on a full cache hit
};

/// Ensures the four MNIST files exist in `cache_dir`, downloading
/// `<source_url>/<name>.gz` (falling back to the uncompressed name) for any
/// missing or invalid file. Any URL scheme libcurl supports works, including
/// file://. Throws IntegrityError naming the offending file on corrupt data.
FetchResult fetch_dataset(std::string_view source_url, const std::filesystem::path& cache_dir);

/// Gzip/zlib decompression of a complete stream; throws IntegrityError.
std::vector<std::uint8_t> gunzip(std::span<const std::uint8_t> compressed);

/// Seeded shuffle of [0, test.size()), first `n` taken. With `class_balanced`,
/// the shuffled order is filtered so each class gets n/10 samples (the first
/// n%10 classes one extra).
std::vector<std::size_t> attacker_indices(const LabeledDataset& test, std::size_t n,
                                          std::uint64_t seed, bool class_balanced = false);

LabeledDataset attacker_subset(const LabeledDataset& test, std::size_t n, std::uint64_t seed,
                               bool class_balanced = false);

struct AttackerSplit {
  LabeledDataset attacker;
  LabeledDataset held_out;  // test samples not granted to the attacker
};

AttackerSplit split_attacker(const LabeledDataset& test, std::size_t n, std::uint64_t seed,
                             bool class_balanced = false);

}  // namespace bnnkh
