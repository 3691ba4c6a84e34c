// "BNNM" model file, all integers little-endian:
//   "BNNM" u32 version=1 u32 layer_count
//   per layer: u32 in_dim u32 out_dim u8 has_bn u8 binarized_output u16 reserved=0
//              out_dim * ceil(in_dim/64) u64 weight words
//              [has_bn] f32 gamma[out] beta[out] mean[out] var[out], f32 epsilon
//   u32 provenance_length, UTF-8 provenance bytes

#include <bit>
#include <cstring>
#include <fstream>

#include "bnnkh/bnn.hpp"
#include "bnnkh/error.hpp"

namespace bnnkh {
namespace {

constexpr char kMagic[4] = {'B', 'N', 'N', 'M'};

class Writer {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    out_.insert(out_.end(), p, p + n);
  }
  template <typename T>
  void le(T value) {
    using U = std::make_unsigned_t<T>;
    auto v = static_cast<U>(value);
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      out_.push_back(static_cast<std::uint8_t>(v & 0xFF));
      v = static_cast<U>(v >> 8);
    }
  }
  void f32(float value) { le(std::bit_cast<std::uint32_t>(value)); }
  void f32s(const std::vector<float>& values) {
    for (float v : values) f32(v);
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(std::string("model file truncated while reading ") + what + " at offset " +
                        std::to_string(pos_));
    }
    auto view = bytes_.subspan(pos_, n);
    pos_ += n;
    return view;
  }
  template <typename T>
  T le(const char* what) {
    const auto view = take(sizeof(T), what);
    std::make_unsigned_t<T> v = 0;
    for (std::size_t i = sizeof(T); i-- > 0;) v = static_cast<decltype(v)>((v << 8) | view[i]);
    return static_cast<T>(v);
  }
  float f32(const char* what) { return std::bit_cast<float>(le<std::uint32_t>(what)); }
  std::vector<float> f32s(std::size_t n, const char* what) {
    std::vector<float> out(n);
    for (auto& v : out) v = f32(what);
    return out;
  }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_model(const BnnModel& model) {
  model.validate();
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.le<std::uint32_t>(kModelFileVersion);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(model.layers.size()));
  for (const auto& layer : model.layers) {
    w.le<std::uint32_t>(static_cast<std::uint32_t>(layer.in_dim()));
    w.le<std::uint32_t>(static_cast<std::uint32_t>(layer.out_dim()));
    w.le<std::uint8_t>(layer.bn ? 1 : 0);
    w.le<std::uint8_t>(layer.binarized_output ? 1 : 0);
    w.le<std::uint16_t>(0);
    for (std::uint64_t word : layer.weights.words()) w.le(word);
    if (layer.bn) {
      w.f32s(layer.bn->gamma);
      w.f32s(layer.bn->beta);
      w.f32s(layer.bn->mean);
      w.f32s(layer.bn->variance);
      w.f32(layer.bn->epsilon);
    }
  }
  w.le<std::uint32_t>(static_cast<std::uint32_t>(model.provenance.size()));
  w.bytes(model.provenance.data(), model.provenance.size());
  return w.take();
}

BnnModel deserialize_model(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const auto magic = r.take(4, "magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw FormatError("not a BNNM model file (bad magic)");
  const auto version = r.le<std::uint32_t>("version");
  if (version != kModelFileVersion) {
    throw FormatError("unsupported model file version " + std::to_string(version));
  }
  const auto layer_count = r.le<std::uint32_t>("layer count");
  BnnModel model;
  for (std::uint32_t l = 0; l < layer_count; ++l) {
    const auto in_dim = r.le<std::uint32_t>("in_dim");
    const auto out_dim = r.le<std::uint32_t>("out_dim");
    const auto has_bn = r.le<std::uint8_t>("has_bn");
    const auto binarized = r.le<std::uint8_t>("binarized_output");
    const auto reserved = r.le<std::uint16_t>("reserved");
    if (has_bn > 1 || binarized > 1 || reserved != 0) {
      throw FormatError("layer " + std::to_string(l) + ": malformed layer header flags");
    }
    const std::size_t words = std::size_t{out_dim} * words_for_bits(in_dim);
    if (words > r.remaining() / 8) {
      throw FormatError("model file truncated in layer " + std::to_string(l) + " weights");
    }
    BnnLayer layer;
    layer.weights = PackedBitMatrix(in_dim, out_dim);
    for (auto& word : layer.weights.words()) word = r.le<std::uint64_t>("weights");
    layer.binarized_output = binarized == 1;
    if (has_bn) {
      if (std::size_t{out_dim} * 16 > r.remaining()) {
        throw FormatError("model file truncated in layer " + std::to_string(l) + " batch norm");
      }
      BatchNormParams bn;
      bn.gamma = r.f32s(out_dim, "gamma");
      bn.beta = r.f32s(out_dim, "beta");
      bn.mean = r.f32s(out_dim, "mean");
      bn.variance = r.f32s(out_dim, "variance");
      bn.epsilon = r.f32("epsilon");
      layer.bn = std::move(bn);
    }
    model.layers.push_back(std::move(layer));
  }
  const auto text_len = r.le<std::uint32_t>("provenance length");
  const auto text = r.take(text_len, "provenance");
  model.provenance.assign(reinterpret_cast<const char*>(text.data()), text.size());
  if (r.remaining() != 0) {
    throw FormatError("model file has " + std::to_string(r.remaining()) + " trailing bytes");
  }
  model.validate();
  return model;
}

void save_model(const BnnModel& model, const std::filesystem::path& path) {
  const auto bytes = serialize_model(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("cannot write " + path.string());
}

BnnModel load_model(const std::filesystem::path& path) {
  try {
    return deserialize_model(read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const InvariantError& e) {
    throw InvariantError(path.string() + ": " + e.what());
  }
}

}  // namespace bnnkh
