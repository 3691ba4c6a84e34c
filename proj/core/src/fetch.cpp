#include <curl/curl.h>
#include <zlib.h>

#include <fstream>
#include <memory>
#include <mutex>
#include <optional>

#include "bnnkh/dataset.hpp"
#include "bnnkh/error.hpp"

namespace bnnkh {
namespace {

struct ExpectedFile {
  std::string_view name;
  bool images;
  std::size_t count;
};

constexpr ExpectedFile kMnistFiles[] = {
    {MnistFiles::train_images, true, 60000},
    {MnistFiles::train_labels, false, 60000},
    {MnistFiles::test_images, true, 10000},
    {MnistFiles::test_labels, false, 10000},
};

// Throws FormatError when the bytes are not the expected MNIST member.
void validate_member(const ExpectedFile& file, std::span<const std::uint8_t> bytes) {
  std::size_t count = 0;
  if (file.images) {
    const auto images = parse_idx_images(bytes);
    if (images.rows != 28 || images.cols != 28) {
      throw FormatError("expected 28x28 images, found " + std::to_string(images.rows) + "x" +
                        std::to_string(images.cols));
    }
    count = images.count;
  } else {
    count = parse_idx_labels(bytes).size();
  }
  if (count != file.count) {
    throw FormatError("expected " + std::to_string(file.count) + " items, found " +
                      std::to_string(count));
  }
}

bool cached_member_valid(const ExpectedFile& file, const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) return false;
  try {
    validate_member(file, read_file_bytes(path));
    return true;
  } catch (const Error&) {
    return false;
  }
}

std::size_t append_body(char* data, std::size_t size, std::size_t nmemb, void* user) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(user);
  out->insert(out->end(), data, data + size * nmemb);
  return size * nmemb;
}

void global_curl_init() {
  static std::once_flag once;
  std::call_once(once, [] { curl_global_init(CURL_GLOBAL_DEFAULT); });
}

// nullopt on a transfer failure or non-2xx status; message in `error`.
std::optional<std::vector<std::uint8_t>> download(const std::string& url, std::string& error) {
  global_curl_init();
  std::unique_ptr<CURL, decltype(&curl_easy_cleanup)> curl(curl_easy_init(), &curl_easy_cleanup);
  if (!curl) {
    error = "curl_easy_init failed";
    return std::nullopt;
  }
  std::vector<std::uint8_t> body;
  curl_easy_setopt(curl.get(), CURLOPT_URL, url.c_str());
  curl_easy_setopt(curl.get(), CURLOPT_FOLLOWLOCATION, 1L);
  curl_easy_setopt(curl.get(), CURLOPT_FAILONERROR, 1L);
  curl_easy_setopt(curl.get(), CURLOPT_CONNECTTIMEOUT, 30L);
  curl_easy_setopt(curl.get(), CURLOPT_WRITEFUNCTION, &append_body);
  curl_easy_setopt(curl.get(), CURLOPT_WRITEDATA, &body);
  const CURLcode rc = curl_easy_perform(curl.get());
  if (rc != CURLE_OK) {
    error = url + ": " + curl_easy_strerror(rc);
    return std::nullopt;
  }
  return body;
}

bool looks_gzipped(std::span<const std::uint8_t> bytes) {
  return bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b;
}

void write_atomically(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  auto tmp = path;
  tmp += ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace

std::vector<std::uint8_t> gunzip(std::span<const std::uint8_t> compressed) {
  z_stream zs{};
  // 32 + MAX_WBITS: auto-detect gzip or zlib framing.
  if (inflateInit2(&zs, 32 + MAX_WBITS) != Z_OK) throw IntegrityError("inflateInit2 failed");
  std::vector<std::uint8_t> out;
  std::uint8_t chunk[1 << 16];
  zs.next_in = const_cast<Bytef*>(compressed.data());
  zs.avail_in = static_cast<uInt>(compressed.size());
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    zs.next_out = chunk;
    zs.avail_out = sizeof(chunk);
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw IntegrityError(rc == Z_BUF_ERROR ? "compressed stream truncated"
                                             : "corrupt compressed stream");
    }
    out.insert(out.end(), chunk, chunk + (sizeof(chunk) - zs.avail_out));
  }
  inflateEnd(&zs);
  return out;
}

FetchResult fetch_dataset(std::string_view source_url, const std::filesystem::path& cache_dir) {
  std::filesystem::create_directories(cache_dir);
  std::string base(source_url);
  if (!base.empty() && base.back() != '/') base.push_back('/');

  FetchResult result;
  for (const auto& file : kMnistFiles) {
    const auto target = cache_dir / file.name;
    result.files.push_back(target);
    if (cached_member_valid(file, target)) continue;

    std::string error;
    auto body = download(base + std::string(file.name) + ".gz", error);
    if (!body) {
      std::string raw_error;
      body = download(base + std::string(file.name), raw_error);
      if (!body) throw Error("download of " + std::string(file.name) + " failed: " + error);
    }

    std::vector<std::uint8_t> bytes;
    try {
      bytes = looks_gzipped(*body) ? gunzip(*body) : std::move(*body);
      validate_member(file, bytes);
    } catch (const Error& e) {
      throw IntegrityError(std::string(file.name) + ": " + e.what());
    }
    write_atomically(target, bytes);
    result.downloaded.emplace_back(file.name);
  }
  return result;
}

}  // namespace bnnkh
