#pragma once

// Caption embeddings psi(t): provider interface, the built-in hashing
// fallback, an external precomputed-vector provider, interpolation, and a
// persistent cache.
//
// Cache / external vector file (little-endian):
//   "T2IE" | u32 dim | repeated { u64 key | dim x f32 }
// where key = FNV-1a-64 of the normalised caption.

#include <fcntl.h>
#include <unistd.h>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "t2i2t/data.hpp"

namespace t2i2t {

using TextEmbedding = std::vector<float>;

struct ProviderUnavailable : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CacheFormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t basis = 0xcbf29ce484222325ULL) {
  std::uint64_t h = basis;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t caption_key(const std::string& caption) { return fnv1a64(normalize_caption(caption)); }

class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual std::string name() const = 0;
  virtual std::size_t dim() const = 0;
  virtual TextEmbedding embed(const std::string& caption) const = 0;
};

// Bag of hashed tokens: each token adds +1 to one of `dim` buckets chosen by a
// seeded hash, then the vector is L2-normalised. Empty captions give zeros.
class HashingEmbeddingProvider final : public EmbeddingProvider {
 public:
  explicit HashingEmbeddingProvider(std::size_t dim = 2400, std::uint64_t seed = 0x5EED) : dim_(dim), seed_(seed) {
    if (dim == 0) throw std::invalid_argument("embedding dim must be positive");
  }

  std::string name() const override { return "fallback"; }
  std::size_t dim() const override { return dim_; }

  TextEmbedding embed(const std::string& caption) const override {
    std::vector<double> acc(dim_, 0.0);
    for (const auto& tok : split_caption(caption)) acc[splitmix64(fnv1a64(tok) ^ seed_) % dim_] += 1.0;
    double norm = 0;
    for (double v : acc) norm += v * v;
    TextEmbedding out(dim_, 0.0f);
    if (norm == 0) return out;
    norm = std::sqrt(norm);
    for (std::size_t i = 0; i < dim_; ++i) out[i] = static_cast<float>(acc[i] / norm);
    return out;
  }

 private:
  std::size_t dim_;
  std::uint64_t seed_;
};

namespace detail {

template <class V>
void put_le(std::string& buf, V v) {
  for (std::size_t i = 0; i < sizeof(V); ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f32(std::string& buf, float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  put_le(buf, u);
}

template <class V>
V get_le(const std::string& buf, std::size_t& off) {
  if (off + sizeof(V) > buf.size())
    throw CacheFormatError("truncated at byte offset " + std::to_string(off) + " (file size " +
                           std::to_string(buf.size()) + ")");
  V v = 0;
  for (std::size_t i = 0; i < sizeof(V); ++i)
    v |= static_cast<V>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
  off += sizeof(V);
  return v;
}

inline float get_f32(const std::string& buf, std::size_t& off) {
  const auto u = get_le<std::uint32_t>(buf, off);
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Parses a T2IE vector file; throws CacheFormatError with byte offsets.
inline std::unordered_map<std::uint64_t, TextEmbedding> parse_vector_file(const std::string& buf,
                                                                        std::uint32_t& dim) {
  if (buf.size() < 8 || buf.compare(0, 4, "T2IE") != 0)
    throw CacheFormatError("bad magic at byte offset 0 (expected \"T2IE\")");
  std::size_t off = 4;
  dim = get_le<std::uint32_t>(buf, off);
  if (dim == 0) throw CacheFormatError("zero dimension at byte offset 4");
  const std::size_t rec = 8 + 4 * std::size_t(dim);
  if ((buf.size() - off) % rec != 0)
    throw CacheFormatError("trailing partial record at byte offset " +
                           std::to_string(off + (buf.size() - off) / rec * rec));
  std::unordered_map<std::uint64_t, TextEmbedding> out;
  while (off < buf.size()) {
    const auto key = get_le<std::uint64_t>(buf, off);
    TextEmbedding v(dim);
    for (auto& x : v) x = get_f32(buf, off);
    out[key] = std::move(v);
  }
  return out;
}

}  // namespace detail

// Vectors produced offline by an external model (e.g. a sentence encoder),
// stored in the T2IE format. Missing file or caption is an error, never a
// silent fallback.
class ExternalEmbeddingProvider final : public EmbeddingProvider {
 public:
  explicit ExternalEmbeddingProvider(const std::filesystem::path& vectors) : path_(vectors) {
    if (!std::filesystem::exists(vectors))
      throw ProviderUnavailable("embedding provider 'external' unavailable: no vector file at " + vectors.string());
    table_ = detail::parse_vector_file(detail::slurp(vectors), dim_);
  }

  std::string name() const override { return "external"; }
  std::size_t dim() const override { return dim_; }

  TextEmbedding embed(const std::string& caption) const override {
    auto it = table_.find(caption_key(caption));
    if (it == table_.end())
      throw ProviderUnavailable("embedding provider 'external' has no vector for caption \"" + caption + "\"");
    return it->second;
  }

 private:
  std::filesystem::path path_;
  std::uint32_t dim_ = 0;
  std::unordered_map<std::uint64_t, TextEmbedding> table_;
};

// beta * e1 + (1 - beta) * e2.
template <class V>
std::vector<V> interpolate(const std::vector<V>& e1, const std::vector<V>& e2, V beta) {
  if (e1.size() != e2.size())
    throw std::invalid_argument("interpolate: dimension mismatch " + std::to_string(e1.size()) + " vs " +
                                std::to_string(e2.size()));
  if (!(beta >= V(0) && beta <= V(1))) throw std::invalid_argument("interpolate: beta must lie in [0,1]");
  std::vector<V> out(e1.size());
  for (std::size_t i = 0; i < e1.size(); ++i) out[i] = beta * e1[i] + (V(1) - beta) * e2[i];
  return out;
}

// Persistent caption -> vector memo. Concurrent readers, single writer.
class EmbeddingCache {
 public:
  EmbeddingCache(std::filesystem::path path, std::size_t dim) : path_(std::move(path)), dim_(dim) {
    if (std::filesystem::exists(path_)) {
      std::uint32_t file_dim = 0;
      entries_ = detail::parse_vector_file(detail::slurp(path_), file_dim);
      if (file_dim != dim_)
        throw CacheFormatError("cache " + path_.string() + " has dim " + std::to_string(file_dim) +
                               " but " + std::to_string(dim_) + " was requested");
    }
  }
  ~EmbeddingCache() {
    try {
      flush();
    } catch (...) {
    }
  }
  EmbeddingCache(const EmbeddingCache&) = delete;
  EmbeddingCache& operator=(const EmbeddingCache&) = delete;

  std::size_t dim() const { return dim_; }
  std::size_t size() const {
    std::shared_lock lock(mu_);
    return entries_.size();
  }
  const std::filesystem::path& path() const { return path_; }

  std::optional<TextEmbedding> find(const std::string& caption) const {
    std::shared_lock lock(mu_);
    auto it = entries_.find(caption_key(caption));
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }

  TextEmbedding get_or_compute(const EmbeddingProvider& provider, const std::string& caption) {
    if (provider.dim() != dim_)
      throw std::invalid_argument("embedding cache dim " + std::to_string(dim_) + " does not match provider '" +
                                  provider.name() + "' dim " + std::to_string(provider.dim()));
    if (auto hit = find(caption)) return *hit;
    auto v = provider.embed(caption);
    std::unique_lock lock(mu_);
    entries_.emplace(caption_key(caption), v);
    dirty_ = true;
    return v;
  }

  // Rewrites the whole file (sorted by key) and fsyncs it.
  void flush() {
    std::unique_lock lock(mu_);
    if (!dirty_) return;
    std::vector<std::uint64_t> keys;
    for (const auto& [k, v] : entries_) keys.push_back(k);
    std::sort(keys.begin(), keys.end());
    std::string buf = "T2IE";
    detail::put_le(buf, static_cast<std::uint32_t>(dim_));
    for (auto k : keys) {
      detail::put_le(buf, k);
      for (float f : entries_.at(k)) detail::put_f32(buf, f);
    }
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
    const int fd = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    if (fd < 0) throw std::runtime_error("cannot write embedding cache " + path_.string());
    std::size_t done = 0;
    while (done < buf.size()) {
      const auto n = ::write(fd, buf.data() + done, buf.size() - done);
      if (n <= 0) {
        ::close(fd);
        throw std::runtime_error("short write to " + path_.string());
      }
      done += static_cast<std::size_t>(n);
    }
    ::fsync(fd);
    ::close(fd);
    dirty_ = false;
  }

 private:
  std::filesystem::path path_;
  std::size_t dim_;
  mutable std::shared_mutex mu_;
  std::unordered_map<std::uint64_t, TextEmbedding> entries_;
  bool dirty_ = false;
};

}  // namespace t2i2t
