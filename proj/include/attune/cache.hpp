#pragma once

#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "attune/error.hpp"
#include "attune/hash.hpp"
#include "attune/trainer.hpp"

namespace attune {

/// Content-addressed store for trained models. Each entry is its payload
/// followed by the payload's SHA-256 in hex; entries that fail verification
/// are reported and treated as misses so the caller recomputes and rewrites.
class RetrainCache {
 public:
  static constexpr std::size_t kDigestLength = 64;

  /// Disabled cache: every lookup misses and nothing is written.
  RetrainCache() = default;
  explicit RetrainCache(std::filesystem::path dir) : dir_(std::move(dir)) {}

  /// $ATTUNE_CACHE_DIR, else ./.attune-cache.
  static std::filesystem::path default_dir() {
    if (const char* env = std::getenv("ATTUNE_CACHE_DIR"); env && *env) return env;
    return ".attune-cache";
  }

  bool enabled() const noexcept { return dir_.has_value(); }
  const std::optional<std::filesystem::path>& dir() const noexcept { return dir_; }

  std::filesystem::path entry_path(const std::string& key) const {
    require(enabled(), ErrorKind::Cache, "cache is disabled");
    return *dir_ / key.substr(0, 2) / (key + ".bin");
  }

  std::optional<std::string> get(const std::string& key) {
    if (!enabled()) return std::nullopt;
    const auto path = entry_path(key);
    std::ifstream is(path, std::ios::binary);
    if (!is) {
      ++misses_;
      return std::nullopt;
    }
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (bytes.size() < kDigestLength ||
        sha256_hex(std::string_view(bytes).substr(0, bytes.size() - kDigestLength)) !=
            std::string_view(bytes).substr(bytes.size() - kDigestLength)) {
      ++corrupt_;
      ++misses_;
      std::cerr << Error(ErrorKind::Cache, "entry " + path.string() + " failed hash verification; recomputing").what()
                << '\n';
      return std::nullopt;
    }
    bytes.resize(bytes.size() - kDigestLength);
    ++hits_;
    return bytes;
  }

  /// Writes to a unique temporary name, then renames into place.
  void put(const std::string& key, const std::string& payload) {
    if (!enabled()) return;
    const auto path = entry_path(key);
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    require(!ec, ErrorKind::Cache, "cannot create cache directory " + path.parent_path().string());
    const auto tmp = path.parent_path() / (key + ".tmp." + std::to_string(::getpid()) + "." +
                                           std::to_string(tmp_counter_.fetch_add(1)));
    {
      std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
      require(os.good(), ErrorKind::Cache, "cannot write cache entry " + tmp.string());
      os << payload << sha256_hex(payload);
      require(os.good(), ErrorKind::Cache, "short write to cache entry " + tmp.string());
    }
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
      std::filesystem::remove(tmp, ec);
      fail(ErrorKind::Cache, "cannot publish cache entry " + path.string());
    }
    ++writes_;
  }

  std::uint64_t hits() const noexcept { return hits_; }
  std::uint64_t misses() const noexcept { return misses_; }
  std::uint64_t corrupt() const noexcept { return corrupt_; }
  std::uint64_t writes() const noexcept { return writes_; }

 private:
  std::optional<std::filesystem::path> dir_;
  std::atomic<std::uint64_t> hits_{0};
  std::atomic<std::uint64_t> misses_{0};
  std::atomic<std::uint64_t> corrupt_{0};
  std::atomic<std::uint64_t> writes_{0};
  std::atomic<std::uint64_t> tmp_counter_{0};
};

inline std::string encode_checkpoints(const std::vector<Checkpoint>& cs) {
  std::ostringstream os;
  const auto count = static_cast<std::uint64_t>(cs.size());
  os.write(reinterpret_cast<const char*>(&count), sizeof count);
  for (const auto& c : cs) write_checkpoint(os, c);
  return os.str();
}

inline std::vector<Checkpoint> decode_checkpoints(const std::string& bytes) {
  std::istringstream is(bytes);
  const auto count = detail::read_pod<std::uint64_t>(is, "checkpoint bundle");
  require(count < (1u << 20), ErrorKind::Cache, "implausible checkpoint bundle size");
  std::vector<Checkpoint> out;
  out.reserve(count);
  for (std::uint64_t k = 0; k < count; ++k) out.push_back(read_checkpoint(is));
  return out;
}

}  // namespace attune
