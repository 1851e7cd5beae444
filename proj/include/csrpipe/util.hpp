#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace csrpipe {

using json = nlohmann::json;

/// 64-bit FNV-1a. Used for request fingerprints and config hashes, so the
/// value must never change between releases.
std::uint64_t fnv1a64(std::string_view data);
std::string hex64(std::uint64_t value);

/// Seed for record `index` derived from a run seed with splitmix64, so
/// per-record randomness does not depend on scheduling.
std::uint64_t derive_seed(std::uint64_t run_seed, std::uint64_t index);

/// Seeded generator with a portable uniform draw (std distributions are
/// implementation-defined, which would break the determinism contract).
class Rng {
public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  bool bernoulli(double p) { return uniform01() < p; }
  std::uint64_t next() { return engine_(); }

private:
  std::mt19937_64 engine_;
};

std::vector<json> read_jsonl(const std::filesystem::path& path);

/// Append-only JSON Lines sink. Writes are serialized and flushed per line.
class JsonlWriter {
public:
  explicit JsonlWriter(const std::filesystem::path& path, bool append = false);

  void write(const json& record);
  std::size_t count() const { return count_; }
  const std::filesystem::path& path() const { return path_; }

private:
  std::filesystem::path path_;
  std::ofstream out_;
  std::mutex mutex_;
  std::size_t count_ = 0;
};

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view content);

std::string trim(std::string_view text);
std::string ascii_lower(std::string_view text);

}  // namespace csrpipe
