#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "csrpipe/core.hpp"
#include "csrpipe/gateway.hpp"
#include "csrpipe/serialization.hpp"
#include "csrpipe/util.hpp"

namespace testing {

inline std::filesystem::path fixtures() { return CSRPIPE_FIXTURES; }

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("csrpipe-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
  std::filesystem::path path_;
};

inline void append_utf8(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out += static_cast<char>(cp);
  } else if (cp < 0x800) {
    out += static_cast<char>(0xC0 | (cp >> 6));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else if (cp < 0x10000) {
    out += static_cast<char>(0xE0 | (cp >> 12));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else {
    out += static_cast<char>(0xF0 | (cp >> 18));
    out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  }
}

/// Random unicode text drawn from ASCII (incl. '<', '>', '/'), Latin-1,
/// CJK and emoji ranges. Returns the text and its scalar count.
inline std::pair<std::string, std::size_t> random_unicode(std::mt19937_64& rng,
                                                          std::size_t max_len) {
  std::uniform_int_distribution<std::size_t> len_d(0, max_len);
  std::uniform_int_distribution<int> pool_d(0, 9);
  const auto n = len_d(rng);
  std::string out;
  for (std::size_t i = 0; i < n; ++i) {
    const int pool = pool_d(rng);
    char32_t cp;
    if (pool < 5) {
      cp = std::uniform_int_distribution<char32_t>(0x20, 0x7E)(rng);
    } else if (pool < 6) {
      cp = std::uniform_int_distribution<char32_t>(0xA0, 0xFF)(rng);
    } else if (pool < 8) {
      cp = std::uniform_int_distribution<char32_t>(0x4E00, 0x9FFF)(rng);
    } else if (pool < 9) {
      cp = std::uniform_int_distribution<char32_t>(0x1F600, 0x1F64F)(rng);
    } else {
      static constexpr char32_t ws[] = {U' ', U'\n', U'\t'};
      cp = ws[std::uniform_int_distribution<int>(0, 2)(rng)];
    }
    append_utf8(out, cp);
  }
  return {out, n};
}

/// Random pair without tag literals and with a non-empty answer.
inline csrpipe::CandidatePair random_pair(std::mt19937_64& rng) {
  while (true) {
    auto cot = random_unicode(rng, 40).first;
    auto answer = random_unicode(rng, 40).first;
    if (answer.empty() || csrpipe::contains_tag_literal(cot) ||
        csrpipe::contains_tag_literal(answer)) {
      continue;
    }
    return {cot, answer, csrpipe::CotMode::PreCot, csrpipe::Origin::External};
  }
}

inline csrpipe::DialogueContext make_dialogue(const std::string& id = "d1",
                                              bool with_csr = true) {
  csrpipe::DialogueContext d;
  d.dialogue_id = id;
  d.history.push_back({csrpipe::Role::User, "Hi, my order is late.", 0});
  d.history.push_back({with_csr ? csrpipe::Role::HumanCsr : csrpipe::Role::Assistant,
                       "Sorry to hear that, let me check.", 1});
  d.query = "When will it arrive?";
  d.snippets.push_back({"kb-1", "Standard delivery takes 3-5 working days."});
  d.reference_response = "It should arrive within 3-5 working days.";
  csrpipe::validate(d);
  return d;
}

inline csrpipe::EndpointProfile stub_profile(const std::string& name, int max_parallel = 4) {
  csrpipe::EndpointProfile p;
  p.name = name;
  p.kind = csrpipe::BackendKind::Stub;
  p.stub = name;
  p.max_parallel = max_parallel;
  return p;
}

}  // namespace testing
