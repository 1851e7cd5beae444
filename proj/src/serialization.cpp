#include "csrpipe/serialization.hpp"

#include <algorithm>
#include <array>
#include <cctype>

#include "csrpipe/errors.hpp"

namespace csrpipe {

namespace {

constexpr std::array<std::string_view, 4> kTags = {kThinkOpen, kThinkClose, kAnswerOpen,
                                                   kAnswerClose};

struct TagHit {
  std::size_t pos;
  std::string_view tag;
};

bool is_blank(std::string_view text) {
  return std::all_of(text.begin(), text.end(),
                     [](unsigned char c) { return std::isspace(c) != 0; });
}

std::vector<TagHit> find_tags(std::string_view text) {
  std::vector<TagHit> hits;
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] != '<') continue;
    for (auto tag : kTags) {
      if (text.substr(i, tag.size()) == tag) {
        hits.push_back({i, tag});
        break;
      }
    }
  }
  return hits;
}

}  // namespace

bool contains_tag_literal(std::string_view text) {
  return std::any_of(kTags.begin(), kTags.end(), [&](std::string_view tag) {
    return text.find(tag) != std::string_view::npos;
  });
}

std::string serialize_candidate(const CandidatePair& pair, CotMode mode) {
  if (mode == CotMode::HybridCot) {
    throw InvalidInput("a serialized record is either pre_cot or post_cot");
  }
  if (pair.answer.empty()) throw InvalidInput("candidate answer is empty");
  if (contains_tag_literal(pair.cot) || contains_tag_literal(pair.answer)) {
    throw InvalidInput("candidate payload contains a tag literal");
  }
  std::string think = std::string(kThinkOpen) + pair.cot + std::string(kThinkClose);
  std::string answer = std::string(kAnswerOpen) + pair.answer + std::string(kAnswerClose);
  return mode == CotMode::PreCot ? think + answer : answer + think;
}

CandidatePair parse_candidate(std::string_view text, CotMode mode) {
  if (mode == CotMode::HybridCot) {
    throw InvalidInput("parse_candidate needs pre_cot or post_cot");
  }
  const auto hits = find_tags(text);
  const std::array<std::string_view, 4> expected =
      mode == CotMode::PreCot
          ? std::array<std::string_view, 4>{kThinkOpen, kThinkClose, kAnswerOpen, kAnswerClose}
          : std::array<std::string_view, 4>{kAnswerOpen, kAnswerClose, kThinkOpen, kThinkClose};
  if (hits.size() != expected.size()) {
    throw MalformedStructure("expected exactly one think and one answer segment, found " +
                             std::to_string(hits.size()) + " tags");
  }
  for (std::size_t i = 0; i < hits.size(); ++i) {
    if (hits[i].tag != expected[i]) {
      throw MalformedStructure("tag '" + std::string(hits[i].tag) + "' out of order");
    }
  }

  auto between = [&](std::size_t open) {
    std::size_t begin = hits[open].pos + hits[open].tag.size();
    return text.substr(begin, hits[open + 1].pos - begin);
  };
  auto end_of = [&](std::size_t i) { return hits[i].pos + hits[i].tag.size(); };

  if (!is_blank(text.substr(0, hits[0].pos)) ||
      !is_blank(text.substr(end_of(1), hits[2].pos - end_of(1))) ||
      !is_blank(text.substr(end_of(3)))) {
    throw MalformedStructure("stray text outside think/answer segments");
  }

  CandidatePair pair;
  pair.mode = mode;
  pair.origin = Origin::External;
  if (mode == CotMode::PreCot) {
    pair.cot = std::string(between(0));
    pair.answer = std::string(between(2));
  } else {
    pair.answer = std::string(between(0));
    pair.cot = std::string(between(2));
  }
  if (pair.answer.empty()) throw MalformedStructure("answer segment is empty");
  return pair;
}

}  // namespace csrpipe
